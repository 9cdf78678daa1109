//! The `sobolev` command line: argument parsing, run directories and manifests.
//!
//! Every subcommand is driven by a flat set of keys (see [`config`]). A key
//! can come from its default, from `--config FILE`, or from the matching
//! `--flag`, in increasing order of precedence.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgMatches, Command};

pub use crate::config::Settings;
pub use crate::error::CliError;
use crate::config::{flag_name, parse_config_text, to_config_text};
use crate::manifest::{RunManifest, TOOL_VERSION};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SOBOLEV_OUT_DIR";
/// Resolved configuration written next to every manifest.
pub const CONFIG_FILE: &str = "config.txt";

/// A parsed command line, before anything is written.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub subcommand: String,
    pub settings: Settings,
    pub config_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: usize,
}

fn common_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("out").long("out").value_name("DIR").help(format!("Output directory (default ${OUT_DIR_ENV})")))
        .arg(Arg::new("workers").long("workers").value_name("N").help("Parallel runs (default: CPU count)"))
}

fn cli() -> Command {
    let mut root = Command::new("sobolev")
        .version(TOOL_VERSION)
        .about("Regular versus Sobolev training experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in commands::SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("Flat key = value configuration file"));
        for k in commands::keys(name) {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(flag_name(k.name))
                    .value_name("VALUE")
                    .allow_hyphen_values(true)
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        root = root.subcommand(common_args(sub));
    }
    root.subcommand(common_args(
        Command::new("replay")
            .about("Re-run the configuration recorded in a manifest")
            .arg(Arg::new("manifest").required(true).value_name("MANIFEST")),
    ))
}

fn workers_from(m: &ArgMatches) -> Result<usize, CliError> {
    match m.get_one::<String>("workers") {
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        Some(w) => match w.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("workers: expected a positive integer, got `{w}`"))),
        },
    }
}

/// Parses `argv` (including the program name) into an [`Invocation`].
///
/// Help and version requests surface as `Err(Ok(text))`.
pub fn parse_cli<I, T>(argv: I) -> Result<Invocation, Result<String, CliError>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Ok(e.to_string()),
        _ => Err(CliError::Usage(e.to_string())),
    })?;
    parse_matches(&matches).map_err(Err)
}

fn parse_matches(matches: &ArgMatches) -> Result<Invocation, CliError> {
    let (name, m) = matches.subcommand().expect("a subcommand is required");
    let out = m.get_one::<String>("out").map(PathBuf::from);
    let workers = workers_from(m)?;
    if name == "replay" {
        let path = PathBuf::from(m.get_one::<String>("manifest").expect("required"));
        let manifest = RunManifest::load(&path)?;
        if manifest.tool_version != TOOL_VERSION {
            eprintln!("warning: manifest was written by version {}, this is {TOOL_VERSION}", manifest.tool_version);
        }
        let keys = commands::keys(&manifest.subcommand);
        if keys.is_empty() {
            return Err(CliError::Usage(format!("manifest names unknown subcommand `{}`", manifest.subcommand)));
        }
        let settings = Settings::resolve(keys, &manifest.config, &BTreeMap::new())?;
        return Ok(Invocation { subcommand: manifest.subcommand, settings, config_path: Some(path), out, workers });
    }
    let config_path = m.get_one::<String>("config").map(PathBuf::from);
    let file = match &config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    let keys = commands::keys(name);
    let flags = keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_owned(), v.clone())))
        .collect();
    let settings = Settings::resolve(keys, &file, &flags)?;
    Ok(Invocation { subcommand: name.to_owned(), settings, config_path, out, workers })
}

fn output_dir(inv: &Invocation) -> PathBuf {
    inv.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", inv.subcommand, manifest::now_ms())))
}

/// Validates, prepares the output directory, runs, and finalizes the manifest.
pub fn execute(inv: &Invocation) -> Result<RunManifest, CliError> {
    let plan = commands::plan(&inv.subcommand, &inv.settings)?;
    let dir = output_dir(inv);
    sobolev_core::persist::ensure_writable(&dir)?;
    let mut manifest = RunManifest::new(
        &inv.subcommand,
        inv.config_path.clone(),
        plan.master_seed(),
        dir.clone(),
        inv.settings.values().clone(),
    );
    manifest.write()?;
    std::fs::write(dir.join(CONFIG_FILE), to_config_text(inv.settings.values()))?;
    manifest.outputs.push(CONFIG_FILE.into());

    let result = commands::run(plan, &dir, inv.workers, &mut manifest.outputs);
    let code = match &result {
        Ok(()) => error::EXIT_OK,
        Err(e) => e.exit_code(),
    };
    manifest.finish(code)?;
    result.map(|()| manifest)
}

/// Entry point shared by the binary and the tests; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match parse_cli(argv) {
        Ok(inv) => inv,
        Err(Ok(text)) => {
            print!("{text}");
            return error::EXIT_OK;
        }
        Err(Err(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(&inv) {
        Ok(m) => {
            println!("wrote {}", m.path().display());
            error::EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
