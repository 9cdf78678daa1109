//! Flat `key = value` configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! ```
//!
//! Keys are lowercase identifiers (`[a-z0-9_]+`). Values run to the end of
//! the line with surrounding whitespace removed; list values are
//! comma-separated. Blank lines and lines starting with `#` are ignored.
//! A key may appear once per file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::CliError;

/// One configurable key of a subcommand.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Command-line spelling of a key: `batch_size` becomes `--batch-size`.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !valid_key(k) {
            return Err(CliError::Usage(format!("config line {}: invalid key `{k}`", i + 1)));
        }
        if out.insert(k.to_owned(), v.trim().to_owned()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Renders settings in the grammar accepted by [`parse_config_text`].
pub fn to_config_text(values: &BTreeMap<String, String>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Fully resolved values: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        keys: &[Key],
        file: &BTreeMap<String, String>,
        flags: &BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        for k in file.keys().chain(flags.keys()) {
            if !keys.iter().any(|key| key.name == k) {
                return Err(CliError::Usage(format!("unknown key `{k}`")));
            }
        }
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|k| (k.name.to_owned(), k.default.to_owned())).collect();
        values.extend(file.iter().map(|(k, v)| (k.clone(), v.clone())));
        values.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(Settings { values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key `{key}` is not declared"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        parse_value(key, self.raw(key))
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(vec![]);
        }
        raw.split(',').map(|item| parse_value(key, item.trim())).collect()
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(CliError::Usage(format!("{key}: expected true or false, got `{other}`"))),
        }
    }
}

fn parse_value<T>(key: &str, raw: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse().map_err(|e| CliError::Usage(format!("{key}: invalid value `{raw}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[key("n", "100", ""), key("mode", "regular,sobolev", ""), key("lr", "3e-5", "")];

    #[test]
    fn grammar() {
        let m = parse_config_text("# c\n\n n = 20 \nmode=sobolev\n").unwrap();
        assert_eq!(m["n"], "20");
        assert_eq!(m["mode"], "sobolev");
        assert!(parse_config_text("n 20").is_err());
        assert!(parse_config_text("N = 20").is_err());
        assert!(parse_config_text("n = 1\nn = 2").is_err());
    }

    #[test]
    fn precedence_and_unknown_keys() {
        let file = parse_config_text("n = 20\nlr = 1e-3").unwrap();
        let flags = BTreeMap::from([("n".to_owned(), "7".to_owned())]);
        let s = Settings::resolve(KEYS, &file, &flags).unwrap();
        assert_eq!(s.get::<usize>("n").unwrap(), 7);
        assert_eq!(s.get::<f64>("lr").unwrap(), 1e-3);
        assert_eq!(s.list::<String>("mode").unwrap(), vec!["regular", "sobolev"]);
        let bad = parse_config_text("width = 3").unwrap();
        assert!(Settings::resolve(KEYS, &bad, &BTreeMap::new()).is_err());
    }

    #[test]
    fn rendering_round_trips() {
        let s = Settings::resolve(KEYS, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let back = parse_config_text(&to_config_text(s.values())).unwrap();
        assert_eq!(&back, s.values());
    }

    #[test]
    fn negative_counts_fail_validation() {
        let flags = BTreeMap::from([("n".to_owned(), "-5".to_owned())]);
        let s = Settings::resolve(KEYS, &BTreeMap::new(), &flags).unwrap();
        assert!(matches!(s.get::<usize>("n"), Err(CliError::Usage(_))));
    }
}
