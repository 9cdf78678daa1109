//! Subcommand keys, planning (parse + validate) and execution.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sobolev_autodiff::{Tape, Tensor};
use sobolev_core::benchmarks::Benchmark;
use sobolev_core::distill::{run_distillation, DistillConfig, DistillRecord};
use sobolev_core::gradcheck::{check_grad, CaseReport, CheckOptions, Target};
use sobolev_core::nn::OptimizerConfig;
use sobolev_core::persist::{persist_results, GradCheckRow, Record, ResultSink};
use sobolev_core::regression::{
    dump_surface, median, run_parallel, train_regression, Mode, RegressionConfig, ResultRecord, SurfaceRow, SweepSpec,
};
use sobolev_core::seeds;
use sobolev_core::sobolev::{discrepancy, LossKind};
use sobolev_core::syngrad::{mean_std, run_sg_experiment, MixtureSpec, Scheme, SgRecord, SgTrainConfig};
use sobolev_core::witness::{
    approximate_c1_by_pwl, build_interpolant_1d, pwl_to_relu_net, recover_gaussian, GaussianParams, InterpolantSpec,
};
use sobolev_core::Error as CoreError;

use crate::config::{key, Key, Settings};
use crate::error::CliError;

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("regress", "Regular versus Sobolev regression on the benchmark functions"),
    ("distill", "Policy distillation from a synthetic teacher"),
    ("sg", "Decoupled training with synthetic gradients"),
    ("witness", "Explicit zero-loss and identification constructions"),
    ("check-grad", "Finite-difference verification of analytic gradients"),
];

const REGRESS: &[Key] = &[
    key("function", "all", "Benchmark functions, comma-separated, or `all`"),
    key("n", "20,100,10000", "Training set sizes"),
    key("mode", "regular,sobolev", "Loss modes"),
    key("seed", "0", "Seeds; each run derives its data and init seeds from one"),
    key("steps", "50000", "Optimizer steps per run"),
    key("optimizer", "adam", "adam or sgd_momentum"),
    key("lr", "3e-5", "Learning rate"),
    key("decay_every", "0", "Multiply the learning rate by decay_factor every this many steps (0 disables)"),
    key("decay_factor", "1", "Step-decay multiplier"),
    key("hidden", "256,256", "Hidden layer widths"),
    key("activation", "relu", "Hidden activation"),
    key("batch_size", "100", "Minibatch size (full batch when n is not larger)"),
    key("test_size", "10000", "Held-out points"),
    key("standardize", "false", "Fit standardized targets and gradients"),
    key("surface", "0", "Lattice side for surface dumps (0 disables)"),
];

const DISTILL: &[Key] = &[
    key("mode", "regular,sobolev", "Loss modes"),
    key("seed", "0", "Seeds"),
    key("data_fraction", "1", "Shares of the training pool, comma-separated"),
    key("alpha", "1", "Weight of the projected Jacobian term"),
    key("norm", "l2", "Jacobian mismatch norm, l1 or l2"),
    key("projections", "1", "Random projections per state"),
    key("steps", "20000", "Optimizer steps"),
    key("lr", "1e-4", "Adam learning rate"),
    key("batch_size", "200", "Minibatch size"),
    key("state_dim", "16", "State dimension"),
    key("actions", "6", "Number of actions"),
    key("teacher_hidden", "64,64", "Teacher hidden widths"),
    key("temperature", "0.5", "Teacher softmax temperature"),
    key("student_hidden", "32,32", "Student hidden widths"),
    key("train_pool", "5000", "States the training share is drawn from"),
    key("test_size", "2000", "Held-out states"),
];

const SG: &[Key] = &[
    key("variant", "backprop,noprop,direct_sg,critic,sobolev", "Training schemes"),
    key("seed", "0", "Seeds"),
    key("splits", "1,2,3", "Layers after which the network is cut"),
    key("steps", "3000", "Training steps"),
    key("main_lr", "1e-3", "Adam learning rate of the network"),
    key("sg_lr", "1e-4", "Adam learning rate of the modules"),
    key("batch_size", "128", "Minibatch size"),
    key("hidden", "64,64,64", "Network hidden widths"),
    key("module_hidden", "64,64", "Module hidden widths"),
    key("classes", "8", "Classes of the mixture task"),
    key("dim", "20", "Feature dimension"),
    key("clusters", "4", "Clusters per class"),
    key("center_scale", "1", "Spread of cluster centres"),
    key("noise", "0.6", "Spread of points around their centre"),
    key("train_size", "4000", "Training examples"),
    key("test_size", "2000", "Test examples"),
    key("data_seed", "0", "Seed of the dataset, shared by all runs"),
];

const WITNESS: &[Key] = &[
    key("seed", "0", "Seed for the random cases"),
    key("points", "5", "Interpolation points"),
    key("half_width", "0.1", "Bump half-width of the interpolant"),
    key("epsilon", "0.1", "Tolerance of the piecewise-linear approximation of sin"),
    key("grid", "10000", "Dense grid size for comparisons"),
    key("gaussian_cases", "1000", "Random Gaussian round trips"),
];

const CHECK_GRAD: &[Key] = &[
    key("target", "all", "benchmarks, mlp, sobolev-loss, distill-loss, sg-loss, or all"),
    key("points", "1000", "Random inputs per function and input-gradient case"),
    key("coordinates", "50", "Parameter coordinates per parameter-gradient case"),
    key("repeats", "5", "Networks per parameter-gradient case"),
    key("activation", "tanh", "Hidden activation of the network cases"),
    key("seed", "0", "Seed"),
    key("inject_fault", "false", "Corrupt analytic gradients (the check must then fail)"),
];

pub fn keys(subcommand: &str) -> &'static [Key] {
    match subcommand {
        "regress" => REGRESS,
        "distill" => DISTILL,
        "sg" => SG,
        "witness" => WITNESS,
        "check-grad" => CHECK_GRAD,
        _ => &[],
    }
}

/// A validated run, ready to execute.
#[derive(Clone, Debug)]
pub enum Plan {
    Regress { configs: Vec<RegressionConfig>, surface: usize },
    Distill(Vec<(DistillConfig, Mode)>),
    Sg(Vec<SgTrainConfig>),
    Witness(WitnessPlan),
    CheckGrad { targets: Vec<Target>, options: CheckOptions },
}

#[derive(Clone, Debug)]
pub struct WitnessPlan {
    pub seed: u64,
    pub points: usize,
    pub half_width: f64,
    pub epsilon: f64,
    pub grid: usize,
    pub gaussian_cases: usize,
}

impl Plan {
    pub fn master_seed(&self) -> u64 {
        match self {
            Plan::Regress { configs, .. } => configs.first().map_or(0, |c| c.seed),
            Plan::Distill(jobs) => jobs.first().map_or(0, |j| j.0.seed),
            Plan::Sg(jobs) => jobs.first().map_or(0, |c| c.seed),
            Plan::Witness(w) => w.seed,
            Plan::CheckGrad { options, .. } => options.seed,
        }
    }
}

fn nonempty<T>(key: &str, v: Vec<T>) -> Result<Vec<T>, CliError> {
    if v.is_empty() {
        return Err(CliError::Usage(format!("{key}: needs at least one value")));
    }
    Ok(v)
}

fn positive(s: &Settings, key: &str) -> Result<usize, CliError> {
    match s.get::<usize>(key)? {
        0 => Err(CliError::Usage(format!("{key}: must be positive"))),
        v => Ok(v),
    }
}

pub fn plan(subcommand: &str, s: &Settings) -> Result<Plan, CliError> {
    match subcommand {
        "regress" => plan_regress(s),
        "distill" => plan_distill(s),
        "sg" => plan_sg(s),
        "witness" => Ok(Plan::Witness(WitnessPlan {
            seed: s.get("seed")?,
            points: positive(s, "points")?,
            half_width: s.get("half_width")?,
            epsilon: s.get("epsilon")?,
            grid: positive(s, "grid")?.max(2),
            gaussian_cases: s.get("gaussian_cases")?,
        })),
        "check-grad" => {
            let raw: Vec<String> = nonempty("target", s.list("target")?)?;
            let targets = if raw == ["all"] {
                Target::ALL.to_vec()
            } else {
                raw.iter().map(|t| t.parse()).collect::<Result<_, _>>()?
            };
            let options = CheckOptions {
                points: s.get("points")?,
                coordinates: s.get("coordinates")?,
                repeats: s.get("repeats")?,
                activation: s.get("activation")?,
                seed: s.get("seed")?,
                inject_fault: s.flag("inject_fault")?,
            };
            options.validate()?;
            Ok(Plan::CheckGrad { targets, options })
        }
        other => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn plan_regress(s: &Settings) -> Result<Plan, CliError> {
    let functions: Vec<String> = nonempty("function", s.list("function")?)?;
    let functions = if functions == ["all"] {
        Benchmark::ALL.to_vec()
    } else {
        functions.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
    };
    let mut base = RegressionConfig::new(Benchmark::Booth, 1, Mode::Regular, 0);
    base.steps = s.get("steps")?;
    base.optimizer = OptimizerConfig {
        kind: s.get("optimizer")?,
        learning_rate: s.get("lr")?,
        decay_every: s.get("decay_every")?,
        decay_factor: s.get("decay_factor")?,
    };
    base.hidden = s.list("hidden")?;
    base.activation = s.get("activation")?;
    base.batch_size = s.get("batch_size")?;
    base.test_size = s.get("test_size")?;
    base.standardize_targets = s.flag("standardize")?;
    let sweep = SweepSpec {
        functions,
        sizes: nonempty("n", s.list("n")?)?,
        modes: nonempty("mode", s.list("mode")?)?,
        seeds: nonempty("seed", s.list("seed")?)?,
        base,
    };
    Ok(Plan::Regress { configs: sweep.configs()?, surface: s.get("surface")? })
}

fn plan_distill(s: &Settings) -> Result<Plan, CliError> {
    let base = DistillConfig {
        state_dim: s.get("state_dim")?,
        actions: s.get("actions")?,
        teacher_hidden: s.list("teacher_hidden")?,
        teacher_temperature: s.get("temperature")?,
        student_hidden: s.list("student_hidden")?,
        alpha: s.get("alpha")?,
        norm: s.get("norm")?,
        data_fraction: 1.0,
        train_pool: s.get("train_pool")?,
        test_size: s.get("test_size")?,
        num_projections: s.get("projections")?,
        batch_size: s.get("batch_size")?,
        learning_rate: s.get("lr")?,
        steps: s.get("steps")?,
        seed: 0,
    };
    let mut jobs = Vec::new();
    for fraction in nonempty("data_fraction", s.list::<f64>("data_fraction")?)? {
        for mode in nonempty("mode", s.list::<Mode>("mode")?)? {
            for &seed in &nonempty("seed", s.list::<u64>("seed")?)? {
                let c = DistillConfig { data_fraction: fraction, seed, ..base.clone() };
                c.validate()?;
                jobs.push((c, mode));
            }
        }
    }
    Ok(Plan::Distill(jobs))
}

fn plan_sg(s: &Settings) -> Result<Plan, CliError> {
    let data = MixtureSpec {
        classes: s.get("classes")?,
        dim: s.get("dim")?,
        clusters_per_class: s.get("clusters")?,
        center_scale: s.get("center_scale")?,
        noise: s.get("noise")?,
        train_size: s.get("train_size")?,
        test_size: s.get("test_size")?,
        seed: s.get("data_seed")?,
    };
    let base = SgTrainConfig {
        data,
        hidden: s.list("hidden")?,
        splits: s.list("splits")?,
        scheme: Scheme::Backprop,
        module_hidden: s.list("module_hidden")?,
        main_learning_rate: s.get("main_lr")?,
        sg_learning_rate: s.get("sg_lr")?,
        batch_size: s.get("batch_size")?,
        steps: s.get("steps")?,
        seed: 0,
    };
    let mut jobs = Vec::new();
    for scheme in nonempty("variant", s.list::<Scheme>("variant")?)? {
        for &seed in &nonempty("seed", s.list::<u64>("seed")?)? {
            let c = SgTrainConfig { scheme, seed, ..base.clone() };
            c.validate()?;
            jobs.push(c);
        }
    }
    Ok(Plan::Sg(jobs))
}

pub fn run(plan: Plan, dir: &Path, workers: usize, outputs: &mut Vec<String>) -> Result<(), CliError> {
    match plan {
        Plan::Regress { configs, surface } => run_regress(&configs, surface, dir, workers, outputs),
        Plan::Distill(jobs) => run_distill(&jobs, dir, workers, outputs),
        Plan::Sg(jobs) => run_sg(&jobs, dir, workers, outputs),
        Plan::Witness(w) => run_witness(&w, dir, outputs),
        Plan::CheckGrad { targets, options } => run_check_grad(&targets, &options, dir, outputs),
    }
}

fn is_numerical(e: &CoreError) -> bool {
    matches!(e, CoreError::Diverged { .. } | CoreError::Autodiff(_))
}

type Surface = (String, Vec<SurfaceRow>);

/// Runs jobs in parallel, streaming records to `results.{csv,jsonl}` and failures to `failures.jsonl`.
fn run_jobs<J, R>(
    jobs: &[J],
    workers: usize,
    dir: &Path,
    outputs: &mut Vec<String>,
    describe: impl Fn(&J) -> serde_json::Value + Sync,
    run: impl Fn(&J) -> Result<(R, Option<Surface>), CoreError> + Sync,
    report: impl Fn(&R) -> String,
) -> Result<Vec<R>, CliError>
where
    J: Sync,
    R: Record + Clone + Send,
{
    let mut sink = ResultSink::open::<R>(dir, "results")?;
    outputs.extend(["results.csv".to_owned(), "results.jsonl".to_owned()]);
    let mut failures: Option<File> = None;
    let mut first_io: Option<CliError> = None;
    let (mut failed, mut numerical) = (0, false);
    let total = jobs.len();

    let done = run_parallel(
        jobs,
        workers,
        |j| run(j).map_err(|e| (is_numerical(&e), e.to_string())),
        |i, outcome| {
            let written: Result<(), CliError> = (|| {
                match outcome {
                    Ok((record, surface)) => {
                        sink.append(record)?;
                        println!("[{}/{total}] {}", i + 1, report(record));
                        if let Some((stem, rows)) = surface {
                            persist_results(rows, dir, stem)?;
                            outputs.extend([format!("{stem}.csv"), format!("{stem}.jsonl")]);
                        }
                    }
                    Err((num, message)) => {
                        failed += 1;
                        numerical |= *num;
                        let mut row = describe(&jobs[i]);
                        row["error"] = json!(message);
                        row["numerical"] = json!(num);
                        eprintln!("[{}/{total}] failed: {row}", i + 1);
                        if failures.is_none() {
                            let path = dir.join("failures.jsonl");
                            failures = Some(OpenOptions::new().create(true).append(true).open(path)?);
                            outputs.push("failures.jsonl".into());
                        }
                        let f = failures.as_mut().expect("opened above");
                        writeln!(f, "{row}")?;
                        f.flush()?;
                    }
                }
                Ok(())
            })();
            if let (Err(e), None) = (written, &first_io) {
                first_io = Some(e);
            }
        },
    );
    if let Some(e) = first_io {
        return Err(e);
    }
    if failed > 0 {
        return Err(CliError::RunsFailed { failed, total, numerical });
    }
    Ok(done.into_iter().filter_map(|r| r.ok().map(|(rec, _)| rec)).collect())
}

fn run_regress(
    configs: &[RegressionConfig],
    surface: usize,
    dir: &Path,
    workers: usize,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    let records = run_jobs(
        configs,
        workers,
        dir,
        outputs,
        |c| json!({"function": c.function.as_str(), "mode": c.mode, "n": c.train_size, "seed": c.seed}),
        |c| {
            let trained = train_regression(&c.function, c)?;
            let dump = if surface > 0 {
                let stem = format!("surface_{}_{}_n{}_seed{}", c.function, c.mode, c.train_size, c.seed);
                Some((stem, dump_surface(&trained.model, &c.function, surface, surface)?))
            } else {
                None
            };
            Ok((trained.record, dump))
        },
        |r: &ResultRecord| {
            format!(
                "{} {} n={} seed={} test_mse={:.4e} train_mse={:.4e} test_grad_mse={:.4e} ({} ms)",
                r.function, r.mode, r.n, r.seed, r.test_mse, r.train_mse, r.test_grad_mse, r.wall_ms
            )
        },
    )?;
    let mut groups: BTreeMap<(String, usize, Mode), Vec<f64>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.function.clone(), r.n, r.mode)).or_default().push(r.test_mse);
    }
    println!("median test MSE over seeds:");
    for ((f, n, mode), v) in &groups {
        println!("  {f:<16} n={n:<6} {mode:<8} {:.4e}  ({} seeds)", median(v), v.len());
    }
    Ok(())
}

fn run_distill(
    jobs: &[(DistillConfig, Mode)],
    dir: &Path,
    workers: usize,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    let records = run_jobs(
        jobs,
        workers,
        dir,
        outputs,
        |(c, mode)| json!({"mode": mode, "seed": c.seed, "data_fraction": c.data_fraction}),
        |(c, mode)| Ok((run_distillation(c, *mode)?, None)),
        |r: &DistillRecord| {
            format!(
                "{} fraction={} seed={} kl_test={:.4e} top1_err={:.4} ({} ms)",
                r.mode, r.data_fraction, r.seed, r.kl_test, r.top1_err, r.wall_ms
            )
        },
    )?;
    let mut groups: BTreeMap<(u64, Mode), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &records {
        let g = groups.entry((r.data_fraction.to_bits(), r.mode)).or_default();
        g.0.push(r.kl_test);
        g.1.push(r.top1_err);
    }
    println!("medians over seeds:");
    for ((fraction, mode), (kl, top1)) in &groups {
        println!(
            "  fraction={:<5} {mode:<8} kl_test={:.4e} top1_err={:.4}",
            f64::from_bits(*fraction),
            median(kl),
            median(top1)
        );
    }
    Ok(())
}

fn run_sg(jobs: &[SgTrainConfig], dir: &Path, workers: usize, outputs: &mut Vec<String>) -> Result<(), CliError> {
    let records = run_jobs(
        jobs,
        workers,
        dir,
        outputs,
        |c| json!({"variant": c.scheme.to_string(), "seed": c.seed}),
        |c| Ok((run_sg_experiment(c)?, None)),
        |r: &SgRecord| format!("{} seed={} test_acc={:.4} ({} ms)", r.variant, r.seed, r.test_acc, r.wall_ms),
    )?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &records {
        if !groups.contains_key(&r.variant) {
            order.push(r.variant.clone());
        }
        groups.entry(r.variant.clone()).or_default().push(r.test_acc);
    }
    println!("test accuracy over seeds:");
    for v in &order {
        let (mean, sd) = mean_std(&groups[v]);
        println!("  {v:<10} mean={:.2}% sd={:.2}", 100.0 * mean, 100.0 * sd);
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct WitnessRow {
    check: String,
    value: f64,
    tolerance: f64,
    passed: bool,
}

impl Record for WitnessRow {
    const HEADER: &'static [&'static str] = &["check", "value", "tolerance", "passed"];
}

#[derive(Clone, Debug, Serialize)]
struct InterpolantGridRow {
    x: f64,
    h: f64,
    dh: f64,
    relu_net: f64,
}

impl Record for InterpolantGridRow {
    const HEADER: &'static [&'static str] = &["x", "h", "dh", "relu_net"];
}

#[derive(Clone, Debug, Serialize)]
struct ApproximationGridRow {
    x: f64,
    f: f64,
    df: f64,
    p: f64,
    dp: f64,
}

impl Record for ApproximationGridRow {
    const HEADER: &'static [&'static str] = &["x", "f", "df", "p", "dp"];
}

fn grid(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

/// Spread-out random points: consecutive gaps exceed four bump half-widths.
fn witness_spec(w: &WitnessPlan) -> InterpolantSpec {
    let mut rng = seeds::child_rng(w.seed, "witness-points", 0);
    let gap = 4.0 * w.half_width;
    let mut points = Vec::with_capacity(w.points);
    let mut x = 0.0;
    for _ in 0..w.points {
        x += gap * rng.random_range(1.25..3.0);
        points.push(x);
    }
    let values = (0..w.points).map(|_| rng.random_range(-2.0..2.0)).collect();
    let derivatives = (0..w.points).map(|_| rng.random_range(-3.0..3.0)).collect();
    InterpolantSpec { points, values, derivatives, half_width: w.half_width }
}

fn run_witness(w: &WitnessPlan, dir: &Path, outputs: &mut Vec<String>) -> Result<(), CliError> {
    const VALUE_TOL: f64 = 1e-12;
    const DERIV_TOL: f64 = 1e-6;
    const NET_TOL: f64 = 1e-10;
    const GAUSS_TOL: f64 = 1e-8;
    const FD_STEP: f64 = 1e-6;
    let mut rows = Vec::new();
    let mut push = |check: &str, value: f64, tolerance: f64, passed: bool| {
        println!("{check:<28} {value:.3e}  (tolerance {tolerance:e})  {}", if passed { "ok" } else { "VIOLATED" });
        rows.push(WitnessRow { check: check.into(), value, tolerance, passed });
    };

    let spec = witness_spec(w);
    let h = build_interpolant_1d(&spec)?;
    let value_err = spec.points.iter().zip(&spec.values).map(|(&s, &f)| (h.eval(s) - f).abs()).fold(0.0, f64::max);
    let deriv_err = spec
        .points
        .iter()
        .zip(&spec.derivatives)
        .map(|(&s, &g)| ((h.eval(s + FD_STEP) - h.eval(s - FD_STEP)) / (2.0 * FD_STEP) - g).abs())
        .fold(0.0, f64::max);
    push("interpolant_value_error", value_err, VALUE_TOL, value_err <= VALUE_TOL);
    push("interpolant_fd_deriv_error", deriv_err, DERIV_TOL, deriv_err <= DERIV_TOL);

    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::column(&spec.points.iter().map(|&s| h.eval(s)).collect::<Vec<_>>()));
    let hd = tape.leaf(Tensor::column(&spec.points.iter().map(|&s| h.derivative(s)).collect::<Vec<_>>()));
    let f = tape.leaf(Tensor::column(&spec.values));
    let g = tape.leaf(Tensor::column(&spec.derivatives));
    let value_term = discrepancy(&mut tape, LossKind::L2, hv, f)?;
    let deriv_term = discrepancy(&mut tape, LossKind::L2, hd, g)?;
    let total = tape.add(value_term, deriv_term).map_err(CoreError::from)?;
    let loss = tape.scalar_value(total).map_err(CoreError::from)?;
    push("interpolant_sobolev_loss", loss, 0.0, loss == 0.0);

    let net = pwl_to_relu_net(&h)?;
    let (lo, hi) = (h.knots()[0] - 1.0, h.knots()[h.knots().len() - 1] + 1.0);
    let xs: Vec<f64> = grid(lo, hi, w.grid).collect();
    let net_values = net.predict(&Tensor::column(&xs))?.into_data();
    let grid_rows: Vec<InterpolantGridRow> = xs
        .iter()
        .zip(&net_values)
        .map(|(&x, &relu_net)| InterpolantGridRow { x, h: h.eval(x), dh: h.derivative(x), relu_net })
        .collect();
    let net_err = grid_rows.iter().map(|r| (r.h - r.relu_net).abs()).fold(0.0, f64::max);
    push("relu_net_grid_error", net_err, NET_TOL, net_err <= NET_TOL);
    persist_results(&grid_rows, dir, "interpolant_grid")?;

    let two_pi = 2.0 * std::f64::consts::PI;
    let p = approximate_c1_by_pwl(f64::sin, f64::cos, (0.0, two_pi), w.epsilon)?;
    let approx_rows: Vec<ApproximationGridRow> = grid(0.0, two_pi, w.grid)
        .map(|x| ApproximationGridRow { x, f: x.sin(), df: x.cos(), p: p.eval(x), dp: p.derivative(x) })
        .collect();
    let v_err = approx_rows.iter().map(|r| (r.f - r.p).abs()).fold(0.0, f64::max);
    // The slope is undefined at knots, so those grid points only enter the value bound.
    let d_err = approx_rows
        .iter()
        .filter(|r| p.knots().binary_search_by(|k| k.total_cmp(&r.x)).is_err())
        .map(|r| (r.df - r.dp).abs())
        .fold(0.0, f64::max);
    push("sin_pwl_value_error", v_err, w.epsilon, v_err <= w.epsilon);
    push("sin_pwl_deriv_error", d_err, w.epsilon, d_err <= w.epsilon);
    println!("sin approximation uses {} knots", p.knots().len());
    persist_results(&approx_rows, dir, "approximation_grid")?;

    if w.gaussian_cases > 0 {
        let mut rng = seeds::child_rng(w.seed, "witness-gaussians", 0);
        let mut worst = 0.0f64;
        for _ in 0..w.gaussian_cases {
            let mean = rng.random_range(-3.0..3.0);
            let variance = rng.random_range(0.25..4.0);
            let sd = f64::sqrt(variance);
            let x = rng.random_range(mean - 3.0 * sd..mean + 3.0 * sd);
            let truth = GaussianParams { mean, variance };
            let got = recover_gaussian(x, truth.density(x), truth.density_derivative(x))?;
            worst = worst.max((got.mean - mean).abs()).max((got.variance - variance).abs());
        }
        push("gaussian_parameter_error", worst, GAUSS_TOL, worst < GAUSS_TOL);
    }

    persist_results(&rows, dir, "witness")?;
    for stem in ["witness", "interpolant_grid", "approximation_grid"] {
        outputs.extend([format!("{stem}.csv"), format!("{stem}.jsonl")]);
    }
    match rows.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Violation(n)),
    }
}

fn run_check_grad(
    targets: &[Target],
    options: &CheckOptions,
    dir: &Path,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    let mut sink = ResultSink::open::<GradCheckRow>(dir, "check_grad")?;
    outputs.extend(["check_grad.csv".to_owned(), "check_grad.jsonl".to_owned()]);
    let mut violations: Vec<CaseReport> = Vec::new();
    for &t in targets {
        let report = check_grad(t, options)?;
        for case in &report.cases {
            println!(
                "{:<40} max rel error {:.3e}  (tolerance {:e})  {}",
                format!("{}/{}", case.target, case.case),
                case.max_rel_error,
                case.tolerance,
                if case.passed() { "ok" } else { "VIOLATED" }
            );
            sink.append(&GradCheckRow::from(case))?;
        }
        violations.extend(report.failures().cloned());
    }
    if violations.is_empty() {
        return Ok(());
    }
    for v in &violations {
        eprintln!("violation: {}", serde_json::to_string(v)?);
    }
    std::fs::write(dir.join("violations.json"), serde_json::to_string_pretty(&violations)? + "\n")?;
    outputs.push("violations.json".into());
    Err(CliError::Violation(violations.len()))
}
