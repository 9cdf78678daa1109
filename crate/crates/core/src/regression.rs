//! Regular versus Sobolev regression on the benchmark functions.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{AutodiffError, Tape, Tensor};

use crate::benchmarks::{Benchmark, Objective};
use crate::error::{Error, Result};
use crate::nn::{Activation, Head, Mlp, MlpSpec, OptimizerConfig, OptimizerState};
use crate::seeds;
use crate::sobolev::{sobolev_loss, LossKind, LossSpec, SobolevBatch};

/// Number of held-out points every run is scored on.
pub const TEST_SET_SIZE: usize = 10_000;

const EVAL_CHUNK: usize = 2_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regular,
    Sobolev,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Regular, Mode::Sobolev];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Regular => "regular",
            Mode::Sobolev => "sobolev",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Mode::Regular),
            "sobolev" => Ok(Mode::Sobolev),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub function: Benchmark,
    pub train_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub test_size: usize,
    /// Fit standardized targets `(f − μ)/s` and gradients `∇f/s`; metrics stay in raw units.
    pub standardize_targets: bool,
    /// Record the training loss every this many steps (0 disables the log).
    pub log_every: usize,
}

impl RegressionConfig {
    pub fn new(function: Benchmark, train_size: usize, mode: Mode, seed: u64) -> Self {
        RegressionConfig {
            function,
            train_size,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            mode,
            optimizer: OptimizerConfig::adam(3e-5),
            steps: 50_000,
            seed,
            batch_size: 100,
            test_size: TEST_SET_SIZE,
            standardize_targets: false,
            log_every: 1_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::Config("train size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.network_spec().validate()
    }

    pub fn network_spec(&self) -> MlpSpec {
        let mut sizes = vec![2];
        sizes.extend(&self.hidden);
        sizes.push(1);
        MlpSpec::new(sizes, self.activation, Head::Linear)
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.mode {
            Mode::Regular => LossSpec::value_only(LossKind::L2),
            Mode::Sobolev => LossSpec::first_order(LossKind::L2, LossKind::L2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

/// Metrics of one finished run.
///
/// `test_grad_mse` is the mean over test points of `‖∇f − ∇m‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub function: String,
    pub mode: Mode,
    pub n: usize,
    pub seed: u64,
    pub steps: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_grad_mse: f64,
    pub wall_ms: u64,
    #[serde(skip)]
    pub initial_test_mse: f64,
    #[serde(skip)]
    pub step_log: Vec<StepLog>,
}

impl ResultRecord {
    pub const HEADER: [&'static str; 9] =
        ["function", "mode", "n", "seed", "steps", "train_mse", "test_mse", "test_grad_mse", "wall_ms"];
}

/// Labelled points drawn from an objective.
#[derive(Clone, Debug)]
pub struct LabelledSet {
    pub points: Tensor,
    pub values: Tensor,
    pub grads: Tensor,
}

impl LabelledSet {
    pub fn sample(objective: &dyn Objective, n: usize, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed);
        let pts = objective.sample_domain(n, &mut rng);
        let mut points = Vec::with_capacity(2 * n);
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(2 * n);
        for p in pts {
            points.extend(p);
            values.push(objective.eval(p)?);
            grads.extend(objective.grad(p)?);
        }
        Ok(LabelledSet {
            points: Tensor::new(n, 2, points)?,
            values: Tensor::new(n, 1, values)?,
            grads: Tensor::new(n, 2, grads)?,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Affine map `f ↦ (f − shift)/scale` applied to values, and `∇f ↦ ∇f/scale` to gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
struct TargetMap {
    shift: f64,
    scale: f64,
}

impl TargetMap {
    const IDENTITY: TargetMap = TargetMap { shift: 0.0, scale: 1.0 };

    fn fit(values: &Tensor) -> Self {
        let n = values.len() as f64;
        let mean = values.data().iter().sum::<f64>() / n;
        let var = values.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        TargetMap { shift: mean, scale }
    }
}

/// Mean squared value error and mean squared gradient-norm error of `mlp` on a set.
pub fn evaluate(mlp: &Mlp, set: &LabelledSet) -> Result<(f64, f64)> {
    evaluate_mapped(mlp, set, TargetMap::IDENTITY)
}

fn evaluate_mapped(mlp: &Mlp, set: &LabelledSet, map: TargetMap) -> Result<(f64, f64)> {
    let n = set.len();
    let (mut value_se, mut grad_se) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = Tensor::new(end - start, 2, set.points.data()[2 * start..2 * end].to_vec())?;
        let (m, g) = mlp.predict_with_input_grad(&x)?;
        for i in 0..end - start {
            let mv = map.shift + map.scale * m.data()[i];
            value_se += (mv - set.values.data()[start + i]).powi(2);
            for j in 0..2 {
                let gm = map.scale * g.data()[2 * i + j];
                grad_se += (gm - set.grads.data()[2 * (start + i) + j]).powi(2);
            }
        }
        start = end;
    }
    Ok((value_se / n as f64, grad_se / n as f64))
}

/// A trained model together with its metrics.
#[derive(Clone, Debug)]
pub struct TrainedRegression {
    pub record: ResultRecord,
    pub model: Mlp,
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(AutodiffError::NonFinite { op }) => {
            Error::Diverged { step, reason: format!("{op} produced a non-finite value") }
        }
        other => other,
    }
}

/// Trains on `objective` according to `config`, returning the model and its record.
pub fn train_regression(objective: &dyn Objective, config: &RegressionConfig) -> Result<TrainedRegression> {
    config.validate()?;
    let started = Instant::now();
    let train = LabelledSet::sample(objective, config.train_size, seeds::derive_seed(config.seed, "train-data", 0))?;
    let test = LabelledSet::sample(objective, config.test_size, seeds::derive_seed(config.seed, "test-data", 0))?;
    let map = if config.standardize_targets { TargetMap::fit(&train.values) } else { TargetMap::IDENTITY };

    let fitted_values = train.values.map(|v| (v - map.shift) / map.scale);
    let fitted_grads = train.grads.map(|g| g / map.scale);
    let full = SobolevBatch::new(train.points.clone(), fitted_values)?.with_grads(vec![fitted_grads])?;

    let mut mlp = Mlp::init(config.network_spec(), seeds::derive_seed(config.seed, "init", 0))?;
    let initial_test_mse = evaluate_mapped(&mlp, &test, map)?.0;
    let mut opt = OptimizerState::new(config.optimizer);
    let spec = config.loss_spec();

    let mut tape = Tape::new();
    let bound = mlp.bind(&mut tape);
    let mark = tape.checkpoint();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_rng = seeds::rng(seeds::derive_seed(config.seed, "batches", 0));
    let minibatch = train.len() > config.batch_size;
    let mut cursor = train.len();
    let mut step_log = Vec::new();

    for step in 0..config.steps {
        tape.rollback(mark);
        bound.refresh(&mut tape, &mlp)?;
        let loss = if minibatch {
            if cursor + config.batch_size > order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let b = full.select(&order[cursor..cursor + config.batch_size])?;
            cursor += config.batch_size;
            sobolev_loss(&mut tape, &bound, &b, &spec)
        } else {
            sobolev_loss(&mut tape, &bound, &full, &spec)
        }
        .map_err(diverged(step))?;
        let grads = tape.grad(loss.total, bound.params()).map_err(|e| diverged(step)(e.into()))?;
        let grads: Vec<Tensor> = grads
            .iter()
            .map(|g| tape.value(*g).cloned())
            .collect::<std::result::Result<_, _>>()?;
        if config.log_every > 0 && step % config.log_every == 0 {
            step_log.push(StepLog { step, loss: tape.scalar_value(loss.total)? });
        }
        opt.step(mlp.params_mut(), &grads)?;
    }

    if mlp.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { step: config.steps, reason: "parameters became non-finite".into() });
    }
    let (train_mse, _) = evaluate_mapped(&mlp, &train, map)?;
    let (test_mse, test_grad_mse) = evaluate_mapped(&mlp, &test, map)?;
    if !(train_mse.is_finite() && test_mse.is_finite()) {
        return Err(Error::Diverged { step: config.steps, reason: "final metrics are non-finite".into() });
    }
    let record = ResultRecord {
        function: objective.name().to_string(),
        mode: config.mode,
        n: config.train_size,
        seed: config.seed,
        steps: config.steps,
        train_mse,
        test_mse,
        test_grad_mse,
        wall_ms: started.elapsed().as_millis() as u64,
        initial_test_mse,
        step_log,
    };
    // Keep the model in raw units for downstream consumers.
    if map != TargetMap::IDENTITY {
        let last = mlp.spec().num_layers() - 1;
        let params = mlp.params_mut();
        for v in params[2 * last].data_mut() {
            *v *= map.scale;
        }
        for v in params[2 * last + 1].data_mut() {
            *v = *v * map.scale + map.shift;
        }
    }
    Ok(TrainedRegression { record, model: mlp })
}

pub fn run_regression(config: &RegressionConfig) -> Result<ResultRecord> {
    Ok(train_regression(&config.function, config)?.record)
}

/// A failed run inside a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub function: String,
    pub mode: Mode,
    pub n: usize,
    pub seed: u64,
    pub error: String,
    pub numerical: bool,
}

pub type RunOutcome = std::result::Result<ResultRecord, RunFailure>;

/// Axes of a Cartesian sweep; every other setting comes from `base`.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub functions: Vec<Benchmark>,
    pub sizes: Vec<usize>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub base: RegressionConfig,
}

impl SweepSpec {
    /// Run configurations in sweep order: function, then size, then mode, then seed.
    pub fn configs(&self) -> Result<Vec<RegressionConfig>> {
        if self.functions.is_empty() || self.sizes.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &function in &self.functions {
            for &n in &self.sizes {
                for &mode in &self.modes {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.function = function;
                        c.train_size = n;
                        c.mode = mode;
                        c.seed = seed;
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs `jobs` on up to `workers` threads and hands each result to `sink` in job order.
pub fn run_parallel<J, T, F, S>(jobs: &[J], workers: usize, run: F, mut sink: S) -> Vec<T>
where
    J: Sync,
    T: Send + Clone,
    F: Fn(&J) -> T + Sync,
    S: FnMut(usize, &T),
{
    let workers = workers.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, T)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, run) = (&next, &run);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                if tx.send((i, run(&jobs[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut emitted = 0;
        for (i, result) in rx {
            slots[i] = Some(result);
            while emitted < slots.len() {
                match &slots[emitted] {
                    Some(r) => {
                        sink(emitted, r);
                        emitted += 1;
                    }
                    None => break,
                }
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every job produced a result")).collect()
}

/// Runs every configuration of the sweep; failures are recorded and the sweep continues.
pub fn run_sweep<S>(spec: &SweepSpec, workers: usize, sink: S) -> Result<Vec<RunOutcome>>
where
    S: FnMut(usize, &RunOutcome),
{
    let configs = spec.configs()?;
    Ok(run_parallel(
        &configs,
        workers,
        |c| {
            run_regression(c).map_err(|e| RunFailure {
                function: c.function.to_string(),
                mode: c.mode,
                n: c.train_size,
                seed: c.seed,
                numerical: matches!(e, Error::Diverged { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })),
                error: e.to_string(),
            })
        },
        sink,
    ))
}

/// One lattice point of a surface dump: model value and gradient beside the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub x: f64,
    pub y: f64,
    pub f: f64,
    pub fx: f64,
    pub fy: f64,
    pub true_f: f64,
    pub true_fx: f64,
    pub true_fy: f64,
}

impl SurfaceRow {
    pub const HEADER: [&'static str; 8] = ["x", "y", "f", "fx", "fy", "true_f", "true_fx", "true_fy"];
}

/// Model values and input-gradients over an `nx × ny` lattice of the objective's domain.
///
/// Ground-truth gradients at non-differentiable points are reported as `NaN`.
pub fn dump_surface(model: &Mlp, objective: &dyn Objective, nx: usize, ny: usize) -> Result<Vec<SurfaceRow>> {
    let pts = crate::benchmarks::lattice(objective.domain(), nx, ny);
    if pts.is_empty() {
        return Ok(vec![]);
    }
    let x = Tensor::new(pts.len(), 2, pts.iter().flatten().copied().collect())?;
    let (m, g) = model.predict_with_input_grad(&x)?;
    pts.iter()
        .enumerate()
        .map(|(i, &p)| {
            let tg = objective.grad(p).unwrap_or([f64::NAN; 2]);
            Ok(SurfaceRow {
                x: p[0],
                y: p[1],
                f: m.data()[i],
                fx: g.data()[2 * i],
                fy: g.data()[2 * i + 1],
                true_f: objective.eval(p)?,
                true_fx: tg[0],
                true_fy: tg[1],
            })
        })
        .collect()
}

/// Median of a slice; `NaN` for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

