//! Finite-difference verification of every analytic gradient the experiments rely on.
//!
//! Each target runs a family of cases; a case compares analytic gradients with
//! central differences at many inputs and keeps the worst relative error.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{fd_grad, NodeId, Tape, Tensor};

use crate::benchmarks::{Benchmark, Objective};
use crate::distill::{distill_loss, make_synthetic_teacher};
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Head, Mlp, MlpSpec};
use crate::seeds;
use crate::sobolev::{sobolev_loss, LossKind, LossSpec, ProjectionSampler, SobolevBatch};
use crate::syngrad::{sg_losses, SgModule, SgVariant};

pub const BENCHMARK_TOLERANCE: f64 = 1e-6;
pub const INPUT_GRADIENT_TOLERANCE: f64 = 1e-6;
pub const PARAMETER_GRADIENT_TOLERANCE: f64 = 1e-4;

const INPUT_STEP: f64 = 1e-5;
const PARAM_STEP: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-8;
/// Multiplier applied to analytic gradients when a fault is injected.
const FAULT_FACTOR: f64 = 1.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Benchmarks,
    Mlp,
    SobolevLoss,
    DistillLoss,
    SgLoss,
}

impl Target {
    pub const ALL: [Target; 5] =
        [Target::Benchmarks, Target::Mlp, Target::SobolevLoss, Target::DistillLoss, Target::SgLoss];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Benchmarks => "benchmarks",
            Target::Mlp => "mlp",
            Target::SobolevLoss => "sobolev-loss",
            Target::DistillLoss => "distill-loss",
            Target::SgLoss => "sg-loss",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown check-grad target `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    /// Random inputs per benchmark function and per input-gradient case.
    pub points: usize,
    /// Sampled parameter coordinates per parameter-gradient case.
    pub coordinates: usize,
    /// Independent networks per parameter-gradient case.
    pub repeats: usize,
    /// Hidden activation for the network cases.
    pub activation: Activation,
    pub seed: u64,
    /// Corrupt every analytic gradient slightly, so that the check must fail.
    pub inject_fault: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            points: 1000,
            coordinates: 50,
            repeats: 5,
            activation: Activation::Tanh,
            seed: 0,
            inject_fault: false,
        }
    }
}

impl CheckOptions {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.coordinates == 0 || self.repeats == 0 {
            return Err(Error::Config("check-grad counts must be positive".into()));
        }
        Ok(())
    }
}

/// Worst relative error of one case, with the input that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub target: Target,
    pub case: String,
    pub evaluations: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst_input: Vec<f64>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub cases: Vec<CaseReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed())
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn vector_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
    diff / norm(a.iter().copied()).max(norm(b.iter().copied())).max(NORM_FLOOR)
}

struct Tracker {
    report: CaseReport,
}

impl Tracker {
    fn new(target: Target, case: impl Into<String>, tolerance: f64) -> Self {
        Tracker {
            report: CaseReport {
                target,
                case: case.into(),
                evaluations: 0,
                max_rel_error: 0.0,
                tolerance,
                worst_input: vec![],
            },
        }
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64], input: &[f64]) {
        let e = vector_rel_error(analytic, numeric);
        self.report.evaluations += 1;
        if !(e <= self.report.max_rel_error) {
            self.report.max_rel_error = e;
            self.report.worst_input = input.to_vec();
        }
    }
}

fn corrupt(v: Vec<f64>, options: &CheckOptions) -> Vec<f64> {
    if options.inject_fault {
        v.into_iter().map(|x| x * FAULT_FACTOR).collect()
    } else {
        v
    }
}

/// Runs every case of `target`.
pub fn check_grad(target: Target, options: &CheckOptions) -> Result<GradReport> {
    options.validate()?;
    let cases = match target {
        Target::Benchmarks => check_benchmarks(options)?,
        Target::Mlp => check_mlp(options)?,
        Target::SobolevLoss => check_sobolev_loss(options)?,
        Target::DistillLoss => check_distill_loss(options)?,
        Target::SgLoss => check_sg_loss(options)?,
    };
    Ok(GradReport { cases })
}

/// Interior points whose difference stencil stays clear of the non-smooth sets.
fn smooth_point(b: Benchmark, rng: &mut impl Rng) -> [f64; 2] {
    let [(x0, x1), (y0, y1)] = b.domain();
    loop {
        let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
        let clear = match b {
            Benchmark::Bukin => (p[1] - 0.01 * p[0] * p[0]).abs() > 1e-2 && (p[0] + 10.0).abs() > 1e-3,
            Benchmark::Ackley => p[0].hypot(p[1]) > 1e-2,
            _ => true,
        };
        if clear {
            return p;
        }
    }
}

fn check_benchmarks(options: &CheckOptions) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for b in Benchmark::ALL {
        let mut rng = seeds::child_rng(options.seed, b.as_str(), 0);
        let mut t = Tracker::new(Target::Benchmarks, b.as_str(), BENCHMARK_TOLERANCE);
        for _ in 0..options.points {
            let p = smooth_point(b, &mut rng);
            let g = corrupt(b.grad(p)?.to_vec(), options);
            let fd = fd_grad(|v| b.value_unchecked([v[0], v[1]]), &p, INPUT_STEP)?;
            t.record(&g, &fd, &p);
        }
        out.push(t.report);
    }
    Ok(out)
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Ok(Tensor::new(rows, cols, data)?)
}

/// Compares `∂loss/∂θ` with central differences on sampled coordinates of `θ`.
fn param_case<L>(net: &Mlp, coords: usize, seed: u64, options: &CheckOptions, tracker: &mut Tracker, loss: L) -> Result<()>
where
    L: Fn(&mut Tape, &BoundMlp) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let l = loss(&mut tape, &bound)?;
    let grads = tape.grad(l, bound.params())?;
    let mut analytic = Vec::with_capacity(net.param_count());
    for g in grads {
        analytic.extend_from_slice(tape.value(g)?.data());
    }

    let theta = net.flat_params();
    let mut rng = seeds::rng(seed);
    let picked = index::sample(&mut rng, theta.len(), coords.min(theta.len())).into_vec();
    let at: Vec<f64> = picked.iter().map(|&i| theta[i]).collect();
    let value_at = |v: &[f64]| -> Result<f64> {
        let mut moved = net.clone();
        let mut th = theta.clone();
        for (&i, &x) in picked.iter().zip(v) {
            th[i] = x;
        }
        moved.set_flat_params(&th)?;
        let mut tape = Tape::new();
        let bound = moved.bind(&mut tape);
        let l = loss(&mut tape, &bound)?;
        Ok(tape.scalar_value(l)?)
    };
    // Surface evaluation errors instead of folding them into the difference quotient.
    value_at(&at)?;
    let fd = fd_grad(|v| value_at(v).unwrap_or(f64::NAN), &at, PARAM_STEP)?;
    let a = corrupt(picked.iter().map(|&i| analytic[i]).collect(), options);
    tracker.record(&a, &fd, &at);
    Ok(())
}

fn check_mlp(options: &CheckOptions) -> Result<Vec<CaseReport>> {
    let act = options.activation;
    let spec = MlpSpec::new(vec![3, 16, 16, 1], act, Head::Linear);

    let mut input = Tracker::new(Target::Mlp, format!("input-gradient/{act}"), INPUT_GRADIENT_TOLERANCE);
    let net = Mlp::init(spec.clone(), seeds::derive_seed(options.seed, "mlp-input", 0))?;
    let mut rng = seeds::child_rng(options.seed, "mlp-points", 0);
    for _ in 0..options.points {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = net.predict_with_input_grad(&Tensor::row(&x))?;
        let fd = fd_grad(
            |v| net.predict(&Tensor::row(v)).map(|t| t.data()[0]).unwrap_or(f64::NAN),
            &x,
            INPUT_STEP,
        )?;
        input.record(&corrupt(g.into_data(), options), &fd, &x);
    }

    let mut param = Tracker::new(Target::Mlp, format!("parameter-gradient/{act}"), PARAMETER_GRADIENT_TOLERANCE);
    for r in 0..options.repeats {
        let net = Mlp::init(spec.clone(), seeds::derive_seed(options.seed, "mlp-param", r as u64))?;
        let mut rng = seeds::child_rng(options.seed, "mlp-param-data", r as u64);
        let x = random_tensor(8, 3, &mut rng)?;
        let f = random_tensor(8, 1, &mut rng)?;
        let batch = SobolevBatch::new(x, f)?;
        let spec = LossSpec::value_only(LossKind::L2);
        param_case(&net, options.coordinates, seeds::derive_seed(options.seed, "mlp-coords", r as u64), options, &mut param, |t, b| {
            Ok(sobolev_loss(t, b, &batch, &spec)?.total)
        })?;
    }
    Ok(vec![input.report, param.report])
}

fn check_sobolev_loss(options: &CheckOptions) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (name, spec) in [
        ("l2-l2", LossSpec::first_order(LossKind::L2, LossKind::L2)),
        ("l1-l2-weighted", LossSpec::first_order(LossKind::L1, LossKind::L2).with_weight(0.3)),
    ] {
        let act = options.activation;
        let mut t = Tracker::new(Target::SobolevLoss, format!("{name}/{act}"), PARAMETER_GRADIENT_TOLERANCE);
        for r in 0..options.repeats {
            let net = Mlp::init(
                MlpSpec::new(vec![2, 12, 12, 1], act, Head::Linear),
                seeds::derive_seed(options.seed, "sobolev-net", r as u64),
            )?;
            let mut rng = seeds::child_rng(options.seed, "sobolev-data", r as u64);
            let x = random_tensor(6, 2, &mut rng)?;
            let f = random_tensor(6, 1, &mut rng)?;
            let g = random_tensor(6, 2, &mut rng)?;
            let batch = SobolevBatch::new(x, f)?.with_grads(vec![g])?;
            param_case(&net, options.coordinates, seeds::derive_seed(options.seed, "sobolev-coords", r as u64), options, &mut t, |tape, b| {
                Ok(sobolev_loss(tape, b, &batch, &spec)?.total)
            })?;
        }
        out.push(t.report);
    }
    Ok(out)
}

fn check_distill_loss(options: &CheckOptions) -> Result<Vec<CaseReport>> {
    let act = options.activation;
    let mut t = Tracker::new(Target::DistillLoss, format!("kl+projected/{act}"), PARAMETER_GRADIENT_TOLERANCE);
    for r in 0..options.repeats {
        let teacher = make_synthetic_teacher(4, 3, &[8], seeds::derive_seed(options.seed, "distill-teacher", r as u64))?;
        let student = Mlp::init(
            MlpSpec::new(vec![4, 10, 3], act, Head::LogSoftmax),
            seeds::derive_seed(options.seed, "distill-student", r as u64),
        )?;
        let mut rng = seeds::child_rng(options.seed, "distill-states", r as u64);
        let states = random_tensor(6, 4, &mut rng)?;
        let proj_seed = seeds::derive_seed(options.seed, "distill-projections", r as u64);
        param_case(&student, options.coordinates, seeds::derive_seed(options.seed, "distill-coords", r as u64), options, &mut t, |tape, b| {
            let mut sampler = ProjectionSampler::new(3, 2, proj_seed)?;
            Ok(distill_loss(tape, b, &teacher, &states, 1.0, LossKind::L2, &mut sampler)?.total)
        })?;
    }
    Ok(vec![t.report])
}

fn check_sg_loss(options: &CheckOptions) -> Result<Vec<CaseReport>> {
    let (width, classes, n) = (5, 3, 6);
    let mut out = Vec::new();
    for variant in [SgVariant::DirectSg, SgVariant::Critic, SgVariant::Sobolev] {
        let mut t = Tracker::new(Target::SgLoss, variant.to_string(), PARAMETER_GRADIENT_TOLERANCE);
        for r in 0..options.repeats {
            let module = SgModule::new(variant, width, classes, &[8], seeds::derive_seed(options.seed, "sg-module", r as u64))?;
            let mut net = module.network().expect("learned module").clone();
            if variant == SgVariant::DirectSg {
                // The fresh output layer is zero; perturb it so every parameter matters.
                let mut rng = seeds::child_rng(options.seed, "sg-output", r as u64);
                let last = 2 * (net.spec().num_layers() - 1);
                for v in net.params_mut()[last].data_mut() {
                    *v = 0.1 * rng.random_range(-1.0..1.0);
                }
            }
            let mut rng = seeds::child_rng(options.seed, "sg-data", r as u64);
            let h = random_tensor(n, width, &mut rng)?;
            let mut onehot = Tensor::zeros(n, classes);
            for i in 0..n {
                onehot.data_mut()[i * classes + rng.random_range(0..classes)] = 1.0;
            }
            let true_loss = Tensor::new(n, 1, (0..n).map(|_| rng.random_range(0.1..3.0)).collect())?;
            let true_grad = random_tensor(n, width, &mut rng)?;
            param_case(&net, options.coordinates, seeds::derive_seed(options.seed, "sg-coords", r as u64), options, &mut t, |tape, b| {
                let hn = tape.leaf(h.clone());
                let y = tape.leaf(onehot.clone());
                let (m, sg) = module.predict(tape, b, hn, y)?;
                let tl = tape.leaf(true_loss.clone());
                let tg = tape.leaf(true_grad.clone());
                sg_losses(tape, variant, m, sg, tl, tg, LossKind::L1)
            })?;
        }
        out.push(t.report);
    }
    Ok(out)
}
