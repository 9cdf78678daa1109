//! Policy distillation from a fixed teacher, optionally matching projected
//! log-policy input-gradients.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::nn::{input_gradient, Activation, Head, Mlp, MlpSpec, Model, OptimizerConfig, OptimizerState};
use crate::regression::Mode;
use crate::seeds;
use crate::sobolev::{stochastic_sobolev_loss, LossKind, LossSpec, ProjectionSampler, SobolevBatch, SobolevLoss};

pub const DEFAULT_TEACHER_TEMPERATURE: f64 = 0.5;

/// A frozen policy network with a log-softmax head.
#[derive(Clone, Debug)]
pub struct TeacherPolicy {
    network: Mlp,
    temperature: f64,
}

/// Random ReLU teacher `d → hidden → A` sharpened by the default temperature.
pub fn make_synthetic_teacher(d: usize, actions: usize, hidden: &[usize], seed: u64) -> Result<TeacherPolicy> {
    TeacherPolicy::synthetic(d, actions, hidden, seed, DEFAULT_TEACHER_TEMPERATURE)
}

impl TeacherPolicy {
    /// Logits of a freshly initialized network divided by `temperature`.
    ///
    /// The division is folded into the last layer, so the network itself
    /// outputs the tempered log-probabilities.
    pub fn synthetic(d: usize, actions: usize, hidden: &[usize], seed: u64, temperature: f64) -> Result<Self> {
        if d < 2 || actions < 2 {
            return Err(Error::Config(format!("teacher needs d ≥ 2 and A ≥ 2, got d={d}, A={actions}")));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let mut sizes = vec![d];
        sizes.extend(hidden);
        sizes.push(actions);
        let mut network = Mlp::init(MlpSpec::new(sizes, Activation::Relu, Head::LogSoftmax), seed)?;
        // Fresh biases are zero; give the last layer a random offset so actions are not symmetric.
        let mut rng = seeds::child_rng(seed, "teacher-bias", 0);
        let last = network.spec().num_layers() - 1;
        let params = network.params_mut();
        for b in params[2 * last + 1].data_mut() {
            *b = StandardNormal.sample(&mut rng);
        }
        for k in [2 * last, 2 * last + 1] {
            for v in params[k].data_mut() {
                *v /= temperature;
            }
        }
        Ok(TeacherPolicy { network, temperature })
    }

    pub fn network(&self) -> &Mlp {
        &self.network
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn state_dim(&self) -> usize {
        self.network.spec().input_dim()
    }

    pub fn action_count(&self) -> usize {
        self.network.spec().output_dim()
    }

    pub fn log_probs(&self, states: &Tensor) -> Result<Tensor> {
        self.network.predict(states)
    }

    /// Log-probabilities with one N×d input-gradient matrix per action.
    pub fn log_probs_and_jacobian(&self, states: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.network.bind(&mut tape);
        let x = tape.leaf(states.clone());
        let out = bound.forward(&mut tape, x)?;
        let a = self.action_count();
        let mut jac = Vec::with_capacity(a);
        for k in 0..a {
            let mut sel = Tensor::zeros(states.rows(), a);
            for i in 0..states.rows() {
                sel.data_mut()[i * a + k] = 1.0;
            }
            let g = input_gradient(&mut tape, out, x, Some(&sel))?;
            jac.push(tape.value(g)?.clone());
        }
        Ok((tape.value(out)?.clone(), jac))
    }

    /// Distillation targets for `states`: teacher log-probabilities and their Jacobian.
    pub fn sobolev_batch(&self, states: &Tensor) -> Result<SobolevBatch> {
        let (lp, jac) = self.log_probs_and_jacobian(states)?;
        SobolevBatch::new(states.clone(), lp)?.with_grads(jac)
    }
}

/// `KL(student ‖ teacher) + α·E_v ℓ(∇ₛ⟨log π, v⟩, ∇ₛ⟨log π*, v⟩)` on precomputed teacher targets.
///
/// With `alpha == 0` only the KL term is built and the sampler is not touched.
pub fn distill_loss_on_batch(
    tape: &mut Tape,
    student: &dyn Model,
    targets: &SobolevBatch,
    alpha: f64,
    norm: LossKind,
    sampler: &mut ProjectionSampler,
) -> Result<SobolevLoss> {
    let spec = if alpha == 0.0 {
        LossSpec::value_only(LossKind::Kl)
    } else {
        LossSpec::first_order(LossKind::Kl, norm).with_weight(alpha)
    };
    stochastic_sobolev_loss(tape, student, targets, &spec, sampler)
}

/// Distillation loss of `student` against `teacher` on a batch of states.
pub fn distill_loss(
    tape: &mut Tape,
    student: &dyn Model,
    teacher: &TeacherPolicy,
    states: &Tensor,
    alpha: f64,
    norm: LossKind,
    sampler: &mut ProjectionSampler,
) -> Result<SobolevLoss> {
    if states.rows() == 0 {
        return Err(Error::Config("state batch must be nonempty".into()));
    }
    let targets = teacher.sobolev_batch(states)?;
    distill_loss_on_batch(tape, student, &targets, alpha, norm, sampler)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub state_dim: usize,
    pub actions: usize,
    pub teacher_hidden: Vec<usize>,
    pub teacher_temperature: f64,
    pub student_hidden: Vec<usize>,
    pub alpha: f64,
    pub norm: LossKind,
    pub data_fraction: f64,
    /// Size of the pool the training share is drawn from.
    pub train_pool: usize,
    pub test_size: usize,
    pub num_projections: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            state_dim: 16,
            actions: 6,
            teacher_hidden: vec![64, 64],
            teacher_temperature: DEFAULT_TEACHER_TEMPERATURE,
            student_hidden: vec![32, 32],
            alpha: 1.0,
            norm: LossKind::L2,
            data_fraction: 1.0,
            train_pool: 5_000,
            test_size: 2_000,
            num_projections: 1,
            batch_size: 200,
            learning_rate: 1e-4,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.norm == LossKind::Kl {
            return Err(Error::Config("the gradient mismatch norm must be l1 or l2".into()));
        }
        if self.train_pool == 0 || self.test_size == 0 || self.batch_size == 0 || self.num_projections == 0 {
            return Err(Error::Config("pool, test, batch sizes and projection count must be positive".into()));
        }
        if self.train_states() == 0 {
            return Err(Error::Config("data_fraction leaves no training states".into()));
        }
        OptimizerConfig::adam(self.learning_rate).validate()
    }

    pub fn train_states(&self) -> usize {
        (self.data_fraction * self.train_pool as f64).round() as usize
    }

    pub fn student_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.state_dim];
        sizes.extend(&self.student_hidden);
        sizes.push(self.actions);
        MlpSpec::new(sizes, Activation::Relu, Head::LogSoftmax)
    }

    pub fn teacher(&self) -> Result<TeacherPolicy> {
        TeacherPolicy::synthetic(
            self.state_dim,
            self.actions,
            &self.teacher_hidden,
            seeds::derive_seed(self.seed, "teacher", 0),
            self.teacher_temperature,
        )
    }
}

/// Held-out and training metrics of a distilled student.
///
/// `*_mse` columns compare log-probability rows (summed over actions) and
/// `test_grad_mse` compares full log-policy Jacobians (Frobenius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub function: String,
    pub mode: Mode,
    pub n: usize,
    pub seed: u64,
    pub steps: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_grad_mse: f64,
    pub wall_ms: u64,
    pub data_fraction: f64,
    pub alpha: f64,
    pub kl_test: f64,
    pub top1_err: f64,
}

impl DistillRecord {
    pub const HEADER: [&'static str; 13] = [
        "function",
        "mode",
        "n",
        "seed",
        "steps",
        "train_mse",
        "test_mse",
        "test_grad_mse",
        "wall_ms",
        "data_fraction",
        "alpha",
        "kl_test",
        "top1_err",
    ];
}

fn gaussian_states(n: usize, d: usize, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(n, d, data)?)
}

struct Scores {
    kl: f64,
    top1_err: f64,
    logp_mse: f64,
    jac_mse: f64,
}

fn score(student: &Mlp, targets: &SobolevBatch) -> Result<Scores> {
    let n = targets.len();
    let a = targets.targets().cols();
    let states = targets.inputs();
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let x = tape.leaf(states.clone());
    let out = bound.forward(&mut tape, x)?;
    let lp = tape.value(out)?.clone();
    let t = targets.targets();
    let (mut kl, mut wrong, mut se) = (0.0, 0usize, 0.0);
    for i in 0..n {
        let (s, q) = (lp.row_slice(i), t.row_slice(i));
        for k in 0..a {
            kl += s[k].exp() * (s[k] - q[k]);
            se += (s[k] - q[k]).powi(2);
        }
        let argmax = |r: &[f64]| (0..a).fold(0, |b, k| if r[k] > r[b] { k } else { b });
        if argmax(s) != argmax(q) {
            wrong += 1;
        }
    }
    let mut jac_se = 0.0;
    let jt = targets.target_grads().expect("teacher batches carry Jacobians");
    for (k, target) in jt.iter().enumerate() {
        let mut sel = Tensor::zeros(n, a);
        for i in 0..n {
            sel.data_mut()[i * a + k] = 1.0;
        }
        let g = input_gradient(&mut tape, out, x, Some(&sel))?;
        jac_se += tape.value(g)?.data().iter().zip(target.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    }
    let n = n as f64;
    Ok(Scores { kl: kl / n, top1_err: wrong as f64 / n, logp_mse: se / n, jac_mse: jac_se / n })
}

/// Trains a student on the configured share of states and scores it on the held-out range.
pub fn run_distillation(config: &DistillConfig, mode: Mode) -> Result<DistillRecord> {
    config.validate()?;
    let started = Instant::now();
    let teacher = config.teacher()?;
    // One generation stream: the training pool first, then the held-out range.
    let mut state_rng = seeds::child_rng(config.seed, "states", 0);
    let pool = gaussian_states(config.train_pool + config.test_size, config.state_dim, &mut state_rng)?;
    let d = config.state_dim;
    let n_train = config.train_states();
    let train_states = Tensor::new(n_train, d, pool.data()[..n_train * d].to_vec())?;
    let test_states = Tensor::new(config.test_size, d, pool.data()[config.train_pool * d..].to_vec())?;
    let train = teacher.sobolev_batch(&train_states)?;
    let test = teacher.sobolev_batch(&test_states)?;

    let alpha = match mode {
        Mode::Regular => 0.0,
        Mode::Sobolev => config.alpha,
    };
    let mut student = Mlp::init(config.student_spec(), seeds::derive_seed(config.seed, "student", 0))?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(config.learning_rate));
    let mut sampler = ProjectionSampler::new(
        config.actions,
        config.num_projections,
        seeds::derive_seed(config.seed, "projections", 0),
    )?;
    let mut batch_rng = seeds::child_rng(config.seed, "batches", 0);
    let mut order: Vec<usize> = (0..n_train).collect();
    let batch = config.batch_size.min(n_train);
    let mut cursor = n_train;

    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let mark = tape.checkpoint();
    for step in 0..config.steps {
        tape.rollback(mark);
        bound.refresh(&mut tape, &student)?;
        if cursor + batch > n_train {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let b = train.select(&order[cursor..cursor + batch])?;
        cursor += batch;
        let loss = distill_loss_on_batch(&mut tape, &bound, &b, alpha, config.norm, &mut sampler)
            .map_err(|e| as_divergence(e, step))?;
        let grads = tape.grad(loss.total, bound.params()).map_err(|e| as_divergence(e.into(), step))?;
        let grads: Vec<Tensor> = grads
            .iter()
            .map(|g| tape.value(*g).cloned())
            .collect::<std::result::Result<_, _>>()?;
        opt.step(student.params_mut(), &grads)?;
    }

    let tr = score(&student, &train)?;
    let te = score(&student, &test)?;
    if ![te.kl, te.logp_mse, tr.logp_mse, te.jac_mse].iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { step: config.steps, reason: "final metrics are non-finite".into() });
    }
    Ok(DistillRecord {
        function: "synthetic_teacher".into(),
        mode,
        n: n_train,
        seed: config.seed,
        steps: config.steps,
        train_mse: tr.logp_mse,
        test_mse: te.logp_mse,
        test_grad_mse: te.jac_mse,
        wall_ms: started.elapsed().as_millis() as u64,
        data_fraction: config.data_fraction,
        alpha,
        kl_test: te.kl,
        top1_err: te.top1_err,
    })
}

pub(crate) fn as_divergence(e: Error, step: usize) -> Error {
    match e {
        Error::Autodiff(sobolev_autodiff::AutodiffError::NonFinite { op }) => {
            Error::Diverged { step, reason: format!("{op} produced a non-finite value") }
        }
        other => other,
    }
}
