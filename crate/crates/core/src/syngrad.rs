//! Decoupled training with synthetic gradients on a generated classification task.
//!
//! A classifier is cut at one or more hidden layers. Every part except the
//! last is updated with a synthetic gradient predicted at its output
//! boundary; the last part sees the true task gradient. Synthetic-gradient
//! modules are supervised with the true per-sample loss and the true
//! per-sample gradient at their boundary, obtained by backpropagating the
//! task loss through the current downstream parts.
//!
//! Gradients at a boundary are handled in two scalings: per-sample
//! (`∂ℓᵢ/∂hᵢ`, what modules predict and are supervised on) and batch form
//! (`∂L/∂hᵢ = (1/N)·∂ℓᵢ/∂hᵢ` for the mean loss `L`, what upstream parts consume).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{AutodiffError, NodeId, Tape, Tensor};

use crate::distill::as_divergence;
use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Head, Mlp, MlpSpec, Model, OptimizerConfig, OptimizerState};
use crate::seeds;
use crate::sobolev::{discrepancy, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgVariant {
    Noprop,
    DirectSg,
    Critic,
    Sobolev,
}

impl SgVariant {
    pub const ALL: [SgVariant; 4] = [SgVariant::Noprop, SgVariant::DirectSg, SgVariant::Critic, SgVariant::Sobolev];
}

impl fmt::Display for SgVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SgVariant::Noprop => "noprop",
            SgVariant::DirectSg => "direct_sg",
            SgVariant::Critic => "critic",
            SgVariant::Sobolev => "sobolev",
        })
    }
}

impl FromStr for SgVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SgVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic-gradient variant `{s}`")))
    }
}

/// Training scheme of a whole experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Backprop,
    Decoupled(SgVariant),
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Backprop => f.write_str("backprop"),
            Scheme::Decoupled(v) => v.fmt(f),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "backprop" {
            Ok(Scheme::Backprop)
        } else {
            s.parse().map(Scheme::Decoupled)
        }
    }
}

/// Supervision loss of a synthetic-gradient module.
///
/// `m` and `true_loss` are per-sample losses (N×1); `sg` and `true_grad` are
/// per-sample gradients at the boundary (N×dim h).
pub fn sg_losses(
    tape: &mut Tape,
    variant: SgVariant,
    m: Option<NodeId>,
    sg: NodeId,
    true_loss: NodeId,
    true_grad: NodeId,
    kind: LossKind,
) -> Result<NodeId> {
    let need_m = || m.ok_or_else(|| Error::Config(format!("the {variant} module needs a loss model output")));
    match variant {
        SgVariant::Noprop => Err(Error::Config("noprop trains no synthetic-gradient module".into())),
        SgVariant::DirectSg => discrepancy(tape, kind, sg, true_grad),
        SgVariant::Critic => discrepancy(tape, kind, need_m()?, true_loss),
        SgVariant::Sobolev => {
            let value = discrepancy(tape, kind, need_m()?, true_loss)?;
            let grad = discrepancy(tape, kind, sg, true_grad)?;
            Ok(tape.add(value, grad)?)
        }
    }
}

/// A classifier cut into consecutive parts.
///
/// Every part is an [`Mlp`] with a linear head; the hidden activation is
/// applied to the output of each non-final part, and the final part ends
/// in a log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitNetwork {
    parts: Vec<Mlp>,
    activation: Activation,
}

impl SplitNetwork {
    /// Cuts `full` after each layer index in `splits` (1-based, strictly increasing, interior).
    pub fn split(full: &Mlp, splits: &[usize]) -> Result<Self> {
        let spec = full.spec();
        let layers = spec.num_layers();
        if splits.windows(2).any(|w| w[0] >= w[1]) || splits.iter().any(|&s| s == 0 || s >= layers) {
            return Err(Error::Config(format!(
                "split points {splits:?} must be strictly increasing and inside 1..{layers}"
            )));
        }
        let mut bounds = vec![0];
        bounds.extend(splits);
        bounds.push(layers);
        let parts = bounds
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let head = if b == layers { spec.head } else { Head::Linear };
                let sub = MlpSpec::new(spec.layer_sizes[a..=b].to_vec(), spec.activation, head);
                Mlp::from_params(sub, full.params()[2 * a..2 * b].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SplitNetwork { parts, activation: spec.activation })
    }

    pub fn parts(&self) -> &[Mlp] {
        &self.parts
    }

    pub fn parts_mut(&mut self) -> &mut [Mlp] {
        &mut self.parts
    }

    pub fn boundaries(&self) -> usize {
        self.parts.len() - 1
    }

    /// Width of the activation at boundary `b` (the output of part `b`).
    pub fn boundary_width(&self, b: usize) -> usize {
        self.parts[b].spec().output_dim()
    }

    /// Re-assembles the undecoupled network.
    pub fn merged(&self) -> Result<Mlp> {
        let mut sizes = vec![self.parts[0].spec().input_dim()];
        let mut params = Vec::new();
        for p in &self.parts {
            sizes.extend(&p.spec().layer_sizes[1..]);
            params.extend(p.params().iter().cloned());
        }
        let head = self.parts.last().expect("nonempty").spec().head;
        Mlp::from_params(MlpSpec::new(sizes, self.activation, head), params)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundMlp> {
        self.parts.iter().map(|p| p.bind(tape)).collect()
    }

    /// Output of part `j`, including the activation for non-final parts.
    pub fn forward_part(&self, tape: &mut Tape, bound: &[BoundMlp], j: usize, input: NodeId) -> Result<NodeId> {
        let z = bound[j].forward(tape, input)?;
        if j + 1 < self.parts.len() {
            self.activation.apply(tape, z)
        } else {
            Ok(z)
        }
    }

    /// The composed forward pass without any detaching.
    pub fn forward(&self, tape: &mut Tape, bound: &[BoundMlp], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for j in 0..self.parts.len() {
            h = self.forward_part(tape, bound, j, h)?;
        }
        Ok(h)
    }
}

/// Per-sample cross-entropy `−Σ_c yᵢc log pᵢc` as an N×1 node.
pub fn per_sample_cross_entropy(tape: &mut Tape, log_probs: NodeId, onehot: NodeId) -> Result<NodeId> {
    let picked = tape.mul(log_probs, onehot)?;
    let s = tape.sum_cols(picked)?;
    Ok(tape.neg(s)?)
}

/// How a module produces its synthetic gradient.
#[derive(Clone, Debug)]
pub enum SgPredictor {
    /// `p(·|θ)` over `[h, onehot y]`; the gradient is `∂m/∂h` for `m = −log p_y`.
    LossModel(Mlp),
    /// Direct regression of the per-sample gradient from `[h, onehot y]`.
    Direct(Mlp),
    /// The exact downstream gradient, for verifying the decoupling machinery.
    Oracle,
}

/// A synthetic-gradient module attached to one boundary.
#[derive(Clone, Debug)]
pub struct SgModule {
    pub variant: SgVariant,
    pub predictor: SgPredictor,
}

impl SgModule {
    /// A freshly initialized module for a boundary of width `h_dim`.
    pub fn new(variant: SgVariant, h_dim: usize, classes: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![h_dim + classes];
        sizes.extend(hidden);
        let predictor = match variant {
            SgVariant::Noprop => return Err(Error::Config("noprop has no module".into())),
            SgVariant::DirectSg => {
                sizes.push(h_dim);
                let mut net = Mlp::init(MlpSpec::new(sizes, Activation::Relu, Head::Linear), seed)?;
                // Start by predicting a zero gradient.
                let last = net.spec().num_layers() - 1;
                net.params_mut()[2 * last].data_mut().fill(0.0);
                SgPredictor::Direct(net)
            }
            SgVariant::Critic | SgVariant::Sobolev => {
                sizes.push(classes);
                SgPredictor::LossModel(Mlp::init(MlpSpec::new(sizes, Activation::Relu, Head::LogSoftmax), seed)?)
            }
        };
        Ok(SgModule { variant, predictor })
    }

    pub fn oracle() -> Self {
        SgModule { variant: SgVariant::Sobolev, predictor: SgPredictor::Oracle }
    }

    pub fn network(&self) -> Option<&Mlp> {
        match &self.predictor {
            SgPredictor::LossModel(n) | SgPredictor::Direct(n) => Some(n),
            SgPredictor::Oracle => None,
        }
    }

    fn network_mut(&mut self) -> Option<&mut Mlp> {
        match &mut self.predictor {
            SgPredictor::LossModel(n) | SgPredictor::Direct(n) => Some(n),
            SgPredictor::Oracle => None,
        }
    }

    /// Builds `(m, SG)` on the tape for boundary activations `h` (a node) and labels.
    ///
    /// `m` is the per-sample loss model output (N×1) when the module has
    /// one, and `SG` is the per-sample gradient (N×dim h). For a loss model
    /// `SG = ∂(Σᵢ mᵢ)/∂h`, whose row `i` is `∂mᵢ/∂hᵢ`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        h: NodeId,
        onehot: NodeId,
    ) -> Result<(Option<NodeId>, NodeId)> {
        let input = tape.concat_cols(h, onehot)?;
        match &self.predictor {
            SgPredictor::LossModel(_) => {
                let lp = bound.forward(tape, input)?;
                let m = per_sample_cross_entropy(tape, lp, onehot)?;
                let total = tape.sum(m)?;
                let sg = tape.grad(total, &[h])?[0];
                Ok((Some(m), sg))
            }
            SgPredictor::Direct(_) => Ok((None, bound.forward(tape, input)?)),
            SgPredictor::Oracle => Err(Error::Config("an oracle module has no predictor".into())),
        }
    }
}

/// Adam states for a split network and its modules.
#[derive(Clone, Debug)]
pub struct SgOptimizers {
    pub parts: Vec<OptimizerState>,
    pub modules: Vec<Option<OptimizerState>>,
}

impl SgOptimizers {
    pub fn new(net: &SplitNetwork, modules: &[SgModule], main: OptimizerConfig, sg: OptimizerConfig) -> Self {
        SgOptimizers {
            parts: net.parts.iter().map(|_| OptimizerState::new(main)).collect(),
            modules: modules.iter().map(|m| m.network().map(|_| OptimizerState::new(sg))).collect(),
        }
    }
}

/// Diagnostics of one decoupled step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub task_loss: f64,
    pub module_losses: Vec<Option<f64>>,
    /// Parameter gradients applied to each part (empty for parts left untouched).
    pub part_grads: Vec<Vec<Tensor>>,
}

fn values(tape: &Tape, ids: &[NodeId]) -> Result<Vec<Tensor>> {
    Ok(ids.iter().map(|g| tape.value(*g).cloned()).collect::<std::result::Result<_, _>>()?)
}

/// One synchronous decoupled update: main parts first, then the modules.
///
/// `modules` is empty for noprop and holds one module per boundary otherwise.
pub fn decoupled_step(
    net: &mut SplitNetwork,
    modules: &mut [SgModule],
    opts: &mut SgOptimizers,
    x: &Tensor,
    onehot: &Tensor,
    variant: SgVariant,
) -> Result<StepReport> {
    let boundaries = net.boundaries();
    let noprop = variant == SgVariant::Noprop;
    if !noprop && modules.len() != boundaries {
        return Err(Error::Config(format!("expected {boundaries} modules, got {}", modules.len())));
    }
    let n = x.rows();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let y = tape.leaf(onehot.clone());

    // Forward with a detached copy of each boundary activation.
    let mut inputs = vec![tape.leaf(x.clone())];
    let mut outputs = Vec::with_capacity(boundaries);
    for j in 0..boundaries {
        let h = net.forward_part(&mut tape, &bound, j, inputs[j])?;
        let width = net.boundary_width(j);
        let hv = tape.value(h)?.clone();
        if hv.cols() != width {
            return Err(AutodiffError::DimensionMismatch { expected: width, got: hv.cols() }.into());
        }
        outputs.push(h);
        inputs.push(tape.leaf(hv));
    }
    let logp = net.forward_part(&mut tape, &bound, boundaries, inputs[boundaries])?;
    let per_sample = per_sample_cross_entropy(&mut tape, logp, y)?;
    let task = tape.mean(per_sample)?;

    // True gradients: final part parameters, then each boundary, back to front.
    let mut wrt = bound[boundaries].params().to_vec();
    wrt.push(inputs[boundaries]);
    let g = tape.grad(task, &wrt)?;
    let final_grads = values(&tape, &g[..g.len() - 1])?;
    let mut true_grads = vec![None; boundaries];
    true_grads[boundaries - 1] = Some(tape.value(g[g.len() - 1])?.clone());
    for b in (0..boundaries - 1).rev() {
        let upstream = tape.leaf(true_grads[b + 1].clone().expect("filled"));
        let s = tape.dot(outputs[b + 1], upstream)?;
        let gb = tape.grad(s, &[inputs[b + 1]])?[0];
        true_grads[b] = Some(tape.value(gb)?.clone());
    }
    let true_grads: Vec<Tensor> = true_grads.into_iter().map(|t| t.expect("filled")).collect();
    let per_sample_loss = tape.value(per_sample)?.clone();

    // Signals injected upstream, in batch form, and the module supervision losses.
    let mut signals: Vec<Option<Tensor>> = vec![None; boundaries];
    let mut module_losses = vec![None; modules.len()];
    let mut module_grads: Vec<Option<Vec<Tensor>>> = vec![None; modules.len()];
    for (b, module) in modules.iter().enumerate() {
        if let SgPredictor::Oracle = module.predictor {
            signals[b] = Some(true_grads[b].clone());
            continue;
        }
        let mark = tape.checkpoint();
        let mbound = module.network().expect("learned module").bind(&mut tape);
        let h = tape.leaf(tape.value(outputs[b])?.clone());
        let (m, sg) = module.predict(&mut tape, &mbound, h, y)?;
        let sgv = tape.value(sg)?.clone();
        signals[b] = Some(sgv.map(|v| v / n as f64));
        let tl = tape.leaf(per_sample_loss.clone());
        let tg = tape.leaf(true_grads[b].map(|v| v * n as f64));
        let loss = sg_losses(&mut tape, module.variant, m, sg, tl, tg, LossKind::L1)?;
        module_losses[b] = Some(tape.scalar_value(loss)?);
        let mg = tape.grad(loss, mbound.params())?;
        module_grads[b] = Some(values(&tape, &mg)?);
        tape.rollback(mark);
    }

    // Upstream parameter gradients from the injected signals.
    let mut part_grads = vec![Vec::new(); boundaries + 1];
    for j in 0..boundaries {
        let Some(signal) = &signals[j] else { continue };
        let s = tape.leaf(signal.clone());
        let inj = tape.dot(outputs[j], s)?;
        let g = tape.grad(inj, bound[j].params())?;
        part_grads[j] = values(&tape, &g)?;
    }
    part_grads[boundaries] = final_grads;

    for (j, grads) in part_grads.iter().enumerate() {
        if !grads.is_empty() {
            opts.parts[j].step(net.parts[j].params_mut(), grads)?;
        }
    }
    for (b, module) in modules.iter_mut().enumerate() {
        if let (Some(grads), Some(net), Some(opt)) =
            (&module_grads[b], module.network_mut(), opts.modules[b].as_mut())
        {
            opt.step(net.params_mut(), grads)?;
        }
    }
    Ok(StepReport { task_loss: tape.scalar_value(task)?, module_losses, part_grads })
}

/// One ordinary backpropagation step on the undecoupled network.
pub fn backprop_step(net: &mut Mlp, opt: &mut OptimizerState, x: &Tensor, onehot: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xn = tape.leaf(x.clone());
    let y = tape.leaf(onehot.clone());
    let logp = bound.forward(&mut tape, xn)?;
    let per_sample = per_sample_cross_entropy(&mut tape, logp, y)?;
    let task = tape.mean(per_sample)?;
    let g = tape.grad(task, bound.params())?;
    let grads = values(&tape, &g)?;
    opt.step(net.params_mut(), &grads)?;
    Ok((tape.scalar_value(task)?, grads))
}

/// Gaussian-mixture classification data: each class owns several clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    /// Standard deviation of cluster centres around the origin.
    pub center_scale: f64,
    /// Standard deviation of points around their centre.
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            classes: 8,
            dim: 20,
            clusters_per_class: 4,
            center_scale: 1.0,
            noise: 0.6,
            train_size: 4_000,
            test_size: 2_000,
            seed: 0,
        }
    }
}

/// Features with one-hot labels.
#[derive(Clone, Debug)]
pub struct LabelledData {
    pub x: Tensor,
    pub onehot: Tensor,
    pub labels: Vec<usize>,
}

impl LabelledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let (d, c) = (self.x.cols(), self.onehot.cols());
        let mut xs = Vec::with_capacity(idx.len() * d);
        let mut ys = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            xs.extend_from_slice(self.x.row_slice(i));
            ys.extend_from_slice(self.onehot.row_slice(i));
        }
        Ok((Tensor::new(idx.len(), d, xs)?, Tensor::new(idx.len(), c, ys)?))
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::Config("mixture needs ≥ 2 classes, a positive dimension and clusters".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("mixture train and test sizes must be positive".into()));
        }
        if !(self.center_scale > 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("mixture scales must be positive".into()));
        }
        Ok(())
    }

    /// Train and test sets drawn from the same mixture.
    pub fn generate(&self) -> Result<(LabelledData, LabelledData)> {
        self.validate()?;
        let mut rng = seeds::child_rng(self.seed, "mixture-centres", 0);
        let k = self.classes * self.clusters_per_class;
        let centres: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..self.dim).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); self.center_scale * e }).collect::<Vec<f64>>())
            .collect();
        let draw = |n: usize, label: &str| -> Result<LabelledData> {
            let mut rng = seeds::child_rng(self.seed, label, 0);
            let mut x = Vec::with_capacity(n * self.dim);
            let mut onehot = vec![0.0; n * self.classes];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let cluster = rng.random_range(0..k);
                let class = cluster % self.classes;
                for c in &centres[cluster] {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x.push(c + self.noise * e);
                }
                onehot[i * self.classes + class] = 1.0;
                labels.push(class);
            }
            Ok(LabelledData { x: Tensor::new(n, self.dim, x)?, onehot: Tensor::new(n, self.classes, onehot)?, labels })
        };
        Ok((draw(self.train_size, "mixture-train")?, draw(self.test_size, "mixture-test")?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgTrainConfig {
    pub data: MixtureSpec,
    pub hidden: Vec<usize>,
    /// Layer indices after which the network is cut.
    pub splits: Vec<usize>,
    pub scheme: Scheme,
    pub module_hidden: Vec<usize>,
    pub main_learning_rate: f64,
    pub sg_learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SgTrainConfig {
    fn default() -> Self {
        SgTrainConfig {
            data: MixtureSpec::default(),
            hidden: vec![64, 64, 64],
            splits: vec![1, 2, 3],
            scheme: Scheme::Decoupled(SgVariant::Sobolev),
            module_hidden: vec![64, 64],
            main_learning_rate: 1e-3,
            sg_learning_rate: 1e-4,
            batch_size: 128,
            steps: 3_000,
            seed: 0,
        }
    }
}

impl SgTrainConfig {
    pub fn network_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.data.dim];
        sizes.extend(&self.hidden);
        sizes.push(self.data.classes);
        MlpSpec::new(sizes, Activation::Relu, Head::LogSoftmax)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.network_spec().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let layers = self.hidden.len() + 1;
        if let Scheme::Decoupled(_) = self.scheme {
            if self.splits.is_empty()
                || self.splits.windows(2).any(|w| w[0] >= w[1])
                || self.splits.iter().any(|&s| s == 0 || s >= layers)
            {
                return Err(Error::Config(format!(
                    "split points {:?} must be strictly increasing and inside 1..{layers}",
                    self.splits
                )));
            }
        }
        OptimizerConfig::adam(self.main_learning_rate).validate()?;
        OptimizerConfig::adam(self.sg_learning_rate).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgRecord {
    pub variant: String,
    pub splits: usize,
    pub seed: u64,
    pub test_acc: f64,
    pub steps: usize,
    pub wall_ms: u64,
}

impl SgRecord {
    pub const HEADER: [&'static str; 6] = ["variant", "splits", "seed", "test_acc", "steps", "wall_ms"];
}

pub fn accuracy(net: &Mlp, data: &LabelledData) -> Result<f64> {
    let lp = net.predict(&data.x)?;
    let c = lp.cols();
    let correct = (0..data.len())
        .filter(|&i| {
            let r = lp.row_slice(i);
            let arg = (0..c).fold(0, |b, k| if r[k] > r[b] { k } else { b });
            arg == data.labels[i]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains one network under the configured scheme and reports test accuracy.
pub fn run_sg_experiment(config: &SgTrainConfig) -> Result<SgRecord> {
    config.validate()?;
    let started = Instant::now();
    let (train, test) = config.data.generate()?;
    let full = Mlp::init(config.network_spec(), seeds::derive_seed(config.seed, "main-net", 0))?;
    let main = OptimizerConfig::adam(config.main_learning_rate);
    let sgc = OptimizerConfig::adam(config.sg_learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seeds::child_rng(config.seed, "batches", 0);
    let batch = config.batch_size.min(train.len());
    let mut cursor = train.len();
    let mut next_batch = |rng: &mut rand_chacha::ChaCha8Rng| {
        if cursor + batch > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        cursor += batch;
        order[cursor - batch..cursor].to_vec()
    };

    let (trained, splits) = match config.scheme {
        Scheme::Backprop => {
            let mut net = full;
            let mut opt = OptimizerState::new(main);
            for step in 0..config.steps {
                let (x, y) = train.select(&next_batch(&mut rng))?;
                backprop_step(&mut net, &mut opt, &x, &y).map_err(|e| as_divergence(e, step))?;
            }
            (net, 0)
        }
        Scheme::Decoupled(variant) => {
            let mut net = SplitNetwork::split(&full, &config.splits)?;
            let mut modules = Vec::new();
            if variant != SgVariant::Noprop {
                for b in 0..net.boundaries() {
                    modules.push(SgModule::new(
                        variant,
                        net.boundary_width(b),
                        config.data.classes,
                        &config.module_hidden,
                        seeds::derive_seed(config.seed, "sg-module", b as u64),
                    )?);
                }
            }
            let mut opts = SgOptimizers::new(&net, &modules, main, sgc);
            for step in 0..config.steps {
                let (x, y) = train.select(&next_batch(&mut rng))?;
                decoupled_step(&mut net, &mut modules, &mut opts, &x, &y, variant)
                    .map_err(|e| as_divergence(e, step))?;
            }
            (net.merged()?, config.splits.len())
        }
    };
    if trained.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { step: config.steps, reason: "parameters became non-finite".into() });
    }
    Ok(SgRecord {
        variant: config.scheme.to_string(),
        splits,
        seed: config.seed,
        test_acc: accuracy(&trained, &test)?,
        steps: config.steps,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
