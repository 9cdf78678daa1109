//! Losses that compare a model with a target in values and input-derivatives.
//!
//! Every loss is mean-reduced over the batch: per-sample discrepancies are
//! summed across their components and then averaged over the N samples.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{AutodiffError, NodeId, Tape, Tensor};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    L1,
    /// `Σ exp(p)·(p − q)` over log-probability rows `p` (prediction) and `q` (target).
    Kl,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
            LossKind::Kl => "kl",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            "kl" => Ok(LossKind::Kl),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Mean over rows of the per-row discrepancy between `pred` and a target node.
pub fn discrepancy(tape: &mut Tape, kind: LossKind, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let n = tape.shape(pred)?.rows as f64;
    let total = match kind {
        LossKind::L2 => {
            let d = tape.sub(pred, target)?;
            let d2 = tape.square(d)?;
            tape.sum(d2)?
        }
        LossKind::L1 => {
            let d = tape.sub(pred, target)?;
            let a = tape.abs(d)?;
            tape.sum(a)?
        }
        LossKind::Kl => {
            let d = tape.sub(pred, target)?;
            let p = tape.exp(pred)?;
            let pd = tape.mul(p, d)?;
            tape.sum(pd)?
        }
    };
    Ok(tape.scale(total, 1.0 / n)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub value_loss: LossKind,
    /// One entry per derivative order; its length is the order K.
    pub derivative_losses: Vec<LossKind>,
    pub derivative_weight: f64,
}

impl LossSpec {
    /// Plain value regression.
    pub fn value_only(value_loss: LossKind) -> Self {
        LossSpec { value_loss, derivative_losses: vec![], derivative_weight: 1.0 }
    }

    /// First-order Sobolev loss with equal weighting.
    pub fn first_order(value_loss: LossKind, derivative_loss: LossKind) -> Self {
        LossSpec { value_loss, derivative_losses: vec![derivative_loss], derivative_weight: 1.0 }
    }

    pub fn order(&self) -> usize {
        self.derivative_losses.len()
    }

    pub fn with_weight(mut self, alpha: f64) -> Self {
        self.derivative_weight = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.derivative_weight.is_finite() && self.derivative_weight >= 0.0) {
            return Err(Error::Config(format!(
                "derivative weight must be nonnegative, got {}",
                self.derivative_weight
            )));
        }
        if self.derivative_losses.contains(&LossKind::Kl) {
            return Err(Error::Config("derivative losses must be l1 or l2".into()));
        }
        if self.order() > 2 {
            return Err(Error::Config(format!("derivative order {} is not supported", self.order())));
        }
        Ok(())
    }
}

/// Stored second-order data: for each sample a direction `v` and the target `H·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct HvpTargets {
    pub directions: Tensor,
    pub values: Tensor,
}

/// Training tuples `(x, f(x), ∇f(x), ...)` for a batch of N samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SobolevBatch {
    inputs: Tensor,
    targets: Tensor,
    /// `target_grads[k]` is N×d and holds `∇ₓ f_k` for output `k`.
    target_grads: Option<Vec<Tensor>>,
    target_hvps: Option<HvpTargets>,
}

impl SobolevBatch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Config("a batch needs at least one sample".into()));
        }
        if targets.rows() != inputs.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "SobolevBatch",
                left: inputs.shape(),
                right: targets.shape(),
            }
            .into());
        }
        Ok(SobolevBatch { inputs, targets, target_grads: None, target_hvps: None })
    }

    /// Attaches the target Jacobian, one N×d matrix per output column.
    pub fn with_grads(mut self, grads: Vec<Tensor>) -> Result<Self> {
        if grads.len() != self.targets.cols() {
            return Err(AutodiffError::DimensionMismatch { expected: self.targets.cols(), got: grads.len() }.into());
        }
        for g in &grads {
            if g.shape() != self.inputs.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "SobolevBatch::with_grads",
                    left: self.inputs.shape(),
                    right: g.shape(),
                }
                .into());
            }
        }
        self.target_grads = Some(grads);
        Ok(self)
    }

    pub fn with_hvps(mut self, hvps: HvpTargets) -> Result<Self> {
        for t in [&hvps.directions, &hvps.values] {
            if t.shape() != self.inputs.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "SobolevBatch::with_hvps",
                    left: self.inputs.shape(),
                    right: t.shape(),
                }
                .into());
            }
        }
        self.target_hvps = Some(hvps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn target_grads(&self) -> Option<&[Tensor]> {
        self.target_grads.as_deref()
    }

    pub fn target_hvps(&self) -> Option<&HvpTargets> {
        self.target_hvps.as_ref()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<SobolevBatch> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for &i in indices {
                if i >= t.rows() {
                    return Err(Error::Config(format!("sample index {i} out of range")));
                }
                data.extend_from_slice(t.row_slice(i));
            }
            Ok(Tensor::new(indices.len(), t.cols(), data)?)
        };
        let mut b = SobolevBatch::new(pick(&self.inputs)?, pick(&self.targets)?)?;
        if let Some(g) = &self.target_grads {
            b.target_grads = Some(g.iter().map(pick).collect::<Result<_>>()?);
        }
        if let Some(h) = &self.target_hvps {
            b.target_hvps = Some(HvpTargets { directions: pick(&h.directions)?, values: pick(&h.values)? });
        }
        Ok(b)
    }

    /// `Σ_k V[:,k] ⊙ J_k`: per-sample `Jᵀv` for the projection rows in `v` (N×o).
    pub fn projected_grads(&self, v: &Tensor) -> Result<Tensor> {
        let grads = self.target_grads.as_ref().ok_or_else(|| Error::MissingDerivatives {
            order: 1,
            reason: "no target Jacobian".into(),
        })?;
        if v.shape() != self.targets.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "projected_grads",
                left: self.targets.shape(),
                right: v.shape(),
            }
            .into());
        }
        let (n, d) = (self.inputs.rows(), self.inputs.cols());
        let mut out = vec![0.0; n * d];
        for (k, g) in grads.iter().enumerate() {
            for i in 0..n {
                let w = v.get(i, k);
                for (o, gv) in out[i * d..(i + 1) * d].iter_mut().zip(g.row_slice(i)) {
                    *o += w * gv;
                }
            }
        }
        Ok(Tensor::new(n, d, out)?)
    }
}

/// Nodes of an assembled Sobolev loss.
#[derive(Clone, Debug)]
pub struct SobolevLoss {
    pub total: NodeId,
    pub value_term: NodeId,
    /// Unweighted derivative terms, one per order.
    pub derivative_terms: Vec<NodeId>,
    pub output: NodeId,
    pub input: NodeId,
}

fn weighted_total(
    tape: &mut Tape,
    value_term: NodeId,
    derivative_terms: &[NodeId],
    alpha: f64,
) -> Result<NodeId> {
    let mut total = value_term;
    for &t in derivative_terms {
        let w = tape.scale(t, alpha)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

fn forward_checked(tape: &mut Tape, model: &dyn Model, batch: &SobolevBatch) -> Result<(NodeId, NodeId)> {
    let x = tape.leaf(batch.inputs.clone());
    let out = model.forward(tape, x)?;
    let os = tape.shape(out)?;
    if os != batch.targets.shape() {
        return Err(AutodiffError::ShapeMismatch { op: "sobolev_loss", left: os, right: batch.targets.shape() }.into());
    }
    Ok((x, out))
}

/// Full Sobolev loss: value term plus `α·Σ_j ℓ_j(D^j m, D^j f)` for j up to K ≤ 2.
///
/// The first-order term compares every output's input-gradient with the
/// stored Jacobian row. The second-order term compares Hessian-vector
/// products along the stored directions and needs a scalar-output model.
pub fn sobolev_loss(tape: &mut Tape, model: &dyn Model, batch: &SobolevBatch, spec: &LossSpec) -> Result<SobolevLoss> {
    spec.validate()?;
    let k = spec.order();
    if k >= 1 && batch.target_grads.is_none() {
        return Err(Error::MissingDerivatives { order: 1, reason: "no target Jacobian".into() });
    }
    if k >= 2 && batch.target_hvps.is_none() {
        return Err(Error::MissingDerivatives { order: 2, reason: "no Hessian-vector targets".into() });
    }
    let (x, out) = forward_checked(tape, model, batch)?;
    let f = tape.leaf(batch.targets.clone());
    let value_term = discrepancy(tape, spec.value_loss, out, f)?;

    let mut derivative_terms = Vec::with_capacity(k);
    if k >= 1 {
        let grads = batch.target_grads.as_ref().expect("checked above");
        let o = grads.len();
        let mut first = None;
        let mut scalar_grad = None;
        for (col, target) in grads.iter().enumerate() {
            let g = if o == 1 {
                crate::nn::input_gradient(tape, out, x, None)?
            } else {
                let mut sel = Tensor::zeros(batch.len(), o);
                for i in 0..batch.len() {
                    sel.data_mut()[i * o + col] = 1.0;
                }
                crate::nn::input_gradient(tape, out, x, Some(&sel))?
            };
            if o == 1 {
                scalar_grad = Some(g);
            }
            let t = tape.leaf(target.clone());
            let term = discrepancy(tape, spec.derivative_losses[0], g, t)?;
            first = Some(match first {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        derivative_terms.push(first.expect("at least one output"));

        if k >= 2 {
            let Some(g) = scalar_grad else {
                return Err(Error::Config("second-order Sobolev loss needs a scalar-output model".into()));
            };
            if model.piecewise_linear() {
                log::warn!(
                    "second-order Sobolev term on a piecewise-linear model compares a zero Hessian with the targets"
                );
            }
            let h = batch.target_hvps.as_ref().expect("checked above");
            let v = tape.leaf(h.directions.clone());
            let gv = tape.dot(g, v)?;
            let hv = tape.grad(gv, &[x])?[0];
            let t = tape.leaf(h.values.clone());
            derivative_terms.push(discrepancy(tape, spec.derivative_losses[1], hv, t)?);
        }
    }
    let total = weighted_total(tape, value_term, &derivative_terms, spec.derivative_weight)?;
    Ok(SobolevLoss { total, value_term, derivative_terms, output: out, input: x })
}

/// Draws independent uniform directions on the unit sphere.
#[derive(Clone, Debug)]
pub struct ProjectionSampler {
    dimension: usize,
    num_projections: usize,
    rng: ChaCha8Rng,
}

impl ProjectionSampler {
    pub fn new(dimension: usize, num_projections: usize, seed: u64) -> Result<Self> {
        if dimension == 0 || num_projections == 0 {
            return Err(Error::Config("sampler dimension and projection count must be positive".into()));
        }
        Ok(ProjectionSampler { dimension, num_projections, rng: seeds::rng(seed) })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_projections(&self) -> usize {
        self.num_projections
    }

    /// A normalized vector of independent standard Gaussians.
    pub fn sample(&mut self) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                return v.into_iter().map(|a| a / norm).collect();
            }
        }
    }

    /// `rows` independent samples stacked as a `rows × dimension` matrix.
    pub fn sample_matrix(&mut self, rows: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * self.dimension);
        for _ in 0..rows {
            data.extend(self.sample());
        }
        Tensor::new(rows, self.dimension, data).expect("sized by construction")
    }

    pub fn rng_mut(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
}

/// Stochastic Sobolev loss: derivative matching along random output projections.
///
/// For each of the sampler's draws every sample gets its own direction `v`
/// on the unit sphere of the output space, and the term compares
/// `∇ₓ⟨m, v⟩` with `Jᵀv` assembled from the stored Jacobian. Terms are
/// averaged over draws.
pub fn stochastic_sobolev_loss(
    tape: &mut Tape,
    model: &dyn Model,
    batch: &SobolevBatch,
    spec: &LossSpec,
    sampler: &mut ProjectionSampler,
) -> Result<SobolevLoss> {
    spec.validate()?;
    match spec.order() {
        0 | 1 => {}
        k => {
            return Err(Error::Config(format!(
                "the projected estimator covers first-order terms only, got order {k}"
            )))
        }
    }
    if spec.order() == 1 && batch.target_grads.is_none() {
        return Err(Error::MissingDerivatives { order: 1, reason: "no target Jacobian".into() });
    }
    let o = batch.targets.cols();
    if sampler.dimension() != o {
        return Err(AutodiffError::DimensionMismatch { expected: o, got: sampler.dimension() }.into());
    }
    let (x, out) = forward_checked(tape, model, batch)?;
    let f = tape.leaf(batch.targets.clone());
    let value_term = discrepancy(tape, spec.value_loss, out, f)?;

    let mut derivative_terms = Vec::new();
    if spec.order() == 1 {
        let draws = sampler.num_projections();
        let mut acc = None;
        for _ in 0..draws {
            let v = sampler.sample_matrix(batch.len());
            let target = batch.projected_grads(&v)?;
            let g = crate::nn::input_gradient(tape, out, x, Some(&v))?;
            let t = tape.leaf(target);
            let term = discrepancy(tape, spec.derivative_losses[0], g, t)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let sum = acc.expect("at least one draw");
        derivative_terms.push(tape.scale(sum, 1.0 / draws as f64)?);
    }
    let total = weighted_total(tape, value_term, &derivative_terms, spec.derivative_weight)?;
    Ok(SobolevLoss { total, value_term, derivative_terms, output: out, input: x })
}
