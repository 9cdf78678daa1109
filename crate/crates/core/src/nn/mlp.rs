use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sobolev_autodiff::{NodeId, Tape, Tensor, LEAKY_RELU_SLOPE};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu { slope: LEAKY_RELU_SLOPE }
    }

    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu { .. })
    }

    pub fn apply(self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::Relu => tape.relu(z)?,
            Activation::LeakyRelu { slope } => tape.leaky_relu(z, slope)?,
            Activation::Tanh => tape.tanh(z)?,
            Activation::Sigmoid => tape.sigmoid(z)?,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu { .. } => f.write_str("leaky_relu"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::leaky_relu()),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    LogSoftmax,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Linear => "linear",
            Head::LogSoftmax => "log_softmax",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Head::Linear),
            "log_softmax" => Ok(Head::LogSoftmax),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Architecture of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, head: Head) -> Self {
        MlpSpec { layer_sizes, activation, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("layer sizes must be positive, got {:?}", self.layer_sizes)));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::Config("leaky_relu slope must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// The network is piecewise linear in its input, so its input Hessian vanishes.
    pub fn is_piecewise_linear(&self) -> bool {
        self.head == Head::Linear && self.activation.is_piecewise_linear()
    }
}

/// A feed-forward network with parameters stored as `[W0, b0, W1, b1, ...]`.
///
/// `Wi` has shape `(sizes[i], sizes[i+1])` and `bi` is a `1×sizes[i+1]` row,
/// so a batch `X` (N×d) maps through `X·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// He-uniform weights for ReLU-family activations, Glorot-uniform otherwise; zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::rng(seed);
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = match spec.activation {
                Activation::Relu | Activation::LeakyRelu { .. } => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh | Activation::Sigmoid => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Tensor::new(fan_in, fan_out, data)?);
            params.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layer_sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(w[0], w[1]), Tensor::zeros(1, w[1])])
            .collect();
        Ok(Mlp { spec, params })
    }

    /// Builds a network from explicit parameters, checking that the shapes chain.
    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected = Self::zeros(spec.clone())?;
        if params.len() != expected.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.params.len(),
                params.len()
            )));
        }
        for (i, (p, e)) in params.iter().zip(&expected.params).enumerate() {
            if p.shape() != e.shape() {
                return Err(Error::Config(format!(
                    "parameter {i} has shape {}, expected {}",
                    p.shape(),
                    e.shape()
                )));
            }
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let params = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        BoundMlp { spec: self.spec.clone(), params }
    }

    /// Evaluates the network on a batch without keeping a tape around.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let out = bound.forward(&mut tape, xn)?;
        Ok(tape.value(out)?.clone())
    }

    /// Values and input-gradients of a scalar-output network on a batch.
    pub fn predict_with_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let out = bound.forward(&mut tape, xn)?;
        let g = input_gradient(&mut tape, out, xn, None)?;
        Ok((tape.value(out)?.clone(), tape.value(g)?.clone()))
    }
}

/// Anything that maps an input batch node to an output batch node on a tape.
pub trait Model {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;

    /// True when the input Hessian of every output is identically zero.
    fn piecewise_linear(&self) -> bool {
        false
    }
}

/// An [`Mlp`] whose parameters live on a tape as leaves.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    spec: MlpSpec,
    params: Vec<NodeId>,
}

impl BoundMlp {
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Overwrites the bound leaves with the current values of `mlp`.
    ///
    /// The tape must have been rolled back past every node derived from them.
    pub fn refresh(&self, tape: &mut Tape, mlp: &Mlp) -> Result<()> {
        if mlp.spec != self.spec {
            return Err(Error::Config("network architecture differs from the bound one".into()));
        }
        for (id, p) in self.params.iter().zip(mlp.params()) {
            tape.set_leaf(*id, p.clone())?;
        }
        Ok(())
    }
}

/// Binds fresh parameter leaves on every call; use [`Mlp::bind`] when gradients with respect to them are needed.
impl Model for Mlp {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.bind(tape).forward(tape, x)
    }

    fn piecewise_linear(&self) -> bool {
        self.spec.is_piecewise_linear()
    }
}

impl Model for BoundMlp {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let d = tape.shape(x)?.cols;
        if d != self.spec.input_dim() {
            return Err(sobolev_autodiff::AutodiffError::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: d,
            }
            .into());
        }
        let layers = self.spec.num_layers();
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, self.params[2 * l])?;
            let z = tape.add_row(z, self.params[2 * l + 1])?;
            h = if l + 1 < layers { self.spec.activation.apply(tape, z)? } else { z };
        }
        if self.spec.head == Head::LogSoftmax {
            h = tape.log_softmax_rows(h)?;
        }
        Ok(h)
    }

    fn piecewise_linear(&self) -> bool {
        self.spec.is_piecewise_linear()
    }
}

/// A model given by a closure, mainly for tests and analytic stand-ins.
pub struct FnModel<F> {
    f: F,
    piecewise_linear: bool,
}

impl<F> FnModel<F>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    pub fn new(f: F) -> Self {
        FnModel { f, piecewise_linear: false }
    }

    pub fn piecewise_linear(f: F) -> Self {
        FnModel { f, piecewise_linear: true }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        (self.f)(tape, x)
    }

    fn piecewise_linear(&self) -> bool {
        self.piecewise_linear
    }
}

/// Per-sample input-gradient of a model output, as a differentiable node.
///
/// Row `i` of the result is `∇ₓ⟨out_i, v_i⟩` where `v_i` is row `i` of
/// `projection`; with a single output column and no projection it is
/// simply `∇ₓ out_i`. Samples do not interact, so one backward pass over
/// the summed output yields every row at once.
pub fn input_gradient(
    tape: &mut Tape,
    out: NodeId,
    x: NodeId,
    projection: Option<&Tensor>,
) -> Result<NodeId> {
    let os = tape.shape(out)?;
    let total = match projection {
        Some(v) => {
            if v.shape() != os {
                return Err(sobolev_autodiff::AutodiffError::ShapeMismatch {
                    op: "input_gradient",
                    left: os,
                    right: v.shape(),
                }
                .into());
            }
            let v = tape.leaf(v.clone());
            tape.dot(out, v)?
        }
        None if os.cols == 1 => tape.sum(out)?,
        None => {
            return Err(Error::Config(format!(
                "input_gradient of a {}-output model needs a projection",
                os.cols
            )))
        }
    };
    Ok(tape.grad(total, &[x])?[0])
}
