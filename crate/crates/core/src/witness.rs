//! Explicit constructions behind the sample-complexity results.
//!
//! * [`approximate_c1_by_pwl`]: a piecewise-linear interpolant that is
//!   ε-close to a C¹ function in value and in derivative.
//! * [`build_interpolant_1d`]: a sum of disjoint bumps matching prescribed
//!   values and derivatives exactly at given points.
//! * [`pwl_to_relu_net`]: the same function as a one-hidden-layer ReLU net.
//! * [`recover_gaussian`]: a Gaussian density identified from one value
//!   and one derivative.
//!
//! `K_reg` and `K_sob` denote the number of samples needed to identify a
//! member of a function family from values alone, or from values plus
//! derivatives. The Gaussian recovery shows `K_sob = 1` for Gaussian
//! densities.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sobolev_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Activation, Head, Mlp, MlpSpec};

/// Number of samples used to estimate `sup |f′|` and the modulus of continuity of `f′`.
pub const DENSE_SAMPLES: usize = 20_000;
/// Sampled oscillation of `f′` must stay below `ε / SAFETY_FACTOR`.
pub const SAFETY_FACTOR: f64 = 2.0;
const MAX_KNOTS: usize = 10_000_000;

/// Continuous piecewise-linear function with constant extrapolation.
///
/// Segment slopes are stored explicitly: constructions that know the exact
/// slope of a segment keep it rather than re-deriving it from rounded values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwlFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl PwlFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Self::check(&knots, &values)?;
        let slopes = knots
            .windows(2)
            .zip(values.windows(2))
            .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
            .collect();
        Ok(PwlFunction { knots, values, slopes })
    }

    fn with_slopes(knots: Vec<f64>, values: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        Self::check(&knots, &values)?;
        debug_assert_eq!(slopes.len() + 1, knots.len());
        Ok(PwlFunction { knots, values, slopes })
    }

    fn check(knots: &[f64], values: &[f64]) -> Result<()> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::Construction(format!(
                "need matching nonempty knots and values, got {} and {}",
                knots.len(),
                values.len()
            )));
        }
        if knots.iter().chain(values).any(|v| !v.is_finite()) {
            return Err(Error::Construction("knots and values must be finite".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Construction("knots must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Index of the segment `[ξ_{i}, ξ_{i+1})` holding `x`, if `x` is inside the span.
    fn segment(&self, x: f64) -> Option<usize> {
        let n = self.knots.len();
        if n < 2 || x < self.knots[0] || x > self.knots[n - 1] {
            return None;
        }
        let i = self.knots.partition_point(|&k| k <= x);
        Some(i.saturating_sub(1).min(n - 2))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x <= self.knots[0] {
            return self.values[0];
        }
        if x >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let i = self.segment(x).expect("inside span");
        let (a, b) = (self.knots[i], self.knots[i + 1]);
        if x == a {
            return self.values[i];
        }
        let t = (x - a) / (b - a);
        (1.0 - t) * self.values[i] + t * self.values[i + 1]
    }

    /// Slope of the segment containing `x` (the right-hand one at a knot); 0 outside the span.
    pub fn derivative(&self, x: f64) -> f64 {
        match self.segment(x) {
            Some(i) if x < self.knots[self.knots.len() - 1] => self.slopes[i],
            _ => 0.0,
        }
    }
}

/// Sliding-window oscillation `max_j (max − min)` of `samples` over windows of `w + 1` entries.
fn max_oscillation(samples: &[f64], w: usize) -> f64 {
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut best: f64 = 0.0;
    for (i, &v) in samples.iter().enumerate() {
        while maxq.back().is_some_and(|&j| samples[j] <= v) {
            maxq.pop_back();
        }
        maxq.push_back(i);
        while minq.back().is_some_and(|&j| samples[j] >= v) {
            minq.pop_back();
        }
        minq.push_back(i);
        let lo = i.saturating_sub(w);
        while maxq.front().is_some_and(|&j| j < lo) {
            maxq.pop_front();
        }
        while minq.front().is_some_and(|&j| j < lo) {
            minq.pop_front();
        }
        best = best.max(samples[maxq[0]] - samples[minq[0]]);
    }
    best
}

/// Grid interpolant of `f` on `[a, b]` that is ε-close to `f` in value and derivative.
///
/// The spacing is `δ = min(δ₁, ε/(2M))` where `M` estimates `sup |f′|` and
/// `δ₁` is halved until the sampled oscillation of `f′` over any window of
/// width `δ₁` is below `ε/2`.
pub fn approximate_c1_by_pwl(
    f: impl Fn(f64) -> f64,
    fprime: impl Fn(f64) -> f64,
    interval: (f64, f64),
    eps: f64,
) -> Result<PwlFunction> {
    let (a, b) = interval;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Construction(format!("invalid interval [{a}, {b}]")));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Construction(format!("tolerance must be positive, got {eps}")));
    }
    let width = b - a;
    let h = width / DENSE_SAMPLES as f64;
    let dense: Vec<f64> = (0..=DENSE_SAMPLES).map(|i| fprime(a + h * i as f64)).collect();
    if dense.iter().any(|v| !v.is_finite()) {
        return Err(Error::Construction("f′ is not finite on the interval".into()));
    }
    let m = dense.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    let mut delta1 = width;
    loop {
        let w = ((delta1 / h).ceil() as usize).min(DENSE_SAMPLES);
        if max_oscillation(&dense, w) < eps / SAFETY_FACTOR {
            break;
        }
        delta1 /= 2.0;
        if delta1 < 2.0 * h {
            return Err(Error::Construction(format!(
                "grid spacing underflow: f′ oscillates by more than {} at the sampling resolution",
                eps / SAFETY_FACTOR
            )));
        }
    }
    let delta = if m > 0.0 { delta1.min(eps / (2.0 * m)) } else { delta1 };
    let segments = (width / delta).ceil().max(1.0);
    if !segments.is_finite() || segments as usize > MAX_KNOTS {
        return Err(Error::Construction(format!("grid spacing {delta} underflows the interval")));
    }
    let segments = segments as usize;
    let knots: Vec<f64> = (0..=segments)
        .map(|i| if i == segments { b } else { a + width * i as f64 / segments as f64 })
        .collect();
    let values = knots.iter().map(|&x| f(x)).collect();
    PwlFunction::new(knots, values)
}

/// Points, values, derivatives and bump half-width for an exact interpolant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolantSpec {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
    pub half_width: f64,
}

impl InterpolantSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 || self.values.len() != n || self.derivatives.len() != n {
            return Err(Error::Construction("points, values and derivatives must have equal nonzero length".into()));
        }
        if self.points.iter().chain(&self.values).chain(&self.derivatives).any(|v| !v.is_finite()) {
            return Err(Error::Construction("spec entries must be finite".into()));
        }
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return Err(Error::Construction("half-width must be positive".into()));
        }
        let mut min_gap = f64::INFINITY;
        for w in self.points.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Construction("points must be strictly increasing".into()));
            }
            min_gap = min_gap.min(w[1] - w[0]);
        }
        if self.half_width >= min_gap / 5.0 {
            return Err(Error::Construction(format!(
                "half-width {} must be below a fifth of the smallest gap {min_gap}",
                self.half_width
            )));
        }
        Ok(())
    }
}

/// Sum of bumps `p_i`, each supported on `[σᵢ−2ε, σᵢ+2ε]`, with `h(σᵢ) = fᵢ` and `h′(σᵢ) = gᵢ`.
///
/// Each bump rises linearly from 0 at `σ−2ε` to `f−gε` at `σ−ε`, follows
/// `f + g(x−σ)` up to `σ+ε`, and falls back to 0 at `σ+2ε`. `σ` itself is a
/// knot holding `f`, and both segments meeting there carry slope `g`.
pub fn build_interpolant_1d(spec: &InterpolantSpec) -> Result<PwlFunction> {
    spec.validate()?;
    let e = spec.half_width;
    let mut knots = Vec::with_capacity(5 * spec.points.len());
    let mut values = Vec::with_capacity(knots.capacity());
    let mut slopes = Vec::with_capacity(knots.capacity());
    for (i, ((&s, &f), &g)) in spec.points.iter().zip(&spec.values).zip(&spec.derivatives).enumerate() {
        if i > 0 {
            // flat gap between the previous bump and this one
            slopes.push(0.0);
        }
        let left = f - g * e;
        let right = f + g * e;
        knots.extend([s - 2.0 * e, s - e, s, s + e, s + 2.0 * e]);
        values.extend([0.0, left, f, right, 0.0]);
        slopes.extend([left / e, g, g, -right / e]);
    }
    PwlFunction::with_slopes(knots, values, slopes)
}

/// One-hidden-layer ReLU network equal to `p` everywhere.
///
/// Unit `i` computes `relu(x − ξᵢ)`; its output weight is the slope change at
/// `ξᵢ`, with the last unit cancelling the final slope so the network is
/// constant beyond the last knot. The output bias is the first knot value.
pub fn pwl_to_relu_net(p: &PwlFunction) -> Result<Mlp> {
    let n = p.knots.len();
    let spec = MlpSpec::new(vec![1, n, 1], Activation::Relu, Head::Linear);
    let w0 = Tensor::new(1, n, vec![1.0; n])?;
    let b0 = Tensor::new(1, n, p.knots.iter().map(|k| -k).collect())?;
    let mut coeffs = Vec::with_capacity(n);
    let mut prev = 0.0;
    for i in 0..n {
        let next = if i + 1 < n { p.slopes[i] } else { 0.0 };
        coeffs.push(next - prev);
        prev = next;
    }
    let w1 = Tensor::new(n, 1, coeffs)?;
    let b1 = Tensor::scalar(p.values[0]);
    Mlp::from_params(spec, vec![w0, b0, w1, b1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianParams {
    pub fn density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        (-d * d / (2.0 * self.variance)).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }

    pub fn density_derivative(&self, x: f64) -> f64 {
        -(x - self.mean) / self.variance * self.density(x)
    }
}

/// Absolute tolerance of the bisection on `ln σ²`.
pub const GAUSSIAN_TOLERANCE: f64 = 1e-14;

/// Identifies the Gaussian density with value `alpha` and derivative `beta` at `x`.
///
/// With `s = ln σ²` and `r = β/α`, the density conditions reduce to
/// `2 ln(√(2π) α) = −s − r² eˢ`, whose right side strictly decreases in `s`;
/// bisection finds `s`, and then `μ = x + σ² r`.
pub fn recover_gaussian(x: f64, alpha: f64, beta: f64) -> Result<GaussianParams> {
    if !(x.is_finite() && beta.is_finite()) {
        return Err(Error::NotGaussian("inputs must be finite".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::NotGaussian(format!("density value must be positive, got {alpha}")));
    }
    let r = beta / alpha;
    let lhs = 2.0 * ((2.0 * std::f64::consts::PI).sqrt() * alpha).ln();
    let residual = |s: f64| -s - r * r * s.exp() - lhs;

    let (mut lo, mut hi) = (1e-12f64.ln(), 1e12f64.ln());
    let mut grown = 0;
    while !(residual(lo) >= 0.0 && residual(hi) <= 0.0) {
        let w = hi - lo;
        lo -= w;
        hi += w;
        grown += 1;
        if grown > 8 || !residual(lo).is_finite() {
            return Err(Error::NotGaussian("no sign change in the bracketing interval".into()));
        }
    }
    while hi - lo > GAUSSIAN_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let variance = (0.5 * (lo + hi)).exp();
    let mean = x + variance * r;
    if !(mean.is_finite() && variance.is_finite() && variance > 0.0) {
        return Err(Error::NotGaussian("recovered parameters are not finite".into()));
    }
    Ok(GaussianParams { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oscillation_window() {
        let s = [0.0, 1.0, 0.0, 3.0, 2.0];
        assert_eq!(max_oscillation(&s, 1), 3.0);
        assert_eq!(max_oscillation(&s, 0), 0.0);
        assert_eq!(max_oscillation(&s, 4), 3.0);
    }

    #[test]
    fn pwl_extrapolates_constantly() {
        let p = PwlFunction::new(vec![0.0, 1.0, 3.0], vec![1.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.eval(-5.0), 1.0);
        assert_eq!(p.eval(10.0), 0.0);
        assert_eq!(p.eval(1.0), 2.0);
        assert_eq!(p.eval(2.0), 1.0);
        assert_eq!(p.derivative(0.5), 1.0);
        assert_eq!(p.derivative(2.0), -1.0);
        assert_eq!(p.derivative(4.0), 0.0);
        assert!(PwlFunction::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn rejects_wide_bumps() {
        let spec = InterpolantSpec {
            points: vec![0.0, 1.0],
            values: vec![0.0, 0.0],
            derivatives: vec![0.0, 0.0],
            half_width: 0.2,
        };
        assert!(build_interpolant_1d(&spec).is_err());
    }

    #[test]
    fn rejects_nonpositive_density() {
        assert!(matches!(recover_gaussian(0.0, 0.0, 1.0), Err(Error::NotGaussian(_))));
        assert!(matches!(recover_gaussian(0.0, -1.0, 1.0), Err(Error::NotGaussian(_))));
    }
}
