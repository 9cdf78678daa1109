//! Two-dimensional optimisation benchmarks with closed-form gradients.

use std::f64::consts::{E, PI};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to Bukin's non-differentiable set are rejected.
pub const BUKIN_RIDGE_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Ackley,
    Beale,
    Booth,
    Bukin,
    McCormick,
    Rosenbrock,
    StyblinskiTang,
}

/// A scalar target on a rectangle of the plane.
pub trait Objective: Sync {
    fn name(&self) -> &str;
    fn domain(&self) -> [(f64, f64); 2];
    fn eval(&self, p: [f64; 2]) -> Result<f64>;
    fn grad(&self, p: [f64; 2]) -> Result<[f64; 2]>;

    /// Whether a sampled point must be redrawn before it can carry a gradient label.
    fn reject_sample(&self, _p: [f64; 2]) -> bool {
        false
    }

    /// `n` i.i.d. uniform points over the domain, redrawing rejected ones.
    fn sample_domain(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<[f64; 2]> {
        let [(x0, x1), (y0, y1)] = self.domain();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = [rng.random_range(x0..=x1), rng.random_range(y0..=y1)];
            if !self.reject_sample(p) {
                out.push(p);
            }
        }
        out
    }
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::Ackley,
        Benchmark::Beale,
        Benchmark::Booth,
        Benchmark::Bukin,
        Benchmark::McCormick,
        Benchmark::Rosenbrock,
        Benchmark::StyblinskiTang,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Ackley => "ackley",
            Benchmark::Beale => "beale",
            Benchmark::Booth => "booth",
            Benchmark::Bukin => "bukin",
            Benchmark::McCormick => "mccormick",
            Benchmark::Rosenbrock => "rosenbrock",
            Benchmark::StyblinskiTang => "styblinski_tang",
        }
    }

    pub fn bounds(self) -> [(f64, f64); 2] {
        match self {
            Benchmark::Ackley | Benchmark::StyblinskiTang => [(-5.0, 5.0), (-5.0, 5.0)],
            Benchmark::Beale => [(-4.5, 4.5), (-4.5, 4.5)],
            Benchmark::Booth => [(-10.0, 10.0), (-10.0, 10.0)],
            Benchmark::Bukin => [(-15.0, -5.0), (-3.0, 3.0)],
            Benchmark::McCormick => [(-1.5, 4.0), (-3.0, 4.0)],
            Benchmark::Rosenbrock => [(-2.0, 2.0), (-2.0, 2.0)],
        }
    }

    fn check_domain(self, [x, y]: [f64; 2]) -> Result<()> {
        let [(x0, x1), (y0, y1)] = self.bounds();
        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            Ok(())
        } else {
            Err(Error::OutsideDomain { function: self.as_str(), x, y })
        }
    }

    /// Formula value without the domain check.
    pub fn value_unchecked(self, [x, y]: [f64; 2]) -> f64 {
        match self {
            Benchmark::Ackley => {
                let r = (0.5 * (x * x + y * y)).sqrt();
                let c = 0.5 * ((2.0 * PI * x).cos() + (2.0 * PI * y).cos());
                -20.0 * (-0.2 * r).exp() - c.exp() + E + 20.0
            }
            Benchmark::Beale => {
                let a = 1.5 - x + x * y;
                let b = 2.25 - x + x * y * y;
                let c = 2.625 - x + x * y * y * y;
                a * a + b * b + c * c
            }
            Benchmark::Booth => {
                let a = x + 2.0 * y - 7.0;
                let b = 2.0 * x + y - 5.0;
                a * a + b * b
            }
            Benchmark::Bukin => 100.0 * (y - 0.01 * x * x).abs().sqrt() + 0.01 * (x + 10.0).abs(),
            Benchmark::McCormick => (x + y).sin() + (x - y) * (x - y) - 1.5 * x + 2.5 * y + 1.0,
            Benchmark::Rosenbrock => 100.0 * (y - x * x).powi(2) + (x - 1.0).powi(2),
            Benchmark::StyblinskiTang => {
                0.5 * (x.powi(4) - 16.0 * x * x + 5.0 * x + y.powi(4) - 16.0 * y * y + 5.0 * y)
            }
        }
    }

    /// Closed-form gradient without domain or differentiability checks.
    ///
    /// Ackley's cone at the origin yields the zero subgradient for its radial term.
    pub fn gradient_unchecked(self, [x, y]: [f64; 2]) -> [f64; 2] {
        match self {
            Benchmark::Ackley => {
                let r = (0.5 * (x * x + y * y)).sqrt();
                let c = 0.5 * ((2.0 * PI * x).cos() + (2.0 * PI * y).cos());
                let radial = if r > 0.0 { 2.0 * (-0.2 * r).exp() / r } else { 0.0 };
                let wave = PI * c.exp();
                [radial * x + wave * (2.0 * PI * x).sin(), radial * y + wave * (2.0 * PI * y).sin()]
            }
            Benchmark::Beale => {
                let a = 1.5 - x + x * y;
                let b = 2.25 - x + x * y * y;
                let c = 2.625 - x + x * y * y * y;
                [
                    2.0 * a * (y - 1.0) + 2.0 * b * (y * y - 1.0) + 2.0 * c * (y * y * y - 1.0),
                    2.0 * a * x + 4.0 * b * x * y + 6.0 * c * x * y * y,
                ]
            }
            Benchmark::Booth => {
                let a = x + 2.0 * y - 7.0;
                let b = 2.0 * x + y - 5.0;
                [2.0 * a + 4.0 * b, 4.0 * a + 2.0 * b]
            }
            Benchmark::Bukin => {
                let u = y - 0.01 * x * x;
                let du = 50.0 * u.signum() / u.abs().sqrt();
                [du * (-0.02 * x) + 0.01 * (x + 10.0).signum(), du]
            }
            Benchmark::McCormick => {
                let c = (x + y).cos();
                [c + 2.0 * (x - y) - 1.5, c - 2.0 * (x - y) + 2.5]
            }
            Benchmark::Rosenbrock => {
                [-400.0 * x * (y - x * x) + 2.0 * (x - 1.0), 200.0 * (y - x * x)]
            }
            Benchmark::StyblinskiTang => {
                [0.5 * (4.0 * x.powi(3) - 32.0 * x + 5.0), 0.5 * (4.0 * y.powi(3) - 32.0 * y + 5.0)]
            }
        }
    }

    /// Distance-like measure to Bukin's kink set: `min(|y − 0.01x²|, |x + 10|)`.
    pub fn bukin_ridge_distance([x, y]: [f64; 2]) -> f64 {
        (y - 0.01 * x * x).abs().min((x + 10.0).abs())
    }

    /// All points of a `nx × ny` lattice spanning the domain, x varying slowest.
    pub fn lattice(self, nx: usize, ny: usize) -> Vec<[f64; 2]> {
        lattice(self.bounds(), nx, ny)
    }

    /// Writes `x,y,f,fx,fy` rows over a lattice; gradients at kinks are written as `NaN`.
    pub fn write_grid<W: Write>(self, nx: usize, ny: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "f", "fx", "fy"])?;
        for p in self.lattice(nx, ny) {
            let f = self.eval(p)?;
            let g = self.grad(p).unwrap_or([f64::NAN; 2]);
            out.write_record([p[0], p[1], f, g[0], g[1]].map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn lattice(bounds: [(f64, f64); 2], nx: usize, ny: usize) -> Vec<[f64; 2]> {
    let axis = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![0.5 * (lo + hi)],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        }
    };
    let xs = axis(bounds[0], nx);
    let ys = axis(bounds[1], ny);
    xs.iter().flat_map(|&x| ys.iter().map(move |&y| [x, y])).collect()
}

impl Objective for Benchmark {
    fn name(&self) -> &str {
        self.as_str()
    }

    fn domain(&self) -> [(f64, f64); 2] {
        self.bounds()
    }

    fn eval(&self, p: [f64; 2]) -> Result<f64> {
        self.check_domain(p)?;
        Ok(self.value_unchecked(p))
    }

    fn grad(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        self.check_domain(p)?;
        if *self == Benchmark::Bukin && Self::bukin_ridge_distance(p) <= BUKIN_RIDGE_GUARD {
            return Err(Error::NotDifferentiable { function: self.as_str(), x: p[0], y: p[1] });
        }
        Ok(self.gradient_unchecked(p))
    }

    fn reject_sample(&self, p: [f64; 2]) -> bool {
        *self == Benchmark::Bukin && Self::bukin_ridge_distance(p) <= BUKIN_RIDGE_GUARD
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown benchmark function `{s}`")))
    }
}
