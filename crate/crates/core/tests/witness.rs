use rand::Rng;
use sobolev_autodiff::{Tape, Tensor};
use sobolev_core::nn::{Activation, Head, Mlp, MlpSpec, OptimizerConfig, OptimizerState};
use sobolev_core::seeds;
use sobolev_core::sobolev::{discrepancy, sobolev_loss, LossKind, LossSpec, SobolevBatch};
use sobolev_core::witness::{
    approximate_c1_by_pwl, build_interpolant_1d, pwl_to_relu_net, recover_gaussian, GaussianParams, InterpolantSpec,
    PwlFunction,
};
use sobolev_core::Error;

fn grid(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

fn net_at(net: &Mlp, xs: &[f64]) -> Vec<f64> {
    net.predict(&Tensor::column(xs)).unwrap().into_data()
}

fn mixed_spec() -> InterpolantSpec {
    InterpolantSpec {
        points: vec![-1.0, 0.5, 2.0],
        values: vec![0.7, -1.2, 3.0],
        derivatives: vec![2.5, -4.0, 0.0],
        half_width: 0.1,
    }
}

#[test]
fn linear_function_is_reproduced() {
    let p = approximate_c1_by_pwl(|x| 3.0 * x - 1.0, |_| 3.0, (-2.0, 2.0), 0.5).unwrap();
    for x in grid(-2.0, 2.0, 1001) {
        assert!((p.eval(x) - (3.0 * x - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn sine_approximation_meets_both_bounds() {
    let eps = 0.1;
    let two_pi = 2.0 * std::f64::consts::PI;
    let p = approximate_c1_by_pwl(f64::sin, f64::cos, (0.0, two_pi), eps).unwrap();
    for (k, v) in p.knots().iter().zip(p.values()) {
        assert_eq!(*v, k.sin());
    }
    let knots = p.knots();
    for x in grid(0.0, two_pi, 10_000) {
        assert!((p.eval(x) - x.sin()).abs() <= eps);
        if knots.binary_search_by(|k| k.total_cmp(&x)).is_err() {
            assert!((p.derivative(x) - x.cos()).abs() <= eps, "derivative bound at {x}");
        }
    }
}

#[test]
fn approximation_rejects_bad_input() {
    assert!(approximate_c1_by_pwl(f64::sin, f64::cos, (1.0, 0.0), 0.1).is_err());
    assert!(approximate_c1_by_pwl(f64::sin, f64::cos, (0.0, 1.0), 0.0).is_err());
    // A derivative with a jump cannot be matched to within a tiny ε.
    let r = approximate_c1_by_pwl(f64::abs, f64::signum, (-1.0, 1.0), 0.1);
    assert!(matches!(r, Err(Error::Construction(_))));
}

#[test]
fn single_bump_readout() {
    let spec = InterpolantSpec { points: vec![0.0], values: vec![1.0], derivatives: vec![0.0], half_width: 0.1 };
    let h = build_interpolant_1d(&spec).unwrap();
    assert_eq!(h.eval(0.0), 1.0);
    assert_eq!(h.derivative(0.0), 0.0);
    assert_eq!(h.eval(0.3), 0.0);
    assert_eq!(h.eval(-0.3), 0.0);
}

#[test]
fn interpolant_matches_values_and_derivatives() {
    let spec = mixed_spec();
    let h = build_interpolant_1d(&spec).unwrap();
    let step = 1e-8;
    for ((&s, &f), &g) in spec.points.iter().zip(&spec.values).zip(&spec.derivatives) {
        assert!((h.eval(s) - f).abs() <= 1e-12);
        let fd = (h.eval(s + step) - h.eval(s - step)) / (2.0 * step);
        assert!((fd - g).abs() <= 1e-6, "fd {fd} vs {g}");
        assert_eq!(h.derivative(s), g);
    }
    // zero away from every bump support
    for x in [-5.0, -0.5, 0.0, 1.0, 1.5, 2.5, 9.0] {
        assert_eq!(h.eval(x), 0.0);
    }
}

#[test]
fn interpolant_has_exactly_zero_sobolev_loss() {
    let spec = mixed_spec();
    let h = build_interpolant_1d(&spec).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(Tensor::column(&spec.points.iter().map(|&s| h.eval(s)).collect::<Vec<_>>()));
    let hd = tape.leaf(Tensor::column(&spec.points.iter().map(|&s| h.derivative(s)).collect::<Vec<_>>()));
    let f = tape.leaf(Tensor::column(&spec.values));
    let g = tape.leaf(Tensor::column(&spec.derivatives));
    let value = discrepancy(&mut tape, LossKind::L2, hv, f).unwrap();
    let deriv = discrepancy(&mut tape, LossKind::L2, hd, g).unwrap();
    let total = tape.add(value, deriv).unwrap();
    assert_eq!(tape.scalar_value(total).unwrap(), 0.0);
}

#[test]
fn interpolant_rejects_wide_bumps() {
    let mut spec = mixed_spec();
    spec.half_width = 0.3;
    assert!(build_interpolant_1d(&spec).is_err());
    spec.half_width = 0.1;
    spec.points = vec![0.0, 0.0, 1.0];
    assert!(build_interpolant_1d(&spec).is_err());
}

#[test]
fn relu_network_reproduces_relu() {
    let p = PwlFunction::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
    let net = pwl_to_relu_net(&p).unwrap();
    let xs: Vec<f64> = grid(-1.0, 1.0, 10_000).collect();
    for (x, y) in xs.iter().zip(net_at(&net, &xs)) {
        assert_eq!(y, x.max(0.0));
    }
}

#[test]
fn relu_network_matches_random_pwl() {
    let mut rng = seeds::rng(21);
    for _ in 0..5 {
        let mut knots: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        knots.sort_by(f64::total_cmp);
        let values: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = PwlFunction::new(knots.clone(), values).unwrap();
        let net = pwl_to_relu_net(&p).unwrap();
        let xs: Vec<f64> = grid(-4.0, 4.0, 10_000).collect();
        let ys = net_at(&net, &xs);
        let dev = xs.iter().zip(&ys).map(|(x, y)| (p.eval(*x) - y).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-10, "max deviation {dev:e}");

        for w in knots.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let (_, g) = net.predict_with_input_grad(&Tensor::scalar(mid)).unwrap();
            assert!((g.data()[0] - p.derivative(mid)).abs() < 1e-9);
        }
    }
}

#[test]
fn interpolant_network_matches_interpolant() {
    let h = build_interpolant_1d(&mixed_spec()).unwrap();
    let net = pwl_to_relu_net(&h).unwrap();
    let xs: Vec<f64> = grid(-2.0, 3.0, 10_000).collect();
    let ys = net_at(&net, &xs);
    let dev = xs.iter().zip(&ys).map(|(x, y)| (h.eval(*x) - y).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-10, "max deviation {dev:e}");
}

#[test]
fn gaussian_examples() {
    let std_normal = recover_gaussian(0.0, 1.0 / (2.0 * std::f64::consts::PI).sqrt(), 0.0).unwrap();
    assert!((std_normal.mean).abs() < 1e-9);
    assert!((std_normal.variance - 1.0).abs() < 1e-9);

    let truth = GaussianParams { mean: 2.0, variance: 1.0 };
    let got = recover_gaussian(0.0, truth.density(0.0), truth.density_derivative(0.0)).unwrap();
    assert!((got.mean - 2.0).abs() < 1e-9);
    assert!((got.variance - 1.0).abs() < 1e-9);
}

#[test]
fn gaussian_round_trips() {
    let mut rng = seeds::rng(1000);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mean = rng.random_range(-3.0..3.0);
        let variance = rng.random_range(0.25..4.0);
        let sd = f64::sqrt(variance);
        let x = rng.random_range(mean - 3.0 * sd..mean + 3.0 * sd);
        let truth = GaussianParams { mean, variance };
        let (a, b) = (truth.density(x), truth.density_derivative(x));
        let got = recover_gaussian(x, a, b).unwrap();
        worst = worst.max((got.mean - mean).abs()).max((got.variance - variance).abs());
        assert!((got.density(x) - a).abs() <= 1e-9 * a);
        assert!((got.density_derivative(x) - b).abs() <= 1e-9 * b.abs().max(a));
    }
    assert!(worst < 1e-8, "max parameter error {worst:e}");
}

#[test]
fn inconsistent_gaussian_data_rejected() {
    // No Gaussian density exceeds 1/√(2πσ²) and a huge value forces σ² below any bracket.
    assert!(matches!(recover_gaussian(0.0, 1e300, 1e300), Err(Error::NotGaussian(_))));
    assert!(recover_gaussian(0.0, 0.0, 1.0).is_err());
    assert!(recover_gaussian(0.0, -1.0, 1.0).is_err());
    assert!(recover_gaussian(f64::NAN, 1.0, 1.0).is_err());
}

#[test]
fn trained_relu_net_reaches_near_zero_sobolev_loss() {
    // Zero initial biases put every first-layer kink at the origin, so points straddle it.
    let spec = InterpolantSpec {
        points: vec![-1.0, 0.0, 1.0],
        values: vec![0.5, -0.3, 0.8],
        derivatives: vec![1.0, -0.5, 0.7],
        half_width: 0.1,
    };
    spec.validate().unwrap();
    let mut net = Mlp::init(MlpSpec::new(vec![1, 64, 64, 1], Activation::Relu, Head::Linear), 0).unwrap();
    let batch = SobolevBatch::new(Tensor::column(&spec.points), Tensor::column(&spec.values))
        .unwrap()
        .with_grads(vec![Tensor::column(&spec.derivatives)])
        .unwrap();
    let loss_spec = LossSpec::first_order(LossKind::L2, LossKind::L2);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
    let mut last = f64::INFINITY;
    for _ in 0..10_000 {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let l = sobolev_loss(&mut tape, &b, &batch, &loss_spec).unwrap();
        last = tape.scalar_value(l.total).unwrap();
        if last < 1e-7 {
            break;
        }
        let grads = tape.grad(l.total, b.params()).unwrap();
        let grads: Vec<Tensor> = grads.iter().map(|g| tape.value(*g).unwrap().clone()).collect();
        opt.step(net.params_mut(), &grads).unwrap();
    }
    assert!(last < 1e-6, "final loss {last:e}");
}
