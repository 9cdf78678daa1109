use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sobolev_autodiff::{fd_grad, Tape, Tensor};
use sobolev_core::distill::{distill_loss, make_synthetic_teacher, run_distillation, DistillConfig, TeacherPolicy};
use sobolev_core::nn::{Activation, Head, Mlp, MlpSpec};
use sobolev_core::regression::Mode;
use sobolev_core::seeds;
use sobolev_core::sobolev::{LossKind, ProjectionSampler};

fn states(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeds::rng(seed);
    Tensor::new(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn student(d: usize, a: usize, seed: u64) -> Mlp {
    Mlp::init(MlpSpec::new(vec![d, 12, a], Activation::Tanh, Head::LogSoftmax), seed).unwrap()
}

/// Total loss, value term and derivative term for a fresh sampler seeded with `sampler_seed`.
fn loss_parts(net: &Mlp, teacher: &TeacherPolicy, s: &Tensor, alpha: f64, sampler_seed: u64) -> (f64, f64, f64) {
    let mut sampler = ProjectionSampler::new(teacher.action_count(), 1, sampler_seed).unwrap();
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let l = distill_loss(&mut tape, &b, teacher, s, alpha, LossKind::L2, &mut sampler).unwrap();
    let d = l.derivative_terms.first().map(|t| tape.scalar_value(*t).unwrap()).unwrap_or(0.0);
    (tape.scalar_value(l.total).unwrap(), tape.scalar_value(l.value_term).unwrap(), d)
}

#[test]
fn teacher_probabilities_normalize_and_are_deterministic() {
    let t = make_synthetic_teacher(16, 6, &[64, 64], 3).unwrap();
    let s = states(1000, 16, 1);
    let lp = t.log_probs(&s).unwrap();
    for r in 0..1000 {
        let sum: f64 = lp.row_slice(r).iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(lp.row_slice(r).iter().all(|v| v.is_finite()));
    }
    let again = make_synthetic_teacher(16, 6, &[64, 64], 3).unwrap();
    assert_eq!(again.log_probs(&s).unwrap(), lp);
    assert_ne!(make_synthetic_teacher(16, 6, &[64, 64], 4).unwrap().log_probs(&s).unwrap(), lp);
    assert!(make_synthetic_teacher(1, 6, &[8], 0).is_err());
    assert!(make_synthetic_teacher(4, 1, &[8], 0).is_err());
}

#[test]
fn teacher_is_not_uniform() {
    let t = make_synthetic_teacher(16, 6, &[64, 64], 0).unwrap();
    let lp = t.log_probs(&states(500, 16, 2)).unwrap();
    let mut counts = [0usize; 6];
    for r in 0..500 {
        let row = lp.row_slice(r);
        let best = (0..6).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        counts[best] += 1;
    }
    assert!(counts.iter().filter(|&&c| c > 0).count() >= 2, "{counts:?}");
}

#[test]
fn huge_temperature_gives_uniform_policy() {
    let t = TeacherPolicy::synthetic(16, 6, &[64, 64], 0, 1e6).unwrap();
    let lp = t.log_probs(&states(1000, 16, 5)).unwrap();
    let u = 1.0f64 / 6.0;
    for r in 0..1000 {
        let kl: f64 = lp.row_slice(r).iter().map(|q| u * (u.ln() - q)).sum();
        assert!(kl < 1e-6, "KL {kl:e}");
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let t = make_synthetic_teacher(5, 3, &[16], 9).unwrap();
    let s = states(4, 5, 3);
    let (_, jac) = t.log_probs_and_jacobian(&s).unwrap();
    for i in 0..4 {
        for (k, j) in jac.iter().enumerate() {
            let fd = fd_grad(|x| t.log_probs(&Tensor::row(x)).unwrap().data()[k], s.row_slice(i), 1e-6).unwrap();
            for c in 0..5 {
                assert!((j.get(i, c) - fd[c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn student_equal_to_teacher_has_zero_loss() {
    let t = make_synthetic_teacher(8, 4, &[16, 16], 2).unwrap();
    let copy = t.network().clone();
    let s = states(64, 8, 7);
    for alpha in [0.0, 0.5, 1.0, 10.0] {
        let (total, _, _) = loss_parts(&copy, &t, &s, alpha, 1);
        assert!(total.abs() < 1e-10, "α={alpha}: {total:e}");
    }
}

#[test]
fn zero_alpha_is_plain_mean_kl() {
    let t = make_synthetic_teacher(8, 4, &[16], 2).unwrap();
    let net = student(8, 4, 1);
    let s = states(32, 8, 8);
    let p = net.predict(&s).unwrap();
    let q = t.log_probs(&s).unwrap();
    let mut kl = 0.0;
    for r in 0..32 {
        for k in 0..4 {
            let pk = p.get(r, k);
            kl += pk.exp() * (pk - q.get(r, k));
        }
    }
    kl /= 32.0;
    let (total, value, deriv) = loss_parts(&net, &t, &s, 0.0, 1);
    assert!((total - kl).abs() < 1e-12);
    assert_eq!(total, value);
    assert_eq!(deriv, 0.0);
}

#[test]
fn derivative_term_ignores_constant_logit_shift() {
    let t = make_synthetic_teacher(8, 4, &[16], 2).unwrap();
    let net = student(8, 4, 1);
    let mut shifted = net.clone();
    let last = shifted.params().len() - 1;
    for b in shifted.params_mut()[last].data_mut() {
        *b += 3.7;
    }
    let s = states(32, 8, 8);
    let (_, v0, d0) = loss_parts(&net, &t, &s, 1.0, 11);
    let (_, v1, d1) = loss_parts(&shifted, &t, &s, 1.0, 11);
    assert!((d0 - d1).abs() <= 1e-12 * d0.max(1.0));
    assert!((v0 - v1).abs() <= 1e-12 * v0.max(1.0));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let t = make_synthetic_teacher(4, 3, &[8], 2).unwrap();
    let net = student(4, 3, 1);
    let s = states(6, 4, 4);
    let mut sampler = ProjectionSampler::new(3, 2, 5).unwrap();
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    let l = distill_loss(&mut tape, &b, &t, &s, 1.0, LossKind::L2, &mut sampler).unwrap();
    let grads = tape.grad(l.total, b.params()).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| tape.value(*g).unwrap().data().to_vec()).collect();

    let theta = net.flat_params();
    let mut rng = seeds::rng(77);
    let coords = rand::seq::index::sample(&mut rng, theta.len(), 40).into_vec();
    let picked: Vec<f64> = coords.iter().map(|&i| theta[i]).collect();
    let fd = fd_grad(
        |v| {
            let mut th = theta.clone();
            for (&i, &x) in coords.iter().zip(v) {
                th[i] = x;
            }
            let mut moved = net.clone();
            moved.set_flat_params(&th).unwrap();
            let mut sampler = ProjectionSampler::new(3, 2, 5).unwrap();
            let mut tape = Tape::new();
            let b = moved.bind(&mut tape);
            let l = distill_loss(&mut tape, &b, &t, &s, 1.0, LossKind::L2, &mut sampler).unwrap();
            tape.scalar_value(l.total).unwrap()
        },
        &picked,
        1e-6,
    )
    .unwrap();
    let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    let num: f64 = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|y| y * y).sum::<f64>().sqrt();
    assert!(num / den < 1e-4, "relative error {:e}", num / den);
}

#[test]
fn two_action_projection_estimate_is_stable() {
    let t = make_synthetic_teacher(6, 2, &[16], 2).unwrap();
    let net = student(6, 2, 3);
    let s = states(50, 6, 6);
    let estimate = |seed| {
        let mut sampler = ProjectionSampler::new(2, 2000, seed).unwrap();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let l = distill_loss(&mut tape, &b, &t, &s, 1.0, LossKind::L2, &mut sampler).unwrap();
        tape.scalar_value(l.derivative_terms[0]).unwrap()
    };
    let (a, b) = (estimate(1), estimate(2));
    assert!((a - b).abs() / a.max(b) < 0.02, "{a} vs {b}");
}

#[test]
fn empty_state_batch_rejected() {
    let t = make_synthetic_teacher(4, 3, &[8], 2).unwrap();
    let net = student(4, 3, 1);
    let mut sampler = ProjectionSampler::new(3, 1, 5).unwrap();
    let mut tape = Tape::new();
    let b = net.bind(&mut tape);
    assert!(distill_loss(&mut tape, &b, &t, &Tensor::zeros(0, 4), 1.0, LossKind::L2, &mut sampler).is_err());
}

fn small_config(seed: u64) -> DistillConfig {
    DistillConfig {
        state_dim: 6,
        actions: 3,
        teacher_hidden: vec![16],
        student_hidden: vec![16],
        train_pool: 400,
        test_size: 200,
        batch_size: 50,
        steps: 300,
        learning_rate: 1e-3,
        seed,
        ..DistillConfig::default()
    }
}

#[test]
fn runs_are_deterministic_and_record_their_setup() {
    for mode in Mode::ALL {
        let a = run_distillation(&small_config(3), mode).unwrap();
        let b = run_distillation(&small_config(3), mode).unwrap();
        assert_eq!(a.kl_test.to_bits(), b.kl_test.to_bits());
        assert_eq!(a.test_grad_mse.to_bits(), b.test_grad_mse.to_bits());
        assert_eq!(a.top1_err, b.top1_err);
        assert_eq!(a.n, 400);
        assert!(a.kl_test >= 0.0 && (0.0..=1.0).contains(&a.top1_err));
        if mode == Mode::Regular {
            assert_eq!(a.alpha, 0.0);
        }
    }
    let mut tenth = small_config(3);
    tenth.data_fraction = 0.1;
    assert_eq!(run_distillation(&tenth, Mode::Sobolev).unwrap().n, 40);
}

#[test]
fn invalid_configs_rejected() {
    for f in [0.0, 1.5, -0.1] {
        let mut c = small_config(0);
        c.data_fraction = f;
        assert!(run_distillation(&c, Mode::Regular).is_err());
    }
    let mut c = small_config(0);
    c.alpha = -1.0;
    assert!(run_distillation(&c, Mode::Sobolev).is_err());
}

#[test]
fn student_learns_easy_teacher() {
    let mut c = small_config(1);
    c.steps = 3000;
    let r = run_distillation(&c, Mode::Sobolev).unwrap();
    assert!(r.top1_err < 0.1, "top-1 error {}", r.top1_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000, alpha in 0.0f64..5.0) {
        let t = make_synthetic_teacher(5, 4, &[8], seed).unwrap();
        let net = student(5, 4, seed + 1);
        let mut rng = seeds::rng(seed);
        let s = states(8, 5, rng.random());
        let (total, value, deriv) = loss_parts(&net, &t, &s, alpha, seed);
        prop_assert!(total >= 0.0 && value >= 0.0 && deriv >= 0.0);
    }
}
