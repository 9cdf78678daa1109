use sobolev_autodiff::{Tape, Tensor};
use sobolev_core::nn::{Activation, Head, Mlp, MlpSpec, OptimizerConfig, OptimizerState};
use sobolev_core::sobolev::LossKind;
use sobolev_core::syngrad::{
    backprop_step, decoupled_step, mean_std, per_sample_cross_entropy, run_sg_experiment, sg_losses, MixtureSpec,
    Scheme, SgModule, SgOptimizers, SgTrainConfig, SgVariant, SplitNetwork,
};

fn classifier(seed: u64) -> Mlp {
    Mlp::init(MlpSpec::new(vec![6, 10, 9, 8, 4], Activation::Relu, Head::LogSoftmax), seed).unwrap()
}

fn batch() -> (Tensor, Tensor) {
    let spec = MixtureSpec { classes: 4, dim: 6, train_size: 32, test_size: 1, ..MixtureSpec::default() };
    let (train, _) = spec.generate().unwrap();
    (train.x, train.onehot)
}

fn scalar_loss(variant: SgVariant, m: f64, l: f64, sg: &[f64], tg: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::scalar(m));
    let l = tape.leaf(Tensor::scalar(l));
    let sg = tape.leaf(Tensor::row(sg));
    let tg = tape.leaf(Tensor::row(tg));
    let out = sg_losses(&mut tape, variant, Some(m), sg, l, tg, LossKind::L1).unwrap();
    tape.scalar_value(out).unwrap()
}

#[test]
fn hand_computed_module_losses() {
    assert_eq!(scalar_loss(SgVariant::Sobolev, 2.0, 5.0, &[1.0, 0.0], &[0.0, 1.0]), 5.0);
    assert_eq!(scalar_loss(SgVariant::Critic, 2.0, 5.0, &[1.0, 0.0], &[0.0, 1.0]), 3.0);
    assert_eq!(scalar_loss(SgVariant::DirectSg, 2.0, 5.0, &[1.0, 0.0], &[0.0, 1.0]), 2.0);
    assert_eq!(scalar_loss(SgVariant::Sobolev, 1.5, 1.5, &[0.3, -2.0], &[0.3, -2.0]), 0.0);
}

#[test]
fn critic_ignores_gradient_mismatch() {
    let a = scalar_loss(SgVariant::Critic, 1.0, 1.0, &[0.0, 0.0], &[0.5, 0.5]);
    let b = scalar_loss(SgVariant::Critic, 1.0, 1.0, &[9.0, -9.0], &[0.5, 0.5]);
    assert_eq!(a, 0.0);
    assert_eq!(a, b);
}

#[test]
fn noprop_has_no_module_loss() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    assert!(sg_losses(&mut tape, SgVariant::Noprop, Some(z), z, z, z, LossKind::L1).is_err());
    assert!(sg_losses(&mut tape, SgVariant::Critic, None, z, z, z, LossKind::L1).is_err());
    assert!(SgModule::new(SgVariant::Noprop, 4, 2, &[8], 0).is_err());
}

#[test]
fn names_round_trip() {
    for v in SgVariant::ALL {
        assert_eq!(v.to_string().parse::<SgVariant>().unwrap(), v);
        let s = Scheme::Decoupled(v);
        assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
    }
    assert_eq!("backprop".parse::<Scheme>().unwrap(), Scheme::Backprop);
    assert!("hogwild".parse::<Scheme>().is_err());
}

#[test]
fn split_composition_equals_full_network() {
    let full = classifier(3);
    let (x, _) = batch();
    let expected = full.predict(&x).unwrap();
    for splits in [vec![1], vec![2], vec![1, 2, 3], vec![3]] {
        let split = SplitNetwork::split(&full, &splits).unwrap();
        assert_eq!(split.boundaries(), splits.len());
        let mut tape = Tape::new();
        let bound = split.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let out = split.forward(&mut tape, &bound, xn).unwrap();
        assert_eq!(tape.value(out).unwrap(), &expected);
        assert_eq!(split.merged().unwrap(), full);
    }
    assert!(SplitNetwork::split(&full, &[0]).is_err());
    assert!(SplitNetwork::split(&full, &[4]).is_err());
    assert!(SplitNetwork::split(&full, &[2, 2]).is_err());
}

#[test]
fn oracle_step_equals_backprop_bit_exactly() {
    let (x, y) = batch();
    let cfg = OptimizerConfig::adam(1e-3);
    for splits in [vec![1], vec![2], vec![1, 2, 3]] {
        let mut full = classifier(5);
        let mut split = SplitNetwork::split(&full, &splits).unwrap();
        let mut modules: Vec<SgModule> = splits.iter().map(|_| SgModule::oracle()).collect();
        let mut opts = SgOptimizers::new(&split, &modules, cfg, cfg);
        let mut opt = OptimizerState::new(cfg);
        for _ in 0..3 {
            let (loss, grads) = backprop_step(&mut full, &mut opt, &x, &y).unwrap();
            let report = decoupled_step(&mut split, &mut modules, &mut opts, &x, &y, SgVariant::Sobolev).unwrap();
            assert_eq!(report.task_loss.to_bits(), loss.to_bits());
            let flat: Vec<Tensor> = report.part_grads.concat();
            assert_eq!(flat, grads, "gradients differ for splits {splits:?}");
            assert_eq!(split.merged().unwrap(), full, "parameters differ for splits {splits:?}");
        }
    }
}

#[test]
fn noprop_leaves_upstream_untouched() {
    let (x, y) = batch();
    let full = classifier(2);
    let mut split = SplitNetwork::split(&full, &[1, 2]).unwrap();
    let before = split.clone();
    let cfg = OptimizerConfig::adam(1e-2);
    let mut opts = SgOptimizers::new(&split, &[], cfg, cfg);
    let report = decoupled_step(&mut split, &mut [], &mut opts, &x, &y, SgVariant::Noprop).unwrap();
    assert!(report.part_grads[0].is_empty() && report.part_grads[1].is_empty());
    assert_eq!(split.parts()[0], before.parts()[0]);
    assert_eq!(split.parts()[1], before.parts()[1]);
    assert_ne!(split.parts()[2], before.parts()[2]);
}

#[test]
fn module_count_must_match_boundaries() {
    let (x, y) = batch();
    let mut split = SplitNetwork::split(&classifier(2), &[1, 2]).unwrap();
    let mut modules = vec![SgModule::oracle()];
    let cfg = OptimizerConfig::adam(1e-3);
    let mut opts = SgOptimizers::new(&split, &modules, cfg, cfg);
    assert!(decoupled_step(&mut split, &mut modules, &mut opts, &x, &y, SgVariant::Sobolev).is_err());
}

#[test]
fn loss_model_gradient_is_its_input_gradient() {
    let (h, y) = {
        let (x, y) = batch();
        (Tensor::new(x.rows(), 6, x.data().to_vec()).unwrap(), y)
    };
    let module = SgModule::new(SgVariant::Sobolev, 6, 4, &[12], 9).unwrap();
    let net = module.network().unwrap();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let hn = tape.leaf(h.clone());
    let yn = tape.leaf(y.clone());
    let (m, sg) = module.predict(&mut tape, &bound, hn, yn).unwrap();
    let sg = tape.value(sg).unwrap().clone();
    let m = tape.value(m.unwrap()).unwrap().clone();
    assert_eq!(sg.shape(), h.shape());

    // Independent evaluation: per-sample gradient of −log p_y through a fresh tape.
    for i in 0..h.rows() {
        let mut t = Tape::new();
        let b = net.bind(&mut t);
        let hi = t.leaf(Tensor::row(h.row_slice(i)));
        let yi = t.leaf(Tensor::row(y.row_slice(i)));
        let input = t.concat_cols(hi, yi).unwrap();
        let lp = sobolev_core::nn::Model::forward(&b, &mut t, input).unwrap();
        let mi = per_sample_cross_entropy(&mut t, lp, yi).unwrap();
        let s = t.sum(mi).unwrap();
        let g = t.grad(s, &[hi]).unwrap()[0];
        let g = t.value(g).unwrap();
        for c in 0..6 {
            assert!((g.data()[c] - sg.get(i, c)).abs() < 1e-14);
        }
        assert!((t.scalar_value(s).unwrap() - m.get(i, 0)).abs() < 1e-14);
    }
}

#[test]
fn critic_squared_error_is_log_probability_gap() {
    let (x, y) = batch();
    let full = classifier(4);
    let split = SplitNetwork::split(&full, &[2]).unwrap();
    let module = SgModule::new(SgVariant::Critic, 9, 4, &[12], 1).unwrap();
    let mut tape = Tape::new();
    let bound = split.bind(&mut tape);
    let xn = tape.leaf(x.clone());
    let yn = tape.leaf(y.clone());
    let h = split.forward_part(&mut tape, &bound, 0, xn).unwrap();
    let logp = split.forward_part(&mut tape, &bound, 1, h).unwrap();
    let true_loss = per_sample_cross_entropy(&mut tape, logp, yn).unwrap();
    let mbound = module.network().unwrap().bind(&mut tape);
    let (m, _) = module.predict(&mut tape, &mbound, h, yn).unwrap();
    let lp_module = module.network().unwrap().predict(&{
        let hv = tape.value(h).unwrap();
        let mut d = Vec::new();
        for i in 0..hv.rows() {
            d.extend_from_slice(hv.row_slice(i));
            d.extend_from_slice(y.row_slice(i));
        }
        Tensor::new(hv.rows(), 13, d).unwrap()
    });
    let lp_module = lp_module.unwrap();
    let lp_main = tape.value(logp).unwrap().clone();
    let (m, l) = (tape.value(m.unwrap()).unwrap().clone(), tape.value(true_loss).unwrap().clone());
    for i in 0..x.rows() {
        let cls = (0..4).find(|&k| y.get(i, k) == 1.0).unwrap();
        let lhs = (m.get(i, 0) - l.get(i, 0)).powi(2);
        let rhs = (lp_module.get(i, cls) - lp_main.get(i, cls)).powi(2);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
    }
}

#[test]
fn decoupled_steps_are_deterministic() {
    let (x, y) = batch();
    let cfg = OptimizerConfig::adam(1e-3);
    let run = || {
        let mut split = SplitNetwork::split(&classifier(8), &[1, 3]).unwrap();
        let mut modules = vec![
            SgModule::new(SgVariant::Sobolev, 10, 4, &[8], 1).unwrap(),
            SgModule::new(SgVariant::Sobolev, 8, 4, &[8], 2).unwrap(),
        ];
        let mut opts = SgOptimizers::new(&split, &modules, cfg, cfg);
        let r = decoupled_step(&mut split, &mut modules, &mut opts, &x, &y, SgVariant::Sobolev).unwrap();
        (split, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.module_losses.iter().all(|l| l.is_some_and(|v| v >= 0.0)));
}

#[test]
fn mixture_is_reproducible_and_balanced() {
    let spec = MixtureSpec::default();
    let (a, ta) = spec.generate().unwrap();
    let (b, _) = spec.generate().unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.labels, b.labels);
    assert_eq!((a.len(), ta.len()), (4000, 2000));
    for c in 0..8 {
        let count = a.labels.iter().filter(|&&l| l == c).count();
        assert!(count > 300, "class {c} has {count} samples");
    }
    assert!(MixtureSpec { classes: 1, ..MixtureSpec::default() }.generate().is_err());
}

#[test]
fn experiments_report_accuracy() {
    let data = MixtureSpec { train_size: 600, test_size: 300, ..MixtureSpec::default() };
    for scheme in [Scheme::Backprop, Scheme::Decoupled(SgVariant::Critic), Scheme::Decoupled(SgVariant::Noprop)] {
        let cfg = SgTrainConfig { data: data.clone(), scheme, steps: 40, ..SgTrainConfig::default() };
        let a = run_sg_experiment(&cfg).unwrap();
        let b = run_sg_experiment(&cfg).unwrap();
        assert_eq!(a.test_acc, b.test_acc);
        assert!((0.0..=1.0).contains(&a.test_acc));
        assert_eq!(a.variant, scheme.to_string());
    }
    let bad = SgTrainConfig { splits: vec![4], ..SgTrainConfig::default() };
    assert!(run_sg_experiment(&bad).is_err());
}

#[test]
fn mean_and_sample_deviation() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
}
