use super::*;
use crate::encoder::EncoderConfig;
use crate::rankers::{RankerConfig, RankerKind};
use crate::synthetic::{SyntheticConfig, SyntheticCorpus};
use crate::tensor::grad_check;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn scalar_param(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("s", Tensor::vector(vec![v]).with_requires_grad(true));
    p
}

#[test]
fn classification_loss_examples() {
    assert_abs_diff_eq!(classification_loss(0.0, 1.0), 2f64.ln(), epsilon = 1e-15);
    let l = classification_loss(20.0, 1.0);
    assert!(l > 0.0 && l < 1e-8);
    assert!(classification_loss(-800.0, 1.0).is_finite());
    assert_abs_diff_eq!(classification_loss(800.0, 0.0), 800.0, epsilon = 1e-9);
}

#[test]
fn classification_gradient_is_sigmoid_minus_label() {
    for &(s, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-1.5, 1.0)] {
        for link in [Link::Sigmoid, Link::Softmax2] {
            let p = scalar_param(s);
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let sv = tape.reshape(b["s"], &[]).unwrap();
            let loss = record_classification_loss(&mut tape, sv, y, link).unwrap();
            assert_abs_diff_eq!(tape.scalar(loss), classification_loss(s, y), epsilon = 1e-12);
            let g = tape.backward(loss).unwrap();
            let sigma = 1.0 / (1.0 + (-s as f64).exp());
            assert_abs_diff_eq!(g.get(b["s"]).unwrap()[0], sigma - y, epsilon = 1e-12);
            let report = grad_check(&p, 1e-6, |tape, b| {
                let sv = tape.reshape(b["s"], &[])?;
                record_classification_loss(tape, sv, y, link)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-4);
        }
    }
}

#[test]
fn pairwise_loss_examples() {
    assert_eq!(pairwise_loss(2.0, 1.0, 1.0), 0.0);
    assert_eq!(pairwise_loss(0.5, 0.5, 1.0), 1.0);
    let mut p = ParamSet::new();
    p.insert("pos", Tensor::vector(vec![0.2]).with_requires_grad(true));
    p.insert("neg", Tensor::vector(vec![0.4]).with_requires_grad(true));
    let report = grad_check(&p, 1e-6, |tape, b| {
        let (a, n) = (tape.reshape(b["pos"], &[])?, tape.reshape(b["neg"], &[])?);
        record_pairwise_loss(tape, a, n, 1.0)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4);
}

fn set_grad(p: &mut ParamSet, name: &str, g: Vec<f64>) {
    p.get_mut(name).unwrap().set_grad(g).unwrap();
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = scalar_param(1.5);
    set_grad(&mut p, "s", vec![0.0]);
    let mut st = AdamState::new(0.1, 0.1);
    adam_step(&mut p, &mut st).unwrap();
    assert_eq!(p.get("s").unwrap().data()[0], 1.5);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_descends_and_converges() {
    let mut p = scalar_param(1.0);
    set_grad(&mut p, "s", vec![2.0]);
    let mut st = AdamState::new(0.1, 0.1);
    adam_step(&mut p, &mut st).unwrap();
    assert!(p.get("s").unwrap().data()[0] < 1.0);

    let mut p = ParamSet::new();
    p.insert("w", Tensor::vector(vec![1.0, -2.0]).with_requires_grad(true));
    let mut st = AdamState::new(0.05, 0.05);
    for _ in 0..500 {
        // f(w) = w0² + 3 w1²
        let w = p.get("w").unwrap().data().to_vec();
        set_grad(&mut p, "w", vec![2.0 * w[0], 6.0 * w[1]]);
        adam_step(&mut p, &mut st).unwrap();
    }
    let w = p.get("w").unwrap().data();
    assert!((w[0] * w[0] + w[1] * w[1]).sqrt() < 1e-3, "{w:?}");
}

#[test]
fn adam_uses_projection_rate_for_projection_parameters() {
    let mut p = ParamSet::new();
    p.insert("head/proj/layer01", Tensor::vector(vec![0.0]).with_requires_grad(true));
    p.insert("head/w", Tensor::vector(vec![0.0]).with_requires_grad(true));
    set_grad(&mut p, "head/proj/layer01", vec![1.0]);
    set_grad(&mut p, "head/w", vec![1.0]);
    adam_step(&mut p, &mut AdamState::new(1e-3, 0.002)).unwrap();
    // first Adam step moves each coordinate by lr · sign(g)
    assert_abs_diff_eq!(p.get("head/proj/layer01").unwrap().data()[0], -0.002, epsilon = 1e-9);
    assert_abs_diff_eq!(p.get("head/w").unwrap().data()[0], -1e-3, epsilon = 1e-9);
}

#[test]
fn adam_requires_gradients() {
    let mut p = scalar_param(1.0);
    assert!(matches!(adam_step(&mut p, &mut AdamState::new(0.1, 0.1)), Err(NeurankError::Contract(_))));
}

fn small_setup(kind: RankerKind, n_train: usize) -> (Ranker, SyntheticCorpus) {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig {
        n_train,
        n_val: 20,
        n_test: 5,
        doc_len: 5,
        doc_fillers: 1,
        ..Default::default()
    })
    .unwrap();
    let enc = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ff_dim: 32,
        max_positions: 12,
        ..Default::default()
    };
    let cfg = RankerConfig {
        ranker: kind,
        max_len: 12,
        ..Default::default()
    };
    (Ranker::new(enc, cfg, corpus.vocabulary().unwrap(), 3).unwrap(), corpus)
}

#[test]
fn validation_loss_falls_on_separable_data() {
    // kernel pooling sees exact matches directly, so a few dozen steps suffice
    let (mut r, c) = small_setup(RankerKind::Knrm, 200);
    let cfg = TrainConfig {
        max_steps: 90,
        eval_interval: 30,
        patience: 5,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let out = train(&mut r, &c.train, &c.val, &cfg).unwrap();
    let val: Vec<f64> = out.log.iter().filter(|l| l.split == Split::Val).map(|l| l.loss).collect();
    assert_eq!(val.len(), 3);
    assert!(val[0] > val[1] && val[1] > val[2], "{val:?}");
    assert_eq!(out.best_step, Some(90));
}

#[test]
fn patience_one_with_constant_loss_stops_at_second_evaluation() {
    let (mut r, c) = small_setup(RankerKind::LastInt, 20);
    let before = r.params.clone();
    let cfg = TrainConfig {
        max_steps: 100,
        eval_interval: 5,
        patience: 1,
        learning_rate: 1e-300,
        proj_learning_rate: 1e-300,
        ..Default::default()
    };
    let out = train(&mut r, &c.train, &c.val, &cfg).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.steps, 10);
    assert_eq!(out.log.iter().filter(|l| l.split == Split::Val).count(), 2);
    assert_eq!(out.best_step, Some(5));
    for (name, t) in r.params.iter() {
        let b = before.get(name).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-290), "{name}");
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        max_steps: 12,
        eval_interval: 4,
        ..Default::default()
    };
    let (mut a, c) = small_setup(RankerKind::MultInt, 30);
    let (mut b, _) = small_setup(RankerKind::MultInt, 30);
    let la = train(&mut a, &c.train, &c.val, &cfg).unwrap();
    let lb = train(&mut b, &c.train, &c.val, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.to_checkpoint().unwrap().to_bytes().unwrap(), b.to_checkpoint().unwrap().to_bytes().unwrap());
    assert_eq!(format_log(&la.log).lines().next(), Some("step,split,loss"));
}

#[test]
fn pairwise_training_runs_for_every_kind() {
    for kind in RankerKind::ALL {
        let (mut r, c) = small_setup(kind, 10);
        let cfg = TrainConfig {
            max_steps: 4,
            eval_interval: 2,
            batch_size: 2,
            loss: LossKind::Pairwise,
            ..Default::default()
        };
        let out = train(&mut r, &c.train, &c.val, &cfg).unwrap();
        assert_eq!(out.log.len(), 4, "{kind}");
        assert!(r.params.is_finite());
    }
}

#[test]
fn nan_loss_aborts_with_step() {
    let (mut r, c) = small_setup(RankerKind::LastInt, 10);
    r.params.get_mut("head/w").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&mut r, &c.train, &c.val, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, NeurankError::NonFiniteLoss { step: 1 }), "{err}");
}

#[test]
fn invalid_config_is_rejected() {
    let (mut r, c) = small_setup(RankerKind::LastInt, 10);
    for cfg in [
        TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        TrainConfig {
            patience: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(train(&mut r, &c.train, &c.val, &cfg), Err(NeurankError::Config(_))));
    }
}

proptest! {
    #[test]
    fn classification_loss_is_non_negative(s in -50.0f64..50.0, y in prop::bool::ANY) {
        let l = classification_loss(s, if y { 1.0 } else { 0.0 });
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn softmax_link_equals_sigmoid(s in -30.0f64..30.0, y in prop::bool::ANY) {
        let y = if y { 1.0 } else { 0.0 };
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::scalar(s));
        let a = record_classification_loss(&mut tape, sv, y, Link::Sigmoid).unwrap();
        let b = record_classification_loss(&mut tape, sv, y, Link::Softmax2).unwrap();
        prop_assert!((tape.scalar(a) - tape.scalar(b)).abs() < 1e-12);
    }
}
