use rand_distr::{Distribution, Normal};

use super::*;
use crate::models::{predict, predict_topdown, Strategy};

fn tax(nv: usize, nn: usize) -> Taxonomy {
    Taxonomy::new((0..nv).map(|i| format!("v{i}")).collect(), (0..nn).map(|i| format!("n{i}")).collect()).unwrap()
}

fn tiny(mode: DecodeMode, goals: bool) -> SeqModelConfig {
    SeqModelConfig {
        layers: 2,
        heads: 2,
        hidden_dim: 8,
        ff_mult: 2,
        context_len: 8,
        decode_mode: mode,
        goal_conditioning: goals,
        ..Default::default()
    }
}

fn l(v: usize, n: usize) -> ActionLabel {
    ActionLabel::new(v, n)
}

fn examples() -> Vec<TrainExample> {
    vec![
        TrainExample {
            observed: vec![l(0, 1), l(2, 3)],
            future: vec![l(1, 0), l(2, 2), l(0, 3)],
            goal: Some("a".into()),
        },
        TrainExample {
            observed: vec![l(1, 1), l(1, 2)],
            future: vec![l(0, 0), l(2, 1), l(1, 3)],
            goal: Some("b".into()),
        },
        TrainExample { observed: vec![l(2, 0), l(0, 0)], future: vec![l(2, 3), l(2, 3), l(1, 1)], goal: None },
    ]
}

/// Relative error with a small absolute floor for near-zero gradients.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

/// Central differences over every parameter; returns the fraction within
/// 1e-3 and the worst relative error.
fn finite_difference_check(model: &mut SeqModel<f64>, soft: Option<&SoftTargets<f64>>) -> (f64, f64) {
    let ex = examples();
    let (_, analytic) = model.objective(&ex, soft).unwrap();
    let h = 1e-6;
    let mut within = 0usize;
    let mut worst = 0.0f64;
    for (i, &grad) in analytic.iter().enumerate() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let (up, _) = model.objective(&ex, soft).unwrap();
        model.params_mut()[i] = orig - h;
        let (down, _) = model.objective(&ex, soft).unwrap();
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(grad, numeric);
        if e < 1e-3 {
            within += 1;
        }
        worst = worst.max(e);
    }
    (within as f64 / model.num_params() as f64, worst)
}

fn jitter(model: &mut SeqModel<f64>, seed: u64) {
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for p in model.params_mut() {
        *p += normal.sample(&mut rng);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let t = tax(3, 4);
    let goals = vec!["a".to_string(), "b".to_string()];
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let mut m = SeqModel::<f64>::init(&tiny(mode, true), &t, &goals).unwrap();
        jitter(&mut m, 5);
        let (frac, worst) = finite_difference_check(&mut m, None);
        assert!(frac >= 0.95 && worst < 1e-2, "{mode:?}: frac {frac}, worst {worst}");
    }
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let t = tax(3, 4);
    let mut m = SeqModel::<f64>::init(&tiny(DecodeMode::Autoregressive, false), &t, &[]).unwrap();
    jitter(&mut m, 9);
    let mut teacher =
        SeqModel::<f64>::init(&SeqModelConfig { seed: 3, ..tiny(DecodeMode::Autoregressive, false) }, &t, &[]).unwrap();
    jitter(&mut teacher, 10);
    let tau = 2.0;
    let soft = SoftTargets {
        per_example: examples()
            .iter()
            .map(|e| teacher.future_distributions(&e.observed, None, &e.future, tau).unwrap())
            .collect(),
        weight: 0.7,
        temperature: tau,
    };
    let (frac, worst) = finite_difference_check(&mut m, Some(&soft));
    assert!(frac >= 0.95 && worst < 1e-2, "frac {frac}, worst {worst}");
}

#[test]
fn distributions_sum_to_one() {
    let t = tax(5, 7);
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let m = SeqModel::<f32>::init(&tiny(mode, false), &t, &[]).unwrap();
        let rows = m.future_distributions(&[l(0, 0), l(4, 6)], None, &[l(1, 1), l(2, 2), l(3, 3)], 1.0).unwrap();
        assert_eq!(rows.len(), 3);
        for (v, n) in rows {
            assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!((n.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let joint = m.next_distribution(&DecodeContext { observed: &[l(0, 0)], goal: None }, &[]).unwrap();
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn memorizes_single_instance() {
    let t = tax(4, 4);
    let ex = vec![TrainExample {
        observed: vec![l(0, 1), l(1, 2), l(2, 3)],
        future: vec![l(3, 0), l(0, 0), l(1, 1), l(2, 2)],
        goal: None,
    }];
    let cfg = SeqModelConfig {
        hidden_dim: 16,
        heads: 2,
        context_len: 8,
        epochs: 150,
        batch_size: 1,
        learning_rate: 0.05,
        ..Default::default()
    };
    let m = train_seq_model::<f32>(&ex, &t, &cfg).unwrap();
    let last = *m.loss_curve().last().unwrap();
    assert!(last < 0.05, "final loss {last}");
    let c = predict(&m, &ex[0].observed, 4, 1, Strategy::Greedy).unwrap();
    assert_eq!(c.sequences()[0], ex[0].future);
}

#[test]
fn training_is_deterministic() {
    let t = tax(3, 4);
    let cfg = SeqModelConfig { epochs: 3, seed: 11, ..tiny(DecodeMode::Parallel, true) };
    let a = train_seq_model::<f64>(&examples(), &t, &cfg).unwrap();
    let b = train_seq_model::<f64>(&examples(), &t, &cfg).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = train_seq_model::<f64>(&examples(), &t, &SeqModelConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.param_hash(), c.param_hash());
}

#[test]
fn decode_modes_agree_on_first_step() {
    let t = tax(4, 5);
    let mut m = SeqModel::<f64>::init(&tiny(DecodeMode::Parallel, false), &t, &[]).unwrap();
    jitter(&mut m, 2);
    let ar = m.with_decode_mode(DecodeMode::Autoregressive);
    let back = ar.with_decode_mode(DecodeMode::Parallel);
    assert_eq!(back.num_params(), m.num_params());
    let obs = [l(0, 1), l(3, 4), l(2, 2)];
    let p = predict(&m, &obs, 3, 1, Strategy::Greedy).unwrap();
    let a = predict(&ar, &obs, 3, 1, Strategy::Greedy).unwrap();
    assert_eq!(p.sequences()[0][0], a.sequences()[0][0]);
    let ctx = DecodeContext { observed: &obs, goal: None };
    assert_eq!(m.next_distribution(&ctx, &[]).unwrap(), ar.next_distribution(&ctx, &[]).unwrap());
}

#[test]
fn goals_steer_predictions() {
    let t = tax(5, 1);
    let shared = vec![l(0, 0), l(1, 0)];
    let ex: Vec<TrainExample> = (0..8)
        .flat_map(|_| {
            [
                TrainExample { observed: shared.clone(), future: vec![l(2, 0), l(3, 0)], goal: Some("left".into()) },
                TrainExample { observed: shared.clone(), future: vec![l(4, 0), l(3, 0)], goal: Some("right".into()) },
            ]
        })
        .collect();
    let cfg = SeqModelConfig {
        hidden_dim: 16,
        heads: 2,
        context_len: 6,
        goal_conditioning: true,
        epochs: 40,
        batch_size: 4,
        optimizer: OptimizerKind::adam(),
        learning_rate: 0.01,
        ..Default::default()
    };
    let m = train_seq_model::<f32>(&ex, &t, &cfg).unwrap();
    assert_eq!(m.goals(), &["".to_string(), "left".into(), "right".into()]);
    let left = predict_topdown(&m, &shared, "left", 2, 1, Strategy::Greedy).unwrap();
    let right = predict_topdown(&m, &shared, "right", 2, 1, Strategy::Greedy).unwrap();
    assert_eq!(left.sequences()[0][0], l(2, 0));
    assert_eq!(right.sequences()[0][0], l(4, 0));

    let e1 = predict_topdown(&m, &shared, "", 2, 1, Strategy::Greedy).unwrap();
    let e2 = predict_topdown(&m, &shared, "", 2, 1, Strategy::Greedy).unwrap();
    assert_eq!(e1, e2);
    let ctx = DecodeContext { observed: &shared, goal: Some("") };
    let bottom_up = DecodeContext { observed: &shared, goal: None };
    assert_eq!(m.next_distribution(&ctx, &[]).unwrap(), m.next_distribution(&bottom_up, &[]).unwrap());
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let t = tax(3, 4);
    let cfg = SeqModelConfig { epochs: 2, ..tiny(DecodeMode::Autoregressive, true) };
    let m = train_seq_model::<f64>(&examples(), &t, &cfg).unwrap();
    let bytes = m.to_bytes();
    let back = SeqModel::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes(), bytes);
    assert!(matches!(SeqModel::<f32>::from_bytes(&bytes), Err(Error::ConfigMismatch(_))));
    assert!(matches!(SeqModel::<f64>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(SeqModel::<f64>::from_bytes(&bad), Err(Error::Checkpoint(_))));

    m.check_taxonomy(&t).unwrap();
    assert!(matches!(m.check_taxonomy(&tax(3, 5)), Err(Error::ConfigMismatch(_))));
}

#[test]
fn context_budget_is_enforced() {
    let t = tax(3, 4);
    let cfg = SeqModelConfig { context_len: 3, ..tiny(DecodeMode::Parallel, false) };
    assert!(matches!(train_seq_model::<f32>(&examples(), &t, &cfg), Err(Error::Config(_))));
    let m = SeqModel::<f32>::init(&cfg, &t, &[]).unwrap();
    assert!(predict(&m, &[l(0, 0); 5], 2, 1, Strategy::Greedy).is_err());
    assert!(matches!(train_seq_model::<f32>(&[], &t, &cfg), Err(Error::EmptyCorpus)));
}

#[test]
fn divergence_is_reported() {
    let t = tax(3, 4);
    let cfg = SeqModelConfig { learning_rate: 1e30, grad_clip: 0.0, epochs: 5, ..tiny(DecodeMode::Parallel, false) };
    assert!(matches!(train_seq_model::<f32>(&examples(), &t, &cfg), Err(Error::TrainingDiverged { .. })));
}
