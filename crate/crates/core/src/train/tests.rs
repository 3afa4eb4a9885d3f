use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sim::{generate_episode, GenerationConfig};

fn small_config() -> ModelConfig {
    ModelConfig {
        point_hidden: 8,
        point_feature: 8,
        latent: 8,
        graph_hidden: 8,
        relation_hidden: 8,
        pose_hidden: 8,
        action_hidden: 8,
        dynamics_hidden: 8,
        ..ModelConfig::default()
    }
}

fn episode(seed: u64, n: usize, h: usize) -> Episode {
    let cfg = GenerationConfig {
        min_objects: n,
        max_objects: n,
        horizon: (h, h),
        ..GenerationConfig::default()
    };
    generate_episode(seed, 0, &cfg).unwrap()
}

#[test]
fn rollout_term_counts() {
    assert_eq!(rollout_indices(1), vec![(0, 0)]);
    assert_eq!(rollout_indices(2), vec![(0, 0), (0, 1), (1, 0)]);
    assert_eq!(rollout_indices(3).len(), 6);
    let m = Model::new(small_config(), 1).unwrap();
    for (h, want) in [(1, 1), (2, 3), (3, 6)] {
        let ep = episode(h as u64, 2, h);
        let mut t = Tape::new();
        let enc = encode_episode(&m, &mut t, &ep, &[0, 1]).unwrap();
        let r = rollouts(&m, &mut t, &enc).unwrap();
        assert_eq!(r.len(), want);
        let l = episode_loss(&m, &mut Tape::new(), &ep, &[0, 1], &LossWeights::default()).unwrap();
        assert_eq!(l.n_rollouts, want);
        let pairs: Vec<_> = r.iter().map(|x| (x.start, x.offset)).collect();
        assert_eq!(pairs, rollout_indices(h));
    }
}

fn zero_relation_head(m: &mut Model) {
    for name in ["psi_r.head.layer1.weight", "psi_r.head.layer1.bias"] {
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn half_probability_gives_ln2_per_entry() {
    let mut m = Model::new(small_config(), 2).unwrap();
    zero_relation_head(&mut m);
    let ep = episode(3, 3, 2);
    let mut t = Tape::new();
    let enc = encode_episode(&m, &mut t, &ep, &[0, 1, 2]).unwrap();
    let rel = loss_rel(&m, &mut t, &enc).unwrap();
    let count = 6.0 * 7.0 * 3.0;
    assert!((t.value(rel).item() - count * std::f64::consts::LN_2).abs() < 1e-9);
    let r = rollouts(&m, &mut t, &enc).unwrap();
    let rp = loss_rel_prime(&m, &mut t, &enc, &r).unwrap();
    assert!((t.value(rp).item() - 3.0 * 6.0 * 7.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn confident_correct_logits_are_near_zero() {
    let ep = episode(4, 3, 1);
    let labels = episode_labels(&ep).unwrap();
    let mut t = Tape::new();
    let mut total = 0.0;
    for l in &labels {
        let z: Vec<f64> = l.data().iter().map(|&v| if v > 0.5 { 40.0 } else { -40.0 }).collect();
        let z = t.var(Tensor::from_shape(l.shape(), z).unwrap());
        let b = t.bce_logits(z, l).unwrap();
        total += t.value(b).item();
    }
    assert!(total <= 6.0 * 7.0 * 2.0 * 1e-6);
}

#[test]
fn identical_observations_with_zero_dynamics_cost_nothing() {
    let mut m = Model::new(small_config(), 3).unwrap();
    m.zero_dynamics_output();
    let mut ep = episode(5, 3, 1);
    ep.observations[1] = ep.observations[0].clone();
    let mut t = Tape::new();
    let enc = encode_episode(&m, &mut t, &ep, &[4, 2, 9]).unwrap();
    let r = rollouts(&m, &mut t, &enc).unwrap();
    let d = loss_dyn(&m, &mut t, &enc, &r).unwrap();
    assert_eq!(t.value(d).item(), 0.0);
}

#[test]
fn pose_loss_arithmetic() {
    let mut m = Model::new(small_config(), 4).unwrap();
    let mut ep = episode(6, 2, 1);
    // keep object 0 only, shifted by 0.1 m along world x after the action
    for o in &mut ep.observations {
        o.cloud.objects.truncate(1);
        o.poses.truncate(1);
        o.relations = crate::relations::RelationMatrix::new();
    }
    ep.observations[1] = ep.observations[0].clone();
    ep.observations[1].poses[0].center[0] += 0.1;
    ep.actions[0].target = ep.observations[0].poses[0].object_id;
    let cam = ep.observations[0].cloud.camera.clone();
    let target = m.normalize_point(ep.observations[0].poses[0].center, &cam);
    let w = m.store.find("psi_p.head.layer1.weight").unwrap();
    m.store.get_mut(w).data_mut().fill(0.0);
    let b = m.store.find("psi_p.head.layer1.bias").unwrap();
    m.store
        .get_mut(b)
        .data_mut()
        .copy_from_slice(&[target[0], target[1], target[2], 1., 0., 0., 0., 1., 0.]);
    let mut t = Tape::new();
    let enc = encode_episode(&m, &mut t, &ep, &[0]).unwrap();
    let r = rollouts(&m, &mut t, &enc).unwrap();
    let l = loss_pose(&m, &mut t, &enc, &r).unwrap();
    // exact at observation 0, 0.1 m off at observation 1 on both paths
    assert!((t.value(l).item() - 0.02).abs() < 1e-12);
}

/// Central differences against tape gradients on a sample of parameter
/// scalars.
fn check_loss_gradients(w: LossWeights, seed: u64) {
    let cfg = ModelConfig {
        readout: if w.w_pose > 0.0 && w.w_rel == 0.0 { RelationReadout::Analytic } else { RelationReadout::Learned },
        ..small_config()
    };
    let mut m = Model::new(cfg, seed).unwrap();
    let ep = episode(seed + 10, 2, 2);
    let ids = [3, 7];
    let loss = |m: &Model| {
        let mut t = Tape::new();
        let l = episode_loss(m, &mut t, &ep, &ids, &w).unwrap();
        t.value(l.total).item()
    };
    let mut t = Tape::new();
    let l = episode_loss(&m, &mut t, &ep, &ids, &w).unwrap();
    let g = t.backward(l.total).unwrap();
    let grads = t.param_gradients(&g, m.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids_all: Vec<_> = m.store.iter().map(|(id, _, t)| (id, t.len())).collect();
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for _ in 0..60 {
        let (id, len) = ids_all[rng.random_range(0..ids_all.len())];
        let k = rng.random_range(0..len);
        let orig = m.store.get(id).data()[k];
        m.store.get_mut(id).data_mut()[k] = orig + 1e-5;
        let up = loss(&m);
        m.store.get_mut(id).data_mut()[k] = orig - 1e-5;
        let down = loss(&m);
        m.store.get_mut(id).data_mut()[k] = orig;
        nu.push((up - down) / 2e-5);
        an.push(grads[id.0].as_ref().map_or(0.0, |t| t.data()[k]));
    }
    let diff = an.iter().zip(&nu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(nu.iter().map(|a| a * a).sum::<f64>().sqrt());
    assert!(norm > 0.0, "no gradient signal sampled");
    assert!(diff / norm < 1e-4, "relative error {} for {w:?}", diff / norm);
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_loss_gradients(LossWeights::new(1.0, 0.0, 0.0, 0.0), 1);
    check_loss_gradients(LossWeights::new(0.0, 1.0, 0.0, 0.0), 2);
    check_loss_gradients(LossWeights::new(0.0, 0.0, 1.0, 0.0), 3);
    check_loss_gradients(LossWeights::new(0.0, 0.0, 0.0, 1.0), 4);
    check_loss_gradients(LossWeights::new(0.5, 2.0, 1.0, 0.3), 5);
}

#[test]
fn zero_weight_contributes_no_gradient() {
    let m = Model::new(small_config(), 6).unwrap();
    let ep = episode(7, 3, 2);
    let ids = [1, 0, 5];
    let grads = |f: &dyn Fn(&mut Tape) -> Var| {
        let mut t = Tape::new();
        let l = f(&mut t);
        let g = t.backward(l).unwrap();
        t.param_gradients(&g, m.store.len())
    };
    let weighted = grads(&|t: &mut Tape| {
        episode_loss(&m, t, &ep, &ids, &LossWeights::new(1.0, 0.0, 1.0, 0.0)).unwrap().total
    });
    let manual = grads(&|t: &mut Tape| {
        let enc = encode_episode(&m, t, &ep, &ids).unwrap();
        let r = rollouts(&m, t, &enc).unwrap();
        let a = loss_rel(&m, t, &enc).unwrap();
        let b = loss_rel_prime(&m, t, &enc, &r).unwrap();
        t.add(a, b).unwrap()
    });
    assert_eq!(weighted, manual);
    let rel_only = grads(&|t: &mut Tape| {
        episode_loss(&m, t, &ep, &ids, &LossWeights::new(1.0, 0.0, 0.0, 0.0)).unwrap().total
    });
    for (id, name, _) in m.store.iter() {
        if name.starts_with("delta.") || name.starts_with("phi_a.") {
            assert!(rel_only[id.0].is_none(), "{name} received gradient");
        }
    }
}

#[test]
fn ablation_table() {
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        let cfg = TrainConfig {
            ablation: a,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
    }
    let wo = TrainConfig {
        ablation: Ablation::RdGnnWoLr,
        weights: Some(LossWeights::new(1.0, 5.0, 1.0, 0.0)),
        ..TrainConfig::default()
    };
    assert_eq!(wo.loss_weights().w_dyn, 0.0);
    let dpd = TrainConfig {
        ablation: Ablation::DpdGnn,
        ..TrainConfig::default()
    };
    assert_eq!(dpd.model_config().architecture, Architecture::Gnn);
    assert_eq!(dpd.model_config().readout, RelationReadout::Analytic);
    assert_eq!(dpd.loss_weights(), LossWeights::new(0.0, 0.0, 0.0, 1.0));
    assert_eq!(Ablation::Mlp.model_config().architecture, Architecture::PairwiseMlp);
    assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
    assert!(LossWeights::new(-1.0, 1.0, 0.0, 0.0).validate().is_err());
    let bad = TrainConfig {
        ablation: Ablation::Mlp,
        weights: Some(LossWeights::new(1.0, 1.0, 1.0, 1.0)),
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

fn tiny_run(seed: u64) -> (TrainOutcome, Vec<Episode>) {
    let gen = GenerationConfig {
        min_objects: 2,
        max_objects: 3,
        horizon: (1, 1),
        ..GenerationConfig::default()
    };
    let eps = crate::sim::generate_dataset(9, 12, &gen).unwrap();
    let splits = Splits {
        train: (0..10).collect(),
        val: vec![10, 11],
        test: vec![],
    };
    let cfg = TrainConfig {
        epochs: 1,
        seed,
        model: Some(small_config()),
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let out = train(&eps, &splits, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    (out, eps)
}

#[test]
fn one_epoch_is_one_step_per_episode_and_deterministic() {
    let (a, eps) = tiny_run(1);
    assert_eq!(a.steps, 10);
    assert_eq!(a.metrics.len(), 2);
    assert_eq!(a.metrics[1].split, "val");
    assert!(a.metrics[1].f1_detect.is_some());
    let (b, eps2) = tiny_run(1);
    assert_eq!(eps, eps2);
    assert_eq!(a.last.store, b.last.store);
    assert_eq!(a.metrics, b.metrics);
    let fresh = Model::new(small_config(), 1).unwrap();
    assert_ne!(a.last.store, fresh.store);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_metrics_csv(&p, &a.metrics).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert!(text.starts_with("epoch,split,loss_rel,loss_dyn,loss_rel_prime,loss_pose,loss_total,f1_detect,f1_predict,steps"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn non_finite_loss_aborts() {
    let eps = vec![episode(11, 2, 1), {
        let mut e = episode(12, 2, 1);
        e.index = 1;
        e
    }];
    let splits = Splits {
        train: vec![0, 1],
        ..Splits::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e250,
        model: Some(small_config()),
        ..TrainConfig::default()
    };
    assert!(matches!(train(&eps, &splits, &cfg, |_| {}), Err(Error::Diverged { .. })));
}

#[test]
fn random_ids_are_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=16 {
        let mut ids = random_ids(&mut rng, n).unwrap();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(ids.iter().all(|&i| i < 16));
    }
    assert!(random_ids(&mut rng, 17).is_err());
}
