use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gram_schmidt_forward;
use crate::scene::{render_cloud, sample_scene, SceneConfig, SegmentedCloud, POINTS_PER_OBJECT};

fn set(m: &mut Model, name: &str, data: &[f64]) {
    let id = m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = m.store.get_mut(id);
    assert_eq!(t.len(), data.len(), "{name}");
    t.data_mut().copy_from_slice(data);
}

fn zero_all(m: &mut Model) {
    let ids: Vec<_> = m.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        m.store.get_mut(id).data_mut().fill(0.0);
    }
}

fn cloud(seed: u64, n: usize) -> SegmentedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_scene(&mut rng, n, if n > 2 { 2 } else { 1 }, &SceneConfig::default()).unwrap();
    render_cloud(&s)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        points_per_object: 4,
        point_hidden: 2,
        point_feature: 1,
        id_width: 1,
        latent: 2,
        graph_hidden: 2,
        relation_hidden: 2,
        pose_hidden: 2,
        action_hidden: 2,
        dynamics_hidden: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn point_order_does_not_matter() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let c = cloud(3, 2);
    let rows = m.point_rows(&c.objects[0], &c.camera).unwrap();
    let mut perm: Vec<usize> = (0..POINTS_PER_OBJECT).collect();
    perm.reverse();
    perm.swap(3, 90);
    let permuted: Vec<f64> = perm.iter().flat_map(|&p| rows[p * 6..p * 6 + 6].to_vec()).collect();
    let run = |r: Vec<f64>| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_shape([POINTS_PER_OBJECT, 6], r).unwrap());
        let f = m.encode_points(&mut t, v).unwrap();
        t.value(f).clone()
    };
    assert_eq!(run(rows), run(permuted));
}

#[test]
fn off_view_placeholder_is_finite() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros(POINTS_PER_OBJECT, 6));
    let f = m.encode_points(&mut t, v).unwrap();
    assert_eq!(t.value(f).shape(), [1, 128]);
    assert!(t.value(f).is_finite());
}

#[test]
fn point_encoder_matches_matrix_oracle() {
    use nalgebra::{DMatrix, DVector};
    let m = Model::new(ModelConfig::default(), 7).unwrap();
    let c = cloud(4, 2);
    let rows = m.point_rows(&c.objects[1], &c.camera).unwrap();
    let mat = |name: &str| {
        let t = m.store.get(m.store.find(name).unwrap());
        DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
    };
    let vecb = |name: &str| DVector::from_row_slice(m.store.get(m.store.find(name).unwrap()).data());
    let (w0, b0) = (mat("phi_pc.point_mlp.layer0.weight"), vecb("phi_pc.point_mlp.layer0.bias"));
    let (w1, b1) = (mat("phi_pc.point_mlp.layer1.weight"), vecb("phi_pc.point_mlp.layer1.bias"));
    let (w2, b2) = (mat("phi_pc.pool_mlp.layer0.weight"), vecb("phi_pc.pool_mlp.layer0.bias"));
    let mut pooled = DVector::from_element(128, f64::NEG_INFINITY);
    for p in 0..POINTS_PER_OBJECT {
        let x = DVector::from_row_slice(&rows[p * 6..p * 6 + 6]);
        let h = (&w0 * x + &b0).map(|v| v.max(0.0));
        let f = (&w1 * h + &b1).map(|v| v.max(0.0));
        pooled = pooled.zip_map(&f, f64::max);
    }
    let want = &w2 * pooled + &b2;
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_shape([POINTS_PER_OBJECT, 6], rows).unwrap());
    let f = m.encode_points(&mut t, v).unwrap();
    for k in 0..128 {
        assert!((t.value(f).get(0, k) - want[k]).abs() < 1e-12, "feature {k}");
    }
}

#[test]
fn point_rows_are_centred_with_centroid_appended() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let c = cloud(5, 2);
    let rows = m.point_rows(&c.objects[0], &c.camera).unwrap();
    for a in 0..3 {
        let mean: f64 = (0..POINTS_PER_OBJECT).map(|p| rows[p * 6 + a]).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-12);
        assert!((0..POINTS_PER_OBJECT).all(|p| rows[p * 6 + 3 + a] == rows[3 + a]));
    }
    let mut short = c.objects[0].clone();
    short.points.pop();
    assert!(m.point_rows(&short, &c.camera).is_err());
}

#[test]
fn input_graph_cardinality_and_ids() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let c = cloud(6, 3);
    let objs: Vec<_> = c.objects.iter().collect();
    let (pts, ids) = m.node_inputs(&objs, &[4, 9, 0], &c.camera).unwrap();
    let (_, ids2) = m.node_inputs(&objs, &[1, 2, 3], &c.camera).unwrap();
    let mut t = Tape::new();
    let v = m.input_nodes(&mut t, &pts, &ids).unwrap();
    let v2 = m.input_nodes(&mut t, &pts, &ids2).unwrap();
    assert_eq!(t.value(v).shape(), [3, 144]);
    for r in 0..3 {
        assert_eq!(t.value(v).row(r)[..128], t.value(v2).row(r)[..128]);
        assert_ne!(t.value(v).row(r)[128..], t.value(v2).row(r)[128..]);
    }
    let x = m.graph_encode(&mut t, v, GraphShape { n: 3, batch: 1 }).unwrap();
    assert_eq!(t.value(x.edges).shape(), [6, 128]);
    assert!(m.node_inputs(&objs, &[1, 1, 2], &c.camera).is_err());
    assert!(m.node_inputs(&objs, &[1, 16, 2], &c.camera).is_err());
}

#[test]
fn single_object_graph_is_well_formed() {
    let m = Model::new(ModelConfig::default(), 2).unwrap();
    let c = cloud(7, 1);
    let x = m.encode_eval(&c).unwrap();
    assert_eq!(x.nodes.as_ref().unwrap().shape(), [1, 128]);
    assert_eq!(x.edges.rows(), 0);
    assert!(x.nodes.as_ref().unwrap().is_finite());
    let p = m.latent_probs(&x).unwrap();
    assert!(p.probs.is_empty());
    let a = SkillAction::new(Skill::Push, c.objects[0].id, [0.1, 0.0]);
    let y = m.predict_latent(&x, &a).unwrap();
    assert!(y.nodes.unwrap().is_finite());
}

/// Two nodes, widths 2, weights chosen by hand:
///
/// v1 = (1, 0), v2 = (0, 2)
/// f_m: h = relu([x0 + x3, x1 − x2]), m = h + (0.5, 0)
///   m12 = f_m(1,0,0,2) = (3.5, 0); m21 = f_m(0,2,1,0) = (0.5, 1)
///   y1 = m21, y2 = m12
/// g_v: h = relu([x0 + x2, x1 + x3]), v' = (2 h0, −h1)
///   v1' = (3, −1), v2' = (7, −2)
/// g_e: h = relu([x0 + x4, Σ x4..x7 − 1]), e' = (h0, h0 + h1)
///   e12 = (1.5, 5.5), e21 = (3.5, 7.5)
fn hand_model() -> Model {
    let mut m = Model::new(tiny_config(), 0).unwrap();
    zero_all(&mut m);
    set(&mut m, "phi_g.message_mlp.layer0.weight", &[1., 0., 0., 1., 0., 1., -1., 0.]);
    set(&mut m, "phi_g.message_mlp.layer1.weight", &[1., 0., 0., 1.]);
    set(&mut m, "phi_g.message_mlp.layer1.bias", &[0.5, 0.]);
    set(&mut m, "phi_g.node_mlp.layer0.weight", &[1., 0., 1., 0., 0., 1., 0., 1.]);
    set(&mut m, "phi_g.node_mlp.layer1.weight", &[2., 0., 0., -1.]);
    set(
        &mut m,
        "phi_g.edge_mlp.layer0.weight",
        &[1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 1., 1., 1., 1.],
    );
    set(&mut m, "phi_g.edge_mlp.layer0.bias", &[0., -1.]);
    set(&mut m, "phi_g.edge_mlp.layer1.weight", &[1., 0., 1., 1.]);
    m
}

#[test]
fn hand_computed_graph_encoding() {
    let m = hand_model();
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_shape([2, 2], vec![1., 0., 0., 2.]).unwrap());
    let x = m.graph_encode(&mut t, v, GraphShape { n: 2, batch: 1 }).unwrap();
    assert_eq!(t.value(x.nodes.unwrap()).data(), &[3., -1., 7., -2.]);
    assert_eq!(t.value(x.edges).data(), &[1.5, 5.5, 3.5, 7.5]);
}

/// Continues [`hand_model`] with a push of node 0 by (0.3, 0) under the
/// default camera (right axis = world +x), bound 0.3:
///
/// a_in = (1, 0 | 1 | 1, 0)
/// φ_A: h = relu([x0, x3]) = (1, 1), a = (h0, 2 h1) = (1, 2)
/// δ_v: h = relu([v0 + a1, a0]), v'' = v' + h
///   (3, −1) → (8, 0); (7, −2) → (16, −1)
/// δ_e: h = relu([e1 + a0, e0]), e'' = e' + h
///   (1.5, 5.5) → (8, 7); (3.5, 7.5) → (12, 11)
#[test]
fn hand_computed_dynamics() {
    let mut m = hand_model();
    set(&mut m, "phi_a.layer0.weight", &[1., 0., 0., 0., 0., 0., 0., 0., 1., 0.]);
    set(&mut m, "phi_a.layer1.weight", &[1., 0., 0., 2.]);
    set(&mut m, "delta.push.node_mlp.layer0.weight", &[1., 0., 0., 1., 0., 0., 1., 0.]);
    set(&mut m, "delta.push.node_mlp.layer1.weight", &[1., 0., 0., 1.]);
    set(&mut m, "delta.push.edge_mlp.layer0.weight", &[0., 1., 1., 0., 1., 0., 0., 0.]);
    set(&mut m, "delta.push.edge_mlp.layer1.weight", &[1., 0., 0., 1.]);
    let cam = Camera::default();
    let a = SkillAction::new(Skill::Push, 5, [0.3, 0.0]);
    let row = m.action_input(&a, 0, &cam.frame());
    assert_eq!(row.len(), 5);
    for (got, want) in row.iter().zip([1., 0., 1., 1., 0.]) {
        assert!((got - want).abs() < 1e-15);
    }
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_shape([2, 2], vec![1., 0., 0., 2.]).unwrap());
    let x = m.graph_encode(&mut t, v, GraphShape { n: 2, batch: 1 }).unwrap();
    let rows = Tensor::from_shape([1, 5], vec![1., 0., 1., 1., 0.]).unwrap();
    let y = m.dynamics(&mut t, &x, Skill::Push, &rows).unwrap();
    assert_eq!(t.value(y.nodes.unwrap()).data(), &[8., 0., 16., -1.]);
    assert_eq!(t.value(y.edges).data(), &[8., 7., 12., 11.]);
    // the pick-place networks are untouched (all zero) so they are the identity
    let z = m.dynamics(&mut t, &x, Skill::PickPlace, &rows).unwrap();
    assert_eq!(t.value(z.edges).data(), t.value(x.edges).data());
}

fn outputs_for_order(m: &Model, c: &SegmentedCloud, order: &[usize], ids: &[u8], action: &SkillAction) -> (Tensor, Tensor) {
    let objs: Vec<_> = order.iter().map(|&k| &c.objects[k]).collect();
    let node_ids: Vec<u8> = order.iter().map(|&k| ids[k]).collect();
    let (pts, oh) = m.node_inputs(&objs, &node_ids, &c.camera).unwrap();
    let mut t = Tape::new();
    let v = m.input_nodes(&mut t, &pts, &oh).unwrap();
    let shape = GraphShape { n: order.len(), batch: 1 };
    let x = m.graph_encode(&mut t, v, shape).unwrap();
    let det = m.relation_logits(&mut t, &x).unwrap();
    let k = c.objects.iter().position(|o| o.id == action.target).unwrap();
    let row = Tensor::row_vector(m.action_input(action, ids[k], &c.camera.frame()));
    let y = m.dynamics(&mut t, &x, action.skill, &row).unwrap();
    let pred = m.relation_logits(&mut t, &y).unwrap();
    (t.value(det).clone(), t.value(pred).clone())
}

#[test]
fn node_permutation_permutes_outputs() {
    let m = Model::new(ModelConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..6 {
        let n = 2 + trial % 4;
        let c = cloud(100 + trial as u64, n);
        let ids: Vec<u8> = (0..n as u8).map(|k| (k * 3 + 1) % 16).collect();
        let id: Vec<usize> = (0..n).collect();
        let mut perm = id.clone();
        while perm == id {
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
        }
        let action = SkillAction::new(Skill::ALL[trial % 2], c.objects[trial % n].id, [0.05, -0.1]);
        let (d0, p0) = outputs_for_order(&m, &c, &id, &ids, &action);
        let (d1, p1) = outputs_for_order(&m, &c, &perm, &ids, &action);
        let pairs = edge_pairs(n);
        for (r, &(a, b)) in pairs.iter().enumerate() {
            let orig = pairs.iter().position(|&e| e == (perm[a], perm[b])).unwrap();
            for k in 0..7 {
                assert!((d1.get(r, k) - d0.get(orig, k)).abs() <= 1e-9);
                assert!((p1.get(r, k) - p0.get(orig, k)).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn relation_probabilities_shape_and_range() {
    let m = Model::new(ModelConfig::default(), 3).unwrap();
    let c = cloud(8, 4);
    let p = m.latent_probs(&m.encode_eval(&c).unwrap()).unwrap();
    assert_eq!(p.probs.len(), 12);
    assert!(p.probs.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    let ids = c.ids();
    assert_eq!(p.get(ids[2], ids[1]), Some(&p.probs[2 * 3 + 1]));
    assert_eq!(p.get(ids[1], ids[2]), Some(&p.probs[3 + 1]));
    assert_eq!(p.get(ids[1], ids[1]), None);
    assert_eq!(p.to_matrix().len(), 12);
}

#[test]
fn pose_rotation_is_orthonormal() {
    let m = Model::new(ModelConfig::default(), 4).unwrap();
    let x = m.encode_eval(&cloud(9, 3)).unwrap();
    for (_, r) in m.latent_pose(&x).unwrap() {
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|k| r[k * 3 + a] * r[k * 3 + b]).sum();
                assert!((d - f64::from(a == b)).abs() < 1e-9);
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) + r[2] * (r[3] * r[7] - r[4] * r[6]);
        assert!((det - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gram_schmidt_matches_qr() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (id, _) = gram_schmidt_forward(&[1., 0., 0., 0., 1., 0.]);
    assert_eq!(id, [1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    for _ in 0..200 {
        let x: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let (r, _) = gram_schmidt_forward(&x);
        let a = nalgebra::Matrix3x2::new(x[0], x[3], x[1], x[4], x[2], x[5]);
        let qr = a.qr();
        let (q, rr) = (qr.q(), qr.r());
        for col in 0..2 {
            let s = rr[(col, col)].signum();
            for row in 0..3 {
                assert!((r[row * 3 + col] - s * q[(row, col)]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zeroed_dynamics_is_identity_and_composes() {
    let mut m = Model::new(ModelConfig::default(), 5).unwrap();
    let c = cloud(10, 3);
    let x = m.encode_eval(&c).unwrap();
    let a = SkillAction::new(Skill::Push, c.objects[1].id, [0.1, 0.2]);
    let b = SkillAction::new(Skill::PickPlace, c.objects[0].id, [-0.1, 0.3]);
    let twice = m.predict_latent(&m.predict_latent(&x, &a).unwrap(), &b).unwrap();
    let mut t = Tape::new();
    let xv = m.latent_on_tape(&mut t, &x, 1).unwrap();
    let y = m.dynamics(&mut t, &xv, a.skill, &m.action_rows(&x, &[a]).unwrap()).unwrap();
    let z = m.dynamics(&mut t, &y, b.skill, &m.action_rows(&x, &[b]).unwrap()).unwrap();
    assert_eq!(&twice.edges, t.value(z.edges));
    m.zero_dynamics_output();
    let y = m.predict_latent(&x, &a).unwrap();
    assert_eq!(y, x);
}

#[test]
fn batched_prediction_matches_single() {
    let m = Model::new(ModelConfig::default(), 6).unwrap();
    let c = cloud(11, 3);
    let x = m.encode_eval(&c).unwrap();
    let acts: Vec<_> = (0..5)
        .map(|k| SkillAction::new(Skill::Push, c.objects[k % 3].id, [0.02 * k as f64, -0.01]))
        .collect();
    let batch = m.predict_probs_batch(&x, Skill::Push, &acts).unwrap();
    for (a, p) in acts.iter().zip(&batch) {
        let single = m.latent_probs(&m.predict_latent(&x, a).unwrap()).unwrap();
        for (u, v) in single.probs.iter().flatten().zip(p.probs.iter().flatten()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert!(m.predict_probs_batch(&x, Skill::PickPlace, &acts).is_err());
}

#[test]
fn pairwise_pairs_are_isolated() {
    let m = Model::new(ModelConfig::pairwise(), 7).unwrap();
    let c = cloud(12, 3);
    let x = m.encode_eval(&c).unwrap();
    assert!(x.nodes.is_none());
    let mut moved = c.clone();
    for p in &mut moved.objects[2].points {
        p[0] += 0.05;
        p[2] += 0.01;
    }
    let y = m.encode_eval(&moved).unwrap();
    let (px, py) = (m.latent_probs(&x).unwrap(), m.latent_probs(&y).unwrap());
    let (a, b) = (c.objects[0].id, c.objects[1].id);
    assert_eq!(px.get(a, b), py.get(a, b));
    assert_eq!(px.get(b, a), py.get(b, a));
    assert_ne!(px.get(a, c.objects[2].id), py.get(a, c.objects[2].id));
    let two = m.encode_eval(&cloud(13, 2)).unwrap();
    assert_eq!(two.edges.rows(), 2);
}

#[test]
fn parameter_counts() {
    let gnn = Model::new(ModelConfig::default(), 1).unwrap();
    let pair = Model::new(ModelConfig::pairwise(), 1).unwrap();
    // pair encoder 288 → 64 → 128
    assert_eq!(pair.pair_encoder_params(), 288 * 64 + 64 + 64 * 128 + 128);
    assert!(pair.pair_encoder_params() < gnn.num_params());
    assert!(pair.num_params() < gnn.num_params());
    // point encoder 6 → 64 → 128 and pool 128 → 128
    let pc = 6 * 64 + 64 + 64 * 128 + 128 + 128 * 128 + 128;
    assert_eq!(gnn.store.num_scalars_with_prefix("phi_pc."), pc);
}

#[test]
fn detect_and_predict_share_encoder_parameters() {
    let m = Model::new(ModelConfig::default(), 8).unwrap();
    let c = cloud(14, 2);
    let objs: Vec<_> = c.objects.iter().collect();
    let (pts, oh) = m.node_inputs(&objs, &[0, 1], &c.camera).unwrap();
    let grads_of = |predict: bool| {
        let mut t = Tape::new();
        let v = m.input_nodes(&mut t, &pts, &oh).unwrap();
        let mut x = m.graph_encode(&mut t, v, GraphShape { n: 2, batch: 1 }).unwrap();
        if predict {
            let a = SkillAction::new(Skill::Push, c.objects[0].id, [0.1, 0.0]);
            x = m.dynamics(&mut t, &x, a.skill, &Tensor::row_vector(m.action_input(&a, 0, &c.camera.frame()))).unwrap();
        }
        let z = m.relation_logits(&mut t, &x).unwrap();
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        t.param_gradients(&g, m.store.len())
    };
    let (d, p) = (grads_of(false), grads_of(true));
    for (id, name, _) in m.store.iter() {
        if name.starts_with("phi_pc.") || name.starts_with("phi_g.") {
            assert!(d[id.0].is_some() && p[id.0].is_some(), "{name}");
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(ModelConfig::default(), 9).unwrap();
    m.save(&path, serde_json::json!({"epoch": 3})).unwrap();
    let (back, meta) = Model::load(&path).unwrap();
    assert_eq!(meta["epoch"], 3);
    assert_eq!(back.config, m.config);
    let c = cloud(15, 3);
    assert_eq!(m.encode_eval(&c).unwrap(), back.encode_eval(&c).unwrap());
}

#[test]
fn analytic_readout_uses_predicted_centroids() {
    let cfg = ModelConfig {
        readout: RelationReadout::Analytic,
        ..ModelConfig::default()
    };
    let m = Model::new(cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let scene = sample_scene(&mut rng, 3, 2, &SceneConfig::default()).unwrap();
    let x = m.encode_eval(&render_cloud(&scene)).unwrap();
    assert!(m.latent_probs(&x).is_err());
    let x = x.with_half_extents(&scene.objects).unwrap();
    let p = m.latent_probs(&x).unwrap();
    let poses = m.latent_pose(&x).unwrap();
    let boxes: Vec<_> = x
        .object_ids
        .iter()
        .enumerate()
        .map(|(k, &id)| crate::scene::Cuboid::new(id, poses[k].0, scene.get(id).unwrap().half_extents))
        .collect();
    let want = crate::relations::label_pair(&boxes[0], &boxes[2], &scene.camera);
    let got = p.get(x.object_ids[0], x.object_ids[2]).unwrap();
    for k in 0..7 {
        assert_eq!(got[k] > 0.5, want.0[k]);
    }
    assert!(Model::new(
        ModelConfig {
            readout: RelationReadout::Analytic,
            ..ModelConfig::pairwise()
        },
        0
    )
    .is_err());
}

#[test]
fn normalize_round_trip() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let cam = Camera::default();
    let p = [0.1, -0.2, 0.03];
    let q = m.denormalize_point(m.normalize_point(p, &cam), &cam);
    for a in 0..3 {
        assert!((p[a] - q[a]).abs() < 1e-12);
    }
    assert_eq!(m.normalize_point(cam.look_at, &cam), [0.0, 0.0, 0.0]);
}
