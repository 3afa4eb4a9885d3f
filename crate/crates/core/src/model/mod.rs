//! Point-cloud set encoder, latent graph encoder, relation and pose heads,
//! action encoder and per-skill residual latent dynamics, plus the pairwise
//! MLP baseline. Every forward pass is recorded on a [`Tape`] and runs on a
//! batch of graphs that share one node count.

mod config;
mod infer;

pub use config::{Architecture, ModelConfig, RelationReadout};
pub use infer::{Latent, PairProbs, RelationalDynamics};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mlp, OutputActivation, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scene::{Camera, CameraFrame, ObjectCloud, Vec3};
use crate::sim::{Skill, SkillAction};

/// Directed edges (i, j), i ≠ j, in row-major order.
pub fn edge_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// `batch` graphs of `n` nodes each, stored graph after graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphShape {
    pub n: usize,
    pub batch: usize,
}

impl GraphShape {
    pub fn edges_per_graph(&self) -> usize {
        self.n * self.n.saturating_sub(1)
    }

    pub fn total_nodes(&self) -> usize {
        self.n * self.batch
    }

    pub fn total_edges(&self) -> usize {
        self.edges_per_graph() * self.batch
    }

    /// Global (sender, receiver) node rows for every edge.
    fn endpoints(&self) -> (Vec<usize>, Vec<usize>) {
        let pairs = edge_pairs(self.n);
        let mut src = Vec::with_capacity(self.total_edges());
        let mut dst = Vec::with_capacity(self.total_edges());
        for b in 0..self.batch {
            for &(i, j) in &pairs {
                src.push(b * self.n + i);
                dst.push(b * self.n + j);
            }
        }
        (src, dst)
    }

    fn node_graph(&self) -> Vec<usize> {
        (0..self.total_nodes()).map(|r| r / self.n).collect()
    }

    fn edge_graph(&self) -> Vec<usize> {
        let e = self.edges_per_graph();
        (0..self.total_edges()).map(|r| r / e.max(1)).collect()
    }
}

/// Latent graph on a tape. `nodes` is absent for the pairwise baseline.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub shape: GraphShape,
    pub nodes: Option<Var>,
    pub edges: Var,
}

#[derive(Clone, Debug)]
enum Encoder {
    Gnn {
        /// (message f_m, node update g_v) per round.
        rounds: Vec<(Mlp, Mlp)>,
        edge: Mlp,
    },
    Pairwise {
        pair: Mlp,
    },
}

#[derive(Clone, Debug)]
struct Nets {
    point: Mlp,
    pool: Mlp,
    encoder: Encoder,
    rel_message: Option<Mlp>,
    rel_head: Mlp,
    pose_message: Option<Mlp>,
    pose_head: Option<Mlp>,
    action: Mlp,
    /// Indexed by [`Skill::index`].
    dyn_node: Vec<Option<Mlp>>,
    dyn_edge: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    nets: Nets,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let none = OutputActivation::None;
        let (l, gh) = (c.latent, c.graph_hidden);
        let point = Mlp::new(&mut s, "phi_pc.point_mlp", &[6, c.point_hidden, c.point_feature], none, &mut rng)?;
        let pool = Mlp::new(&mut s, "phi_pc.pool_mlp", &[c.point_feature, c.point_feature], none, &mut rng)?;
        let ni = c.node_input();
        let encoder = match c.architecture {
            Architecture::Gnn => {
                let mut rounds = Vec::with_capacity(c.message_rounds);
                let mut width = ni;
                for r in 0..c.message_rounds {
                    let tag = if r == 0 { String::new() } else { format!(".round{r}") };
                    let m = Mlp::new(&mut s, &format!("phi_g{tag}.message_mlp"), &[2 * width, gh, l], none, &mut rng)?;
                    let v = Mlp::new(&mut s, &format!("phi_g{tag}.node_mlp"), &[width + l, gh, l], none, &mut rng)?;
                    rounds.push((m, v));
                    if r + 1 < c.message_rounds {
                        width = l;
                    }
                }
                let edge = Mlp::new(&mut s, "phi_g.edge_mlp", &[2 * width + 2 * l, gh, l], none, &mut rng)?;
                Encoder::Gnn { rounds, edge }
            }
            Architecture::PairwiseMlp => Encoder::Pairwise {
                pair: Mlp::new(&mut s, "pair.encoder_mlp", &[2 * ni, gh, l], none, &mut rng)?,
            },
        };
        let gnn = c.architecture == Architecture::Gnn;
        let rh = c.relation_hidden;
        let (rel_message, rel_head) = if gnn {
            (
                Some(Mlp::new(&mut s, "psi_r.message_mlp", &[3 * l, gh, l], none, &mut rng)?),
                Mlp::new(&mut s, "psi_r.head", &[5 * l, rh, c.n_relations], none, &mut rng)?,
            )
        } else {
            (None, Mlp::new(&mut s, "pair.relation_head", &[l, rh, c.n_relations], none, &mut rng)?)
        };
        let (pose_message, pose_head) = if gnn {
            (
                Some(Mlp::new(&mut s, "psi_p.message_mlp", &[3 * l, gh, l], none, &mut rng)?),
                Some(Mlp::new(&mut s, "psi_p.head", &[2 * l, c.pose_hidden, 9], none, &mut rng)?),
            )
        } else {
            (None, None)
        };
        let action = Mlp::new(&mut s, "phi_a", &[c.action_input(), c.action_hidden, l], none, &mut rng)?;
        let dh = c.dynamics_hidden;
        let mut dyn_node = Vec::new();
        let mut dyn_edge = Vec::new();
        for skill in Skill::ALL {
            let base = if gnn { "delta" } else { "pair.delta" };
            dyn_node.push(if gnn {
                Some(Mlp::new(&mut s, &format!("{base}.{}.node_mlp", skill.name()), &[2 * l, dh, l], none, &mut rng)?)
            } else {
                None
            });
            dyn_edge.push(Mlp::new(&mut s, &format!("{base}.{}.edge_mlp", skill.name()), &[2 * l, dh, l], none, &mut rng)?);
        }
        Ok(Self {
            config,
            store: s,
            nets: Nets {
                point,
                pool,
                encoder,
                rel_message,
                rel_head,
                pose_message,
                pose_head,
                action,
                dyn_node,
                dyn_edge,
            },
        })
    }

    /// Rebuilds a model from a checkpoint header and tensors.
    pub fn from_parts(header: &serde_json::Value, store: &ParamStore) -> Result<Self> {
        let cfg = header
            .get("model")
            .ok_or_else(|| Error::Checkpoint("header has no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        let mut m = Self::new(config, 0)?;
        if store.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model needs {}",
                store.len(),
                m.store.len()
            )));
        }
        m.store.load_from(store)?;
        Ok(m)
    }

    pub fn header(&self, meta: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "meta": meta })
    }

    pub fn save(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        crate::checkpoint::save(path, &self.header(meta), &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, serde_json::Value)> {
        let (header, store) = crate::checkpoint::load(path)?;
        let m = Self::from_parts(&header, &store)?;
        Ok((m, header.get("meta").cloned().unwrap_or(serde_json::Value::Null)))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalars in the pair encoder of the pairwise baseline (0 for the gnn).
    pub fn pair_encoder_params(&self) -> usize {
        match &self.nets.encoder {
            Encoder::Pairwise { pair } => pair.num_scalars(),
            Encoder::Gnn { .. } => 0,
        }
    }

    /// Sets the final layers of every dynamics network to zero, so each
    /// residual update starts as the identity.
    pub fn zero_dynamics_output(&mut self) {
        for m in self.nets.dyn_node.iter().flatten() {
            m.zero_output_layer(&mut self.store);
        }
        for m in &self.nets.dyn_edge {
            m.zero_output_layer(&mut self.store);
        }
    }

    pub fn has_pose_head(&self) -> bool {
        self.nets.pose_head.is_some()
    }

    /// Rows of `[points_per_object, 6]`: coordinates in camera-aligned axes
    /// relative to the look-at point, scaled, then centred, with the
    /// centroid appended. Off-view objects give all zeros.
    pub fn point_rows(&self, obj: &ObjectCloud, camera: &Camera) -> Result<Vec<f64>> {
        let k = self.config.points_per_object;
        if obj.points.len() != k {
            return invalid(format!(
                "object {} has {} points, the encoder needs {k}",
                obj.id,
                obj.points.len()
            ));
        }
        let mut rows = vec![0.0; k * 6];
        if obj.off_view {
            return Ok(rows);
        }
        let frame = camera.frame();
        let pivot = frame.to_camera(camera.look_at);
        let s = self.config.coord_scale;
        let pts: Vec<Vec3> = obj
            .points
            .iter()
            .map(|p| {
                let q = frame.to_camera(*p);
                std::array::from_fn(|a| s * (q[a] - pivot[a]))
            })
            .collect();
        let mut c = [0.0; 3];
        for p in &pts {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.iter_mut().for_each(|v| *v /= k as f64);
        for (r, p) in pts.iter().enumerate() {
            for a in 0..3 {
                rows[r * 6 + a] = p[a] - c[a];
                rows[r * 6 + 3 + a] = c[a];
            }
        }
        Ok(rows)
    }

    /// Point rows for every object, and the id one-hot rows, in node order.
    pub fn node_inputs(
        &self,
        objects: &[&ObjectCloud],
        model_ids: &[u8],
        camera: &Camera,
    ) -> Result<(Tensor, Tensor)> {
        if objects.len() != model_ids.len() {
            return invalid("one model id per object is required");
        }
        for (k, id) in model_ids.iter().enumerate() {
            if usize::from(*id) >= self.config.id_width {
                return invalid(format!("model id {id} outside [0, {})", self.config.id_width));
            }
            if model_ids[..k].contains(id) {
                return invalid(format!("duplicate model id {id}"));
            }
        }
        let k = self.config.points_per_object;
        let mut pts = Vec::with_capacity(objects.len() * k * 6);
        for o in objects {
            pts.extend(self.point_rows(o, camera)?);
        }
        let w = self.config.id_width;
        let mut ids = vec![0.0; objects.len() * w];
        for (r, id) in model_ids.iter().enumerate() {
            ids[r * w + usize::from(*id)] = 1.0;
        }
        Ok((
            Tensor::from_shape([objects.len() * k, 6], pts)?,
            Tensor::from_shape([objects.len(), w], ids)?,
        ))
    }

    /// Per-object 128-wide features from stacked point rows.
    pub fn encode_points(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let h = self.nets.point.forward(tape, &self.store, points)?;
        let h = tape.relu(h);
        let pooled = tape.group_max(h, self.config.points_per_object)?;
        self.nets.pool.forward(tape, &self.store, pooled)
    }

    /// Node inputs (point feature ⊕ id one-hot) for stacked objects.
    pub fn input_nodes(&self, tape: &mut Tape, points: &Tensor, ids: &Tensor) -> Result<Var> {
        let p = tape.constant(points.clone());
        let f = self.encode_points(tape, p)?;
        let i = tape.constant(ids.clone());
        tape.concat_cols(&[f, i])
    }

    /// One round of message passing over the fully connected input graph
    /// (gnn), or the pair encoder (pairwise baseline).
    pub fn graph_encode(&self, tape: &mut Tape, v_in: Var, shape: GraphShape) -> Result<LatentVars> {
        let (src, dst) = shape.endpoints();
        let n_nodes = shape.total_nodes();
        if tape.value(v_in).rows() != n_nodes {
            return invalid(format!(
                "graph of {n_nodes} nodes given {} node rows",
                tape.value(v_in).rows()
            ));
        }
        match &self.nets.encoder {
            Encoder::Gnn { rounds, edge } => {
                let mut v = v_in;
                let mut out = None;
                for (k, (fm, gv)) in rounds.iter().enumerate() {
                    let vi = tape.gather_rows(v, &src)?;
                    let vj = tape.gather_rows(v, &dst)?;
                    let pair = tape.concat_cols(&[vi, vj])?;
                    let m = fm.forward(tape, &self.store, pair)?;
                    let y = tape.segment_mean(m, &dst, n_nodes)?;
                    if k + 1 == rounds.len() {
                        let yi = tape.gather_rows(y, &src)?;
                        let yj = tape.gather_rows(y, &dst)?;
                        let ein = tape.concat_cols(&[vi, vj, yi, yj])?;
                        out = Some(edge.forward(tape, &self.store, ein)?);
                    }
                    let vin = tape.concat_cols(&[v, y])?;
                    v = gv.forward(tape, &self.store, vin)?;
                }
                Ok(LatentVars {
                    shape,
                    nodes: Some(v),
                    edges: out.expect("at least one round"),
                })
            }
            Encoder::Pairwise { pair } => {
                let vi = tape.gather_rows(v_in, &src)?;
                let vj = tape.gather_rows(v_in, &dst)?;
                let cat = tape.concat_cols(&[vi, vj])?;
                Ok(LatentVars {
                    shape,
                    nodes: None,
                    edges: pair.forward(tape, &self.store, cat)?,
                })
            }
        }
    }

    /// Messages over the latent graph, mean-aggregated at receivers.
    fn latent_messages(&self, tape: &mut Tape, x: &LatentVars, mlp: &Mlp) -> Result<(Var, Var, Var)> {
        let nodes = x.nodes.ok_or_else(|| Error::Invalid("latent graph has no node features".into()))?;
        let (src, dst) = x.shape.endpoints();
        let vi = tape.gather_rows(nodes, &src)?;
        let vj = tape.gather_rows(nodes, &dst)?;
        let cat = tape.concat_cols(&[vi, vj, x.edges])?;
        let m = mlp.forward(tape, &self.store, cat)?;
        let y = tape.segment_mean(m, &dst, x.shape.total_nodes())?;
        Ok((vi, vj, y))
    }

    /// Relation logits, one row of 7 per directed edge.
    pub fn relation_logits(&self, tape: &mut Tape, x: &LatentVars) -> Result<Var> {
        match &self.nets.rel_message {
            Some(fm) => {
                let (vi, vj, y) = self.latent_messages(tape, x, fm)?;
                let (src, dst) = x.shape.endpoints();
                let yi = tape.gather_rows(y, &src)?;
                let yj = tape.gather_rows(y, &dst)?;
                let cat = tape.concat_cols(&[vi, vj, yi, yj, x.edges])?;
                self.nets.rel_head.forward(tape, &self.store, cat)
            }
            None => self.nets.rel_head.forward(tape, &self.store, x.edges),
        }
    }

    /// Per node: centroid in scaled camera-aligned coordinates `[*, 3]` and a
    /// row-major rotation `[*, 9]`.
    pub fn pose(&self, tape: &mut Tape, x: &LatentVars) -> Result<(Var, Var)> {
        let (Some(fm), Some(head)) = (&self.nets.pose_message, &self.nets.pose_head) else {
            return invalid("the pairwise baseline has no pose head");
        };
        let (_, _, y) = self.latent_messages(tape, x, fm)?;
        let cat = tape.concat_cols(&[x.nodes.expect("checked by latent_messages"), y])?;
        let out = head.forward(tape, &self.store, cat)?;
        let c = tape.slice_cols(out, 0, 3)?;
        let six = tape.slice_cols(out, 3, 6)?;
        let r = tape.gram_schmidt(six)?;
        Ok((c, r))
    }

    /// The 20-wide action encoder input: skill one-hot ⊕ target one-hot ⊕
    /// displacement in camera-aligned axes divided by the skill bound.
    pub fn action_input(&self, action: &SkillAction, target_model_id: u8, frame: &CameraFrame) -> Vec<f64> {
        let mut a = vec![0.0; self.config.action_input()];
        a[action.skill.index()] = 1.0;
        a[Skill::ALL.len() + usize::from(target_model_id)] = 1.0;
        let d = [action.params[0], action.params[1], 0.0];
        let b = self.config.bound(action.skill);
        let base = Skill::ALL.len() + self.config.id_width;
        a[base] = crate::scene::dot(d, frame.right) / b;
        a[base + 1] = crate::scene::dot(d, frame.forward) / b;
        a
    }

    /// Residual update of every graph in the batch by `skill`'s networks;
    /// `actions` holds one action-encoder input row per graph.
    pub fn dynamics(&self, tape: &mut Tape, x: &LatentVars, skill: Skill, actions: &Tensor) -> Result<LatentVars> {
        if actions.shape() != [x.shape.batch, self.config.action_input()] {
            return Err(Error::ShapeMismatch {
                op: "dynamics actions",
                left: actions.shape(),
                right: [x.shape.batch, self.config.action_input()],
            });
        }
        let a_in = tape.constant(actions.clone());
        let a = self.nets.action.forward(tape, &self.store, a_in)?;
        let k = skill.index();
        let nodes = match (x.nodes, &self.nets.dyn_node[k]) {
            (Some(v), Some(dv)) => {
                let an = tape.gather_rows(a, &x.shape.node_graph())?;
                let cat = tape.concat_cols(&[v, an])?;
                let d = dv.forward(tape, &self.store, cat)?;
                Some(tape.add(v, d)?)
            }
            (None, None) => None,
            _ => return invalid("latent graph does not match the architecture"),
        };
        let ae = tape.gather_rows(a, &x.shape.edge_graph())?;
        let cat = tape.concat_cols(&[x.edges, ae])?;
        let d = self.nets.dyn_edge[k].forward(tape, &self.store, cat)?;
        let edges = tape.add(x.edges, d)?;
        Ok(LatentVars {
            shape: x.shape,
            nodes,
            edges,
        })
    }

    /// Graph rows `b` of a batched latent.
    pub fn select_graph(&self, tape: &mut Tape, x: &LatentVars, b: usize) -> Result<LatentVars> {
        if b >= x.shape.batch {
            return invalid(format!("graph {b} outside batch of {}", x.shape.batch));
        }
        let n = x.shape.n;
        let e = x.shape.edges_per_graph();
        let nodes = match x.nodes {
            Some(v) => Some(tape.gather_rows(v, &(b * n..(b + 1) * n).collect::<Vec<_>>())?),
            None => None,
        };
        let edges = tape.gather_rows(x.edges, &(b * e..(b + 1) * e).collect::<Vec<_>>())?;
        Ok(LatentVars {
            shape: GraphShape { n, batch: 1 },
            nodes,
            edges,
        })
    }

    /// Camera-frame scaled coordinates of a world point, the pose head's
    /// centroid target space.
    pub fn normalize_point(&self, p: Vec3, camera: &Camera) -> Vec3 {
        let f = camera.frame();
        let q = f.to_camera(p);
        let pivot = f.to_camera(camera.look_at);
        std::array::from_fn(|a| self.config.coord_scale * (q[a] - pivot[a]))
    }

    /// Inverse of [`Model::normalize_point`].
    pub fn denormalize_point(&self, q: Vec3, camera: &Camera) -> Vec3 {
        let f = camera.frame();
        let pivot = f.to_camera(camera.look_at);
        f.to_world(std::array::from_fn(|a| q[a] / self.config.coord_scale + pivot[a]))
    }
}

#[cfg(test)]
mod tests;
