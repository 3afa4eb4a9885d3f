//! Detached inference: encode a cloud once, roll it through the dynamics,
//! read relation probabilities.

use serde::{Deserialize, Serialize};

use super::{GraphShape, LatentVars, Model, RelationReadout};
use crate::autodiff::{sigmoid, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::relations::{label_pair, RelationMatrix, RelationVector, NUM_RELATIONS};
use crate::scene::{render_cloud, Camera, Cuboid, Scene, SegmentedCloud, Vec3};
use crate::sim::{Skill, SkillAction};

/// Probability assigned to analytic readout verdicts.
pub const ANALYTIC_CONFIDENCE: f64 = 1.0 - 1e-7;

/// A latent graph outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// Scene ids in node order.
    pub object_ids: Vec<u8>,
    /// Identity one-hot index used for each node.
    pub model_ids: Vec<u8>,
    pub camera: Camera,
    pub nodes: Option<Tensor>,
    pub edges: Tensor,
    /// True half extents in node order; required by the analytic readout.
    pub half_extents: Option<Vec<Vec3>>,
}

impl Latent {
    pub fn n(&self) -> usize {
        self.object_ids.len()
    }

    pub fn node_of(&self, id: u8) -> Option<usize> {
        self.object_ids.iter().position(|&o| o == id)
    }

    pub fn with_half_extents(mut self, scene_objects: &[Cuboid]) -> Result<Self> {
        let mut ext = Vec::with_capacity(self.n());
        for id in &self.object_ids {
            let b = scene_objects
                .iter()
                .find(|o| o.object_id == *id)
                .ok_or(Error::UnknownObject(*id))?;
            ext.push(b.half_extents);
        }
        self.half_extents = Some(ext);
        Ok(self)
    }
}

/// Relation probabilities for every ordered pair, in edge order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProbs {
    pub object_ids: Vec<u8>,
    pub probs: Vec<[f64; NUM_RELATIONS]>,
}

impl PairProbs {
    pub fn get(&self, i: u8, j: u8) -> Option<&[f64; NUM_RELATIONS]> {
        let n = self.object_ids.len();
        let a = self.object_ids.iter().position(|&o| o == i)?;
        let b = self.object_ids.iter().position(|&o| o == j)?;
        if a == b {
            return None;
        }
        self.probs.get(a * (n - 1) + if b > a { b - 1 } else { b })
    }

    /// Thresholds at 0.5.
    pub fn to_matrix(&self) -> RelationMatrix {
        let mut m = RelationMatrix::new();
        let pairs = super::edge_pairs(self.object_ids.len());
        for (&(a, b), p) in pairs.iter().zip(&self.probs) {
            let mut v = RelationVector::default();
            for (k, slot) in v.0.iter_mut().enumerate() {
                *slot = p[k] > 0.5;
            }
            m.insert(self.object_ids[a], self.object_ids[b], v);
        }
        m
    }
}

/// The interface the planner needs from a learned (or stub) model.
pub trait RelationalDynamics: Sync {
    type State: Clone + Send + Sync;

    fn encode(&self, cloud: &SegmentedCloud) -> Result<Self::State>;

    /// Encodes the rendered view of `scene`. Models that need more than the
    /// cloud (object sizes for an analytic readout) take it from the scene.
    fn encode_scene(&self, scene: &Scene) -> Result<Self::State> {
        self.encode(&render_cloud(scene))
    }

    fn predict(&self, state: &Self::State, action: &SkillAction) -> Result<Self::State>;

    /// Probabilities after each of `actions` (all of one skill), applied to `state`.
    fn predict_probs(&self, state: &Self::State, skill: Skill, actions: &[SkillAction]) -> Result<Vec<PairProbs>>;

    fn relation_probs(&self, state: &Self::State) -> Result<PairProbs>;
}

impl Model {
    /// Encodes the cloud with node `k` given identity `k`.
    pub fn encode_eval(&self, cloud: &SegmentedCloud) -> Result<Latent> {
        let ids: Vec<u8> = (0..cloud.len() as u8).collect();
        self.encode_with_ids(cloud, &ids)
    }

    pub fn encode_with_ids(&self, cloud: &SegmentedCloud, model_ids: &[u8]) -> Result<Latent> {
        if cloud.is_empty() {
            return invalid("cannot encode an empty cloud");
        }
        let objs: Vec<_> = cloud.objects.iter().collect();
        let (pts, ids) = self.node_inputs(&objs, model_ids, &cloud.camera)?;
        let mut tape = Tape::new();
        let v = self.input_nodes(&mut tape, &pts, &ids)?;
        let x = self.graph_encode(&mut tape, v, GraphShape { n: objs.len(), batch: 1 })?;
        Ok(Latent {
            object_ids: cloud.ids(),
            model_ids: model_ids.to_vec(),
            camera: cloud.camera.clone(),
            nodes: x.nodes.map(|n| tape.value(n).clone()),
            edges: tape.value(x.edges).clone(),
            half_extents: None,
        })
    }

    /// Places `batch` copies of `latent` on the tape.
    pub fn latent_on_tape(&self, tape: &mut Tape, latent: &Latent, batch: usize) -> Result<LatentVars> {
        let n = latent.n();
        let shape = GraphShape { n, batch };
        let e = shape.edges_per_graph();
        let nodes = match &latent.nodes {
            Some(t) => {
                let c = tape.constant(t.clone());
                let idx: Vec<usize> = (0..batch * n).map(|r| r % n).collect();
                Some(if batch == 1 { c } else { tape.gather_rows(c, &idx)? })
            }
            None => None,
        };
        let c = tape.constant(latent.edges.clone());
        let edges = if batch == 1 {
            c
        } else {
            let idx: Vec<usize> = (0..batch * e).map(|r| r % e.max(1)).collect();
            tape.gather_rows(c, &idx)?
        };
        Ok(LatentVars { shape, nodes, edges })
    }

    /// Action-encoder rows for `actions` against `latent`'s identities.
    pub fn action_rows(&self, latent: &Latent, actions: &[SkillAction]) -> Result<Tensor> {
        let frame = latent.camera.frame();
        let w = self.config.action_input();
        let mut data = Vec::with_capacity(actions.len() * w);
        for a in actions {
            let k = latent.node_of(a.target).ok_or(Error::UnknownObject(a.target))?;
            data.extend(self.action_input(a, latent.model_ids[k], &frame));
        }
        Tensor::from_shape([actions.len(), w], data)
    }

    pub fn predict_latent(&self, latent: &Latent, action: &SkillAction) -> Result<Latent> {
        action.validate()?;
        let rows = self.action_rows(latent, std::slice::from_ref(action))?;
        let mut tape = Tape::new();
        let x = self.latent_on_tape(&mut tape, latent, 1)?;
        let y = self.dynamics(&mut tape, &x, action.skill, &rows)?;
        Ok(Latent {
            nodes: y.nodes.map(|n| tape.value(n).clone()),
            edges: tape.value(y.edges).clone(),
            ..latent.clone()
        })
    }

    /// Relation probabilities of every graph in a batch on the tape.
    pub fn probs_on_tape(&self, tape: &mut Tape, x: &LatentVars, latent: &Latent) -> Result<Vec<PairProbs>> {
        let (n, batch) = (x.shape.n, x.shape.batch);
        let e = x.shape.edges_per_graph();
        let mut out = Vec::with_capacity(batch);
        match self.config.readout {
            RelationReadout::Learned => {
                let z = self.relation_logits(tape, x)?;
                let z = tape.value(z);
                for b in 0..batch {
                    let probs = (0..e)
                        .map(|r| std::array::from_fn(|k| sigmoid(z.get(b * e + r, k))))
                        .collect();
                    out.push(PairProbs {
                        object_ids: latent.object_ids.clone(),
                        probs,
                    });
                }
            }
            RelationReadout::Analytic => {
                let ext = latent
                    .half_extents
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("analytic readout needs true half extents".into()))?;
                let (c, _) = self.pose(tape, x)?;
                let c = tape.value(c).clone();
                let pairs = super::edge_pairs(n);
                for b in 0..batch {
                    let boxes: Vec<Cuboid> = (0..n)
                        .map(|i| {
                            let q = [c.get(b * n + i, 0), c.get(b * n + i, 1), c.get(b * n + i, 2)];
                            Cuboid::new(latent.object_ids[i], self.denormalize_point(q, &latent.camera), ext[i])
                        })
                        .collect();
                    let probs = pairs
                        .iter()
                        .map(|&(i, j)| {
                            let v = label_pair(&boxes[i], &boxes[j], &latent.camera);
                            std::array::from_fn(|k| if v.0[k] { ANALYTIC_CONFIDENCE } else { 1.0 - ANALYTIC_CONFIDENCE })
                        })
                        .collect();
                    out.push(PairProbs {
                        object_ids: latent.object_ids.clone(),
                        probs,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn latent_probs(&self, latent: &Latent) -> Result<PairProbs> {
        let mut tape = Tape::new();
        let x = self.latent_on_tape(&mut tape, latent, 1)?;
        Ok(self.probs_on_tape(&mut tape, &x, latent)?.remove(0))
    }

    /// Probabilities after each action, batched on one tape.
    pub fn predict_probs_batch(&self, latent: &Latent, skill: Skill, actions: &[SkillAction]) -> Result<Vec<PairProbs>> {
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        for a in actions {
            a.validate()?;
            if a.skill != skill {
                return invalid("every action in a batch must use the batch skill");
            }
        }
        let rows = self.action_rows(latent, actions)?;
        let mut tape = Tape::new();
        let x = self.latent_on_tape(&mut tape, latent, actions.len())?;
        let y = self.dynamics(&mut tape, &x, skill, &rows)?;
        self.probs_on_tape(&mut tape, &y, latent)
    }

    /// Predicted centroids (world frame) and rotations per node.
    pub fn latent_pose(&self, latent: &Latent) -> Result<Vec<(Vec3, [f64; 9])>> {
        let mut tape = Tape::new();
        let x = self.latent_on_tape(&mut tape, latent, 1)?;
        let (c, r) = self.pose(&mut tape, &x)?;
        let (c, r) = (tape.value(c), tape.value(r));
        Ok((0..latent.n())
            .map(|i| {
                let q = [c.get(i, 0), c.get(i, 1), c.get(i, 2)];
                (self.denormalize_point(q, &latent.camera), std::array::from_fn(|k| r.get(i, k)))
            })
            .collect())
    }
}

impl RelationalDynamics for Model {
    type State = Latent;

    fn encode(&self, cloud: &SegmentedCloud) -> Result<Latent> {
        self.encode_eval(cloud)
    }

    fn encode_scene(&self, scene: &Scene) -> Result<Latent> {
        let x = self.encode_eval(&render_cloud(scene))?;
        match self.config.readout {
            RelationReadout::Learned => Ok(x),
            RelationReadout::Analytic => x.with_half_extents(&scene.objects),
        }
    }

    fn predict(&self, state: &Latent, action: &SkillAction) -> Result<Latent> {
        self.predict_latent(state, action)
    }

    fn predict_probs(&self, state: &Latent, skill: Skill, actions: &[SkillAction]) -> Result<Vec<PairProbs>> {
        self.predict_probs_batch(state, skill, actions)
    }

    fn relation_probs(&self, state: &Latent) -> Result<PairProbs> {
        self.latent_probs(state)
    }
}
