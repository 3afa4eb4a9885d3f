use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{edge_pairs, GraphShape, Latent, Model, PairProbs};
use crate::autodiff::{Tape, Tensor};
use crate::relations::{Relation, RelationMatrix, NUM_RELATIONS};
use crate::sim::Episode;

/// Probabilities above this count as a positive prediction.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 2PR / (P + R), 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation: Relation,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub per_relation: Vec<RelationScore>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Ordered pairs scored.
    pub n_pairs: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally(pub [Confusion; NUM_RELATIONS]);

impl Tally {
    /// Scores every pair in `probs` against `labels`.
    pub fn add(&mut self, probs: &PairProbs, labels: &RelationMatrix) {
        let pairs = edge_pairs(probs.object_ids.len());
        for (&(a, b), p) in pairs.iter().zip(&probs.probs) {
            let truth = labels
                .get(probs.object_ids[a], probs.object_ids[b])
                .copied()
                .unwrap_or_default();
            for (k, c) in self.0.iter_mut().enumerate() {
                c.add(p[k] > THRESHOLD, truth.0[k]);
            }
        }
    }

    pub fn merge(&mut self, o: &Tally) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            a.merge(b);
        }
    }

    pub fn report(&self) -> PathReport {
        let per_relation: Vec<RelationScore> = Relation::ALL
            .iter()
            .zip(&self.0)
            .map(|(&relation, c)| RelationScore {
                relation,
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                counts: *c,
            })
            .collect();
        let macro_f1 = per_relation.iter().map(|r| r.f1).sum::<f64>() / NUM_RELATIONS as f64;
        let mut all = Confusion::default();
        for c in &self.0 {
            all.merge(c);
        }
        PathReport {
            per_relation,
            macro_f1,
            micro_f1: all.f1(),
            n_pairs: self.0[0].tp + self.0[0].fp + self.0[0].fn_ + self.0[0].tn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub detect: PathReport,
    pub predict: PathReport,
    pub n_episodes: usize,
}

/// Detect and predict tallies for a set of episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalTally {
    pub detect: Tally,
    pub predict: Tally,
    pub n_episodes: usize,
}

impl EvalTally {
    pub fn merge(&mut self, o: &EvalTally) {
        self.detect.merge(&o.detect);
        self.predict.merge(&o.predict);
        self.n_episodes += o.n_episodes;
    }

    pub fn report(&self) -> F1Report {
        F1Report {
            detect: self.detect.report(),
            predict: self.predict.report(),
            n_episodes: self.n_episodes,
        }
    }
}

/// Node identities `0..n`. Detection is scored on every post-action
/// observation; prediction on every rollout from every start, each against
/// the labels of the observation it lands on.
pub fn evaluate_episode(model: &Model, episode: &Episode) -> Result<EvalTally> {
    let mut out = EvalTally {
        n_episodes: 1,
        ..EvalTally::default()
    };
    let n = episode.n_objects();
    let t_obs = episode.observations.len();
    if n < 2 || episode.horizon() == 0 {
        return Ok(out);
    }
    let ids: Vec<u8> = (0..n as u8).collect();
    let camera = &episode.observations[0].cloud.camera;
    let mut pts = Vec::new();
    let mut oh = Vec::new();
    for o in &episode.observations {
        let objs: Vec<_> = o.cloud.objects.iter().collect();
        let (p, i) = model.node_inputs(&objs, &ids, camera)?;
        pts.extend_from_slice(p.data());
        oh.extend_from_slice(i.data());
    }
    let k = model.config.points_per_object;
    let pts = Tensor::from_shape([t_obs * n * k, 6], pts)?;
    let oh = Tensor::from_shape([t_obs * n, model.config.id_width], oh)?;
    let template = Latent {
        object_ids: episode.observations[0].cloud.ids(),
        model_ids: ids.clone(),
        camera: camera.clone(),
        nodes: None,
        edges: Tensor::zeros(0, 0),
        half_extents: Some(episode.observations[0].poses.iter().map(|b| b.half_extents).collect()),
    };
    let mut tape = Tape::new();
    let v = model.input_nodes(&mut tape, &pts, &oh)?;
    let x = model.graph_encode(&mut tape, v, GraphShape { n, batch: t_obs })?;
    let det = model.probs_on_tape(&mut tape, &x, &template)?;
    for t in 1..t_obs {
        out.detect.add(&det[t], &episode.observations[t].relations);
    }
    let frame = camera.frame();
    for start in 0..episode.horizon() {
        let mut lat = model.select_graph(&mut tape, &x, start)?;
        for step in start..episode.horizon() {
            let a = &episode.actions[step];
            let node = template
                .node_of(a.target)
                .ok_or(crate::Error::UnknownObject(a.target))?;
            let row = Tensor::row_vector(model.action_input(a, ids[node], &frame));
            lat = model.dynamics(&mut tape, &lat, a.skill, &row)?;
            let p = model.probs_on_tape(&mut tape, &lat, &template)?;
            out.predict.add(&p[0], &episode.observations[step + 1].relations);
        }
    }
    Ok(out)
}

/// Pooled counts over `episodes`, evaluated in parallel and merged in order.
pub fn evaluate(model: &Model, episodes: &[&Episode]) -> Result<F1Report> {
    use rayon::prelude::*;
    let parts: Vec<EvalTally> = episodes
        .par_iter()
        .map(|e| evaluate_episode(model, e))
        .collect::<Result<_>>()?;
    let mut total = EvalTally::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::RelationVector;

    fn probs_from(bits: &[[bool; 7]]) -> PairProbs {
        PairProbs {
            object_ids: vec![0, 1],
            probs: bits
                .iter()
                .map(|b| std::array::from_fn(|k| if b[k] { 0.9 } else { 0.1 }))
                .collect(),
        }
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let c = Confusion::default();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_and_all_negative_predictors() {
        let mut labels = RelationMatrix::new();
        let mut v = RelationVector::default();
        v.0 = [true, false, true, false, true, false, true];
        labels.insert(0, 1, v);
        labels.insert(1, 0, RelationVector([false, true, false, true, false, true, true]));
        let mut t = Tally::default();
        t.add(&probs_from(&[labels.get(0, 1).unwrap().0, labels.get(1, 0).unwrap().0]), &labels);
        let r = t.report();
        assert!(r.per_relation.iter().all(|s| s.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        let mut t = Tally::default();
        t.add(&probs_from(&[[false; 7], [false; 7]]), &labels);
        let r = t.report();
        assert!(r.per_relation.iter().all(|s| s.recall == 0.0 && s.f1 == 0.0));
    }

    /// Ten labelled pairs for one relation, tallied by hand:
    /// predicted 1 1 1 1 0 0 0 1 0 0
    /// actual    1 1 0 1 1 0 0 0 0 1
    /// TP 3, FP 2, FN 2, TN 3 → P = 0.6, R = 0.6, F1 = 0.6
    #[test]
    fn hand_tallied_confusion() {
        let pred = [1, 1, 1, 1, 0, 0, 0, 1, 0, 0];
        let act = [1, 1, 0, 1, 1, 0, 0, 0, 0, 1];
        let mut c = Confusion::default();
        for (p, a) in pred.iter().zip(act) {
            c.add(*p == 1, a == 1);
        }
        assert_eq!(c, Confusion { tp: 3, fp: 2, fn_: 2, tn: 3 });
        assert!((c.precision() - 0.6).abs() < 1e-15);
        assert!((c.f1() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn macro_is_unweighted_mean() {
        let mut t = Tally::default();
        let f: [(u64, u64, u64); 7] = [(1, 0, 0), (1, 1, 0), (0, 1, 1), (5, 2, 1), (0, 0, 0), (3, 3, 3), (9, 0, 1)];
        for (k, (tp, fp, fn_)) in f.iter().enumerate() {
            t.0[k] = Confusion { tp: *tp, fp: *fp, fn_: *fn_, tn: 0 };
        }
        let r = t.report();
        let mean = r.per_relation.iter().map(|s| s.f1).sum::<f64>() / 7.0;
        assert_eq!(r.macro_f1, mean);
        let (tp, fp, fn_) = (19.0, 7.0, 6.0);
        let micro = 2.0 * tp / (2.0 * tp + fp + fn_);
        assert!((r.micro_f1 - micro).abs() < 1e-12);
    }
}
