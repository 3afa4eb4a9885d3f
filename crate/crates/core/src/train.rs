//! Episode losses and the training loop.
//!
//! | ablation        | architecture | readout  | w_rel | w_dyn | w_rel' | w_pose |
//! |-----------------|--------------|----------|-------|-------|--------|--------|
//! | rd_gnn          | gnn          | learned  | 1     | 1     | 1      | 0      |
//! | rd_pe_gnn       | gnn          | learned  | 1     | 1     | 1      | 1      |
//! | pe_gnn          | gnn          | analytic | 0     | 1     | 0      | 1      |
//! | dpd_gnn         | gnn          | analytic | 0     | 0     | 0      | 1      |
//! | mlp             | pairwise_mlp | learned  | 1     | 1     | 1      | 0      |
//! | rd_gnn_wo_lr    | gnn          | learned  | 1     | 0     | 1      | 0      |
//! | relations_only  | gnn          | learned  | 1     | 0     | 0      | 0      |

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::dataset::Splits;
use crate::error::{invalid, Error, Result};
use crate::eval::metrics::{evaluate, F1Report};
use crate::model::{edge_pairs, Architecture, GraphShape, LatentVars, Model, ModelConfig, RelationReadout};
use crate::scene::MAX_OBJECTS;
use crate::sim::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rel: f64,
    pub w_dyn: f64,
    pub w_rel_prime: f64,
    pub w_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0, 0.0)
    }
}

impl LossWeights {
    pub const fn new(w_rel: f64, w_dyn: f64, w_rel_prime: f64, w_pose: f64) -> Self {
        Self {
            w_rel,
            w_dyn,
            w_rel_prime,
            w_pose,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_rel, self.w_dyn, self.w_rel_prime, self.w_pose]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("loss weights must be finite and non-negative");
        }
        if w.iter().all(|&v| v == 0.0) {
            return invalid("at least one loss weight must be positive");
        }
        Ok(())
    }

    fn needs_rollout(&self) -> bool {
        self.w_dyn > 0.0 || self.w_rel_prime > 0.0 || self.w_pose > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    RdGnn,
    RdPeGnn,
    PeGnn,
    DpdGnn,
    Mlp,
    RdGnnWoLr,
    RelationsOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::RdGnn,
        Ablation::RdPeGnn,
        Ablation::PeGnn,
        Ablation::DpdGnn,
        Ablation::Mlp,
        Ablation::RdGnnWoLr,
        Ablation::RelationsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::RdGnn => "rd_gnn",
            Ablation::RdPeGnn => "rd_pe_gnn",
            Ablation::PeGnn => "pe_gnn",
            Ablation::DpdGnn => "dpd_gnn",
            Ablation::Mlp => "mlp",
            Ablation::RdGnnWoLr => "rd_gnn_wo_lr",
            Ablation::RelationsOnly => "relations_only",
        }
    }

    pub fn architecture(self) -> (Architecture, RelationReadout) {
        match self {
            Ablation::Mlp => (Architecture::PairwiseMlp, RelationReadout::Learned),
            Ablation::PeGnn | Ablation::DpdGnn => (Architecture::Gnn, RelationReadout::Analytic),
            _ => (Architecture::Gnn, RelationReadout::Learned),
        }
    }

    pub fn weights(self) -> LossWeights {
        match self {
            Ablation::RdGnn | Ablation::Mlp => LossWeights::new(1.0, 1.0, 1.0, 0.0),
            Ablation::RdPeGnn => LossWeights::new(1.0, 1.0, 1.0, 1.0),
            Ablation::PeGnn => LossWeights::new(0.0, 1.0, 0.0, 1.0),
            Ablation::DpdGnn => LossWeights::new(0.0, 0.0, 0.0, 1.0),
            Ablation::RdGnnWoLr => LossWeights::new(1.0, 0.0, 1.0, 0.0),
            Ablation::RelationsOnly => LossWeights::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Default model config with this ablation's architecture and readout.
    pub fn model_config(self) -> ModelConfig {
        let (architecture, readout) = self.architecture();
        ModelConfig {
            architecture,
            readout,
            ..ModelConfig::default()
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Invalid(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Replaces the ablation's weights when set; `w_dyn` stays 0 for
    /// `rd_gnn_wo_lr`.
    pub weights: Option<LossWeights>,
    /// Replaces the ablation's model config when set; architecture and
    /// readout always come from the ablation.
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 40,
            seed: 0,
            ablation: Ablation::RdGnn,
            weights: None,
            model: None,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        let mut w = self.weights.unwrap_or_else(|| self.ablation.weights());
        if self.ablation == Ablation::RdGnnWoLr {
            w.w_dyn = 0.0;
        }
        w
    }

    pub fn model_config(&self) -> ModelConfig {
        let (architecture, readout) = self.ablation.architecture();
        ModelConfig {
            architecture,
            readout,
            ..self.model.clone().unwrap_or_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning rate must be positive");
        }
        if self.batch_size != 1 {
            return invalid("only batch size 1 is supported");
        }
        if self.epochs == 0 {
            return invalid("epochs must be positive");
        }
        let w = self.loss_weights();
        w.validate()?;
        let cfg = self.model_config();
        cfg.validate()?;
        if w.w_pose > 0.0 && cfg.architecture != Architecture::Gnn {
            return invalid("the pose loss needs the gnn architecture");
        }
        Ok(())
    }
}

/// `(start, offset)` for every rollout comparison: the latent of observation
/// `start` is advanced by actions `start..=start + offset` and compared with
/// observation `start + offset + 1`.
pub fn rollout_indices(horizon: usize) -> Vec<(usize, usize)> {
    (0..horizon)
        .flat_map(|t| (0..horizon - t).map(move |i| (t, i)))
        .collect()
}

/// An episode's observations encoded as one graph batch on a tape.
pub struct EncodedEpisode<'a> {
    pub episode: &'a Episode,
    pub model_ids: Vec<u8>,
    pub latent: LatentVars,
    /// Relation targets `[n(n−1), 7]` per observation.
    pub labels: Vec<Tensor>,
}

pub struct Rollout {
    pub start: usize,
    pub offset: usize,
    pub latent: LatentVars,
}

impl Rollout {
    pub fn target(&self) -> usize {
        self.start + self.offset + 1
    }
}

pub fn episode_labels(episode: &Episode) -> Result<Vec<Tensor>> {
    let ids = episode
        .observations
        .first()
        .ok_or_else(|| Error::Invalid("episode has no observations".into()))?
        .cloud
        .ids();
    let pairs = edge_pairs(ids.len());
    episode
        .observations
        .iter()
        .map(|o| {
            let mut d = Vec::with_capacity(pairs.len() * 7);
            for &(a, b) in &pairs {
                d.extend(o.relations.get(ids[a], ids[b]).copied().unwrap_or_default().as_f64());
            }
            Tensor::from_shape([pairs.len(), 7], d)
        })
        .collect()
}

pub fn encode_episode<'a>(model: &Model, tape: &mut Tape, episode: &'a Episode, model_ids: &[u8]) -> Result<EncodedEpisode<'a>> {
    let n = episode.n_objects();
    if n == 0 {
        return invalid("episode has no objects");
    }
    let camera = &episode.observations[0].cloud.camera;
    let mut pts = Vec::new();
    let mut oh = Vec::new();
    for o in &episode.observations {
        if o.cloud.ids() != episode.observations[0].cloud.ids() {
            return invalid(format!("episode {} changes its object set", episode.index));
        }
        let objs: Vec<_> = o.cloud.objects.iter().collect();
        let (p, i) = model.node_inputs(&objs, model_ids, camera)?;
        pts.extend_from_slice(p.data());
        oh.extend_from_slice(i.data());
    }
    let t_obs = episode.observations.len();
    let k = model.config.points_per_object;
    let pts = Tensor::from_shape([t_obs * n * k, 6], pts)?;
    let oh = Tensor::from_shape([t_obs * n, model.config.id_width], oh)?;
    let v = model.input_nodes(tape, &pts, &oh)?;
    let latent = model.graph_encode(tape, v, GraphShape { n, batch: t_obs })?;
    Ok(EncodedEpisode {
        episode,
        model_ids: model_ids.to_vec(),
        latent,
        labels: episode_labels(episode)?,
    })
}

/// Every multi-step rollout, sharing the recursion prefix from each start.
pub fn rollouts(model: &Model, tape: &mut Tape, enc: &EncodedEpisode) -> Result<Vec<Rollout>> {
    let ep = enc.episode;
    let ids = ep.observations[0].cloud.ids();
    let frame = ep.observations[0].cloud.camera.frame();
    let mut out = Vec::new();
    for start in 0..ep.horizon() {
        let mut lat = model.select_graph(tape, &enc.latent, start)?;
        for offset in 0..ep.horizon() - start {
            let a = &ep.actions[start + offset];
            let node = ids
                .iter()
                .position(|&i| i == a.target)
                .ok_or(Error::UnknownObject(a.target))?;
            let row = Tensor::row_vector(model.action_input(a, enc.model_ids[node], &frame));
            lat = model.dynamics(tape, &lat, a.skill, &row)?;
            out.push(Rollout {
                start,
                offset,
                latent: lat,
            });
        }
    }
    Ok(out)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = match vars.first() {
        Some(v) => *v,
        None => return Ok(zero(tape)),
    };
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(acc)
}

/// Summed per-relation cross-entropy of the detect path over all observations.
pub fn loss_rel(model: &Model, tape: &mut Tape, enc: &EncodedEpisode) -> Result<Var> {
    if enc.latent.shape.edges_per_graph() == 0 {
        return Ok(zero(tape));
    }
    let z = model.relation_logits(tape, &enc.latent)?;
    let mut d = Vec::new();
    for l in &enc.labels {
        d.extend_from_slice(l.data());
    }
    let target = Tensor::from_shape(tape.value(z).shape(), d)?;
    tape.bce_logits(z, &target)
}

/// Squared distance between each rolled latent and the encoded latent it lands on.
pub fn loss_dyn(model: &Model, tape: &mut Tape, enc: &EncodedEpisode, rolls: &[Rollout]) -> Result<Var> {
    let mut terms = Vec::new();
    for r in rolls {
        let target = model.select_graph(tape, &enc.latent, r.target())?;
        terms.push(tape.sq_dist(r.latent.edges, target.edges)?);
        if let (Some(a), Some(b)) = (r.latent.nodes, target.nodes) {
            terms.push(tape.sq_dist(a, b)?);
        }
    }
    sum_vars(tape, &terms)
}

/// Cross-entropy of relations read from each rolled latent.
pub fn loss_rel_prime(model: &Model, tape: &mut Tape, enc: &EncodedEpisode, rolls: &[Rollout]) -> Result<Var> {
    if enc.latent.shape.edges_per_graph() == 0 {
        return Ok(zero(tape));
    }
    let mut terms = Vec::new();
    for r in rolls {
        let z = model.relation_logits(tape, &r.latent)?;
        terms.push(tape.bce_logits(z, &enc.labels[r.target()])?);
    }
    sum_vars(tape, &terms)
}

/// Targets for one observation: scaled camera-frame centroids and identity
/// rotations (boxes stay axis-aligned in the world).
fn pose_targets(model: &Model, enc: &EncodedEpisode, t: usize) -> (Vec<f64>, Vec<f64>) {
    let o = &enc.episode.observations[t];
    let cam = &enc.episode.observations[0].cloud.camera;
    let mut c = Vec::new();
    let mut r = Vec::new();
    for b in &o.poses {
        c.extend(model.normalize_point(b.center, cam));
        r.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
    (c, r)
}

fn pose_term(model: &Model, tape: &mut Tape, enc: &EncodedEpisode, lat: &LatentVars, times: &[usize]) -> Result<Var> {
    let (c, r) = model.pose(tape, lat)?;
    let (mut tc, mut tr) = (Vec::new(), Vec::new());
    for &t in times {
        let (a, b) = pose_targets(model, enc, t);
        tc.extend(a);
        tr.extend(b);
    }
    let n = tc.len() / 3;
    let tc = tape.constant(Tensor::from_shape([n, 3], tc)?);
    let tr = tape.constant(Tensor::from_shape([n, 9], tr)?);
    let dc = tape.sq_dist(c, tc)?;
    let s = model.config.coord_scale;
    let dc = tape.scale(dc, 1.0 / (s * s));
    let dr = tape.sq_dist(r, tr)?;
    tape.add(dc, dr)
}

/// Squared centroid error in metres plus squared Frobenius rotation error,
/// on the detect path for every observation and on every rollout.
pub fn loss_pose(model: &Model, tape: &mut Tape, enc: &EncodedEpisode, rolls: &[Rollout]) -> Result<Var> {
    let times: Vec<usize> = (0..enc.episode.observations.len()).collect();
    let mut terms = vec![pose_term(model, tape, enc, &enc.latent, &times)?];
    for r in rolls {
        terms.push(pose_term(model, tape, enc, &r.latent, &[r.target()])?);
    }
    sum_vars(tape, &terms)
}

/// Weighted total; a zero weight leaves its term off the tape.
pub struct EpisodeLoss {
    pub total: Var,
    /// Unweighted term values (rel, dyn, rel', pose); 0 for skipped terms.
    pub terms: [f64; 4],
    pub n_rollouts: usize,
}

pub fn episode_loss(
    model: &Model,
    tape: &mut Tape,
    episode: &Episode,
    model_ids: &[u8],
    w: &LossWeights,
) -> Result<EpisodeLoss> {
    let enc = encode_episode(model, tape, episode, model_ids)?;
    let rolls = if w.needs_rollout() {
        rollouts(model, tape, &enc)?
    } else {
        Vec::new()
    };
    let mut parts = Vec::new();
    let mut terms = [0.0; 4];
    for (k, weight) in w.as_array().into_iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let v = match k {
            0 => loss_rel(model, tape, &enc)?,
            1 => loss_dyn(model, tape, &enc, &rolls)?,
            2 => loss_rel_prime(model, tape, &enc, &rolls)?,
            _ => loss_pose(model, tape, &enc, &rolls)?,
        };
        terms[k] = tape.value(v).item();
        parts.push(if weight == 1.0 { v } else { tape.scale(v, weight) });
    }
    Ok(EpisodeLoss {
        total: sum_vars(tape, &parts)?,
        terms,
        n_rollouts: rolls.len(),
    })
}

/// Eval-time identities `0..n`.
pub fn eval_ids(n: usize) -> Vec<u8> {
    (0..n as u8).collect()
}

/// Distinct identities drawn uniformly from `0..16`.
pub fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<u8>> {
    if n > MAX_OBJECTS {
        return invalid(format!("{n} objects exceed {MAX_OBJECTS} identities"));
    }
    Ok(rand::seq::index::sample(rng, MAX_OBJECTS, n)
        .into_iter()
        .map(|i| i as u8)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_rel: f64,
    pub loss_dyn: f64,
    pub loss_rel_prime: f64,
    pub loss_pose: f64,
    pub loss_total: f64,
    pub f1_detect: Option<f64>,
    pub f1_predict: Option<f64>,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_val: Option<F1Report>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

fn mean_losses(model: &Model, episodes: &[&Episode], w: &LossWeights) -> Result<[f64; 5]> {
    let mut acc = [0.0; 5];
    for e in episodes {
        let mut tape = Tape::new();
        let l = episode_loss(model, &mut tape, e, &eval_ids(e.n_objects()), w)?;
        for k in 0..4 {
            acc[k] += l.terms[k];
        }
        acc[4] += tape.value(l.total).item();
    }
    let n = episodes.len().max(1) as f64;
    Ok(acc.map(|v| v / n))
}

/// Per-episode Adam steps over `epochs`. After each epoch the validation
/// split is scored and the model with the best mean of detect and predict
/// macro-F1 is kept (the last model when there is no validation split).
pub fn train(
    episodes: &[Episode],
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let by_index: HashMap<u64, &Episode> = episodes.iter().map(|e| (e.index, e)).collect();
    let pick = |idx: &[u64]| -> Result<Vec<&Episode>> {
        idx.iter()
            .map(|i| {
                by_index
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("split lists missing episode {i}")))
            })
            .collect()
    };
    let train_set = pick(&splits.train)?;
    let val_set = pick(&splits.val)?;
    if train_set.is_empty() {
        return invalid("the training split is empty");
    }
    let w = cfg.loss_weights();
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model, F1Report)> = None;
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 5];
        for (k, &i) in order.iter().enumerate() {
            let ep = train_set[i];
            let ids = random_ids(&mut rng, ep.n_objects())?;
            let mut tape = Tape::new();
            let l = episode_loss(&model, &mut tape, ep, &ids, &w)?;
            let total = tape.value(l.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: k,
                    detail: format!("episode {} loss {total} terms {:?}", ep.index, l.terms),
                });
            }
            let grads = tape.backward(l.total)?;
            let g = tape.param_gradients(&grads, model.store.len());
            if g.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: k,
                    detail: format!("episode {} has a non-finite gradient", ep.index),
                });
            }
            opt.step(&mut model.store, &g)?;
            steps += 1;
            for t in 0..4 {
                acc[t] += l.terms[t];
            }
            acc[4] += total;
        }
        let n = train_set.len() as f64;
        let row = EpochMetrics {
            epoch,
            split: "train".into(),
            loss_rel: acc[0] / n,
            loss_dyn: acc[1] / n,
            loss_rel_prime: acc[2] / n,
            loss_pose: acc[3] / n,
            loss_total: acc[4] / n,
            f1_detect: None,
            f1_predict: None,
            steps,
        };
        on_epoch(&row);
        metrics.push(row);
        if !val_set.is_empty() {
            let l = mean_losses(&model, &val_set, &w)?;
            let f1 = evaluate(&model, &val_set)?;
            let row = EpochMetrics {
                epoch,
                split: "val".into(),
                loss_rel: l[0],
                loss_dyn: l[1],
                loss_rel_prime: l[2],
                loss_pose: l[3],
                loss_total: l[4],
                f1_detect: Some(f1.detect.macro_f1),
                f1_predict: Some(f1.predict.macro_f1),
                steps,
            };
            on_epoch(&row);
            metrics.push(row);
            let score = 0.5 * (f1.detect.macro_f1 + f1.predict.macro_f1);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.clone(), f1));
            }
        }
    }
    let (best_model, best_epoch, best_val) = match best {
        Some((_, e, m, f)) => (m, e, Some(f)),
        None => (model.clone(), cfg.epochs, None),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        best_val,
        metrics,
        steps,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
