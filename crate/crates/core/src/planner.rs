//! Cross-entropy-method search over skill parameters, greedy subgoal
//! chaining through the latent dynamics, and execution in the simulator.
//!
//! The score of an action is the log-probability that every goal conjunct
//! holds after it; the planner maximizes it, which is the same as minimizing
//! its negation as a cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::PROB_CLIP;
use crate::error::{invalid, Error, Result};
use crate::model::{PairProbs, RelationalDynamics};
use crate::relations::{goal_satisfied, label_scene_with_visibility, Goal};
use crate::scene::{render_cloud, Scene, SegmentedCloud};
use crate::sim::{apply_action, Skill, SkillAction};

/// Floor for refitted standard deviations.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Mean,
    Sample3Sigma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSearch {
    pub init_mean: [f64; 2],
    pub init_std: [f64; 2],
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub n_samples: usize,
    pub n_elites: usize,
    pub n_iterations: usize,
    pub push: SkillSearch,
    pub pick_place: SkillSearch,
    pub mode: ExecutionMode,
    /// Skills the discrete search enumerates.
    pub skills: Vec<Skill>,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            n_elites: 3,
            n_iterations: 2,
            push: SkillSearch {
                init_mean: [0.0, 0.0],
                init_std: [0.05, 0.3],
                lower: [-0.3, -0.3],
                upper: [0.3, 0.3],
            },
            pick_place: SkillSearch {
                init_mean: [0.0, 0.0],
                init_std: [0.3, 1.1],
                lower: [-0.4, -0.4],
                upper: [0.4, 0.4],
            },
            mode: ExecutionMode::Mean,
            skills: Skill::ALL.to_vec(),
        }
    }
}

impl CemConfig {
    pub fn search(&self, skill: Skill) -> &SkillSearch {
        match skill {
            Skill::Push => &self.push,
            Skill::PickPlace => &self.pick_place,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_elites == 0 || self.n_elites > self.n_samples {
            return invalid("need 1 ≤ n_elites ≤ n_samples");
        }
        for s in [&self.push, &self.pick_place] {
            if s.init_std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return invalid("initial standard deviations must be positive");
            }
            if (0..2).any(|a| !(s.lower[a] <= s.upper[a])) {
                return invalid("parameter bounds must be ordered");
            }
        }
        if self.skills.is_empty() {
            return invalid("at least one skill must be searched");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemResult {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Score of the returned mean.
    pub score: f64,
    /// Best sample score seen up to and including each iteration.
    pub best_so_far: Vec<f64>,
}

fn clamp(p: [f64; 2], s: &SkillSearch) -> [f64; 2] {
    [p[0].clamp(s.lower[0], s.upper[0]), p[1].clamp(s.lower[1], s.upper[1])]
}

/// Diagonal-Gaussian CEM. `score` maps a batch of parameter vectors to one
/// score each (higher is better). Elites are the top `n_elites` under a
/// stable sort on (score descending, sample index).
pub fn cem_optimize<R, F>(search: &SkillSearch, cfg: &CemConfig, rng: &mut R, mut score: F) -> Result<CemResult>
where
    R: Rng + ?Sized,
    F: FnMut(&[[f64; 2]]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut mean = clamp(search.init_mean, search);
    let mut std = search.init_std;
    let mut best = f64::NEG_INFINITY;
    let mut best_so_far = Vec::with_capacity(cfg.n_iterations);
    for _ in 0..cfg.n_iterations {
        let samples: Vec<[f64; 2]> = (0..cfg.n_samples)
            .map(|_| {
                let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                clamp([mean[0] + std[0] * z[0], mean[1] + std[1] * z[1]], search)
            })
            .collect();
        let scores = score(&samples)?;
        if scores.len() != samples.len() {
            return invalid("scoring returned the wrong number of values");
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| rank(scores[b]).total_cmp(&rank(scores[a])));
        let elites: Vec<[f64; 2]> = order[..cfg.n_elites].iter().map(|&i| samples[i]).collect();
        best = best.max(rank(scores[order[0]]));
        best_so_far.push(best);
        let k = elites.len() as f64;
        for a in 0..2 {
            let m = elites.iter().map(|e| e[a]).sum::<f64>() / k;
            let var = if elites.len() > 1 {
                elites.iter().map(|e| (e[a] - m).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            mean[a] = m;
            std[a] = var.sqrt().max(STD_FLOOR);
        }
        mean = clamp(mean, search);
    }
    let score = score(&[mean])?[0];
    Ok(CemResult {
        mean,
        std,
        score,
        best_so_far,
    })
}

/// NaN scores rank below everything.
fn rank(s: f64) -> f64 {
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Predicted probability of each conjunct of `goal`, in order.
pub fn conjunct_probs(probs: &PairProbs, goal: &Goal) -> Result<Vec<f64>> {
    goal.conjuncts
        .iter()
        .map(|c| {
            let [i, j] = c.pair;
            let p = probs
                .get(i, j)
                .ok_or(Error::UnknownObject(if probs.object_ids.contains(&i) { j } else { i }))?;
            Ok(p[c.rel.index()])
        })
        .collect()
}

/// Σ log p over required-true conjuncts plus Σ log(1 − p) over
/// required-false ones, probabilities clipped to [1e-7, 1 − 1e-7].
pub fn goal_log_prob(probs: &PairProbs, goal: &Goal) -> Result<f64> {
    let ps = conjunct_probs(probs, goal)?;
    Ok(goal
        .conjuncts
        .iter()
        .zip(ps)
        .map(|(c, p)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if c.value {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum())
}

pub fn score_action<M: RelationalDynamics>(model: &M, state: &M::State, action: &SkillAction, goal: &Goal) -> Result<f64> {
    let p = model.predict_probs(state, action.skill, std::slice::from_ref(action))?;
    goal_log_prob(&p[0], goal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRun {
    pub skill: Skill,
    pub target: u8,
    pub cem: CemResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub action: SkillAction,
    pub score: f64,
    /// Final CEM standard deviation of the chosen run.
    pub std: [f64; 2],
    /// Predicted probability of each subgoal conjunct after the action.
    pub conjunct_probs: Vec<f64>,
    /// Every (skill, target) run, in enumeration order.
    pub runs: Vec<CandidateRun>,
}

/// Runs CEM for every enumerated skill and every target in `targets`, keeps
/// the highest-scoring run (first in enumeration order on ties), and
/// returns it with the predicted next state.
pub fn plan_step<M: RelationalDynamics>(
    model: &M,
    state: &M::State,
    targets: &[u8],
    goal: &Goal,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepPlan, M::State)> {
    cfg.validate()?;
    if targets.is_empty() {
        return invalid("no target objects to plan over");
    }
    let jobs: Vec<(Skill, u8, u64)> = cfg
        .skills
        .iter()
        .flat_map(|&s| targets.iter().map(move |&t| (s, t)))
        .map(|(s, t)| (s, t, rng.random()))
        .collect();
    let runs: Vec<CandidateRun> = jobs
        .par_iter()
        .map(|&(skill, target, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let cem = cem_optimize(cfg.search(skill), cfg, &mut r, |batch| {
                let acts: Vec<SkillAction> = batch.iter().map(|p| SkillAction::new(skill, target, *p)).collect();
                model
                    .predict_probs(state, skill, &acts)?
                    .iter()
                    .map(|p| goal_log_prob(p, goal))
                    .collect()
            })?;
            Ok(CandidateRun { skill, target, cem })
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        if rank(r.cem.score) > rank(runs[best].cem.score) {
            best = k;
        }
    }
    let win = &runs[best];
    let action = SkillAction::new(win.skill, win.target, win.cem.mean);
    let next = model.predict(state, &action)?;
    let probs = model.relation_probs(&next)?;
    Ok((
        StepPlan {
            action,
            score: win.cem.score,
            std: win.cem.std,
            conjunct_probs: conjunct_probs(&probs, goal)?,
            runs,
        },
        next,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanSkeleton {
    pub subgoals: Vec<Goal>,
}

impl PlanSkeleton {
    pub fn validate(&self) -> Result<()> {
        if self.subgoals.is_empty() {
            return invalid("a plan skeleton needs at least one subgoal");
        }
        for g in &self.subgoals {
            g.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub steps: Vec<StepPlan>,
    pub executed: bool,
    /// Analytic-labeler verdict per subgoal after its step.
    pub achieved: Vec<bool>,
    /// Learned-detection verdict per subgoal after its step.
    pub achieved_learned: Vec<bool>,
}

impl PlanResult {
    pub fn actions(&self) -> Vec<SkillAction> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn success(&self) -> bool {
        self.executed && self.achieved.iter().all(|&a| a)
    }
}

/// Greedy plan from an already-encoded state; states are only ever
/// advanced by the model.
pub fn plan_from_state<M: RelationalDynamics>(
    model: &M,
    initial: M::State,
    targets: &[u8],
    skeleton: &PlanSkeleton,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult> {
    skeleton.validate()?;
    let mut state = initial;
    let mut steps = Vec::with_capacity(skeleton.subgoals.len());
    for g in &skeleton.subgoals {
        let (step, next) = plan_step(model, &state, targets, g, cfg, rng)?;
        steps.push(step);
        state = next;
    }
    Ok(PlanResult {
        steps,
        executed: false,
        achieved: Vec::new(),
        achieved_learned: Vec::new(),
    })
}

/// Encodes the initial scene and plans over its visible objects.
pub fn plan_scene<M: RelationalDynamics>(
    model: &M,
    scene: &Scene,
    skeleton: &PlanSkeleton,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult> {
    let x0 = model.encode_scene(scene)?;
    plan_from_state(model, x0, &render_cloud(scene).visible_ids(), skeleton, cfg, rng)
}

/// Encodes the initial cloud and plans over its visible objects.
pub fn plan_skeleton<M: RelationalDynamics>(
    model: &M,
    cloud: &SegmentedCloud,
    skeleton: &PlanSkeleton,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult> {
    let x0 = model.encode(cloud)?;
    plan_from_state(model, x0, &cloud.visible_ids(), skeleton, cfg, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub result: PlanResult,
    /// Actions as applied (differs from the plan in 3σ mode).
    pub applied: Vec<SkillAction>,
    /// Scene after every step.
    pub scenes: Vec<Scene>,
}

impl Execution {
    pub fn final_scene(&self) -> Option<&Scene> {
        self.scenes.last()
    }
}

/// Applies the plan in the simulator; after each step the subgoal is checked
/// with the analytic labeler and with the model's detection path.
pub fn execute_and_verify<M: RelationalDynamics>(
    model: &M,
    scene: &Scene,
    plan: &PlanResult,
    skeleton: &PlanSkeleton,
    cfg: &CemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Execution> {
    if plan.executed {
        return invalid("plan was already executed");
    }
    if plan.steps.len() != skeleton.subgoals.len() {
        return invalid("plan and skeleton lengths differ");
    }
    let mut current = scene.clone();
    let mut result = plan.clone();
    let mut applied = Vec::new();
    let mut scenes = Vec::new();
    for (step, goal) in plan.steps.iter().zip(&skeleton.subgoals) {
        let mut action = step.action;
        if cfg.mode == ExecutionMode::Sample3Sigma {
            let s = cfg.search(action.skill);
            let mut p = action.params;
            for a in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                p[a] += step.std[a] * z.clamp(-3.0, 3.0);
            }
            action.params = clamp(p, s);
        }
        current = apply_action(&current, &action)?;
        let cloud = render_cloud(&current);
        let truth = label_scene_with_visibility(&current, &cloud.visible_ids());
        result.achieved.push(goal_satisfied(&truth, goal)?);
        let state = model.encode_scene(&current)?;
        let detected = model.relation_probs(&state)?.to_matrix();
        result.achieved_learned.push(goal_satisfied(&detected, goal)?);
        applied.push(action);
        scenes.push(current.clone());
    }
    result.executed = true;
    Ok(Execution {
        result,
        applied,
        scenes,
    })
}

/// A model that answers with the simulator and labeler; used to exercise the
/// planner independently of learning.
#[derive(Clone, Debug)]
pub struct SimOracle {
    pub scene: Scene,
}

impl RelationalDynamics for SimOracle {
    type State = Scene;

    fn encode(&self, cloud: &SegmentedCloud) -> Result<Scene> {
        if cloud.ids() != self.scene.sorted_ids() {
            return invalid("cloud does not match the oracle scene");
        }
        Ok(self.scene.clone())
    }

    fn encode_scene(&self, scene: &Scene) -> Result<Scene> {
        Ok(scene.clone())
    }

    fn predict(&self, state: &Scene, action: &SkillAction) -> Result<Scene> {
        apply_action(state, action)
    }

    fn predict_probs(&self, state: &Scene, _skill: Skill, actions: &[SkillAction]) -> Result<Vec<PairProbs>> {
        actions
            .iter()
            .map(|a| self.relation_probs(&apply_action(state, a)?))
            .collect()
    }

    fn relation_probs(&self, state: &Scene) -> Result<PairProbs> {
        let ids = state.sorted_ids();
        let cloud = render_cloud(state);
        let m = label_scene_with_visibility(state, &cloud.visible_ids());
        let probs = crate::model::edge_pairs(ids.len())
            .iter()
            .map(|&(a, b)| {
                let v = m.get(ids[a], ids[b]).copied().unwrap_or_default();
                std::array::from_fn(|k| if v.0[k] { 1.0 - PROB_CLIP } else { PROB_CLIP })
            })
            .collect();
        Ok(PairProbs { object_ids: ids, probs })
    }
}
