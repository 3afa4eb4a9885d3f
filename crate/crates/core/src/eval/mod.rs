//! F1 metrics, goal sampling, planning sweeps and plots.

pub mod metrics;
pub mod plot;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::RelationalDynamics;
use crate::planner::{execute_and_verify, plan_scene, CemConfig, ExecutionMode, PlanSkeleton};
use crate::relations::{label_scene_with_visibility, Conjunct, Goal, Relation, RelationMatrix};
use crate::scene::{render_cloud, sample_scene, Scene, SceneConfig};
use crate::sim::{apply_action, random_action, GenerationConfig, Skill, SkillAction};

/// Seed for item `index` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(u128::from(index) * 16);
    r.random()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledGoal {
    pub goal: Goal,
    /// Fewer than the requested conjuncts differ from the starting scene.
    pub trivial: bool,
    pub actions: Vec<SkillAction>,
    /// Scene the generating actions lead to.
    pub reached: Scene,
}

fn relations_of(scene: &Scene) -> (RelationMatrix, Vec<u8>) {
    let cloud = render_cloud(scene);
    let visible = cloud.visible_ids();
    (label_scene_with_visibility(scene, &visible), visible)
}

/// Picks `n` conjuncts describing `after`, over pairs of objects visible in
/// both scenes, preferring facts that differ from `before`.
fn pick_conjuncts<R: Rng + ?Sized>(
    before: &Scene,
    after: &Scene,
    n: usize,
    rng: &mut R,
) -> (Vec<Conjunct>, bool) {
    let (mb, vb) = relations_of(before);
    let (ma, va) = relations_of(after);
    let ids: Vec<u8> = va.iter().copied().filter(|i| vb.contains(i)).collect();
    let mut differing = Vec::new();
    let mut same = Vec::new();
    for (x, &i) in ids.iter().enumerate() {
        for &j in &ids[x + 1..] {
            let (Some(a), Some(b)) = (ma.get(i, j), mb.get(i, j)) else {
                continue;
            };
            for r in Relation::ALL {
                // one of each converse pair; contact is symmetric
                if matches!(r, Relation::Right | Relation::InFront | Relation::Below) {
                    continue;
                }
                let c = Conjunct::new(i, j, r, a.get(r));
                if a.get(r) != b.get(r) {
                    differing.push(c);
                } else {
                    same.push(c);
                }
            }
        }
    }
    differing.shuffle(rng);
    same.shuffle(rng);
    let trivial = differing.len() < n || n == 0;
    let mut out: Vec<Conjunct> = differing.into_iter().take(n).collect();
    // fall back to currently-true facts first
    same.sort_by_key(|c| !c.value);
    out.extend(same.into_iter().take(n - out.len()));
    (out, trivial)
}

/// A goal reached by `n_steps` random actions from `scene`; subgoal `k`
/// describes the scene after action `k`.
pub fn goal_sampler<R: Rng + ?Sized>(
    scene: &Scene,
    n_relations: usize,
    n_steps: usize,
    skills: &[Skill],
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<SampledGoal>> {
    if scene.objects.len() < 2 {
        return invalid("goal sampling needs at least two objects");
    }
    if skills.is_empty() {
        return invalid("goal sampling needs at least one skill");
    }
    let cfg = GenerationConfig {
        push_fraction: if skills.contains(&Skill::PickPlace) {
            if skills.contains(&Skill::Push) {
                gen.push_fraction
            } else {
                0.0
            }
        } else {
            1.0
        },
        ..gen.clone()
    };
    let mut out = Vec::with_capacity(n_steps);
    let mut current = scene.clone();
    for _ in 0..n_steps {
        let visible = render_cloud(&current).visible_ids();
        let Some(a) = random_action(rng, &visible, &cfg) else {
            return invalid("no visible object to act on");
        };
        let next = apply_action(&current, &a)?;
        let (conj, trivial) = pick_conjuncts(&current, &next, n_relations, rng);
        out.push(SampledGoal {
            goal: Goal::new(conj)?,
            trivial,
            actions: vec![a],
            reached: next.clone(),
        });
        current = next;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NObjects,
    NGoalRelations,
    NSteps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NObjects => "n_objects",
            SweepAxis::NGoalRelations => "n_goal_relations",
            SweepAxis::NSteps => "n_steps",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::NObjects, SweepAxis::NGoalRelations, SweepAxis::NSteps]
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| crate::Error::Invalid(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Settings for the axes not being swept.
    pub n_objects: usize,
    pub n_goal_relations: usize,
    pub n_steps: usize,
    pub cem: CemConfig,
    pub generation: GenerationConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::NGoalRelations,
            values: vec![1, 2, 3, 4, 5],
            trials: 20,
            seed: 0,
            n_objects: 3,
            n_goal_relations: 2,
            n_steps: 1,
            cem: CemConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return invalid("sweep values must be non-empty");
        }
        if self.trials == 0 {
            return invalid("trials must be positive");
        }
        self.cem.validate()?;
        for &v in &self.values {
            let (n, _, s) = self.settings(v);
            if !(2..=crate::scene::MAX_OBJECTS).contains(&n) || s == 0 {
                return invalid(format!("sweep value {v} is out of range for {}", self.axis.name()));
            }
        }
        Ok(())
    }

    /// (objects, goal relations, steps) for one axis value.
    pub fn settings(&self, value: usize) -> (usize, usize, usize) {
        match self.axis {
            SweepAxis::NObjects => (value, self.n_goal_relations, self.n_steps),
            SweepAxis::NGoalRelations => (self.n_objects, value, self.n_steps),
            SweepAxis::NSteps => (self.n_objects, self.n_goal_relations, value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub axis: String,
    pub value: usize,
    pub trial: usize,
    /// Regenerates this trial alone.
    pub seed: u64,
    pub n_objects: usize,
    pub n_goal_relations: usize,
    pub n_steps: usize,
    pub success: bool,
    pub trivial: bool,
    /// Per-step analytic verdicts, e.g. "101".
    pub achieved: String,
    /// Per-step learned-detection verdicts.
    pub achieved_learned: String,
    pub planned_score: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Scene seeds depend only on (seed, trial, object count), so values along
/// the relation and step axes share their scenes.
pub fn trial_seed(spec: &SweepSpec, n_objects: usize, trial: usize) -> u64 {
    derive_seed(spec.seed, n_objects as u64, trial as u64)
}

pub fn run_trial<M: RelationalDynamics>(model: &M, spec: &SweepSpec, value: usize, trial: usize) -> TrialRow {
    let (n, r, s) = spec.settings(value);
    let seed = trial_seed(spec, n, trial);
    let mut row = TrialRow {
        axis: spec.axis.name().into(),
        value,
        trial,
        seed,
        n_objects: n,
        n_goal_relations: r,
        n_steps: s,
        success: false,
        trivial: false,
        achieved: String::new(),
        achieved_learned: String::new(),
        planned_score: f64::NAN,
        error: String::new(),
    };
    if let Err(e) = trial_body(model, spec, (n, r, s), seed, &mut row) {
        row.error = e.to_string();
        row.success = false;
    }
    row
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Draws the trial scene and its skeleton from `seed`, the same for every
/// model and every axis value that shares the object count.
pub fn trial_setup(spec: &SweepSpec, n: usize, r: usize, s: usize, seed: u64) -> Result<(Scene, PlanSkeleton, bool)> {
    let mut scene_rng = ChaCha8Rng::seed_from_u64(seed);
    let stacks = scene_rng.random_range(1..=n.min(2));
    let scene_cfg: &SceneConfig = &spec.generation.scene;
    let scene = sample_scene(&mut scene_rng, n, stacks, scene_cfg)?;
    let mut goal_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, (r * 64 + s) as u64));
    let goals = goal_sampler(&scene, r, s, &spec.cem.skills, &spec.generation, &mut goal_rng)?;
    let trivial = goals.iter().any(|g| g.trivial);
    let skeleton = PlanSkeleton {
        subgoals: goals.into_iter().map(|g| g.goal).collect(),
    };
    Ok((scene, skeleton, trivial))
}

fn trial_body<M: RelationalDynamics>(
    model: &M,
    spec: &SweepSpec,
    (n, r, s): (usize, usize, usize),
    seed: u64,
    row: &mut TrialRow,
) -> Result<()> {
    let (scene, skeleton, trivial) = trial_setup(spec, n, r, s, seed)?;
    row.trivial = trivial;
    let mut plan_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, (r * 64 + s) as u64));
    let cem = CemConfig {
        mode: ExecutionMode::Mean,
        ..spec.cem.clone()
    };
    let plan = plan_scene(model, &scene, &skeleton, &cem, &mut plan_rng)?;
    row.planned_score = plan.steps.iter().map(|p| p.score).sum();
    let ex = execute_and_verify(model, &scene, &plan, &skeleton, &cem, &mut plan_rng)?;
    row.achieved = bits(&ex.result.achieved);
    row.achieved_learned = bits(&ex.result.achieved_learned);
    row.success = ex.result.success();
    Ok(())
}

/// Every (value, trial) in parallel, rows in (value, trial) order.
pub fn run_sweep<M: RelationalDynamics>(model: &M, spec: &SweepSpec) -> Result<(Vec<TrialRow>, Vec<SweepSummary>)> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.trials).map(move |t| (v, t)))
        .collect();
    let rows: Vec<TrialRow> = jobs.par_iter().map(|&(v, t)| run_trial(model, spec, v, t)).collect();
    let summary = summarize(&rows, &spec.values);
    Ok((rows, summary))
}

pub fn summarize(rows: &[TrialRow], values: &[usize]) -> Vec<SweepSummary> {
    values
        .iter()
        .map(|&v| {
            let of: Vec<_> = rows.iter().filter(|r| r.value == v).collect();
            let successes = of.iter().filter(|r| r.success).count();
            SweepSummary {
                value: v,
                trials: of.len(),
                successes,
                success_rate: if of.is_empty() { 0.0 } else { successes as f64 / of.len() as f64 },
            }
        })
        .collect()
}

pub fn write_rows_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trial_rows(path: &std::path::Path) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
