//! The `reldyn` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::dataset::{read_corpus, split, write_corpus, CorpusManifest, DEFAULT_FRACTIONS};
use crate::error::{invalid, Error, Result};
use crate::eval::metrics::evaluate;
use crate::eval::plot::{line_chart, Series};
use crate::eval::{read_trial_rows, run_sweep, summarize, write_rows_csv, SweepAxis, SweepSpec};
use crate::model::Model;
use crate::planner::{execute_and_verify, plan_scene, CemConfig, ExecutionMode, PlanSkeleton};
use crate::relations::Goal;
use crate::scene::Scene;
use crate::sim::{generate_dataset, Episode, GenerationConfig, Skill};
use crate::train::{train, write_metrics_csv, Ablation, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "reldyn", version, about = "Relational dynamics: data, training, evaluation and planning")]
pub struct Cli {
    /// Master seed; overrides the seed in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// JSON config for the chosen verb.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an episode corpus (JSONL plus manifest).
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Detect and predict F1 of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Plan (and by default execute) a goal or skeleton in a scene.
    Plan(PlanArgs),
    /// Planning success over one axis of the trial setup.
    Sweep(SweepArgs),
    /// Render sweep CSVs to an SVG plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub episodes: usize,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// Actions per episode; a single value fixes it.
    #[arg(long, num_args = 1..=2, value_delimiter = ',')]
    pub horizon: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Single-step goal.
    #[arg(long, conflicts_with = "skeleton", required_unless_present = "skeleton")]
    pub goal: Option<PathBuf>,
    /// Ordered subgoals, one per step.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Skip simulated execution and verification.
    #[arg(long)]
    pub plan_only: bool,
    #[arg(long, value_delimiter = ',')]
    pub skills: Option<Vec<Skill>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub axis: Option<SweepAxis>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub skills: Option<Vec<Skill>>,
    /// Trial rows CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-value summary CSV; `<out>.summary.csv` when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sweep rows CSV, optionally `label=path`; repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub title: Option<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Runs a parsed command line; the rayon pool is configured by the caller.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::GenData(a) => gen_data(a, cfg, cli.seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, cfg, cli.seed),
        Command::Eval(a) => eval_cmd(a),
        Command::Plan(a) => plan_cmd(a, cfg, cli.seed.unwrap_or(0)),
        Command::Sweep(a) => sweep_cmd(a, cfg, cli.seed),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: &GenDataArgs, cfg: Option<&Path>, seed: u64) -> Result<()> {
    let mut gen: GenerationConfig = config_or_default(cfg)?;
    if let Some(n) = a.min_objects {
        gen.min_objects = n;
    }
    if let Some(n) = a.max_objects {
        gen.max_objects = n;
    }
    if let Some(h) = &a.horizon {
        gen.horizon = (h[0], *h.last().unwrap_or(&h[0]));
    }
    gen.validate()?;
    let episodes = generate_dataset(seed, a.episodes, &gen)?;
    let splits = split(a.episodes, DEFAULT_FRACTIONS, seed)?;
    write_corpus(&a.out, &episodes, &CorpusManifest::new(a.episodes, seed, gen, splits))?;
    eprintln!("wrote {} episodes to {}", a.episodes, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, cfg: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut tc: TrainConfig = config_or_default(cfg)?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    if let Some(ab) = a.ablation {
        tc.ablation = ab;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        tc.learning_rate = lr;
    }
    tc.validate()?;
    let (manifest, episodes) = read_corpus(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let out = train(&episodes, &manifest.splits, &tc, |m| {
        let f1 = match (m.f1_detect, m.f1_predict) {
            (Some(d), Some(p)) => format!(" f1_detect {d:.4} f1_predict {p:.4}"),
            _ => String::new(),
        };
        eprintln!("epoch {} {} loss {:.5}{f1}", m.epoch, m.split, m.loss_total);
    })?;
    let meta = json!({
        "ablation": tc.ablation.name(),
        "train": tc,
        "corpus_seed": manifest.seed,
        "best_epoch": out.best_epoch,
    });
    out.best.save(&a.out.join("model.ckpt"), meta.clone())?;
    out.last.save(&a.out.join("last.ckpt"), meta)?;
    write_metrics_csv(&a.out.join("metrics.csv"), &out.metrics)?;
    write_json(
        Some(&a.out.join("summary.json")),
        &json!({
            "ablation": tc.ablation.name(),
            "best_epoch": out.best_epoch,
            "steps": out.steps,
            "num_params": out.best.num_params(),
            "best_val": out.best_val,
        }),
    )
}

fn split_episodes<'a>(episodes: &'a [Episode], manifest: &CorpusManifest, which: SplitName) -> Vec<&'a Episode> {
    let idx: Option<&[u64]> = match which {
        SplitName::Train => Some(&manifest.splits.train),
        SplitName::Val => Some(&manifest.splits.val),
        SplitName::Test => Some(&manifest.splits.test),
        SplitName::All => None,
    };
    match idx {
        None => episodes.iter().collect(),
        Some(idx) => {
            let set: std::collections::HashSet<u64> = idx.iter().copied().collect();
            episodes.iter().filter(|e| set.contains(&e.index)).collect()
        }
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (model, _) = Model::load(&a.ckpt)?;
    let (manifest, episodes) = read_corpus(&a.data)?;
    let chosen = split_episodes(&episodes, &manifest, a.split);
    if chosen.is_empty() {
        return invalid("the chosen split is empty");
    }
    let report = evaluate(&model, &chosen)?;
    write_json(a.out.as_deref(), &report)
}

fn plan_cmd(a: &PlanArgs, cfg: Option<&Path>, seed: u64) -> Result<()> {
    let mut cem: CemConfig = config_or_default(cfg)?;
    if let Some(s) = &a.skills {
        cem.skills = s.clone();
    }
    cem.validate()?;
    let (model, _) = Model::load(&a.ckpt)?;
    let scene = Scene::from_json(&std::fs::read_to_string(&a.scene)?)?;
    let skeleton = match (&a.goal, &a.skeleton) {
        (Some(g), _) => PlanSkeleton {
            subgoals: vec![Goal::from_json(&std::fs::read_to_string(g)?)?],
        },
        (None, Some(s)) => PlanSkeleton::from_json(&std::fs::read_to_string(s)?)?,
        (None, None) => return invalid("plan needs --goal or --skeleton"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_scene(&model, &scene, &skeleton, &cem, &mut rng)?;
    let report = if a.plan_only {
        json!({ "plan": plan })
    } else {
        let ex = execute_and_verify(&model, &scene, &plan, &skeleton, &cem, &mut rng)?;
        json!({
            "plan": ex.result,
            "applied": ex.applied,
            "success": ex.result.success(),
            "final_scene": ex.final_scene(),
        })
    };
    write_json(a.out.as_deref(), &report)
}

fn sweep_cmd(a: &SweepArgs, cfg: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut spec: SweepSpec = config_or_default(cfg)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(ax) = a.axis {
        spec.axis = ax;
    }
    if let Some(v) = &a.values {
        spec.values = v.clone();
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(s) = &a.skills {
        spec.cem.skills = s.clone();
    }
    spec.cem.mode = ExecutionMode::Mean;
    let (model, _) = Model::load(&a.ckpt)?;
    let (rows, summary) = run_sweep(&model, &spec)?;
    write_rows_csv(&a.out, &rows)?;
    let summary_path = a.summary.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".summary.csv");
        p.into()
    });
    write_rows_csv(&summary_path, &summary)?;
    for s in &summary {
        eprintln!("{} {}: {}/{}", spec.axis.name(), s.value, s.successes, s.trials);
    }
    Ok(())
}

#[derive(Serialize)]
struct LabeledSummary<'a> {
    label: &'a str,
    value: usize,
    trials: usize,
    successes: usize,
    success_rate: f64,
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut series = Vec::new();
    let mut axis: Option<String> = None;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for input in &a.inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let stem = p.file_stem().map_or_else(|| input.clone(), |s| s.to_string_lossy().into_owned());
                (stem, p)
            }
        };
        let rows = read_trial_rows(&path)?;
        let Some(first) = rows.first() else {
            return invalid(format!("{} has no rows", path.display()));
        };
        match &axis {
            None => axis = Some(first.axis.clone()),
            Some(ax) if *ax != first.axis => {
                return invalid(format!("{} sweeps {}, expected {ax}", path.display(), first.axis));
            }
            _ => {}
        }
        let mut values: Vec<usize> = rows.iter().map(|r| r.value).collect();
        values.dedup();
        let summary = summarize(&rows, &values);
        for s in &summary {
            w.serialize(LabeledSummary {
                label: &label,
                value: s.value,
                trials: s.trials,
                successes: s.successes,
                success_rate: s.success_rate,
            })?;
        }
        series.push(Series {
            label,
            points: summary.iter().map(|s| (s.value as f64, s.success_rate)).collect(),
        });
    }
    w.flush()?;
    let axis = axis.ok_or_else(|| Error::Invalid("no inputs".into()))?;
    let title = a.title.clone().unwrap_or_else(|| format!("planning success vs {axis}"));
    std::fs::write(&a.out, line_chart(&title, &axis, &series))?;
    Ok(())
}

/// Accepts the dashed spelling of a snake_case value too.
fn possible(name: &'static str, dashed: &'static str) -> clap::builder::PossibleValue {
    let v = clap::builder::PossibleValue::new(name);
    if dashed == name {
        v
    } else {
        v.alias(dashed)
    }
}

impl clap::ValueEnum for Ablation {
    fn value_variants<'a>() -> &'a [Self] {
        &Ablation::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

impl clap::ValueEnum for SweepAxis {
    fn value_variants<'a>() -> &'a [Self] {
        &[SweepAxis::NObjects, SweepAxis::NGoalRelations, SweepAxis::NSteps]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(possible(self.name(), match self {
            SweepAxis::NObjects => "n-objects",
            SweepAxis::NGoalRelations => "n-goal-relations",
            SweepAxis::NSteps => "n-steps",
        }))
    }
}

impl clap::ValueEnum for Skill {
    fn value_variants<'a>() -> &'a [Self] {
        &Skill::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(possible(self.name(), match self {
            Skill::Push => "push",
            Skill::PickPlace => "pick-place",
        }))
    }
}
