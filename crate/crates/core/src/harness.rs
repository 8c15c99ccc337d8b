//! Experiment orchestration: single training runs, checkpoint evaluation
//! (including the out-of-distribution variants), start-state harvesting for
//! Place, resumable suites and learning-curve reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use fs2::FileExt;
use serde::{Deserialize, Serialize};

use crate::disentangle::{ReprKind, ReprMode};
use crate::imaging::InstanceId;
use crate::policy::{Policy, PolicyObs, PolicySpec, SceneObs};
use crate::ppo::{self, Env, EvalReport, PpoHypers, TrainConfig, Transition};
use crate::simworld::{
    self, add_distractors, ood_recolor, Action, InitStateSet, Observation, SceneConfig,
    SceneState, Task, Variant, PROPRIO_DIM,
};

/// Environment variable that relocates every default output path.
pub const DATA_ENV: &str = "DOCIR_LAB_DATA";
pub const DEFAULT_EVAL_EPISODES: usize = 100;
pub const DESK_RESOLUTION: usize = 48;
pub const DESK_PICK_STEPS: u64 = 1_000_000;
pub const DESK_PLACE_STEPS: u64 = 1_500_000;
pub const FULL_STEPS: u64 = 10_000_000;
pub const CURVE_WINDOW: usize = 50;
pub const HARVEST_SEED: u64 = 4242;

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("docir-lab-data"))
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    /// Total object count: 3, 5, 7 or 9.
    pub objects: usize,
    pub repr: ReprKind,
    pub seed: u64,
    pub steps: u64,
    pub deterministic: bool,
    pub eval_episodes: usize,
    pub resolution: usize,
    pub horizon: usize,
    pub hypers: PpoHypers,
    /// Run directory; defaults to `<data root>/runs/<name>`.
    pub out_dir: Option<PathBuf>,
    /// Stored Pick terminal states; required for Place.
    pub init_set: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Pick,
            variant: Variant::FixedTarget,
            objects: 3,
            repr: ReprKind::Docir,
            seed: 0,
            steps: DESK_PICK_STEPS,
            deterministic: false,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            resolution: DESK_RESOLUTION,
            horizon: 100,
            hypers: PpoHypers::default(),
            out_dir: None,
            init_set: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            SceneConfig::object_counts(self.objects).is_some(),
            "object count must be 3, 5, 7 or 9 (got {})",
            self.objects
        );
        ensure!(
            self.task == Task::Pick || self.init_set.is_some(),
            "place runs need an initial-state set (--init-set)"
        );
        ensure!(self.resolution >= 24, "resolution must be at least 24");
        ensure!(self.horizon > 0, "episode horizon must be positive");
        self.hypers.validate()?;
        Ok(())
    }

    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}-{}-s{}",
            self.task, self.variant, self.objects, self.repr, self.seed
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| data_root().join("runs").join(self.name()))
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let (c, p) = SceneConfig::object_counts(self.objects)
            .ok_or_else(|| anyhow!("unsupported object count {}", self.objects))?;
        let mut s = SceneConfig::new(c, p, self.variant).with_resolution(self.resolution);
        s.episode_horizon = self.horizon;
        Ok(s)
    }

    pub fn policy_spec(&self) -> Result<PolicySpec> {
        let scene = self.scene_config()?;
        let mode = ReprMode::for_kind(self.repr, scene.total_objects());
        Ok(PolicySpec::visual(
            mode,
            self.resolution,
            PROPRIO_DIM,
            scene.max_object_id(),
        ))
    }

    pub fn load_init_set(&self) -> Result<Option<Arc<InitStateSet>>> {
        match (&self.init_set, self.task) {
            (Some(p), Task::Place) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading init set {}", p.display()))?;
                let set = InitStateSet::from_json(&text)?;
                ensure!(!set.is_empty(), "init set {} is empty", p.display());
                Ok(Some(Arc::new(set)))
            }
            _ => Ok(None),
        }
    }
}

/// Objects the skill acts on: the target for Pick, the carried cube and
/// the target for Place.
pub fn interest_set(state: &SceneState) -> BTreeSet<InstanceId> {
    let mut s = BTreeSet::from([state.target_id]);
    if let Some(c) = state.carried_id {
        s.insert(c);
    }
    s
}

pub fn policy_obs(state: &SceneState, obs: &Observation) -> PolicyObs {
    PolicyObs {
        proprio: obs.proprio.to_vec(),
        scene: Some(SceneObs {
            base: obs.base.clone(),
            wrist: obs.wrist.clone(),
            registry: state.registry(),
            interest: interest_set(state),
            target_id: state.target_id,
        }),
    }
}

/// The simulated world behind the [`Env`] interface.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub config: SceneConfig,
    pub task: Task,
    pub init_set: Option<Arc<InitStateSet>>,
    pub state: Option<SceneState>,
}

impl SimEnv {
    pub fn new(config: SceneConfig, task: Task, init_set: Option<Arc<InitStateSet>>) -> Self {
        SimEnv {
            config,
            task,
            init_set,
            state: None,
        }
    }
}

impl Env for SimEnv {
    fn reset(&mut self, seed: u64) -> std::result::Result<PolicyObs, String> {
        let (s, o) = simworld::reset(&self.config, seed, self.task, self.init_set.as_deref())
            .map_err(|e| e.to_string())?;
        let po = policy_obs(&s, &o);
        self.state = Some(s);
        Ok(po)
    }

    fn step(&mut self, action: &Action) -> Transition {
        let s = self.state.as_ref().expect("step before reset");
        let (next, obs, out) = simworld::step(s, &action.clamped(), &self.config);
        let po = policy_obs(&next, &obs);
        self.state = Some(next);
        Transition {
            obs: po,
            reward: out.reward.total,
            terminated: out.terminated,
            truncated: out.truncated,
            success: out.success,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: RunConfig,
    pub updates: usize,
    pub env_steps: u64,
    pub best_update: Option<usize>,
    pub best_training_eval: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_eval: EvalReport,
}

pub const RUN_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";

/// Trains one policy, then scores its best checkpoint (the final one if no
/// evaluation ran) on `eval_episodes` deterministic episodes.
pub fn train_run(cfg: &RunConfig, verbose: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(cfg)?)?;
    let scene = cfg.scene_config()?;
    let init = cfg.load_init_set()?;
    let policy: Policy<f32> = Policy::new(cfg.policy_spec()?, cfg.seed)?;
    let make = |_| SimEnv::new(scene.clone(), cfg.task, init.clone());
    let tc = TrainConfig {
        hypers: cfg.hypers,
        total_steps: cfg.steps,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        out_dir: Some(dir.clone()),
        metadata: serde_json::to_value(cfg)?,
        verbose,
    };
    let out = ppo::train(policy, make, make, &tc)?;
    let final_ckpt = dir.join("final.ckpt");
    out.policy.save(
        &final_ckpt,
        serde_json::json!({
            "run": cfg,
            "seed": cfg.seed,
            "step": out.env_steps,
            "update": out.updates,
        }),
    )?;
    let (checkpoint, policy) = match &out.best_checkpoint {
        Some(p) => (p.clone(), Policy::<f32>::load(p)?.0),
        None => (final_ckpt, out.policy),
    };
    let final_eval = evaluate_policy_on(&policy, cfg, &scene, init, cfg.eval_episodes)?;
    let summary = RunSummary {
        run: cfg.clone(),
        updates: out.updates,
        env_steps: out.env_steps,
        best_update: out.best_update,
        best_training_eval: out.best_eval.map(|e| e.success_rate),
        checkpoint,
        metrics: dir.join("metrics.jsonl"),
        final_eval,
    };
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Out-of-distribution evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ood {
    Recolor,
    Distractors(usize),
}

pub fn apply_ood(scene: &SceneConfig, ood: Option<Ood>) -> Result<SceneConfig> {
    Ok(match ood {
        None => scene.clone(),
        Some(Ood::Recolor) => ood_recolor(scene)?,
        Some(Ood::Distractors(m)) => add_distractors(scene, m),
    })
}

fn evaluate_policy_on(
    policy: &Policy<f32>,
    cfg: &RunConfig,
    scene: &SceneConfig,
    init: Option<Arc<InitStateSet>>,
    episodes: usize,
) -> Result<EvalReport> {
    let lanes = cfg.hypers.num_envs.max(1);
    let mut envs: Vec<SimEnv> = (0..lanes)
        .map(|_| SimEnv::new(scene.clone(), cfg.task, init.clone()))
        .collect();
    Ok(ppo::evaluate_policy(policy, &mut envs, episodes)?)
}

/// A loaded checkpoint together with the run that produced it.
pub struct LoadedRun {
    pub policy: Policy<f32>,
    pub run: RunConfig,
}

pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let (policy, meta) = Policy::<f32>::load(checkpoint)?;
    let run: RunConfig = serde_json::from_value(
        meta.get("run")
            .cloned()
            .ok_or_else(|| anyhow!("{} carries no run config", checkpoint.display()))?,
    )
    .context("checkpoint run config")?;
    let expected = run.policy_spec()?;
    if policy.spec.repr != expected.repr {
        bail!(
            "representation mismatch: checkpoint has {:?}, run config implies {:?}",
            policy.spec.repr.map(|m| m.kind),
            expected.repr.map(|m| m.kind)
        );
    }
    Ok(LoadedRun { policy, run })
}

/// Deterministic evaluation of a checkpoint on the shared evaluation seeds.
pub fn evaluate(checkpoint: &Path, episodes: usize, ood: Option<Ood>) -> Result<EvalReport> {
    let lr = load_run(checkpoint)?;
    let scene = apply_ood(&lr.run.scene_config()?, ood)?;
    let init = lr.run.load_init_set()?;
    evaluate_policy_on(&lr.policy, &lr.run, &scene, init, episodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub in_dist: f64,
    pub recolor: f64,
    pub distractor: f64,
    pub distractor_count: usize,
    pub episodes: usize,
}

pub fn ood_suite(checkpoint: &Path, episodes: usize, distractors: usize) -> Result<OodReport> {
    Ok(OodReport {
        in_dist: evaluate(checkpoint, episodes, None)?.success_rate,
        recolor: evaluate(checkpoint, episodes, Some(Ood::Recolor))?.success_rate,
        distractor: evaluate(checkpoint, episodes, Some(Ood::Distractors(distractors)))?
            .success_rate,
        distractor_count: distractors,
        episodes,
    })
}

/// Collects `n` successful Pick terminal states by running a trained Pick
/// checkpoint deterministically.
pub fn harvest(checkpoint: &Path, n: usize, seed: u64) -> Result<InitStateSet> {
    let lr = load_run(checkpoint)?;
    ensure!(lr.run.task == Task::Pick, "harvesting needs a pick checkpoint");
    let scene = lr.run.scene_config()?;
    let policy = lr.policy;
    let mut failure = None;
    let controller = |s: &SceneState, o: &Observation| match policy.act(&[&policy_obs(s, o)]) {
        Ok((d, _)) => d[0].deterministic(),
        Err(e) => {
            failure.get_or_insert(e);
            Action::new([0.0; 3], false)
        }
    };
    let mut set = simworld::harvest_pick_terminals(controller, &scene, n, seed, 20 * n.max(1))?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    set.source = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "run": lr.run,
        "seed": seed,
    });
    Ok(set)
}

/// Start states from the scripted Pick controller, for suites that have no
/// trained Pick checkpoint to draw from.
pub fn harvest_scripted(scene: &SceneConfig, n: usize, seed: u64) -> Result<InitStateSet> {
    let g = scene.geometry;
    let mut set = simworld::harvest_pick_terminals(
        |s, _| simworld::scripted_pick_action(s, &g),
        scene,
        n,
        seed,
        20 * n.max(1),
    )?;
    set.source = serde_json::json!({ "controller": "scripted_pick", "seed": seed });
    Ok(set)
}

// ---------------------------------------------------------------- suites

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub task: Task,
    pub variant: Variant,
    pub objects: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        let (c, p) = SceneConfig::object_counts(self.objects).unwrap_or((0, 0));
        format!("{} ({c},{p})", self.task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePlan {
    pub name: String,
    pub cells: Vec<Cell>,
    pub methods: Vec<ReprKind>,
    pub seeds: Vec<u64>,
    pub pick_steps: u64,
    pub place_steps: u64,
    pub eval_episodes: usize,
    pub resolution: usize,
    pub deterministic: bool,
    /// Extra out-of-distribution evaluations of every run's best checkpoint.
    pub ood_distractors: Option<usize>,
}

impl SuitePlan {
    fn base(name: &str, cells: Vec<Cell>, methods: Vec<ReprKind>) -> Self {
        SuitePlan {
            name: name.to_string(),
            cells,
            methods,
            seeds: vec![0, 1, 2],
            pick_steps: DESK_PICK_STEPS,
            place_steps: DESK_PLACE_STEPS,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            resolution: DESK_RESOLUTION,
            deterministic: false,
            ood_distractors: None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["paper-table1-desk", "ablations", "ood", "full"];

    pub fn preset(name: &str) -> Result<SuitePlan> {
        use ReprKind::*;
        let pick = |variant, objects| Cell {
            task: Task::Pick,
            variant,
            objects,
        };
        let baselines = vec![Docir, Ocr, Flat];
        Ok(match name {
            "paper-table1-desk" => SuitePlan::base(
                name,
                vec![pick(Variant::FixedTarget, 3), pick(Variant::VaryingTarget, 5)],
                baselines,
            ),
            "ablations" => SuitePlan::base(
                name,
                vec![pick(Variant::VaryingTarget, 5)],
                vec![Docir, AblationA, AblationB, AblationC],
            ),
            "ood" => SuitePlan {
                seeds: vec![0],
                ood_distractors: Some(3),
                ..SuitePlan::base(name, vec![pick(Variant::VaryingTarget, 5)], vec![Docir])
            },
            "full" => {
                let mut cells = Vec::new();
                for task in [Task::Pick, Task::Place] {
                    for variant in [Variant::FixedTarget, Variant::VaryingTarget] {
                        for objects in [3, 5, 7, 9] {
                            cells.push(Cell {
                                task,
                                variant,
                                objects,
                            });
                        }
                    }
                }
                SuitePlan {
                    pick_steps: FULL_STEPS,
                    place_steps: FULL_STEPS,
                    ..SuitePlan::base(name, cells, baselines)
                }
            }
            other => bail!(
                "unknown preset `{other}` (known: {})",
                SuitePlan::PRESETS.join(", ")
            ),
        })
    }

    pub fn run_count(&self) -> usize {
        self.cells.len() * self.methods.len() * self.seeds.len()
    }

    /// Run configs in execution order. Place runs point at the suite's shared
    /// start-state file for their cell.
    pub fn runs(&self, suite_dir: &Path) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.run_count());
        for cell in &self.cells {
            for &repr in &self.methods {
                for &seed in &self.seeds {
                    let mut r = RunConfig {
                        task: cell.task,
                        variant: cell.variant,
                        objects: cell.objects,
                        repr,
                        seed,
                        steps: match cell.task {
                            Task::Pick => self.pick_steps,
                            Task::Place => self.place_steps,
                        },
                        deterministic: self.deterministic,
                        eval_episodes: self.eval_episodes,
                        resolution: self.resolution,
                        ..RunConfig::default()
                    };
                    r.out_dir = Some(suite_dir.join("runs").join(r.name()));
                    if cell.task == Task::Place {
                        r.init_set = Some(init_set_path(suite_dir, cell));
                    }
                    out.push(r);
                }
            }
        }
        out
    }
}

pub fn init_set_path(suite_dir: &Path, cell: &Cell) -> PathBuf {
    suite_dir
        .join("init_sets")
        .join(format!("place-{}-{}.json", cell.variant, cell.objects))
}

/// One appended line of a suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub cell: Cell,
    pub repr: ReprKind,
    pub seed: u64,
    pub success_rate: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    #[serde(default)]
    pub ood: Option<OodReport>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path)?;
    f.lock_shared()?;
    let text = std::fs::read_to_string(path)?;
    FileExt::unlock(&f)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("manifest line"))
        .collect()
}

pub fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.lock_exclusive()?;
    let line = serde_json::to_string(entry)?;
    let res = writeln!(f, "{line}").and_then(|_| f.flush());
    FileExt::unlock(&f)?;
    res?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub cell: Cell,
    pub repr: ReprKind,
    /// Mean over seeds; `None` while any planned seed is missing.
    pub success_rate: Option<f64>,
    pub per_seed: BTreeMap<u64, f64>,
    pub planned_seeds: usize,
}

impl ResultCell {
    pub fn is_partial(&self) -> bool {
        self.per_seed.len() < self.planned_seeds
    }
}

pub fn aggregate(plan: &SuitePlan, entries: &[ManifestEntry]) -> Vec<ResultCell> {
    let mut out = Vec::new();
    for cell in &plan.cells {
        for &repr in &plan.methods {
            let per_seed: BTreeMap<u64, f64> = entries
                .iter()
                .filter(|e| e.cell == *cell && e.repr == repr && plan.seeds.contains(&e.seed))
                .map(|e| (e.seed, e.success_rate))
                .collect();
            let complete = per_seed.len() == plan.seeds.len();
            let success_rate = complete
                .then(|| per_seed.values().sum::<f64>() / per_seed.len().max(1) as f64);
            out.push(ResultCell {
                cell: *cell,
                repr,
                success_rate,
                per_seed,
                planned_seeds: plan.seeds.len(),
            });
        }
    }
    out
}

/// Results grid: one row per (variant, method), one column per
/// (task, object count). Incomplete cells read `partial(k/n)`.
pub fn table_csv(cells: &[ResultCell]) -> String {
    let mut cols: Vec<(Task, usize)> = cells.iter().map(|c| (c.cell.task, c.cell.objects)).collect();
    cols.sort();
    cols.dedup();
    let mut rows: Vec<(Variant, ReprKind)> = Vec::new();
    for c in cells {
        if !rows.contains(&(c.cell.variant, c.repr)) {
            rows.push((c.cell.variant, c.repr));
        }
    }
    rows.sort_by_key(|&(v, r)| (v, ReprKind::ALL.iter().position(|&k| k == r)));
    let mut s = String::from("variant,method");
    for (task, objects) in &cols {
        let (c, p) = SceneConfig::object_counts(*objects).unwrap_or((0, 0));
        let _ = write!(s, ",{task} ({c} cubes {p} plates)");
    }
    s.push('\n');
    for (variant, repr) in rows {
        let _ = write!(s, "{variant},{repr}");
        for (task, objects) in &cols {
            let v = cells.iter().find(|c| {
                c.cell.variant == variant && c.repr == repr && c.cell.task == *task && c.cell.objects == *objects
            });
            s.push(',');
            if let Some(c) = v {
                let _ = match c.success_rate {
                    Some(r) => write!(s, "{r:.2}"),
                    None => write!(s, "partial({}/{})", c.per_seed.len(), c.planned_seeds),
                };
            }
        }
        s.push('\n');
    }
    s
}

/// Long format: one row per (cell, method) with every seed's rate.
pub fn cells_csv(cells: &[ResultCell]) -> String {
    let mut s = String::from("task,variant,objects,method,success_mean,complete,seeds,per_seed\n");
    for c in cells {
        let per: Vec<String> = c.per_seed.iter().map(|(k, v)| format!("{k}:{v:.4}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.cell.task,
            c.cell.variant,
            c.cell.objects,
            c.repr,
            c.success_rate.map(|r| format!("{r:.4}")).unwrap_or_default(),
            !c.is_partial(),
            c.per_seed.len(),
            per.join(";")
        );
    }
    s
}

pub fn ood_csv(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("run_id,in_dist,recolor,distractor,distractor_count,episodes\n");
    for e in entries {
        if let Some(o) = &e.ood {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{},{}",
                e.run_id, o.in_dist, o.recolor, o.distractor, o.distractor_count, o.episodes
            );
        }
    }
    s
}

/// What a suite needs from a single run: train it and report where the
/// scored checkpoint and metrics live.
pub trait Runner {
    fn run(&mut self, cfg: &RunConfig) -> Result<ManifestEntry>;
}

/// Trains in-process with [`train_run`].
pub struct LocalRunner {
    pub verbose: bool,
}

impl Runner for LocalRunner {
    fn run(&mut self, cfg: &RunConfig) -> Result<ManifestEntry> {
        let s = train_run(cfg, self.verbose)?;
        Ok(ManifestEntry {
            run_id: cfg.name(),
            cell: Cell {
                task: cfg.task,
                variant: cfg.variant,
                objects: cfg.objects,
            },
            repr: cfg.repr,
            seed: cfg.seed,
            success_rate: s.final_eval.success_rate,
            checkpoint: s.checkpoint,
            metrics: s.metrics,
            ood: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub cells: Vec<ResultCell>,
    pub trained: usize,
    pub skipped: usize,
    pub table: PathBuf,
}

/// Runs every planned run not yet in the suite manifest, appending one entry
/// per finished run, then writes `table.csv`, `cells.csv` and (when the plan
/// asks for it) `ood.csv`.
pub fn run_suite(plan: &SuitePlan, suite_dir: &Path, runner: &mut dyn Runner) -> Result<SuiteOutcome> {
    std::fs::create_dir_all(suite_dir)?;
    std::fs::write(suite_dir.join("plan.json"), serde_json::to_string_pretty(plan)?)?;
    let manifest = suite_dir.join(MANIFEST_FILE);
    let mut trained = 0;
    let mut skipped = 0;
    for cell in plan.cells.iter().filter(|c| c.task == Task::Place) {
        let p = init_set_path(suite_dir, cell);
        if !p.exists() {
            let probe = RunConfig {
                variant: cell.variant,
                objects: cell.objects,
                resolution: plan.resolution,
                ..RunConfig::default()
            };
            let set = harvest_scripted(&probe.scene_config()?, 200, HARVEST_SEED)?;
            std::fs::create_dir_all(p.parent().expect("init set dir"))?;
            std::fs::write(&p, set.to_json())?;
        }
    }
    for cfg in plan.runs(suite_dir) {
        let done: BTreeSet<String> = read_manifest(&manifest)?.into_iter().map(|e| e.run_id).collect();
        if done.contains(&cfg.name()) {
            skipped += 1;
            continue;
        }
        let mut entry = runner.run(&cfg)?;
        if let Some(m) = plan.ood_distractors {
            entry.ood = Some(ood_suite(&entry.checkpoint, plan.eval_episodes, m)?);
        }
        append_manifest(&manifest, &entry)?;
        trained += 1;
    }
    let entries = read_manifest(&manifest)?;
    let cells = aggregate(plan, &entries);
    let table = suite_dir.join("table.csv");
    std::fs::write(&table, table_csv(&cells))?;
    std::fs::write(suite_dir.join("cells.csv"), cells_csv(&cells))?;
    if plan.ood_distractors.is_some() {
        std::fs::write(suite_dir.join("ood.csv"), ood_csv(&entries))?;
    }
    Ok(SuiteOutcome {
        cells,
        trained,
        skipped,
        table,
    })
}

// ---------------------------------------------------------------- curves

/// Valid-window rolling mean. A series shorter than the window collapses to
/// its overall mean at the last x.
pub fn rolling_mean(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    if points.is_empty() {
        return Vec::new();
    }
    if points.len() <= w {
        let m = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        return vec![(points[points.len() - 1].0, m)];
    }
    let mut out = Vec::with_capacity(points.len() - w + 1);
    let mut sum: f64 = points[..w].iter().map(|p| p.1).sum();
    out.push((points[w - 1].0, sum / w as f64));
    for i in w..points.len() {
        sum += points[i].1 - points[i - w].1;
        out.push((points[i].0, sum / w as f64));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub method: String,
    pub seeds: usize,
    pub points: Vec<CurvePoint>,
}

/// Mean of per-seed rolling means with a min/max band, truncated to the
/// shortest seed.
pub fn aggregate_curves(method: &str, streams: &[Vec<(f64, f64)>], window: usize) -> Curve {
    let rolled: Vec<Vec<(f64, f64)>> = streams
        .iter()
        .map(|s| rolling_mean(s, window))
        .filter(|r| !r.is_empty())
        .collect();
    let len = rolled.iter().map(Vec::len).min().unwrap_or(0);
    let points = (0..len)
        .map(|i| {
            let ys: Vec<f64> = rolled.iter().map(|r| r[i].1).collect();
            CurvePoint {
                step: rolled.iter().map(|r| r[i].0).sum::<f64>() / rolled.len() as f64,
                mean: ys.iter().sum::<f64>() / ys.len() as f64,
                min: ys.iter().copied().fold(f64::INFINITY, f64::min),
                max: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Curve {
        method: method.to_string(),
        seeds: rolled.len(),
        points,
    }
}

/// Training-time series `(step, value)` from a metrics stream's update
/// records; `metric` is `success_rate` or `mean_return`.
pub fn metric_series(records: &[ppo::MetricsRecord], metric: &str) -> Result<Vec<(f64, f64)>> {
    let pick = |r: &ppo::MetricsRecord| match metric {
        "success_rate" => Ok(r.success_rate),
        "mean_return" => Ok(r.mean_return),
        other => Err(anyhow!("unsupported curve metric `{other}`")),
    };
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.kind == "update") {
        if let Some(v) = pick(r)? {
            out.push((r.step as f64, v));
        }
    }
    Ok(out)
}

/// Method label of a metrics file: the run config next to it if present,
/// the parent directory name otherwise.
pub fn method_of(metrics: &Path) -> String {
    let dir = metrics.parent().unwrap_or(Path::new("."));
    std::fs::read_to_string(dir.join(RUN_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .map(|r| r.repr.to_string())
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        })
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("method,seeds,step,mean,min,max\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6},{:.6}", c.method, c.seeds, p.step, p.mean, p.min, p.max);
        }
    }
    s
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot with shaded min/max bands, written as plain SVG path elements.
pub fn curves_svg(curves: &[Curve], y_label: &str) -> String {
    let (w, h) = (720.0, 420.0);
    let (l, r, t, b) = (70.0, 160.0, 20.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let x_max = pts.clone().map(|p| p.step).fold(1.0, f64::max);
    let y_lo = pts.clone().map(|p| p.min).fold(0.0, f64::min);
    let mut y_hi = pts.map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
    if !y_hi.is_finite() || y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let px = |x: f64| l + x / x_max * (w - l - r);
    let py = |y: f64| h - b - (y - y_lo) / (y_hi - y_lo) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {} L{} {}" fill="none" stroke="black"/>"#,
        h - b,
        w - r,
        h - b
    );
    for i in 0..=4 {
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let xv = x_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#,
            l - 6.0,
            py(yv) + 4.0,
            yv
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#,
            px(xv),
            h - b + 18.0,
            xv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        (l + w - r) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        if !c.points.is_empty() {
            let mut band = String::new();
            for (k, p) in c.points.iter().enumerate() {
                let _ = write!(band, "{}{:.2} {:.2} ", if k == 0 { "M" } else { "L" }, px(p.step), py(p.max));
            }
            for p in c.points.iter().rev() {
                let _ = write!(band, "L{:.2} {:.2} ", px(p.step), py(p.min));
            }
            band.push('Z');
            let _ = writeln!(s, r#"<path d="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#);
            let mut line = String::new();
            for (k, p) in c.points.iter().enumerate() {
                let _ = write!(line, "{}{:.2} {:.2} ", if k == 0 { "M" } else { "L" }, px(p.step), py(p.mean));
            }
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.trim_end());
        }
        let ly = t + 20.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<path d="M{} {ly} L{} {ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{} (n={})</text>"#,
            w - r + 10.0,
            w - r + 30.0,
            w - r + 36.0,
            ly + 4.0,
            c.method,
            c.seeds
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads every metrics file matching `pattern`, groups them by method and
/// writes `<prefix>.csv` and `<prefix>.svg`.
pub fn curves(pattern: &str, prefix: &Path, metric: &str, window: usize) -> Result<Vec<Curve>> {
    let mut groups: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    let mut any = false;
    for path in glob::glob(pattern).context("bad glob")? {
        let path = path?;
        any = true;
        let records = ppo::read_metrics(&path).with_context(|| format!("reading {}", path.display()))?;
        groups
            .entry(method_of(&path))
            .or_default()
            .push(metric_series(&records, metric)?);
    }
    ensure!(any, "no metrics files match `{pattern}`");
    let curves: Vec<Curve> = groups
        .iter()
        .map(|(m, s)| aggregate_curves(m, s, window))
        .collect();
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(with_ext(".csv"), curves_csv(&curves))?;
    std::fs::write(with_ext(".svg"), curves_svg(&curves, metric))?;
    Ok(curves)
}
