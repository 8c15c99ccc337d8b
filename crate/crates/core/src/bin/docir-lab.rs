use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use docir_lab::disentangle::ReprKind;
use docir_lab::harness::{self, LocalRunner, Ood, RunConfig, SuitePlan};
use docir_lab::ppo::PpoHypers;
use docir_lab::simworld::{Task, Variant};

#[derive(Parser, Debug)]
#[command(name = "docir-lab", version, about = "Train and evaluate mask-based manipulation policies")]
#[command(args_override_self = true)]
struct Cli {
    /// JSON file whose keys mirror the subcommand's flags; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one policy.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint deterministically.
    Eval(EvalArgs),
    /// Run a preset grid of training runs and tabulate the results.
    Suite(SuiteArgs),
    /// Store successful Pick terminal states as Place start states.
    Harvest(HarvestArgs),
    /// Aggregate metrics streams into learning curves.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task, default_value = "pick")]
    task: Task,
    #[arg(long, value_parser = parse_variant, default_value = "fixed")]
    variant: Variant,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, value_parser = parse_repr, default_value = "docir")]
    repr: ReprKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Environment-step budget (default: 1M for pick, 1.5M for place).
    #[arg(long)]
    steps: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Initial-state set for place runs.
    #[arg(long)]
    init_set: Option<PathBuf>,
    /// Run directory (default: <data root>/runs/<run name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = harness::DESK_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[command(flatten)]
    hypers: HyperArgs,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    clip_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    minibatches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    value_coef: Option<f64>,
    #[arg(long)]
    rollout_len: Option<usize>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Episodes per periodic evaluation during training.
    #[arg(long)]
    train_eval_episodes: Option<usize>,
}

impl HyperArgs {
    fn apply(&self, mut h: PpoHypers) -> PpoHypers {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$( if let Some(v) = self.$f { h.$g = v; } )*};
        }
        set!(gamma => gamma, lambda => lambda, clip_eps => clip_eps, epochs => epochs,
             minibatches => minibatches, lr => lr, entropy_coef => entropy_coef,
             value_coef => value_coef, rollout_len => rollout_len, num_envs => num_envs,
             max_grad_norm => max_grad_norm, eval_every => eval_every,
             train_eval_episodes => eval_episodes);
        h
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OodKind {
    Recolor,
    Distractors,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_EPISODES)]
    episodes: usize,
    #[arg(long, value_enum)]
    ood: Option<OodKind>,
    /// Number of distractors for `--ood distractors`.
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Run in-distribution, recolor and distractor evaluations together.
    #[arg(long, conflicts_with = "ood")]
    all_ood: bool,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// paper-table1-desk, ablations, ood or full.
    #[arg(long)]
    preset: String,
    /// Suite directory (default: <data root>/suites/<preset>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the preset's seeds, e.g. `--seeds 0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the preset's step budget for every run.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    /// Print the planned runs and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct HarvestArgs {
    /// Trained pick checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = harness::HARVEST_SEED)]
    seed: u64,
    /// Output file (default: <data root>/init_sets/<checkpoint stem>-<n>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// Glob over metrics.jsonl files.
    #[arg(long = "in")]
    input: String,
    /// Output prefix; writes PREFIX.csv and PREFIX.svg.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "success_rate")]
    metric: String,
    #[arg(long, default_value_t = harness::CURVE_WINDOW)]
    window: usize,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: docir_lab::simworld::SimError| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: docir_lab::simworld::SimError| e.to_string())
}

fn parse_repr(s: &str) -> Result<ReprKind, String> {
    s.parse().map_err(|e: docir_lab::disentangle::GroupError| e.to_string())
}

/// Turns a JSON object into `--key value` arguments.
fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).context("config file is not JSON")?;
    let Some(map) = value.as_object() else {
        bail!("config file must hold a JSON object");
    };
    let mut out = Vec::new();
    for (k, v) in map {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => out.extend([flag.into(), s.into()]),
            serde_json::Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string))
                    .collect();
                out.extend([flag.into(), joined.join(",").into()]);
            }
            serde_json::Value::Object(_) => bail!("config key `{k}` must not be an object"),
        }
    }
    Ok(out)
}

/// Re-parses with the config file's flags placed right after the
/// subcommand, ahead of the user's own flags.
fn parse_with_config() -> Result<Cli> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = Cli::parse_from(&argv);
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let sub_pos = argv
        .iter()
        .position(|a| {
            ["train", "eval", "suite", "harvest", "curves"]
                .iter()
                .any(|s| a == *s)
        })
        .context("missing subcommand")?;
    let mut merged = argv[..=sub_pos].to_vec();
    merged.extend(config_args(&path)?);
    merged.extend_from_slice(&argv[sub_pos + 1..]);
    Ok(Cli::parse_from(merged))
}

fn main() -> Result<()> {
    let cli = parse_with_config()?;
    docir_lab::tune_allocator();
    match cli.command {
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Suite(a) => suite(a),
        Command::Harvest(a) => harvest(a),
        Command::Curves(a) => curves(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig {
        task: a.task,
        variant: a.variant,
        objects: a.objects,
        repr: a.repr,
        seed: a.seed,
        steps: a.steps.unwrap_or(match a.task {
            Task::Pick => harness::DESK_PICK_STEPS,
            Task::Place => harness::DESK_PLACE_STEPS,
        }),
        deterministic: a.deterministic,
        eval_episodes: a.episodes,
        resolution: a.resolution,
        horizon: a.horizon,
        hypers: a.hypers.apply(PpoHypers::default()),
        out_dir: a.out,
        init_set: a.init_set,
    };
    let s = harness::train_run(&cfg, !a.quiet)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.all_ood {
        let r = harness::ood_suite(&a.checkpoint, a.episodes, a.count)?;
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(());
    }
    let ood = a.ood.map(|k| match k {
        OodKind::Recolor => Ood::Recolor,
        OodKind::Distractors => Ood::Distractors(a.count),
    });
    let r = harness::evaluate(&a.checkpoint, a.episodes, ood)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn suite(a: SuiteArgs) -> Result<()> {
    let mut plan = SuitePlan::preset(&a.preset)?;
    if a.preset == "full" {
        eprintln!(
            "warning: the full preset trains {} runs of {} steps each; expect weeks of CPU time",
            plan.run_count(),
            plan.pick_steps
        );
    }
    if let Some(s) = a.seeds {
        plan.seeds = s;
    }
    if let Some(s) = a.steps {
        plan.pick_steps = s;
        plan.place_steps = s;
    }
    if let Some(e) = a.episodes {
        plan.eval_episodes = e;
    }
    plan.deterministic |= a.deterministic;
    let dir = a
        .out
        .unwrap_or_else(|| harness::data_root().join("suites").join(&plan.name));
    if a.dry_run {
        for r in plan.runs(&dir) {
            println!("{} steps={}", r.name(), r.steps);
        }
        println!("{} runs", plan.run_count());
        return Ok(());
    }
    let out = harness::run_suite(&plan, &dir, &mut LocalRunner { verbose: !a.quiet })?;
    eprintln!(
        "trained {} runs, skipped {} already in the manifest",
        out.trained, out.skipped
    );
    print!("{}", std::fs::read_to_string(&out.table)?);
    Ok(())
}

fn harvest(a: HarvestArgs) -> Result<()> {
    let set = harness::harvest(&a.checkpoint, a.n, a.seed)?;
    let out = a.out.unwrap_or_else(|| {
        let stem = a
            .checkpoint
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "harvest".to_string(), |s| s.to_string_lossy().into_owned());
        harness::data_root()
            .join("init_sets")
            .join(format!("{stem}-{}.json", a.n))
    });
    if let Some(p) = out.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(&out, set.to_json())?;
    println!("{} states -> {}", set.len(), out.display());
    Ok(())
}

fn curves(a: CurvesArgs) -> Result<()> {
    let c = harness::curves(&a.input, &a.out, &a.metric, a.window)?;
    for curve in &c {
        let last = curve.points.last().map_or(f64::NAN, |p| p.mean);
        println!(
            "{}: {} seeds, {} points, final {:.3}",
            curve.method,
            curve.seeds,
            curve.points.len(),
            last
        );
    }
    Ok(())
}
