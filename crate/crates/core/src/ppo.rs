//! Proximal policy optimisation: rollout collection over a set of
//! environments, generalised advantage estimation, the clipped-surrogate
//! update, and the training loop with periodic deterministic evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Graph, Scalar, Tensor};
use crate::policy::{
    entropy_graph, log_prob_graph, value_graph, ActionDist, Policy, PolicyError, PolicyObs,
};
use crate::simworld::Action;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid hyperparameters: {0}")]
    Hypers(String),
    #[error("non-finite loss at update {update}; diagnostics: {dump}")]
    NonFinite {
        update: usize,
        dump: serde_json::Value,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment: {0}")]
    Env(String),
}

impl From<crate::autodiff::AutodiffError> for PpoError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        PpoError::Policy(PolicyError::Autodiff(e))
    }
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHypers {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub max_grad_norm: f64,
    /// Updates between deterministic evaluations.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PpoHypers {
    fn default() -> Self {
        PpoHypers {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 8,
            lr: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_len: 512,
            num_envs: 8,
            max_grad_norm: 0.5,
            eval_every: 20,
            eval_episodes: 32,
        }
    }
}

impl PpoHypers {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PpoError::Hypers(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.clip_eps <= 0.0 {
            return bad("clip epsilon must be positive");
        }
        if self.rollout_len == 0 || self.num_envs == 0 || self.minibatches == 0 {
            return bad("rollout length, env count and minibatch count must be positive");
        }
        if self.minibatches > self.rollout_len * self.num_envs {
            return bad("more minibatches than transitions");
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.rollout_len * self.num_envs) as u64
    }
}

/// One environment transition as seen by the learner.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: PolicyObs,
    pub reward: f64,
    /// Ended by success or failure.
    pub terminated: bool,
    /// Ended by the horizon.
    pub truncated: bool,
    pub success: bool,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Env: Send {
    fn reset(&mut self, seed: u64) -> std::result::Result<PolicyObs, String>;
    /// `action` carries the unclamped arm; the environment clamps it.
    fn step(&mut self, action: &Action) -> Transition;
}

/// Generalised advantage estimation over one environment's sequence.
/// `bootstrap` is the value of the state following the last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Length(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_value = values[t];
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Zero mean, unit variance (with a 1e-8 guard on the deviation).
pub fn normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Transitions from `N` environments over `T` steps, stored env-major
/// (`index = env * T + t`).
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub horizon: usize,
    pub obs: Vec<PolicyObs>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Includes `γ·V(s_final)` on horizon cuts.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of each env's state after its last stored step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let t = self.horizon;
        self.advantages = Vec::with_capacity(self.len());
        self.returns = Vec::with_capacity(self.len());
        for e in 0..self.num_envs {
            let r = e * t..(e + 1) * t;
            let (a, ret) = gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r],
                self.bootstrap[e],
                gamma,
                lambda,
            )?;
            self.advantages.extend(a);
            self.returns.extend(ret);
        }
        Ok(())
    }
}

/// An environment together with its current observation and episode
/// bookkeeping.
pub struct EnvSlot<E> {
    pub env: E,
    pub obs: PolicyObs,
    seeds: ChaCha8Rng,
    episode_return: f64,
}

impl<E: Env> EnvSlot<E> {
    /// Resets `env` with the first seed of a stream derived from `stream_seed`.
    pub fn new(mut env: E, stream_seed: u64) -> Result<Self> {
        let mut seeds = ChaCha8Rng::seed_from_u64(stream_seed);
        let obs = env.reset(seeds.gen()).map_err(PpoError::Env)?;
        Ok(EnvSlot {
            env,
            obs,
            seeds,
            episode_return: 0.0,
        })
    }
}

fn step_all<E: Env>(slots: &mut [EnvSlot<E>], actions: &[Action], parallel: bool) -> Vec<Transition> {
    if parallel && slots.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = slots
                .iter_mut()
                .zip(actions)
                .map(|(slot, a)| s.spawn(move || slot.env.step(a)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("env step panicked"))
                .collect()
        })
    } else {
        slots
            .iter_mut()
            .zip(actions)
            .map(|(slot, a)| slot.env.step(a))
            .collect()
    }
}

/// obs, action, log-prob, value, reward, done
type Step = (PolicyObs, Action, f64, f64, f64, bool);

/// Runs every environment for `horizon` steps with sampled actions. Finished
/// episodes are reset inline; horizon cuts fold `γ·V(s_final)` into the
/// reward of the cut step.
pub fn collect<T: Scalar, E: Env>(
    slots: &mut [EnvSlot<E>],
    policy: &Policy<T>,
    horizon: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
    parallel: bool,
) -> Result<RolloutBatch> {
    let n = slots.len();
    let mut per_env: Vec<Vec<Step>> =
        (0..n).map(|_| Vec::with_capacity(horizon)).collect();
    let mut batch = RolloutBatch {
        num_envs: n,
        horizon,
        ..Default::default()
    };
    for _ in 0..horizon {
        let refs: Vec<&PolicyObs> = slots.iter().map(|s| &s.obs).collect();
        let (dists, values) = policy.act(&refs)?;
        let actions: Vec<Action> = dists.iter().map(|d| d.sample(rng)).collect();
        let trans = step_all(slots, &actions, parallel);
        let cut: Vec<usize> = (0..n).filter(|&i| trans[i].truncated).collect();
        let cut_values = if cut.is_empty() {
            Vec::new()
        } else {
            let finals: Vec<&PolicyObs> = cut.iter().map(|&i| &trans[i].obs).collect();
            policy.act(&finals)?.1
        };
        let mut cut_iter = cut_values.into_iter();
        for (i, tr) in trans.into_iter().enumerate() {
            let slot = &mut slots[i];
            slot.episode_return += tr.reward;
            let mut reward = tr.reward;
            if tr.truncated {
                reward += gamma * cut_iter.next().expect("one value per cut");
            }
            let done = tr.done();
            let obs = std::mem::replace(&mut slot.obs, tr.obs);
            per_env[i].push((
                obs,
                actions[i],
                dists[i].log_prob(&actions[i]),
                values[i],
                reward,
                done,
            ));
            if done {
                batch.episode_returns.push(slot.episode_return);
                batch.episode_successes.push(tr.success);
                slot.episode_return = 0.0;
                let seed = slot.seeds.gen();
                slot.obs = slot.env.reset(seed).map_err(PpoError::Env)?;
            }
        }
    }
    let refs: Vec<&PolicyObs> = slots.iter().map(|s| &s.obs).collect();
    batch.bootstrap = policy.act(&refs)?.1;
    for steps in per_env {
        for (o, a, lp, v, r, d) in steps {
            batch.obs.push(o);
            batch.actions.push(a);
            batch.log_probs.push(lp);
            batch.values.push(v);
            batch.rewards.push(r);
            batch.dones.push(d);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Loss terms for one minibatch, all on the same graph.
pub struct MinibatchLoss {
    pub total: crate::autodiff::Var,
    pub report: LossReport,
}

/// Builds the clipped-surrogate loss
/// `−mean(min(ρA, clip(ρ)A)) + c_v·mean((v − R)²) − c_e·mean(H)`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_loss<T: Scalar>(
    g: &mut Graph<T>,
    policy: &Policy<T>,
    bound: &crate::policy::Bound,
    obs: &[&PolicyObs],
    actions: &[Action],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    hypers: &PpoHypers,
) -> Result<MinibatchLoss> {
    let n = obs.len();
    if [actions.len(), old_log_probs.len(), advantages.len(), returns.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(PpoError::Length("minibatch arrays differ in length".into()));
    }
    let heads = policy.forward(g, bound, obs)?;
    let lp = log_prob_graph(g, &heads, actions)?;
    let old = g.constant(Tensor::from_f64(&[n], old_log_probs)?);
    let adv = g.constant(Tensor::from_f64(&[n], advantages)?);
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(
        ratio,
        T::lit(1.0 - hypers.clip_eps),
        T::lit(1.0 + hypers.clip_eps),
    );
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr_mean = g.mean(surr);
    let policy_loss = g.scale(surr_mean, T::lit(-1.0));

    let v = value_graph(g, &heads)?;
    let ret = g.constant(Tensor::from_f64(&[n], returns)?);
    let verr = g.sub(v, ret)?;
    let vsq = g.square(verr);
    let value_loss = g.mean(vsq);

    let ent = entropy_graph(g, &heads)?;
    let entropy = g.mean(ent);

    let a = g.scale(value_loss, T::lit(hypers.value_coef));
    let b = g.scale(entropy, T::lit(-hypers.entropy_coef));
    let total = g.add(policy_loss, a)?;
    let total = g.add(total, b)?;

    let scalar = |g: &Graph<T>, v| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let ratios: Vec<f64> = g
        .value(ratio)
        .data()
        .iter()
        .map(|r| r.to_f64().unwrap_or(f64::NAN))
        .collect();
    let logr: Vec<f64> = g
        .value(diff)
        .data()
        .iter()
        .map(|r| r.to_f64().unwrap_or(f64::NAN))
        .collect();
    let clip_fraction = ratios
        .iter()
        .filter(|r| (*r - 1.0).abs() > hypers.clip_eps)
        .count() as f64
        / n as f64;
    // k3 estimator: mean((ρ − 1) − ln ρ), non-negative
    let approx_kl = ratios
        .iter()
        .zip(&logr)
        .map(|(r, l)| (r - 1.0) - l)
        .sum::<f64>()
        / n as f64;
    Ok(MinibatchLoss {
        total,
        report: LossReport {
            policy_loss: scalar(g, policy_loss),
            value_loss: scalar(g, value_loss),
            entropy: scalar(g, entropy),
            clip_fraction,
            approx_kl,
            grad_norm: 0.0,
        },
    })
}

/// Epochs × minibatches of clipped-surrogate steps over `batch`, reshuffled
/// each epoch. Returns the loss terms averaged over all minibatches.
pub fn update<T: Scalar>(
    batch: &RolloutBatch,
    policy: &mut Policy<T>,
    adam: &mut Adam<T>,
    hypers: &PpoHypers,
    rng: &mut ChaCha8Rng,
    update_index: usize,
) -> Result<LossReport> {
    let n = batch.len();
    if batch.advantages.len() != n || batch.returns.len() != n {
        return Err(PpoError::Length("advantages not computed".into()));
    }
    let adv = normalize(&batch.advantages);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut acc = LossReport::default();
    let mut count = 0usize;
    let mb = hypers.minibatches;
    for _ in 0..hypers.epochs {
        idx.shuffle(rng);
        for m in 0..mb {
            let lo = m * n / mb;
            let hi = (m + 1) * n / mb;
            let ids = &idx[lo..hi];
            if ids.is_empty() {
                continue;
            }
            let obs: Vec<&PolicyObs> = ids.iter().map(|&i| &batch.obs[i]).collect();
            let actions: Vec<Action> = ids.iter().map(|&i| batch.actions[i]).collect();
            let old: Vec<f64> = ids.iter().map(|&i| batch.log_probs[i]).collect();
            let a: Vec<f64> = ids.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = ids.iter().map(|&i| batch.returns[i]).collect();
            let mut g = Graph::new();
            let bound = policy.bind(&mut g, true);
            let loss = minibatch_loss(&mut g, policy, &bound, &obs, &actions, &old, &a, &r, hypers)?;
            let total = g.value(loss.total).data()[0].to_f64().unwrap_or(f64::NAN);
            if !total.is_finite() {
                return Err(PpoError::NonFinite {
                    update: update_index,
                    dump: serde_json::json!({
                        "loss": format!("{total}"),
                        "report": loss.report,
                        "old_log_probs": old,
                        "advantages": a,
                        "returns": r,
                    }),
                });
            }
            g.backward(loss.total)?;
            let mut grads: Vec<Vec<T>> = bound
                .vars()
                .iter()
                .zip(policy.params.iter())
                .map(|(&v, (_, t))| {
                    g.grad(v)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); t.len()])
                })
                .collect();
            drop(g);
            let norm = adam.step(&mut policy.params, &mut grads)?;
            let r = loss.report;
            acc.policy_loss += r.policy_loss;
            acc.value_loss += r.value_loss;
            acc.entropy += r.entropy;
            acc.clip_fraction += r.clip_fraction;
            acc.approx_kl += r.approx_kl;
            acc.grad_norm += norm;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(LossReport {
        policy_loss: acc.policy_loss / c,
        value_loss: acc.value_loss / c,
        entropy: acc.entropy / c,
        clip_fraction: acc.clip_fraction / c,
        approx_kl: acc.approx_kl / c,
        grad_norm: acc.grad_norm / c,
    })
}

/// Seeds of the shared evaluation episode sequence.
pub const EVAL_SEED_BASE: u64 = 7_000_000;

pub fn eval_seed(episode: usize) -> u64 {
    EVAL_SEED_BASE + episode as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Deterministic-action evaluation on the shared seed sequence. Episodes are
/// stepped in lockstep across `envs`; episode `i` always uses `eval_seed(i)`.
pub fn evaluate_policy<T: Scalar, E: Env>(
    policy: &Policy<T>,
    envs: &mut [E],
    episodes: usize,
) -> Result<EvalReport> {
    let lanes = envs.len().min(episodes);
    let mut successes = 0;
    let mut total_return = 0.0;
    let mut next = 0;
    let mut active: Vec<Option<(PolicyObs, f64)>> = Vec::with_capacity(lanes);
    for env in envs.iter_mut().take(lanes) {
        let o = env.reset(eval_seed(next)).map_err(PpoError::Env)?;
        next += 1;
        active.push(Some((o, 0.0)));
    }
    while active.iter().any(Option::is_some) {
        let live: Vec<usize> = (0..lanes).filter(|&i| active[i].is_some()).collect();
        let refs: Vec<&PolicyObs> = live
            .iter()
            .map(|&i| &active[i].as_ref().expect("live lane").0)
            .collect();
        let (dists, _) = policy.act(&refs)?;
        for (k, &i) in live.iter().enumerate() {
            let tr = envs[i].step(&dists[k].deterministic());
            let lane = active[i].as_mut().expect("live lane");
            lane.1 += tr.reward;
            if tr.done() {
                successes += usize::from(tr.success);
                total_return += lane.1;
                if next < episodes {
                    let o = envs[i].reset(eval_seed(next)).map_err(PpoError::Env)?;
                    next += 1;
                    active[i] = Some((o, 0.0));
                } else {
                    active[i] = None;
                }
            } else {
                lane.0 = tr.obs;
            }
        }
    }
    Ok(EvalReport {
        episodes,
        successes,
        success_rate: if episodes == 0 {
            0.0
        } else {
            successes as f64 / episodes as f64
        },
        mean_return: if episodes == 0 {
            0.0
        } else {
            total_return / episodes as f64
        },
    })
}

/// One line of the JSON-lines metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `"update"` or `"eval"`.
    pub kind: String,
    pub step: u64,
    pub update: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub approx_kl: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// The record with its wall-clock field zeroed, for reproducibility checks.
    pub fn without_time(&self) -> MetricsRecord {
        MetricsRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hypers: PpoHypers,
    pub total_steps: u64,
    pub seed: u64,
    /// Single-threaded execution.
    pub deterministic: bool,
    /// Where checkpoints and `metrics.jsonl` go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Stored in every checkpoint's manifest.
    pub metadata: serde_json::Value,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub policy: Policy<T>,
    pub updates: usize,
    pub env_steps: u64,
    pub best_eval: Option<EvalReport>,
    pub best_update: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics: Vec<MetricsRecord>,
}

struct Sink {
    file: Option<std::fs::File>,
    records: Vec<MetricsRecord>,
}

impl Sink {
    fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r).expect("metrics serialize");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Alternates collection and updates until `total_steps` environment steps
/// have been consumed. Every `eval_every` updates (and once after the last
/// update) a deterministic evaluation runs, `latest.ckpt` is written and
/// `best.ckpt` is replaced when the evaluation success rate improves.
pub fn train<T, E, F, G>(
    mut policy: Policy<T>,
    make_env: F,
    make_eval_env: G,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    E: Env,
    F: Fn(usize) -> E,
    G: Fn(usize) -> E,
{
    let h = config.hypers;
    h.validate()?;
    let start = Instant::now();
    let parallel = !config.deterministic
        && std::thread::available_parallelism().map_or(1, usize::from) > 1;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut slots = Vec::with_capacity(h.num_envs);
    for i in 0..h.num_envs {
        slots.push(EnvSlot::new(make_env(i), master.gen())?);
    }
    let mut eval_envs: Vec<E> = (0..h.num_envs.min(h.eval_episodes.max(1)))
        .map(&make_eval_env)
        .collect();
    let mut action_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut adam = Adam::new(
        AdamConfig {
            lr: h.lr,
            max_grad_norm: Some(h.max_grad_norm),
            ..AdamConfig::default()
        },
        &policy.params,
    );
    let dir = config.out_dir.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let mut sink = Sink {
        file: match &dir {
            Some(d) => Some(std::fs::File::create(d.join("metrics.jsonl"))?),
            None => None,
        },
        records: Vec::new(),
    };
    let meta = |step: u64, update: usize, eval: Option<&EvalReport>| {
        serde_json::json!({
            "run": config.metadata,
            "seed": config.seed,
            "step": step,
            "update": update,
            "eval": eval,
            "hypers": h,
        })
    };
    if let Some(d) = &dir {
        policy.save(&d.join("init.ckpt"), meta(0, 0, None))?;
    }
    let per_update = h.steps_per_update();
    let total_updates = (config.total_steps / per_update) as usize;
    let mut env_steps = 0u64;
    let mut best: Option<(EvalReport, usize)> = None;
    let mut best_path = None;
    for u in 1..=total_updates {
        let mut batch = collect(&mut slots, &policy, h.rollout_len, h.gamma, &mut action_rng, parallel)?;
        env_steps += per_update;
        batch.compute_advantages(h.gamma, h.lambda)?;
        let report = match update(&batch, &mut policy, &mut adam, &h, &mut shuffle_rng, u) {
            Ok(r) => r,
            Err(e @ PpoError::NonFinite { .. }) => {
                if let (Some(d), PpoError::NonFinite { dump, .. }) = (&dir, &e) {
                    std::fs::write(
                        d.join("nonfinite_dump.json"),
                        serde_json::to_string_pretty(dump).expect("json"),
                    )?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let episodes = batch.episode_returns.len();
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let succ: Vec<f64> = batch
            .episode_successes
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect();
        sink.push(MetricsRecord {
            kind: "update".into(),
            step: env_steps,
            update: u,
            mean_return: mean(&batch.episode_returns),
            success_rate: mean(&succ),
            policy_loss: Some(report.policy_loss),
            value_loss: Some(report.value_loss),
            entropy: Some(report.entropy),
            clip_fraction: Some(report.clip_fraction),
            approx_kl: Some(report.approx_kl),
            wall_time: start.elapsed().as_secs_f64(),
        })?;
        if config.verbose {
            eprintln!(
                "update {u}/{total_updates} step {env_steps} episodes {episodes} return {:.3} success {:.3} kl {:.4} ({:.0}s)",
                mean(&batch.episode_returns).unwrap_or(f64::NAN),
                mean(&succ).unwrap_or(f64::NAN),
                report.approx_kl,
                start.elapsed().as_secs_f64()
            );
        }
        drop(batch);
        let eval_now = (h.eval_every > 0 && u % h.eval_every == 0) || u == total_updates;
        if eval_now {
            let ev = evaluate_policy(&policy, &mut eval_envs, h.eval_episodes)?;
            sink.push(MetricsRecord {
                kind: "eval".into(),
                step: env_steps,
                update: u,
                mean_return: Some(ev.mean_return),
                success_rate: Some(ev.success_rate),
                policy_loss: None,
                value_loss: None,
                entropy: None,
                clip_fraction: None,
                approx_kl: None,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
            if config.verbose {
                eprintln!("eval at update {u}: success {:.3}", ev.success_rate);
            }
            let improved = best.is_none_or(|(b, _)| ev.success_rate > b.success_rate);
            if let Some(d) = &dir {
                policy.save(&d.join("latest.ckpt"), meta(env_steps, u, Some(&ev)))?;
                if improved {
                    let p = d.join("best.ckpt");
                    policy.save(&p, meta(env_steps, u, Some(&ev)))?;
                    best_path = Some(p);
                }
            }
            if improved {
                best = Some((ev, u));
            }
        }
    }
    Ok(TrainOutcome {
        policy,
        updates: total_updates,
        env_steps,
        best_eval: best.map(|b| b.0),
        best_update: best.map(|b| b.1),
        best_checkpoint: best_path,
        metrics: sink.records,
    })
}

/// Proprioception-only reaching task: move a point to a goal on the unit
/// square. Observation is `[x, y, gx, gy, gx − x, gy − y]`.
#[derive(Debug, Clone)]
pub struct PointReach {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub steps: usize,
    pub horizon: usize,
    pub step_size: f64,
    pub tolerance: f64,
}

impl Default for PointReach {
    fn default() -> Self {
        PointReach {
            pos: [0.5; 2],
            goal: [0.5; 2],
            steps: 0,
            horizon: 50,
            step_size: 0.05,
            tolerance: 0.05,
        }
    }
}

impl PointReach {
    pub const OBS_DIM: usize = 6;

    fn dist(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    fn obs(&self) -> PolicyObs {
        let [x, y] = self.pos;
        let [gx, gy] = self.goal;
        PolicyObs {
            proprio: [x, y, gx, gy, gx - x, gy - y].map(|v| v as f32).to_vec(),
            scene: None,
        }
    }
}

impl Env for PointReach {
    fn reset(&mut self, seed: u64) -> std::result::Result<PolicyObs, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        self.goal = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        self.steps = 0;
        Ok(self.obs())
    }

    fn step(&mut self, action: &Action) -> Transition {
        let a = action.clamped();
        let before = self.dist();
        for k in 0..2 {
            self.pos[k] = (self.pos[k] + self.step_size * a.arm[k]).clamp(0.0, 1.0);
        }
        self.steps += 1;
        let after = self.dist();
        let success = after <= self.tolerance;
        let truncated = !success && self.steps >= self.horizon;
        Transition {
            obs: self.obs(),
            reward: 10.0 * (before - after) + if success { 1.0 } else { 0.0 } - 0.01,
            terminated: success,
            truncated,
            success,
        }
    }
}

/// Mean of a distribution list's entropies (diagnostics).
pub fn mean_entropy(dists: &[ActionDist]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    dists.iter().map(ActionDist::entropy).sum::<f64>() / dists.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;

    /// Independent oracle: per-episode-segment sums of (γλ)^k δ.
    fn brute_gae(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + if d[t] { 0.0 } else { g * next_v(t) } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    s += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                s
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[2.0], &[0.5], &[true], 9.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.5]);
        assert_eq!(r, vec![2.0]);
        let rs = [1.0, -2.0, 0.5];
        let vs = [0.3, 0.1, -0.4];
        let (a, _) = gae(&rs, &vs, &[false, true, false], 3.0, 0.0, 0.95).unwrap();
        for t in 0..3 {
            assert!((a[t] - (rs[t] - vs[t])).abs() < 1e-15);
        }
        assert!(gae(&[1.0], &[], &[true], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_oracle_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..=16);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let (g, l) = (rng.gen_range(0.5..1.0), rng.gen_range(0.0..=1.0));
            let (a, _) = gae(&r, &v, &d, b, g, l).unwrap();
            for (x, y) in a.iter().zip(brute_gae(&r, &v, &d, b, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalization_properties() {
        let x = normalize(&[1.0, 2.0, 3.0, 10.0]);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
        assert_eq!(normalize(&[5.0, 5.0]), vec![0.0, 0.0]);
    }

    fn vector_policy() -> Policy<f64> {
        Policy::new(PolicySpec::vector(PointReach::OBS_DIM), 1).unwrap()
    }

    #[test]
    fn collect_bookkeeping() {
        let p = vector_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut slots = vec![EnvSlot::new(PointReach::default(), 1).unwrap()];
        let b = collect(&mut slots, &p, 1, 0.99, &mut rng, false).unwrap();
        assert_eq!(b.len(), 1);

        let env = PointReach {
            horizon: 3,
            ..PointReach::default()
        };
        let mut slots: Vec<_> = (0..2).map(|i| EnvSlot::new(env.clone(), i).unwrap()).collect();
        let b = collect(&mut slots, &p, 7, 0.99, &mut rng, false).unwrap();
        assert_eq!(b.len(), 14);
        for e in 0..2 {
            let d = &b.dones[e * 7..(e + 1) * 7];
            for t in 0..7 {
                // the untrained policy barely moves, so every episode hits the horizon
                assert_eq!(d[t], t % 3 == 2, "env {e} t {t}");
            }
        }
        assert_eq!(b.episode_returns.len(), 4);
    }

    #[test]
    fn first_minibatch_is_on_policy() {
        let p = vector_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut slots: Vec<_> = (0..2).map(|i| EnvSlot::new(PointReach::default(), i).unwrap()).collect();
        let mut b = collect(&mut slots, &p, 16, 0.99, &mut rng, false).unwrap();
        b.compute_advantages(0.99, 0.95).unwrap();
        let adv = normalize(&b.advantages);
        let obs: Vec<&PolicyObs> = b.obs.iter().collect();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let h = PpoHypers::default();
        let l = minibatch_loss(&mut g, &p, &bound, &obs, &b.actions, &b.log_probs, &adv, &b.returns, &h)
            .unwrap();
        assert_eq!(l.report.clip_fraction, 0.0);
        assert!(l.report.policy_loss.abs() < 1e-9);
        assert!(l.report.approx_kl.abs() < 1e-12);
    }

    #[test]
    fn clipped_surrogate_formula() {
        // ρ = 1.5, ε = 0.2, A > 0 → min(1.5A, 1.2A) = 1.2A
        let mut g: Graph<f64> = Graph::new();
        let ratio = g.leaf(Tensor::from_f64(&[1], &[1.5]).unwrap());
        let adv = g.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let s1 = g.mul(ratio, adv).unwrap();
        let c = g.clamp(ratio, 0.8, 1.2);
        let s2 = g.mul(c, adv).unwrap();
        let m = g.minimum(s1, s2).unwrap();
        assert!((g.value(m).data()[0] - 2.4).abs() < 1e-15);
    }

    #[test]
    fn update_reports_sane_statistics() {
        let mut p: Policy<f64> = vector_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut slots: Vec<_> = (0..2).map(|i| EnvSlot::new(PointReach::default(), i).unwrap()).collect();
        let mut b = collect(&mut slots, &p, 32, 0.99, &mut rng, false).unwrap();
        b.compute_advantages(0.99, 0.95).unwrap();
        let h = PpoHypers {
            minibatches: 4,
            lr: 1e-2,
            ..PpoHypers::default()
        };
        let mut adam = Adam::new(AdamConfig::default(), &p.params);
        let r = update(&b, &mut p, &mut adam, &h, &mut rng, 1).unwrap();
        assert!((0.0..=1.0).contains(&r.clip_fraction));
        assert!(r.approx_kl.is_finite() && r.approx_kl >= -1e-12);
        assert_eq!(adam.state.step, 16);
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let mut p: Policy<f64> = vector_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut slots = vec![EnvSlot::new(PointReach::default(), 0).unwrap()];
        let mut b = collect(&mut slots, &p, 8, 0.99, &mut rng, false).unwrap();
        b.compute_advantages(0.99, 0.95).unwrap();
        b.returns[3] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default(), &p.params);
        let h = PpoHypers {
            minibatches: 1,
            ..PpoHypers::default()
        };
        let err = update(&b, &mut p, &mut adam, &h, &mut rng, 9).unwrap_err();
        assert!(matches!(err, PpoError::NonFinite { update: 9, .. }));
    }

    #[test]
    fn zero_budget_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            hypers: PpoHypers::default(),
            total_steps: 0,
            seed: 1,
            deterministic: true,
            out_dir: Some(dir.path().to_path_buf()),
            metadata: serde_json::Value::Null,
            verbose: false,
        };
        let out = train(vector_policy(), |_| PointReach::default(), |_| PointReach::default(), &cfg).unwrap();
        assert_eq!(out.updates, 0);
        assert!(out.metrics.is_empty());
        assert!(dir.path().join("init.ckpt").exists());
        assert!(!dir.path().join("best.ckpt").exists());
        assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap().len(), 0);
    }

    #[test]
    fn metrics_count_is_updates_plus_evals() {
        let dir = tempfile::tempdir().unwrap();
        let h = PpoHypers {
            rollout_len: 16,
            num_envs: 2,
            minibatches: 2,
            epochs: 1,
            eval_every: 2,
            eval_episodes: 3,
            ..PpoHypers::default()
        };
        let cfg = TrainConfig {
            hypers: h,
            total_steps: 5 * 32,
            seed: 2,
            deterministic: true,
            out_dir: Some(dir.path().to_path_buf()),
            metadata: serde_json::json!({"tag": "t"}),
            verbose: false,
        };
        let out = train(vector_policy(), |_| PointReach::default(), |_| PointReach::default(), &cfg).unwrap();
        let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        let evals = recs.iter().filter(|r| r.kind == "eval").count();
        // evals after updates 2, 4 and the final update 5
        assert_eq!((out.updates, evals), (5, 3));
        assert_eq!(recs.len(), out.updates + evals);
        assert_eq!(recs, out.metrics);
        assert!(dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn lambda_one_is_monte_carlo() {
        let r = [0.5, -1.0, 2.0, 1.0, 3.0];
        // dyadic inputs keep every intermediate exactly representable
        let v = [0.25, 0.5, 0.75, 1.0, 1.25];
        let d = [false, false, true, false, true];
        let g = 0.5;
        let (a, _) = gae(&r, &v, &d, 123.0, g, 1.0).unwrap();
        let mc = [0.5 + g * (-1.0 + g * 2.0), -1.0 + g * 2.0, 2.0, 1.0 + g * 3.0, 3.0];
        for t in 0..5 {
            assert_eq!(a[t], mc[t] - v[t], "t {t}");
        }
    }

    #[test]
    fn normalization_keeps_surrogate_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let loss = |rho: f64, a: f64| -(rho * a).min(rho.clamp(0.8, 1.2) * a);
        let argmin = |xs: &[f64], rho: f64| {
            (0..xs.len())
                .min_by(|&i, &j| loss(rho, xs[i]).partial_cmp(&loss(rho, xs[j])).unwrap())
                .unwrap()
        };
        for _ in 0..500 {
            let n = rng.gen_range(2..10);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let rho = rng.gen_range(0.1..3.0);
            assert_eq!(argmin(&a, rho), argmin(&normalize(&a), rho));
        }
    }

    #[test]
    fn four_transition_loss_matches_hand_computation() {
        let p = vector_policy();
        let obs: Vec<PolicyObs> = (0..4)
            .map(|i| PolicyObs {
                proprio: (0..6).map(|k| ((i * 6 + k) as f32 * 0.37).sin()).collect(),
                scene: None,
            })
            .collect();
        let refs: Vec<&PolicyObs> = obs.iter().collect();
        let actions = [
            Action::new([0.2, -0.1, 0.4], true),
            Action::new([-0.5, 0.3, 0.0], false),
            Action::new([1.3, 0.0, -0.2], true),
            Action::new([0.0, 0.0, 0.1], false),
        ];
        let old = [-3.1, -2.0, -6.5, -2.9];
        let adv = [1.0, -0.5, 2.0, -1.5];
        let ret = [0.3, -0.2, 1.1, 0.0];
        let h = PpoHypers::default();

        let (dists, values) = p.act(&refs).unwrap();
        let mut pl = 0.0;
        let mut vl = 0.0;
        let mut ent = 0.0;
        for i in 0..4 {
            let rho = (dists[i].log_prob(&actions[i]) - old[i]).exp();
            pl -= (rho * adv[i]).min(rho.clamp(1.0 - h.clip_eps, 1.0 + h.clip_eps) * adv[i]) / 4.0;
            vl += (values[i] - ret[i]).powi(2) / 4.0;
            ent += dists[i].entropy() / 4.0;
        }
        let expect = pl + h.value_coef * vl - h.entropy_coef * ent;

        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let l = minibatch_loss(&mut g, &p, &bound, &refs, &actions, &old, &adv, &ret, &h).unwrap();
        let got = g.value(l.total).data()[0];
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        assert!(l.report.clip_fraction > 0.0);
    }

    /// One-step contextual bandit: the context sign decides whether closing
    /// the gripper pays 1 or 0.
    #[derive(Clone, Default)]
    struct SignBandit {
        context: f32,
    }

    impl Env for SignBandit {
        fn reset(&mut self, seed: u64) -> std::result::Result<PolicyObs, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.context = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Ok(PolicyObs {
                proprio: vec![self.context],
                scene: None,
            })
        }

        fn step(&mut self, action: &Action) -> Transition {
            let success = action.close() == (self.context > 0.0);
            Transition {
                obs: PolicyObs {
                    proprio: vec![self.context],
                    scene: None,
                },
                reward: if success { 1.0 } else { 0.0 },
                terminated: true,
                truncated: false,
                success,
            }
        }
    }

    #[test]
    fn bandit_smoke_reaches_optimal_actions() {
        let h = PpoHypers {
            eval_episodes: 200,
            ..PpoHypers::default()
        };
        let cfg = TrainConfig {
            hypers: h,
            total_steps: 49_152,
            seed: 4,
            deterministic: true,
            out_dir: None,
            metadata: serde_json::Value::Null,
            verbose: false,
        };
        let policy: Policy<f32> = Policy::new(PolicySpec::vector(1), 4).unwrap();
        let out = train(policy, |_| SignBandit::default(), |_| SignBandit::default(), &cfg).unwrap();
        let mut envs = vec![SignBandit::default(); 8];
        let ev = evaluate_policy(&out.policy, &mut envs, 1000).unwrap();
        assert!(ev.success_rate >= 0.99, "{ev:?}");
    }

    #[test]
    fn deterministic_runs_repeat_exactly() {
        let h = PpoHypers {
            rollout_len: 64,
            num_envs: 4,
            minibatches: 4,
            eval_every: 3,
            eval_episodes: 8,
            ..PpoHypers::default()
        };
        let cfg = TrainConfig {
            hypers: h,
            total_steps: 10_240,
            seed: 9,
            deterministic: true,
            out_dir: None,
            metadata: serde_json::Value::Null,
            verbose: false,
        };
        let run = || {
            let p: Policy<f32> = Policy::new(PolicySpec::vector(PointReach::OBS_DIM), 9).unwrap();
            train(p, |_| PointReach::default(), |_| PointReach::default(), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |m: &[MetricsRecord]| m.iter().map(MetricsRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.policy.params, b.policy.params);
    }
}
