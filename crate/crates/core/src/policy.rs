//! Actor-critic network over the mixed action space.
//!
//! Each camera view has its own convolutional encoder, shared by every stack
//! (or slot) of that view. The per-stack codes of both views, the
//! proprioception and (for the baselines) a learned target-ID embedding are
//! concatenated into one fused vector that feeds two independent tanh trunks:
//! the actor (Gaussian arm mean, state-independent log-std, gripper logit)
//! and the critic (scalar value).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    conv2d_output_size, read_header, softplus, AutodiffError, Graph, ParamStore, Scalar, Tensor,
    Var,
};
use crate::disentangle::{repr_input, GroupError, ReprMode, Registry, ViewInput};
use crate::imaging::{Frame, InstanceId, View};
use crate::simworld::Action;

pub const ENCODER_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 256;
pub const ARM_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const INIT_LOG_STD: f64 = -0.5;

/// `(out_channels, kernel, stride)` of the three encoder convolutions.
pub const CONV_LAYERS: [(usize, usize, usize); 3] = [(16, 5, 2), (32, 3, 2), (32, 3, 2)];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Network shape. A spec without a representation is a proprioception-only
/// MLP policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub repr: Option<ReprMode>,
    pub resolution: usize,
    pub proprio_dim: usize,
    /// Rows of the ID-embedding table (largest instance ID + 1).
    pub id_vocab: usize,
}

impl PolicySpec {
    pub fn visual(mode: ReprMode, resolution: usize, proprio_dim: usize, max_id: InstanceId) -> Self {
        PolicySpec {
            repr: Some(mode),
            resolution,
            proprio_dim,
            id_vocab: if mode.id_embed_dim > 0 {
                max_id as usize + 1
            } else {
                0
            },
        }
    }

    pub fn vector(proprio_dim: usize) -> Self {
        PolicySpec {
            repr: None,
            resolution: 0,
            proprio_dim,
            id_vocab: 0,
        }
    }

    /// Spatial side after the three convolutions.
    pub fn encoder_side(&self) -> Option<usize> {
        CONV_LAYERS
            .iter()
            .try_fold(self.resolution, |s, &(_, k, st)| conv2d_output_size(s, k, st))
    }

    pub fn stacks_per_view(&self) -> usize {
        self.repr.map_or(0, |m| m.stacks_per_view())
    }

    pub fn id_embed_dim(&self) -> usize {
        self.repr.map_or(0, |m| m.id_embed_dim)
    }

    /// Width of the fused embedding the trunks consume.
    pub fn fused_dim(&self) -> usize {
        self.stacks_per_view() * ENCODER_DIM * 2 + self.proprio_dim + self.id_embed_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.repr.is_some() && self.encoder_side().is_none_or(|s| s == 0) {
            return Err(PolicyError::Input(format!(
                "resolution {} is too small for the encoder",
                self.resolution
            )));
        }
        if self.id_embed_dim() > 0 && self.id_vocab == 0 {
            return Err(PolicyError::Input("ID embedding needs a vocabulary".into()));
        }
        Ok(())
    }
}

/// Visual part of a policy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObs {
    pub base: Frame,
    pub wrist: Frame,
    pub registry: Registry,
    /// Objects the skill acts on (the DOCIR objects group).
    pub interest: BTreeSet<InstanceId>,
    /// Target fed to the baselines' ID embedding.
    pub target_id: InstanceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyObs {
    pub proprio: Vec<f32>,
    pub scene: Option<SceneObs>,
}

/// Per-sample action distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDist {
    pub arm_mean: [f64; ARM_DIM],
    /// Already clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub arm_log_std: [f64; ARM_DIM],
    pub gripper_logit: f64,
}

fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

impl ActionDist {
    /// Draws an action. The arm is returned unclamped; the environment clamps
    /// it, and log-probabilities refer to the unclamped value.
    pub fn sample(&self, rng: &mut impl Rng) -> Action {
        let mut arm = [0.0; ARM_DIM];
        for (k, a) in arm.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *a = self.arm_mean[k] + self.arm_log_std[k].exp() * z;
        }
        let p = 1.0 / (1.0 + (-self.gripper_logit).exp());
        let close = rng.gen::<f64>() < p;
        Action::new(arm, close)
    }

    /// Arm mean clamped to `[-1, 1]`, gripper by the sign of the logit.
    pub fn deterministic(&self) -> Action {
        let arm = self.arm_mean.map(|m| m.clamp(-1.0, 1.0));
        Action::new(arm, self.gripper_logit > 0.0)
    }

    pub fn log_prob(&self, action: &Action) -> f64 {
        let mut lp = 0.0;
        for k in 0..ARM_DIM {
            let ls = self.arm_log_std[k];
            let z = (action.arm[k] - self.arm_mean[k]) / ls.exp();
            lp += -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln();
        }
        let s = if action.close() { 1.0 } else { -1.0 };
        lp + log_sigmoid(s * self.gripper_logit)
    }

    pub fn entropy(&self) -> f64 {
        let gauss: f64 = self
            .arm_log_std
            .iter()
            .map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln()))
            .sum();
        let l = self.gripper_logit;
        let p = 1.0 / (1.0 + (-l).exp());
        let bern = softplus(l) - p * l;
        gauss + bern
    }
}

/// Graph nodes produced by one forward pass over a batch of `B` samples.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// `B×3`
    pub arm_mean: Var,
    /// `B×3`, clamped.
    pub arm_log_std: Var,
    /// `B×1`
    pub gripper_logit: Var,
    /// `B×1`
    pub value: Var,
    pub batch: usize,
}

/// Parameters bound into one graph, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    pub spec: PolicySpec,
    pub params: ParamStore<T>,
}

fn view_prefix(view: View) -> &'static str {
    match view {
        View::Base => "encoder.base",
        View::Wrist => "encoder.wrist",
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let d = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| d.sample(&mut self.rng)).collect();
        Tensor::from_f64(shape, &data).expect("shape matches data")
    }

    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| d.sample(&mut self.rng)).collect();
        Tensor::from_f64(shape, &data).expect("shape matches data")
    }
}

fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(format!("{name}.weight"), init.uniform(&[fan_out, fan_in], bound))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

impl<T: Scalar> Policy<T> {
    /// Freshly initialised network; identical seeds give identical weights.
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        if let (Some(mode), Some(side)) = (spec.repr, spec.encoder_side()) {
            for view in [View::Base, View::Wrist] {
                let prefix = view_prefix(view);
                let mut c_in = mode.channels();
                for (i, &(c_out, k, _)) in CONV_LAYERS.iter().enumerate() {
                    let fan_in = c_in * k * k;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    store.insert(
                        format!("{prefix}.conv{}.weight", i + 1),
                        init.uniform(&[c_out, c_in, k, k], bound),
                    )?;
                    store.insert(format!("{prefix}.conv{}.bias", i + 1), Tensor::zeros(&[c_out]))?;
                    c_in = c_out;
                }
                let flat = c_in * side * side;
                add_linear(&mut store, &mut init, &format!("{prefix}.proj"), flat, ENCODER_DIM, 1.0)?;
            }
            if mode.id_embed_dim > 0 {
                store.insert(
                    "id_embedding",
                    init.normal(&[spec.id_vocab, mode.id_embed_dim], 1.0),
                )?;
            }
        }
        let fused = spec.fused_dim();
        for trunk in ["actor", "critic"] {
            add_linear(&mut store, &mut init, &format!("{trunk}.fc1"), fused, HIDDEN_DIM, 1.0)?;
            add_linear(&mut store, &mut init, &format!("{trunk}.fc2"), HIDDEN_DIM, HIDDEN_DIM, 1.0)?;
        }
        add_linear(&mut store, &mut init, "actor.arm_mean", HIDDEN_DIM, ARM_DIM, 0.01)?;
        add_linear(&mut store, &mut init, "actor.gripper", HIDDEN_DIM, 1, 0.01)?;
        store.insert(
            "actor.arm_log_std",
            Tensor::filled(&[ARM_DIM], T::lit(INIT_LOG_STD)),
        )?;
        add_linear(&mut store, &mut init, "critic.value", HIDDEN_DIM, 1, 1.0)?;
        Ok(Policy {
            spec,
            params: store,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Puts every parameter into `g`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn var(&self, b: &Bound, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| b.vars[i])
            .ok_or_else(|| PolicyError::Input(format!("missing parameter `{name}`")))
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let w = self.var(b, &format!("{name}.weight"))?;
        let bias = self.var(b, &format!("{name}.bias"))?;
        Ok(g.affine(x, w, bias)?)
    }

    /// Encodes the stacks of one view for every sample: `B × (S·128)`, with
    /// the per-stack codes in stack order.
    pub fn encode_view(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        view: View,
        inputs: &[&ViewInput],
    ) -> Result<Var> {
        let mode = self
            .spec
            .repr
            .ok_or_else(|| PolicyError::Input("policy has no visual encoder".into()))?;
        let (s, c, r) = (mode.stacks_per_view(), mode.channels(), self.spec.resolution);
        let per = c * r * r;
        let mut data = Vec::with_capacity(inputs.len() * s * per);
        for vi in inputs {
            if vi.stacks != s || vi.channels != c || vi.h != r || vi.w != r {
                return Err(PolicyError::Input(format!(
                    "expected {s} stacks of {c}x{r}x{r}, got {} of {}x{}x{}",
                    vi.stacks, vi.channels, vi.h, vi.w
                )));
            }
            data.extend(vi.data.iter().map(|&x| T::from_f32(x).expect("finite pixel")));
        }
        let x = g.constant(Tensor::new(vec![inputs.len() * s, c, r, r], data)?);
        let prefix = view_prefix(view);
        let mut h = x;
        for (i, &(_, _, stride)) in CONV_LAYERS.iter().enumerate() {
            let k = self.var(b, &format!("{prefix}.conv{}.weight", i + 1))?;
            let bias = self.var(b, &format!("{prefix}.conv{}.bias", i + 1))?;
            h = g.conv2d(h, k, Some(bias), stride)?;
            h = g.relu(h);
        }
        let flat = g.flatten(h)?;
        let code = self.linear(g, b, flat, &format!("{prefix}.proj"))?;
        Ok(g.reshape(code, &[inputs.len(), s * ENCODER_DIM])?)
    }

    /// Fused embedding for a batch of observations.
    pub fn embed(&self, g: &mut Graph<T>, b: &Bound, batch: &[&PolicyObs]) -> Result<Var> {
        let n = batch.len();
        if n == 0 {
            return Err(PolicyError::Input("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(4);
        if let Some(mode) = self.spec.repr {
            let mut reprs = Vec::with_capacity(n);
            for o in batch {
                let sc = o
                    .scene
                    .as_ref()
                    .ok_or_else(|| PolicyError::Input("visual policy needs scene frames".into()))?;
                reprs.push(repr_input(
                    &mode,
                    &sc.base,
                    &sc.wrist,
                    &sc.registry,
                    &sc.interest,
                    sc.target_id,
                )?);
            }
            let base: Vec<&ViewInput> = reprs.iter().map(|r| &r.base).collect();
            parts.push(self.encode_view(g, b, View::Base, &base)?);
            let wrist: Vec<&ViewInput> = reprs.iter().map(|r| &r.wrist).collect();
            parts.push(self.encode_view(g, b, View::Wrist, &wrist)?);
            if mode.id_embed_dim > 0 {
                let rows: Vec<usize> = reprs.iter().map(|r| r.target_id as usize).collect();
                if let Some(&bad) = rows.iter().find(|&&r| r >= self.spec.id_vocab) {
                    return Err(PolicyError::Input(format!(
                        "target id {bad} outside the embedding table"
                    )));
                }
                let table = self.var(b, "id_embedding")?;
                parts.insert(0, g.gather(table, &rows)?);
            }
        }
        let pd = self.spec.proprio_dim;
        let mut prop = Vec::with_capacity(n * pd);
        for o in batch {
            if o.proprio.len() != pd {
                return Err(PolicyError::Input(format!(
                    "proprio has {} entries, expected {pd}",
                    o.proprio.len()
                )));
            }
            prop.extend(o.proprio.iter().map(|&x| T::from_f32(x).expect("finite")));
        }
        let p = g.constant(Tensor::new(vec![n, pd], prop)?);
        // order: base codes, wrist codes, proprio, ID embedding
        let ordered: Vec<Var> = if self.spec.id_embed_dim() > 0 {
            vec![parts[1], parts[2], p, parts[0]]
        } else {
            parts.into_iter().chain(std::iter::once(p)).collect()
        };
        Ok(g.concat(&ordered)?)
    }

    /// Actor and critic heads on the same fused embedding.
    pub fn heads(&self, g: &mut Graph<T>, b: &Bound, fused: Var) -> Result<Heads> {
        let n = g.shape(fused)[0];
        let trunk = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let h = self.linear(g, b, fused, &format!("{name}.fc1"))?;
            let h = g.tanh(h);
            let h = self.linear(g, b, h, &format!("{name}.fc2"))?;
            Ok(g.tanh(h))
        };
        let actor = trunk(g, "actor")?;
        let critic = trunk(g, "critic")?;
        let arm_mean = self.linear(g, b, actor, "actor.arm_mean")?;
        let gripper_logit = self.linear(g, b, actor, "actor.gripper")?;
        let ls = self.var(b, "actor.arm_log_std")?;
        let ls = g.clamp(ls, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
        let arm_log_std = g.repeat_rows(ls, n);
        let value = self.linear(g, b, critic, "critic.value")?;
        Ok(Heads {
            arm_mean,
            arm_log_std,
            gripper_logit,
            value,
            batch: n,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, batch: &[&PolicyObs]) -> Result<Heads> {
        let fused = self.embed(g, b, batch)?;
        self.heads(g, b, fused)
    }

    /// Inference: distributions and values for a batch.
    pub fn act(&self, batch: &[&PolicyObs]) -> Result<(Vec<ActionDist>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let h = self.forward(&mut g, &b, batch)?;
        Ok((dists(&g, &h), values(&g, &h)))
    }

    /// Writes the checkpoint and a `.json` manifest beside it.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "spec": self.spec, "run": metadata });
        self.params.save(path, meta.clone())?;
        let manifest = serde_json::json!({
            "checkpoint": path.file_name().map(|f| f.to_string_lossy().to_string()),
            "dtype": T::DTYPE,
            "num_params": self.num_params(),
            "spec": self.spec,
            "run": meta["run"],
        });
        std::fs::write(
            manifest_path(path),
            serde_json::to_string_pretty(&manifest).expect("json"),
        )
        .map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }

    /// Loads a checkpoint of either precision, converting to `T`.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = std::fs::read(path)
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        let header = read_header(&bytes)?;
        let params: ParamStore<T> = match header.dtype.as_str() {
            "f32" => ParamStore::<f32>::from_bytes(&bytes)?.0.cast(),
            "f64" => ParamStore::<f64>::from_bytes(&bytes)?.0.cast(),
            other => return Err(PolicyError::Checkpoint(format!("unknown dtype {other}"))),
        };
        let spec: PolicySpec = serde_json::from_value(header.metadata["spec"].clone())
            .map_err(|e| PolicyError::Checkpoint(format!("spec: {e}")))?;
        let fresh = Policy::<T>::new(spec.clone(), 0)?;
        let same_layout = fresh.params.names() == params.names()
            && fresh
                .params
                .iter()
                .zip(params.iter())
                .all(|((_, a), (_, b))| a.shape() == b.shape());
        if !same_layout {
            return Err(PolicyError::Checkpoint(
                "parameter layout does not match the recorded spec".into(),
            ));
        }
        Ok((Policy { spec, params }, header.metadata["run"].clone()))
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Reads per-sample distributions out of evaluated heads.
pub fn dists<T: Scalar>(g: &Graph<T>, h: &Heads) -> Vec<ActionDist> {
    let mean = g.value(h.arm_mean).data();
    let ls = g.value(h.arm_log_std).data();
    let logit = g.value(h.gripper_logit).data();
    (0..h.batch)
        .map(|i| ActionDist {
            arm_mean: std::array::from_fn(|k| to_f64(mean[i * ARM_DIM + k])),
            arm_log_std: std::array::from_fn(|k| to_f64(ls[i * ARM_DIM + k])),
            gripper_logit: to_f64(logit[i]),
        })
        .collect()
}

pub fn values<T: Scalar>(g: &Graph<T>, h: &Heads) -> Vec<f64> {
    g.value(h.value).data().iter().map(|&v| to_f64(v)).collect()
}

/// Per-sample log-probability (shape `B`) of the given unclamped actions.
pub fn log_prob_graph<T: Scalar>(g: &mut Graph<T>, h: &Heads, actions: &[Action]) -> Result<Var> {
    let n = h.batch;
    if actions.len() != n {
        return Err(PolicyError::Input(format!(
            "{} actions for a batch of {n}",
            actions.len()
        )));
    }
    let arm: Vec<f64> = actions.iter().flat_map(|a| a.arm).collect();
    let a = g.constant(Tensor::from_f64(&[n, ARM_DIM], &arm)?);
    let diff = g.sub(a, h.arm_mean)?;
    let neg_ls = g.scale(h.arm_log_std, T::lit(-1.0));
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let quad = g.scale(z2, T::lit(-0.5));
    let per = g.add(quad, neg_ls)?;
    let per = g.add_scalar(per, T::lit(-0.5 * (2.0 * PI).ln()));
    let gauss = g.row_sum(per)?;
    let signs: Vec<f64> = actions
        .iter()
        .map(|a| if a.close() { -1.0 } else { 1.0 })
        .collect();
    // log σ(s·l) = −softplus(−s·l)
    let s = g.constant(Tensor::from_f64(&[n, 1], &signs)?);
    let sl = g.mul(h.gripper_logit, s)?;
    let sp = g.softplus(sl);
    let bern = g.scale(sp, T::lit(-1.0));
    let bern = g.reshape(bern, &[n])?;
    Ok(g.add(gauss, bern)?)
}

/// Per-sample entropy (shape `B`).
pub fn entropy_graph<T: Scalar>(g: &mut Graph<T>, h: &Heads) -> Result<Var> {
    let n = h.batch;
    let gauss = g.row_sum(h.arm_log_std)?;
    let gauss = g.add_scalar(gauss, T::lit(ARM_DIM as f64 * 0.5 * (1.0 + (2.0 * PI).ln())));
    // softplus(l) − σ(l)·l
    let sp = g.softplus(h.gripper_logit);
    let p = g.sigmoid(h.gripper_logit);
    let pl = g.mul(p, h.gripper_logit)?;
    let bern = g.sub(sp, pl)?;
    let bern = g.reshape(bern, &[n])?;
    Ok(g.add(gauss, bern)?)
}

/// Value head as a `B` vector.
pub fn value_graph<T: Scalar>(g: &mut Graph<T>, h: &Heads) -> Result<Var> {
    Ok(g.reshape(h.value, &[h.batch])?)
}
