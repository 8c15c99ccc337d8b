//! C interface to the tabletop world, its mask-based observations and
//! trained policies.
//!
//! Every function returns a [`DlStatus`]. On failure a message is kept per
//! thread and can be copied out with [`dl_last_error`]. Handles are opaque
//! and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use docir_lab::disentangle::{docir_stacks, make_group_spec};
use docir_lab::harness::{self, interest_set, policy_obs};
use docir_lab::imaging::Frame;
use docir_lab::policy::Policy;
use docir_lab::simworld::{self, Action, Observation, SceneConfig, SceneState, Task, Variant, PROPRIO_DIM};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The buffer passed in is smaller than the data to write.
    BufferTooSmall = 3,
    /// `step` or an observation query before `reset`.
    NotReset = 4,
    Simulation = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlTask {
    Pick = 0,
    Place = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlVariant {
    Fixed = 0,
    Varying = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlView {
    Base = 0,
    Wrist = 1,
}

/// Outcome of one control step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DlStep {
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub success: bool,
}

/// Simulated scene plus its current state.
pub struct DlEnv {
    config: SceneConfig,
    task: Task,
    init_set: Option<simworld::InitStateSet>,
    current: Option<(SceneState, Observation)>,
}

/// A trained policy loaded from a checkpoint.
pub struct DlPolicy {
    policy: Policy<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: DlStatus, msg: impl Into<String>) -> DlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> DlStatus) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DlStatus::Panic, msg)
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, DlStatus> {
    if p.is_null() {
        return Err(fail(DlStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DlStatus::InvalidArgument, "string is not UTF-8"))
}

macro_rules! deref {
    ($p:expr) => {
        match $p.as_mut() {
            Some(v) => v,
            None => return fail(DlStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn dl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn dl_proprio_dim() -> usize {
    PROPRIO_DIM
}

fn new_env(config: SceneConfig, task: DlTask, out: *mut *mut DlEnv) -> DlStatus {
    let task = match task {
        DlTask::Pick => Task::Pick,
        DlTask::Place => Task::Place,
    };
    let env = Box::new(DlEnv {
        config,
        task,
        init_set: None,
        current: None,
    });
    // SAFETY: callers check `out` for null first
    unsafe { *out = Box::into_raw(env) };
    DlStatus::Ok
}

/// Creates an environment with the default geometry. `objects` is the total
/// object count (3, 5, 7 or 9).
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn dl_env_new(
    objects: usize,
    variant: DlVariant,
    task: DlTask,
    resolution: usize,
    out: *mut *mut DlEnv,
) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullPointer, "out is null");
        }
        let Some((c, p)) = SceneConfig::object_counts(objects) else {
            return fail(DlStatus::InvalidArgument, format!("unsupported object count {objects}"));
        };
        if resolution < 8 {
            return fail(DlStatus::InvalidArgument, "resolution must be at least 8");
        }
        let v = match variant {
            DlVariant::Fixed => Variant::FixedTarget,
            DlVariant::Varying => Variant::VaryingTarget,
        };
        new_env(SceneConfig::new(c, p, v).with_resolution(resolution), task, out)
    })
}

/// Creates an environment from a JSON scene configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dl_env_from_json(json: *const c_char, task: DlTask, out: *mut *mut DlEnv) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullPointer, "out is null");
        }
        let text = tri!(c_str(json));
        match SceneConfig::from_json(text) {
            Ok(cfg) => new_env(cfg, task, out),
            Err(e) => fail(DlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Loads the initial-state set Place resets draw from.
///
/// # Safety
/// `env` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dl_env_load_init_states(env: *mut DlEnv, path: *const c_char) -> DlStatus {
    guard(|| {
        let env = deref!(env);
        let path = tri!(c_str(path));
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(DlStatus::Io, format!("{path}: {e}")),
        };
        match simworld::InitStateSet::from_json(&text) {
            Ok(s) => {
                env.init_set = Some(s);
                DlStatus::Ok
            }
            Err(e) => fail(DlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases an environment. Null is ignored.
///
/// # Safety
/// `env` must come from `dl_env_new`/`dl_env_from_json` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dl_env_free(env: *mut DlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts an episode.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_env_reset(env: *mut DlEnv, seed: u64) -> DlStatus {
    guard(|| {
        let env = deref!(env);
        match simworld::reset(&env.config, seed, env.task, env.init_set.as_ref()) {
            Ok(s) => {
                env.current = Some(s);
                DlStatus::Ok
            }
            Err(e) => fail(DlStatus::Simulation, e.to_string()),
        }
    })
}

/// Applies `action = [dx, dy, dz, gripper]` (arm components are clamped to
/// [-1, 1]; gripper > 0 closes).
///
/// # Safety
/// `env` must be live, `action` must point to 4 doubles, `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn dl_env_step(env: *mut DlEnv, action: *const f64, out: *mut DlStep) -> DlStatus {
    guard(|| {
        let env = deref!(env);
        if action.is_null() {
            return fail(DlStatus::NullPointer, "action is null");
        }
        let a = std::slice::from_raw_parts(action, 4);
        if a.iter().any(|v| !v.is_finite()) {
            return fail(DlStatus::InvalidArgument, "action has non-finite entries");
        }
        let Some((state, _)) = &env.current else {
            return fail(DlStatus::NotReset, "step before reset");
        };
        let act = Action::new([a[0], a[1], a[2]], a[3] > 0.0).clamped();
        let (next, obs, o) = simworld::step(state, &act, &env.config);
        env.current = Some((next, obs));
        if let Some(out) = out.as_mut() {
            *out = DlStep {
                reward: o.reward.total,
                terminated: o.terminated,
                truncated: o.truncated,
                success: o.success,
            };
        }
        DlStatus::Ok
    })
}

/// Side length of the square renders.
///
/// # Safety
/// `env` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dl_env_resolution(env: *const DlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.config.resolution)
}

fn frame(env: &DlEnv, view: DlView) -> Result<&Frame, DlStatus> {
    let (_, obs) = env
        .current
        .as_ref()
        .ok_or_else(|| fail(DlStatus::NotReset, "observation before reset"))?;
    Ok(match view {
        DlView::Base => &obs.base,
        DlView::Wrist => &obs.wrist,
    })
}

fn check_len(have: usize, need: usize) -> Result<(), DlStatus> {
    if have < need {
        Err(fail(DlStatus::BufferTooSmall, format!("buffer holds {have}, need {need}")))
    } else {
        Ok(())
    }
}

/// Copies the view's RGB (row-major `H×W×3`, values in [0, 1]) and/or its
/// instance IDs (`H×W`). Either output may be null.
///
/// # Safety
/// Non-null outputs must hold `rgb_len` floats / `ids_len` integers.
#[no_mangle]
pub unsafe extern "C" fn dl_env_render(
    env: *const DlEnv,
    view: DlView,
    rgb: *mut f32,
    rgb_len: usize,
    ids: *mut u32,
    ids_len: usize,
) -> DlStatus {
    guard(|| {
        let Some(env) = env.as_ref() else {
            return fail(DlStatus::NullPointer, "env is null");
        };
        let f = tri!(frame(env, view));
        if !rgb.is_null() {
            tri!(check_len(rgb_len, f.rgb.data.len()));
            std::ptr::copy_nonoverlapping(f.rgb.data.as_ptr(), rgb, f.rgb.data.len());
        }
        if !ids.is_null() {
            tri!(check_len(ids_len, f.ids.ids.len()));
            std::ptr::copy_nonoverlapping(f.ids.ids.as_ptr(), ids, f.ids.ids.len());
        }
        DlStatus::Ok
    })
}

/// Copies the proprioceptive vector (`dl_proprio_dim()` floats).
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dl_env_proprio(env: *const DlEnv, out: *mut f32, len: usize) -> DlStatus {
    guard(|| {
        let Some(env) = env.as_ref() else {
            return fail(DlStatus::NullPointer, "env is null");
        };
        if out.is_null() {
            return fail(DlStatus::NullPointer, "out is null");
        }
        let Some((_, obs)) = &env.current else {
            return fail(DlStatus::NotReset, "observation before reset");
        };
        tri!(check_len(len, PROPRIO_DIM));
        std::ptr::copy_nonoverlapping(obs.proprio.as_ptr(), out, PROPRIO_DIM);
        DlStatus::Ok
    })
}

/// Writes the three DOCIR group masks (robot, objects of interest,
/// obstacles) of a view as `3×H×W` bytes of 0/1.
///
/// # Safety
/// `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dl_env_docir_masks(env: *const DlEnv, view: DlView, out: *mut u8, len: usize) -> DlStatus {
    guard(|| {
        let Some(env) = env.as_ref() else {
            return fail(DlStatus::NullPointer, "env is null");
        };
        if out.is_null() {
            return fail(DlStatus::NullPointer, "out is null");
        }
        let f = tri!(frame(env, view));
        let state = &env.current.as_ref().expect("frame implies state").0;
        let spec = match make_group_spec(&state.registry(), &interest_set(state)) {
            Ok(s) => s,
            Err(e) => return fail(DlStatus::Simulation, e.to_string()),
        };
        let stacks = match docir_stacks(f, &spec) {
            Ok(s) => s,
            Err(e) => return fail(DlStatus::Simulation, e.to_string()),
        };
        let n = f.height() * f.width();
        tri!(check_len(len, 3 * n));
        for (k, s) in stacks.iter().enumerate() {
            std::ptr::copy_nonoverlapping(s.mask().bits.as_ptr(), out.add(k * n), n);
        }
        DlStatus::Ok
    })
}

/// Loads a checkpoint written by the training CLI.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dl_policy_load(path: *const c_char, out: *mut *mut DlPolicy) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullPointer, "out is null");
        }
        let path = tri!(c_str(path));
        match harness::load_run(Path::new(path)) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(DlPolicy { policy: r.policy }));
                DlStatus::Ok
            }
            Err(e) => fail(DlStatus::Checkpoint, format!("{e:#}")),
        }
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `policy` must come from `dl_policy_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dl_policy_free(policy: *mut DlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Deterministic action for the environment's current observation, written
/// as `[dx, dy, dz, gripper]` with gripper ±1.
///
/// # Safety
/// Handles must be live; `action` must hold 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn dl_policy_act(policy: *const DlPolicy, env: *const DlEnv, action: *mut f64) -> DlStatus {
    guard(|| {
        let (Some(p), Some(env)) = (policy.as_ref(), env.as_ref()) else {
            return fail(DlStatus::NullPointer, "null handle");
        };
        if action.is_null() {
            return fail(DlStatus::NullPointer, "action is null");
        }
        let Some((state, obs)) = &env.current else {
            return fail(DlStatus::NotReset, "act before reset");
        };
        match p.policy.act(&[&policy_obs(state, obs)]) {
            Ok((d, _)) => {
                let a = d[0].deterministic().to_array();
                std::ptr::copy_nonoverlapping(a.as_ptr(), action, 4);
                DlStatus::Ok
            }
            Err(e) => fail(DlStatus::InvalidArgument, e.to_string()),
        }
    })
}
