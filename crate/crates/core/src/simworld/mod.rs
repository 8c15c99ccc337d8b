//! Deterministic 2.5-D tabletop world: a point gripper, cubes and plates,
//! shaped rewards for Pick and Place, and dual-view rendering with
//! ground-truth instance IDs.
//!
//! Object positions are bottom-center points `(x, y, z)`; the gripper position
//! is its fingertip point. All objects collide as axis-aligned boxes (plates
//! use their bounding square) and are only ever pushed horizontally.

mod config;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disentangle::Registry;
use crate::imaging::{Frame, InstanceId};

pub use config::{
    add_distractors, ood_recolor, Geometry, ObjectKind, SceneConfig, Task, Variant,
    FIRST_OBJECT_ID, ROBOT_HAND, ROBOT_IDS, ROBOT_LEFT_FINGER, ROBOT_RIGHT_FINGER,
};
pub use render::{observe_frames, BASE_VOID, GRIPPER_GRAY, TABLE_GRAY};

pub type Vec3 = [f64; 3];

pub const PROPRIO_DIM: usize = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("could not place {0} objects without overlap after 1000 attempts")]
    Crowded(usize),
    #[error("place resets need a non-empty initial-state set")]
    MissingInitStates,
    #[error("initial state does not match the scene config: {0}")]
    InitStateMismatch(String),
    #[error("no eligible target: {0}")]
    NoTarget(String),
    #[error("palette: {0}")]
    Palette(String),
    #[error("harvested {got} of {want} states within {episodes} episodes")]
    HarvestTimeout {
        got: usize,
        want: usize,
        episodes: usize,
    },
    #[error("parse: {0}")]
    Parse(String),
}

/// Arm displacement command plus an open (−1) / close (+1) gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub arm: Vec3,
    pub gripper: f64,
}

impl Action {
    pub fn new(arm: Vec3, close: bool) -> Self {
        Action {
            arm,
            gripper: if close { 1.0 } else { -1.0 },
        }
    }

    /// Arm clamped to `[-1, 1]^3` and gripper snapped to `{-1, +1}`.
    pub fn clamped(&self) -> Action {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action {
            arm: [c(self.arm[0]), c(self.arm[1]), c(self.arm[2])],
            gripper: if self.gripper > 0.0 { 1.0 } else { -1.0 },
        }
    }

    pub fn close(&self) -> bool {
        self.gripper > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.arm[0], self.arm[1], self.arm[2], self.gripper]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub position: Vec3,
    pub closed: bool,
    pub attached: Option<InstanceId>,
    /// Attached object's position minus gripper position.
    pub attach_offset: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: InstanceId,
    pub kind: ObjectKind,
    pub position: Vec3,
    pub color: [f32; 3],
    pub initial_position: Vec3,
    pub distractor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub task: Task,
    pub gripper: GripperState,
    /// Sorted by ascending ID.
    pub objects: Vec<SceneObject>,
    /// Per-ID cumulative displacement.
    pub displacement_ledger: BTreeMap<InstanceId, f64>,
    pub step_count: usize,
    pub horizon: usize,
    pub target_id: InstanceId,
    /// The cube carried into a Place episode.
    pub carried_id: Option<InstanceId>,
    pub last_displacement: Vec3,
    pub prev_action: [f64; 4],
    /// Highest gripper height reached while holding the pick target.
    pub lift_mark: Option<f64>,
    pub grasp_rewarded: bool,
    pub terminated: bool,
    pub success: bool,
}

impl SceneState {
    pub fn object(&self, id: InstanceId) -> Option<&SceneObject> {
        self.objects
            .binary_search_by_key(&id, |o| o.id)
            .ok()
            .map(|i| &self.objects[i])
    }

    fn object_mut(&mut self, id: InstanceId) -> Option<&mut SceneObject> {
        self.objects
            .binary_search_by_key(&id, |o| o.id)
            .ok()
            .map(move |i| &mut self.objects[i])
    }

    pub fn registry(&self) -> Registry {
        Registry {
            robot_ids: ROBOT_IDS.into_iter().collect(),
            object_ids: self.objects.iter().map(|o| o.id).collect(),
        }
    }

    /// The object moved on purpose in this task (never penalised).
    pub fn manipulated_id(&self) -> InstanceId {
        match self.task {
            Task::Pick => self.target_id,
            Task::Place => self.carried_id.unwrap_or(self.target_id),
        }
    }

    pub fn ledger(&self, id: InstanceId) -> f64 {
        self.displacement_ledger.get(&id).copied().unwrap_or(0.0)
    }

    /// Sum of ledger entries over objects that must stay put.
    pub fn disturbance(&self) -> f64 {
        let keep = self.manipulated_id();
        self.displacement_ledger
            .iter()
            .filter(|(&id, _)| id != keep)
            .map(|(_, &d)| d)
            .sum()
    }

    pub fn max_disturbance(&self) -> f64 {
        let keep = self.manipulated_id();
        self.displacement_ledger
            .iter()
            .filter(|(&id, _)| id != keep)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub base: Frame,
    pub wrist: Frame,
    pub proprio: [f32; PROPRIO_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub reach: f64,
    pub grasp_bonus: f64,
    pub lift: f64,
    pub disturb_penalty: f64,
    pub success_bonus: f64,
    pub time_penalty: f64,
    pub total: f64,
}

pub const REACH_WEIGHT: f64 = 1.0;
pub const GRASP_BONUS: f64 = 0.5;
pub const LIFT_WEIGHT: f64 = 2.0;
pub const DISTURB_WEIGHT: f64 = 5.0;
pub const SUCCESS_BONUS: f64 = 10.0;
pub const TIME_PENALTY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub terminated: bool,
    /// Episode ended by the horizon rather than by success or failure.
    pub truncated: bool,
    pub success: bool,
}

/// One stored scene used to start a Place episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitState {
    pub gripper: GripperState,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InitStateSet {
    pub states: Vec<InitState>,
    #[serde(default)]
    pub source: serde_json::Value,
}

impl InitStateSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("init states serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Parse(e.to_string()))
    }
}

fn dist3(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist_xy(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Axis-aligned box: min and max corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    fn overlaps(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.lo[k] < o.hi[k] && o.lo[k] < self.hi[k])
    }

    /// Smallest horizontal translation of `other` that ends the overlap.
    fn separating_push(&self, other: &Aabb) -> Option<[f64; 2]> {
        if !self.overlaps(other) {
            return None;
        }
        let mut best: Option<[f64; 2]> = None;
        for k in 0..2 {
            let c_self = 0.5 * (self.lo[k] + self.hi[k]);
            let c_other = 0.5 * (other.lo[k] + other.hi[k]);
            let d = if c_other >= c_self {
                self.hi[k] - other.lo[k]
            } else {
                -(other.hi[k] - self.lo[k])
            };
            let mut v = [0.0; 2];
            v[k] = d;
            if best.is_none_or(|b| d.abs() < b[0].abs().max(b[1].abs())) {
                best = Some(v);
            }
        }
        best
    }
}

pub fn object_box(geom: &Geometry, o: &SceneObject) -> Aabb {
    let h = geom.half_extent(o.kind);
    let p = o.position;
    Aabb {
        lo: [p[0] - h, p[1] - h, p[2]],
        hi: [p[0] + h, p[1] + h, p[2] + geom.height(o.kind)],
    }
}

/// Collision boxes of the gripper fingers (empty while carrying: the carried
/// object then acts as the collider).
pub fn finger_boxes(geom: &Geometry, g: &GripperState) -> Vec<Aabb> {
    let [fx, fy] = geom.finger_half;
    let p = g.position;
    let span = |cx: f64| Aabb {
        lo: [cx - fx, p[1] - fy, p[2]],
        hi: [cx + fx, p[1] + fy, p[2] + geom.finger_length],
    };
    if g.attached.is_some() {
        return Vec::new();
    }
    if g.closed {
        // fingers meet in the middle
        let half = fx * 2.0;
        vec![Aabb {
            lo: [p[0] - half, p[1] - fy, p[2]],
            hi: [p[0] + half, p[1] + fy, p[2] + geom.finger_length],
        }]
    } else {
        let off = geom.finger_offset_open;
        vec![span(p[0] - off), span(p[0] + off)]
    }
}

pub fn finger_offset(geom: &Geometry, g: &GripperState) -> f64 {
    if g.closed {
        if g.attached.is_some() {
            geom.finger_offset_closed
        } else {
            geom.finger_half[0]
        }
    } else {
        geom.finger_offset_open
    }
}

fn clamp_xy(geom: &Geometry, o: &mut SceneObject) {
    let h = geom.half_extent(o.kind);
    for k in 0..2 {
        o.position[k] = o.position[k].clamp(h, 1.0 - h);
    }
}

/// Eligible targets for a task, given the carried cube (place only).
pub fn eligible_targets(
    config: &SceneConfig,
    task: Task,
    carried: Option<InstanceId>,
) -> Vec<InstanceId> {
    match task {
        Task::Pick => config.cube_ids().collect(),
        Task::Place => config
            .cube_ids()
            .chain(config.plate_ids())
            .filter(|&id| Some(id) != carried)
            .collect(),
    }
}

fn choose_target(
    config: &SceneConfig,
    task: Task,
    carried: Option<InstanceId>,
    rng: &mut ChaCha8Rng,
) -> Result<InstanceId, SimError> {
    let eligible = eligible_targets(config, task, carried);
    match config.variant {
        Variant::FixedTarget => {
            let pinned = config
                .pinned_target(task)
                .ok_or_else(|| SimError::NoTarget("no pinned target".into()))?;
            if !eligible.contains(&pinned) {
                return Err(SimError::NoTarget(format!(
                    "pinned target {pinned} is not eligible for {task}"
                )));
            }
            Ok(pinned)
        }
        Variant::VaryingTarget => eligible
            .choose(rng)
            .copied()
            .ok_or_else(|| SimError::NoTarget(format!("no eligible {task} target"))),
    }
}

fn spawn_positions(
    config: &SceneConfig,
    existing: &[Vec3],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec3>, SimError> {
    let g = &config.geometry;
    let (lo, hi) = (g.spawn_margin, 1.0 - g.spawn_margin);
    let mut placed: Vec<Vec3> = existing.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..1000 {
            let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), 0.0];
            if placed.iter().all(|q| dist_xy(p, *q) >= g.min_spacing) {
                ok = Some(p);
                break;
            }
        }
        let p = ok.ok_or(SimError::Crowded(config.total_objects()))?;
        placed.push(p);
        out.push(p);
    }
    Ok(out)
}

fn make_object(config: &SceneConfig, id: InstanceId, position: Vec3) -> SceneObject {
    SceneObject {
        id,
        kind: config.kind_of(id).expect("registered id"),
        position,
        color: config.color_of(id),
        initial_position: position,
        distractor: config.is_distractor(id),
    }
}

/// Starts an episode. Pick episodes sample a fresh layout; Place episodes
/// replay a stored Pick terminal state (placing any extra distractors freshly).
pub fn reset(
    config: &SceneConfig,
    seed: u64,
    task: Task,
    init_set: Option<&InitStateSet>,
) -> Result<(SceneState, Observation), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &config.geometry;
    let (gripper, objects, carried) = match task {
        Task::Pick => {
            let ids: Vec<InstanceId> = config.object_ids().collect();
            let positions = spawn_positions(config, &[], ids.len(), &mut rng)?;
            let objects = ids
                .iter()
                .zip(positions)
                .map(|(&id, p)| make_object(config, id, p))
                .collect();
            let gripper = GripperState {
                position: [
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                    g.gripper_start_z,
                ],
                closed: false,
                attached: None,
                attach_offset: [0.0; 3],
            };
            (gripper, objects, None)
        }
        Task::Place => {
            let set = init_set
                .filter(|s| !s.is_empty())
                .ok_or(SimError::MissingInitStates)?;
            let init = &set.states[rng.gen_range(0..set.len())];
            let mut objects: Vec<SceneObject> = Vec::with_capacity(config.total_objects());
            for id in config.object_ids() {
                match init.objects.iter().find(|o| o.id == id) {
                    Some(o) => {
                        let mut o = o.clone();
                        o.initial_position = o.position;
                        o.color = config.color_of(id);
                        objects.push(o);
                    }
                    None if config.is_distractor(id) => {}
                    None => {
                        return Err(SimError::InitStateMismatch(format!(
                            "object {id} missing from stored state"
                        )))
                    }
                }
            }
            let extra: Vec<InstanceId> = config
                .distractor_ids()
                .filter(|id| !objects.iter().any(|o| o.id == *id))
                .collect();
            let occupied: Vec<Vec3> = objects.iter().map(|o| o.position).collect();
            let positions = spawn_positions(config, &occupied, extra.len(), &mut rng)?;
            for (id, p) in extra.into_iter().zip(positions) {
                objects.push(make_object(config, id, p));
            }
            objects.sort_by_key(|o| o.id);
            let carried = init.gripper.attached;
            if carried.is_none() {
                return Err(SimError::InitStateMismatch(
                    "stored state has nothing attached".into(),
                ));
            }
            (init.gripper.clone(), objects, carried)
        }
    };
    let target_id = choose_target(config, task, carried, &mut rng)?;
    let displacement_ledger = objects.iter().map(|o| (o.id, 0.0)).collect();
    let state = SceneState {
        task,
        gripper,
        objects,
        displacement_ledger,
        step_count: 0,
        horizon: config.episode_horizon,
        target_id,
        carried_id: carried,
        last_displacement: [0.0; 3],
        prev_action: [0.0; 4],
        lift_mark: None,
        grasp_rewarded: false,
        terminated: false,
        success: false,
    };
    let obs = observe(&state, config);
    Ok((state, obs))
}

fn grasp_point(geom: &Geometry, o: &SceneObject) -> Vec3 {
    [
        o.position[0],
        o.position[1],
        o.position[2] + geom.height(o.kind) / 2.0,
    ]
}

fn top_point(geom: &Geometry, o: &SceneObject) -> Vec3 {
    [
        o.position[0],
        o.position[1],
        o.position[2] + geom.height(o.kind),
    ]
}

/// Distance the reach term shrinks: gripper to target (pick), or carried cube
/// bottom to the target's top face (place).
pub fn task_distance(state: &SceneState, geom: &Geometry) -> f64 {
    let Some(target) = state.object(state.target_id) else {
        return 0.0;
    };
    match state.task {
        Task::Pick => dist3(state.gripper.position, grasp_point(geom, target)),
        Task::Place => match state.carried_id.and_then(|c| state.object(c)) {
            Some(cube) => dist3(cube.position, top_point(geom, target)),
            None => 0.0,
        },
    }
}

pub fn pick_success(state: &SceneState, geom: &Geometry) -> bool {
    state.gripper.attached == Some(state.target_id)
        && state.gripper.position[2] >= geom.lift_height - 1e-9
        && state
            .displacement_ledger
            .iter()
            .all(|(&id, &d)| id == state.target_id || d <= geom.disturb_tol)
}

pub fn place_success(state: &SceneState, geom: &Geometry) -> bool {
    let (Some(cid), Some(target)) = (state.carried_id, state.object(state.target_id)) else {
        return false;
    };
    let Some(cube) = state.object(cid) else {
        return false;
    };
    state.gripper.attached != Some(cid)
        && dist_xy(cube.position, target.position) <= geom.place_xy_tol
        && (cube.position[2] - (target.position[2] + geom.height(target.kind))).abs() < 1e-9
        && state
            .displacement_ledger
            .iter()
            .all(|(&id, &d)| id == cid || d <= geom.disturb_tol)
}

pub fn is_success(state: &SceneState, geom: &Geometry) -> bool {
    match state.task {
        Task::Pick => pick_success(state, geom),
        Task::Place => place_success(state, geom),
    }
}

/// Shaped reward for the transition `prev -> next`.
pub fn reward(prev: &SceneState, next: &SceneState, geom: &Geometry) -> RewardBreakdown {
    let reach = REACH_WEIGHT * (task_distance(prev, geom) - task_distance(next, geom));
    let manipulated = next.manipulated_id();
    let newly_grasped = next.gripper.attached == Some(manipulated)
        && prev.gripper.attached != Some(manipulated)
        && !prev.grasp_rewarded;
    let grasp_bonus = if newly_grasped { GRASP_BONUS } else { 0.0 };
    let lift = match (next.task, prev.lift_mark, next.lift_mark) {
        (Task::Pick, Some(a), Some(b)) => LIFT_WEIGHT * (b - a).max(0.0),
        _ => 0.0,
    };
    let disturb_penalty = -DISTURB_WEIGHT * (next.disturbance() - prev.disturbance()).max(0.0);
    let success_bonus = if next.success && !prev.success {
        SUCCESS_BONUS
    } else {
        0.0
    };
    let time_penalty = -TIME_PENALTY;
    RewardBreakdown {
        reach,
        grasp_bonus,
        lift,
        disturb_penalty,
        success_bonus,
        time_penalty,
        total: reach + grasp_bonus + lift + disturb_penalty + success_bonus + time_penalty,
    }
}

fn add_ledger(state: &mut SceneState, id: InstanceId, amount: f64) {
    *state.displacement_ledger.entry(id).or_insert(0.0) += amount;
}

/// Highest support surface under a footprint, ignoring `skip`.
fn support_height(state: &SceneState, geom: &Geometry, skip: InstanceId, fp: &Aabb) -> f64 {
    state
        .objects
        .iter()
        .filter(|o| o.id != skip)
        .filter_map(|o| {
            let b = object_box(geom, o);
            let overlap = (0..2).all(|k| b.lo[k] < fp.hi[k] && fp.lo[k] < b.hi[k]);
            (overlap && b.hi[2] <= fp.lo[2] + 1e-9).then_some(b.hi[2])
        })
        .fold(0.0, f64::max)
}

/// Pushes every free object out of the given colliders, then lets displaced
/// objects push their neighbours (a few relaxation passes).
fn resolve_contacts(state: &mut SceneState, geom: &Geometry, colliders: &[(Option<InstanceId>, Aabb)]) {
    let mut moved: BTreeSet<InstanceId> = BTreeSet::new();
    let attached = state.gripper.attached;
    for (_, c) in colliders {
        for i in 0..state.objects.len() {
            if Some(state.objects[i].id) == attached {
                continue;
            }
            let b = object_box(geom, &state.objects[i]);
            if let Some(v) = c.separating_push(&b) {
                let o = &mut state.objects[i];
                let before = o.position;
                o.position[0] += v[0];
                o.position[1] += v[1];
                clamp_xy(geom, o);
                let d = dist_xy(before, o.position);
                let id = o.id;
                if d > 0.0 {
                    add_ledger(state, id, d);
                    moved.insert(id);
                }
            }
        }
    }
    for _ in 0..3 {
        if moved.is_empty() {
            break;
        }
        let pushers: Vec<InstanceId> = moved.iter().copied().collect();
        moved.clear();
        for pid in pushers {
            let Some(p) = state.object(pid).cloned() else {
                continue;
            };
            let pb = object_box(geom, &p);
            for i in 0..state.objects.len() {
                let id = state.objects[i].id;
                if id == pid || Some(id) == attached {
                    continue;
                }
                let b = object_box(geom, &state.objects[i]);
                if let Some(v) = pb.separating_push(&b) {
                    let o = &mut state.objects[i];
                    let before = o.position;
                    o.position[0] += v[0];
                    o.position[1] += v[1];
                    clamp_xy(geom, o);
                    let d = dist_xy(before, o.position);
                    if d > 0.0 {
                        add_ledger(state, id, d);
                        moved.insert(id);
                    }
                }
            }
        }
    }
}

/// Advances one control step. Terminated states are returned unchanged.
pub fn step(
    state: &SceneState,
    action: &Action,
    config: &SceneConfig,
) -> (SceneState, Observation, StepOutcome) {
    let (next, outcome) = step_state(state, action, &config.geometry);
    let obs = observe(&next, config);
    (next, obs, outcome)
}

/// [`step`] without rendering.
pub fn step_state(state: &SceneState, action: &Action, geom: &Geometry) -> (SceneState, StepOutcome) {
    if state.terminated {
        return (
            state.clone(),
            StepOutcome {
                reward: RewardBreakdown::default(),
                terminated: true,
                truncated: false,
                success: state.success,
            },
        );
    }
    let a = action.clamped();
    let mut next = state.clone();

    // arm motion
    let old = next.gripper.position;
    let mut pos = [
        old[0] + geom.step_size * a.arm[0],
        old[1] + geom.step_size * a.arm[1],
        old[2] + geom.step_size * a.arm[2],
    ];
    let z_floor = if next.gripper.attached.is_some() {
        (-next.gripper.attach_offset[2]).max(0.0)
    } else {
        0.0
    };
    pos[0] = pos[0].clamp(0.0, 1.0);
    pos[1] = pos[1].clamp(0.0, 1.0);
    pos[2] = pos[2].clamp(z_floor, geom.workspace_top);
    next.gripper.position = pos;
    if let Some(cid) = next.gripper.attached {
        let off = next.gripper.attach_offset;
        if let Some(o) = next.object_mut(cid) {
            let before = o.position;
            o.position = [pos[0] + off[0], pos[1] + off[1], pos[2] + off[2]];
            let d = dist3(before, o.position);
            add_ledger(&mut next, cid, d);
        }
    }

    // contacts from fingers or the carried object
    let mut colliders: Vec<(Option<InstanceId>, Aabb)> = finger_boxes(geom, &next.gripper)
        .into_iter()
        .map(|b| (None, b))
        .collect();
    if let Some(cid) = next.gripper.attached {
        if let Some(o) = next.object(cid) {
            colliders.push((Some(cid), object_box(geom, o)));
        }
    }
    resolve_contacts(&mut next, geom, &colliders);

    // gripper open/close
    if a.close() && !next.gripper.closed {
        next.gripper.closed = true;
        let gp = next.gripper.position;
        let candidate = next
            .objects
            .iter()
            .filter(|o| o.kind == ObjectKind::Cube)
            .filter(|o| {
                let top = o.position[2] + geom.height(o.kind);
                dist_xy(gp, o.position) <= geom.grasp_xy_tol
                    && gp[2] <= top + geom.grasp_z_tol
                    && gp[2] >= o.position[2]
            })
            .min_by(|x, y| {
                dist_xy(gp, x.position)
                    .partial_cmp(&dist_xy(gp, y.position))
                    .expect("finite")
            })
            .map(|o| (o.id, o.position));
        if let Some((id, p)) = candidate {
            next.gripper.attached = Some(id);
            next.gripper.attach_offset = [p[0] - gp[0], p[1] - gp[1], p[2] - gp[2]];
        }
    } else if !a.close() && next.gripper.closed {
        next.gripper.closed = false;
        if let Some(cid) = next.gripper.attached.take() {
            next.gripper.attach_offset = [0.0; 3];
            if let Some(o) = next.object(cid).cloned() {
                let fp = object_box(geom, &o);
                let z = support_height(&next, geom, cid, &fp);
                let before = o.position;
                let after = [before[0], before[1], z];
                if let Some(m) = next.object_mut(cid) {
                    m.position = after;
                }
                add_ledger(&mut next, cid, dist3(before, after));
            }
        }
    }

    // lift high-water mark for the pick target
    if next.task == Task::Pick && next.gripper.attached == Some(next.target_id) {
        let z = next.gripper.position[2].min(geom.lift_height);
        next.lift_mark = Some(next.lift_mark.map_or(z, |m| m.max(z)));
    } else {
        next.lift_mark = None;
    }

    next.step_count += 1;
    next.last_displacement = [pos[0] - old[0], pos[1] - old[1], pos[2] - old[2]];
    next.prev_action = a.to_array();
    next.success = is_success(&next, geom);
    let mut rb = reward(state, &next, geom);
    if rb.grasp_bonus > 0.0 {
        next.grasp_rewarded = true;
    }
    let failed = next.max_disturbance() > geom.disturb_limit;
    let truncated = !next.success && !failed && next.step_count >= next.horizon;
    next.terminated = next.success || failed || truncated;
    if !rb.total.is_finite() {
        rb.total = 0.0;
    }
    let outcome = StepOutcome {
        reward: rb,
        terminated: next.terminated,
        truncated,
        success: next.success,
    };
    (next, outcome)
}

/// Proprioception: gripper position, last displacement in units of the step
/// size, previous action, grasp flag.
pub fn proprio(state: &SceneState, geom: &Geometry) -> [f32; PROPRIO_DIM] {
    let g = &state.gripper;
    let d = state.last_displacement;
    let a = state.prev_action;
    let s = geom.step_size;
    [
        g.position[0] as f32,
        g.position[1] as f32,
        g.position[2] as f32,
        (d[0] / s) as f32,
        (d[1] / s) as f32,
        (d[2] / s) as f32,
        a[0] as f32,
        a[1] as f32,
        a[2] as f32,
        a[3] as f32,
        if g.attached.is_some() { 1.0 } else { 0.0 },
    ]
}

pub fn observe(state: &SceneState, config: &SceneConfig) -> Observation {
    let (base, wrist) = observe_frames(state, config);
    Observation {
        base,
        wrist,
        proprio: proprio(state, &config.geometry),
    }
}

/// Hand-written Pick controller: hover, descend, close, lift. Useful as a
/// reference policy and for harvesting Place start states without training.
pub fn scripted_pick_action(state: &SceneState, geom: &Geometry) -> Action {
    let g = &state.gripper;
    let Some(t) = state.object(state.target_id) else {
        return Action::new([0.0; 3], false);
    };
    let toward = |from: f64, to: f64| ((to - from) / geom.step_size).clamp(-1.0, 1.0);
    let p = g.position;
    if g.attached == Some(t.id) {
        return Action::new([0.0, 0.0, 1.0], true);
    }
    if g.attached.is_some() {
        return Action::new([0.0, 0.0, 1.0], false);
    }
    let dx = toward(p[0], t.position[0]);
    let dy = toward(p[1], t.position[1]);
    let xy_err = dist_xy(p, t.position);
    let grasp_z = t.position[2] + geom.height(t.kind) - 0.01;
    if xy_err > 0.01 {
        let safe = t.position[2] + geom.height(t.kind) + 0.08;
        let dz = if p[2] < safe { 1.0 } else { 0.0 };
        return Action::new([dx, dy, dz], false);
    }
    if p[2] > grasp_z + 1e-9 {
        return Action::new([dx, dy, toward(p[2], grasp_z)], false);
    }
    Action::new([0.0, 0.0, 0.0], true)
}

/// Hand-written Place controller for a state whose gripper holds the cube.
pub fn scripted_place_action(state: &SceneState, geom: &Geometry) -> Action {
    let g = &state.gripper;
    let Some(t) = state.object(state.target_id) else {
        return Action::new([0.0; 3], true);
    };
    let toward = |from: f64, to: f64| ((to - from) / geom.step_size).clamp(-1.0, 1.0);
    let p = g.position;
    if g.attached.is_none() {
        return Action::new([0.0, 0.0, 1.0], false);
    }
    let off = g.attach_offset;
    let cube_xy = [p[0] + off[0], p[1] + off[1], 0.0];
    let dx = toward(cube_xy[0], t.position[0]);
    let dy = toward(cube_xy[1], t.position[1]);
    if dist_xy(cube_xy, t.position) > 0.005 {
        return Action::new([dx, dy, 0.0], true);
    }
    let release_bottom = t.position[2] + geom.height(t.kind) + 0.005;
    let bottom = p[2] + off[2];
    if bottom > release_bottom + 0.02 {
        return Action::new([0.0, 0.0, toward(bottom, release_bottom)], true);
    }
    Action::new([0.0, 0.0, 0.0], false)
}

/// Runs pick episodes with `controller` and keeps successful terminal states
/// until `n` are stored or `max_episodes` have been tried.
pub fn harvest_pick_terminals(
    mut controller: impl FnMut(&SceneState, &Observation) -> Action,
    config: &SceneConfig,
    n: usize,
    seed: u64,
    max_episodes: usize,
) -> Result<InitStateSet, SimError> {
    let mut states = Vec::with_capacity(n);
    let mut episodes = 0;
    while states.len() < n && episodes < max_episodes {
        let ep_seed = seed.wrapping_mul(1_000_003).wrapping_add(episodes as u64);
        episodes += 1;
        let (mut s, mut obs) = reset(config, ep_seed, Task::Pick, None)?;
        while !s.terminated {
            let a = controller(&s, &obs);
            let (n2, o2, _) = step(&s, &a, config);
            s = n2;
            obs = o2;
        }
        if s.success && pick_success(&s, &config.geometry) {
            let objects = s
                .objects
                .iter()
                .filter(|o| !o.distractor)
                .cloned()
                .map(|mut o| {
                    o.initial_position = o.position;
                    o
                })
                .collect();
            states.push(InitState {
                gripper: s.gripper.clone(),
                objects,
            });
        }
    }
    if states.len() < n {
        return Err(SimError::HarvestTimeout {
            got: states.len(),
            want: n,
            episodes,
        });
    }
    Ok(InitStateSet {
        states,
        source: serde_json::json!({ "seed": seed, "episodes": episodes }),
    })
}
