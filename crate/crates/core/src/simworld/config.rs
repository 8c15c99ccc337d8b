use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::imaging::{InstanceId, Palette};

use super::SimError;

/// First object ID; robot links use the IDs below it.
pub const FIRST_OBJECT_ID: InstanceId = 10;
pub const ROBOT_HAND: InstanceId = 1;
pub const ROBOT_LEFT_FINGER: InstanceId = 2;
pub const ROBOT_RIGHT_FINGER: InstanceId = 3;
pub const ROBOT_IDS: [InstanceId; 3] = [ROBOT_HAND, ROBOT_LEFT_FINGER, ROBOT_RIGHT_FINGER];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pick,
    Place,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pick => "pick",
            Task::Place => "place",
        })
    }
}

impl FromStr for Task {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pick" => Ok(Task::Pick),
            "place" => Ok(Task::Place),
            other => Err(SimError::Parse(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FixedTarget,
    VaryingTarget,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::FixedTarget => "fixed",
            Variant::VaryingTarget => "varying",
        })
    }
}

impl FromStr for Variant {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" | "fixed_target" => Ok(Variant::FixedTarget),
            "varying" | "varying_target" => Ok(Variant::VaryingTarget),
            other => Err(SimError::Parse(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Cube,
    Plate,
}

/// Sizes, tolerances and rates of the tabletop world, in abstract length units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub cube_side: f64,
    pub plate_radius: f64,
    pub plate_height: f64,
    /// Gripper travel per unit of arm command.
    pub step_size: f64,
    pub grasp_xy_tol: f64,
    pub grasp_z_tol: f64,
    pub lift_height: f64,
    pub min_spacing: f64,
    pub spawn_margin: f64,
    pub workspace_top: f64,
    pub gripper_start_z: f64,
    pub wrist_fov: f64,
    /// Displacement of a non-target object that ends the episode.
    pub disturb_limit: f64,
    /// Displacement still tolerated by the success tests.
    pub disturb_tol: f64,
    pub place_xy_tol: f64,
    /// Half-extent of a finger along x and y, and its length along z.
    pub finger_half: [f64; 2],
    pub finger_length: f64,
    pub finger_offset_open: f64,
    pub finger_offset_closed: f64,
    /// Screen-space y shift per unit height in the base camera.
    pub base_obliqueness: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            cube_side: 0.06,
            plate_radius: 0.06,
            plate_height: 0.01,
            step_size: 0.03,
            grasp_xy_tol: 0.025,
            grasp_z_tol: 0.01,
            lift_height: 0.15,
            min_spacing: 0.12,
            spawn_margin: 0.1,
            workspace_top: 0.3,
            gripper_start_z: 0.2,
            wrist_fov: 0.25,
            disturb_limit: 0.05,
            disturb_tol: 0.01,
            place_xy_tol: 0.03,
            finger_half: [0.008, 0.012],
            finger_length: 0.1,
            finger_offset_open: 0.065,
            finger_offset_closed: 0.038,
            base_obliqueness: 0.5,
        }
    }
}

impl Geometry {
    pub fn half_extent(&self, kind: ObjectKind) -> f64 {
        match kind {
            ObjectKind::Cube => self.cube_side / 2.0,
            ObjectKind::Plate => self.plate_radius,
        }
    }

    pub fn height(&self, kind: ObjectKind) -> f64 {
        match kind {
            ObjectKind::Cube => self.cube_side,
            ObjectKind::Plate => self.plate_height,
        }
    }
}

/// Scene layout and episode settings. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_cubes: usize,
    pub n_plates: usize,
    pub palette: Palette,
    /// Colors the OOD recolor step switches to.
    pub held_out_palette: Palette,
    pub episode_horizon: usize,
    pub variant: Variant,
    pub distractor_count: usize,
    /// Pinned target for the fixed-target variant; defaults to the first cube
    /// (pick) or the first plate (place).
    pub fixed_target: Option<InstanceId>,
    pub resolution: usize,
    pub geometry: Geometry,
}

impl SceneConfig {
    pub fn new(n_cubes: usize, n_plates: usize, variant: Variant) -> Self {
        SceneConfig {
            n_cubes,
            n_plates,
            palette: Palette::training(),
            held_out_palette: Palette::held_out(),
            episode_horizon: 100,
            variant,
            distractor_count: 0,
            fixed_target: None,
            resolution: 64,
            geometry: Geometry::default(),
        }
    }

    /// Cube and plate counts, keyed by total object count (3, 5, 7, 9).
    pub fn object_counts(total: usize) -> Option<(usize, usize)> {
        match total {
            3 => Some((2, 1)),
            5 => Some((3, 2)),
            7 => Some((4, 3)),
            9 => Some((5, 4)),
            _ => None,
        }
    }

    pub fn with_resolution(mut self, r: usize) -> Self {
        self.resolution = r;
        self
    }

    pub fn task_objects(&self) -> usize {
        self.n_cubes + self.n_plates
    }

    pub fn total_objects(&self) -> usize {
        self.task_objects() + self.distractor_count
    }

    pub fn cube_ids(&self) -> impl Iterator<Item = InstanceId> {
        (0..self.n_cubes as u32).map(|i| FIRST_OBJECT_ID + i)
    }

    pub fn plate_ids(&self) -> impl Iterator<Item = InstanceId> {
        let first = FIRST_OBJECT_ID + self.n_cubes as u32;
        (0..self.n_plates as u32).map(move |i| first + i)
    }

    pub fn distractor_ids(&self) -> impl Iterator<Item = InstanceId> {
        let first = FIRST_OBJECT_ID + self.task_objects() as u32;
        (0..self.distractor_count as u32).map(move |i| first + i)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = InstanceId> {
        let n = self.total_objects() as u32;
        (0..n).map(|i| FIRST_OBJECT_ID + i)
    }

    pub fn max_object_id(&self) -> InstanceId {
        FIRST_OBJECT_ID + self.total_objects().max(1) as u32 - 1
    }

    pub fn kind_of(&self, id: InstanceId) -> Option<ObjectKind> {
        let idx = id.checked_sub(FIRST_OBJECT_ID)? as usize;
        if idx < self.n_cubes {
            Some(ObjectKind::Cube)
        } else if idx < self.task_objects() {
            Some(ObjectKind::Plate)
        } else if idx < self.total_objects() {
            // distractors are cubes
            Some(ObjectKind::Cube)
        } else {
            None
        }
    }

    pub fn is_distractor(&self, id: InstanceId) -> bool {
        let idx = id.saturating_sub(FIRST_OBJECT_ID) as usize;
        id >= FIRST_OBJECT_ID && idx >= self.task_objects() && idx < self.total_objects()
    }

    pub fn color_of(&self, id: InstanceId) -> [f32; 3] {
        self.palette
            .color(id.saturating_sub(FIRST_OBJECT_ID) as usize)
    }

    /// The pinned target for `task` under the fixed-target variant.
    pub fn pinned_target(&self, task: Task) -> Option<InstanceId> {
        self.fixed_target.or_else(|| match task {
            Task::Pick => self.cube_ids().next(),
            Task::Place => self.plate_ids().next(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Parse(e.to_string()))
    }
}

/// Swaps every object color to the held-out palette.
pub fn ood_recolor(config: &SceneConfig) -> Result<SceneConfig, SimError> {
    let held = &config.held_out_palette;
    if held.colors.is_empty() {
        return Err(SimError::Palette("held-out palette is empty".into()));
    }
    if !held.is_disjoint(&config.palette) {
        return Err(SimError::Palette(
            "held-out palette shares colors with the training palette".into(),
        ));
    }
    let mut out = config.clone();
    out.palette = held.clone();
    out.held_out_palette = config.palette.clone();
    Ok(out)
}

/// Appends `m` extra obstacle cubes that are never eligible targets.
pub fn add_distractors(config: &SceneConfig, m: usize) -> SceneConfig {
    let mut out = config.clone();
    out.distractor_count += m;
    out
}
