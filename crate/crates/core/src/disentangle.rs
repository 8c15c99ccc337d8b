//! Semantic grouping of instance IDs into robot / objects-of-interest /
//! obstacles, and the per-view inputs each representation consumes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    apply_mask, binary_mask, Frame, ImagingError, InstanceId, MaskedStack, RgbRaster, BACKGROUND,
    WHITE,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("target id {0} is not a registered object")]
    UnknownTarget(InstanceId),
    #[error("target id {0} belongs to the robot")]
    TargetIsRobot(InstanceId),
    #[error("no object of interest given")]
    EmptyTarget,
    #[error("{objects} objects do not fit in {slots} slots (one is reserved for the robot)")]
    SlotOverflow { objects: usize, slots: usize },
    #[error("groups are not a partition of the registry")]
    NotAPartition,
    #[error("unknown representation `{0}`")]
    UnknownRepr(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// The instance IDs registered in a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub robot_ids: BTreeSet<InstanceId>,
    pub object_ids: BTreeSet<InstanceId>,
}

impl Registry {
    pub fn all(&self) -> BTreeSet<InstanceId> {
        self.robot_ids.union(&self.object_ids).copied().collect()
    }

    pub fn max_id(&self) -> InstanceId {
        self.all().into_iter().max().unwrap_or(BACKGROUND)
    }
}

/// Partition of the registered IDs for one skill invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub robot_ids: BTreeSet<InstanceId>,
    pub object_ids: BTreeSet<InstanceId>,
    pub obstacle_ids: BTreeSet<InstanceId>,
}

impl GroupSpec {
    /// Checks pairwise disjointness and that the union is the registry.
    pub fn validate(&self, registry: &Registry) -> Result<(), GroupError> {
        let disjoint = self.robot_ids.is_disjoint(&self.object_ids)
            && self.robot_ids.is_disjoint(&self.obstacle_ids)
            && self.object_ids.is_disjoint(&self.obstacle_ids);
        let mut union = self.robot_ids.clone();
        union.extend(&self.object_ids);
        union.extend(&self.obstacle_ids);
        if !disjoint || union != registry.all() || union.contains(&BACKGROUND) {
            return Err(GroupError::NotAPartition);
        }
        Ok(())
    }
}

pub fn make_group_spec(
    registry: &Registry,
    target_ids: &BTreeSet<InstanceId>,
) -> Result<GroupSpec, GroupError> {
    if target_ids.is_empty() {
        return Err(GroupError::EmptyTarget);
    }
    for &t in target_ids {
        if registry.robot_ids.contains(&t) {
            return Err(GroupError::TargetIsRobot(t));
        }
        if !registry.object_ids.contains(&t) {
            return Err(GroupError::UnknownTarget(t));
        }
    }
    Ok(GroupSpec {
        robot_ids: registry.robot_ids.clone(),
        object_ids: target_ids.clone(),
        obstacle_ids: registry.object_ids.difference(target_ids).copied().collect(),
    })
}

fn stack_for(frame: &Frame, group: &BTreeSet<InstanceId>) -> Result<MaskedStack, GroupError> {
    let m = binary_mask(&frame.ids, group)?;
    Ok(apply_mask(&frame.rgb, &m)?)
}

/// DOCIR stacks in canonical order: robot, objects of interest, obstacles.
pub fn docir_stacks(frame: &Frame, spec: &GroupSpec) -> Result<[MaskedStack; 3], GroupError> {
    Ok([
        stack_for(frame, &spec.robot_ids)?,
        stack_for(frame, &spec.object_ids)?,
        stack_for(frame, &spec.obstacle_ids)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// (robot ∪ objects, obstacles)
    A,
    /// (robot ∪ obstacles, objects)
    B,
    /// (objects ∪ obstacles, robot)
    C,
}

pub fn ablation_groups(spec: &GroupSpec, variant: Ablation) -> [BTreeSet<InstanceId>; 2] {
    let join = |a: &BTreeSet<InstanceId>, b: &BTreeSet<InstanceId>| a.union(b).copied().collect();
    match variant {
        Ablation::A => [join(&spec.robot_ids, &spec.object_ids), spec.obstacle_ids.clone()],
        Ablation::B => [join(&spec.robot_ids, &spec.obstacle_ids), spec.object_ids.clone()],
        Ablation::C => [join(&spec.object_ids, &spec.obstacle_ids), spec.robot_ids.clone()],
    }
}

pub fn ablation_stacks(
    frame: &Frame,
    spec: &GroupSpec,
    variant: Ablation,
) -> Result<[MaskedStack; 2], GroupError> {
    let [g0, g1] = ablation_groups(spec, variant);
    Ok([stack_for(frame, &g0)?, stack_for(frame, &g1)?])
}

/// Slot 0 is the robot, then one slot per object in ascending ID order, then
/// all-white zero-mask padding up to `slot_count`.
pub fn ocr_slots(
    frame: &Frame,
    registry: &Registry,
    slot_count: usize,
) -> Result<Vec<MaskedStack>, GroupError> {
    let objects = registry.object_ids.len();
    if slot_count < objects + 1 {
        return Err(GroupError::SlotOverflow {
            objects,
            slots: slot_count,
        });
    }
    let mut slots = Vec::with_capacity(slot_count);
    slots.push(stack_for(frame, &registry.robot_ids)?);
    for &id in &registry.object_ids {
        slots.push(stack_for(frame, &BTreeSet::from([id]))?);
    }
    while slots.len() < slot_count {
        slots.push(MaskedStack::empty(frame.height(), frame.width()));
    }
    Ok(slots)
}

/// Raw RGB, channel-major `3×H×W`.
pub fn flat_obs(frame: &Frame) -> Vec<f32> {
    frame.rgb.to_chw()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReprKind {
    Docir,
    Ocr,
    Flat,
    AblationA,
    AblationB,
    AblationC,
}

impl ReprKind {
    pub const ALL: [ReprKind; 6] = [
        ReprKind::Docir,
        ReprKind::Ocr,
        ReprKind::Flat,
        ReprKind::AblationA,
        ReprKind::AblationB,
        ReprKind::AblationC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReprKind::Docir => "docir",
            ReprKind::Ocr => "ocr",
            ReprKind::Flat => "flat",
            ReprKind::AblationA => "ablation-a",
            ReprKind::AblationB => "ablation-b",
            ReprKind::AblationC => "ablation-c",
        }
    }

    pub fn ablation(self) -> Option<Ablation> {
        match self {
            ReprKind::AblationA => Some(Ablation::A),
            ReprKind::AblationB => Some(Ablation::B),
            ReprKind::AblationC => Some(Ablation::C),
            _ => None,
        }
    }

    /// Baselines need an explicit target-ID embedding.
    pub fn uses_id_embedding(self) -> bool {
        matches!(self, ReprKind::Ocr | ReprKind::Flat)
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReprKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GroupError::UnknownRepr(s.to_string()))
    }
}

pub const DEFAULT_ID_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprMode {
    pub kind: ReprKind,
    /// Only meaningful for OCR.
    pub slot_count: usize,
    /// Zero for DOCIR and the ablations.
    pub id_embed_dim: usize,
}

impl ReprMode {
    /// Defaults for a scene with at most `max_objects` objects.
    pub fn for_kind(kind: ReprKind, max_objects: usize) -> Self {
        ReprMode {
            kind,
            slot_count: if kind == ReprKind::Ocr {
                max_objects + 1
            } else {
                0
            },
            id_embed_dim: if kind.uses_id_embedding() {
                DEFAULT_ID_EMBED_DIM
            } else {
                0
            },
        }
    }

    pub fn stacks_per_view(&self) -> usize {
        match self.kind {
            ReprKind::Docir => 3,
            ReprKind::Ocr => self.slot_count,
            ReprKind::Flat => 1,
            ReprKind::AblationA | ReprKind::AblationB | ReprKind::AblationC => 2,
        }
    }

    pub fn channels(&self) -> usize {
        if self.kind == ReprKind::Flat {
            3
        } else {
            MaskedStack::CHANNELS
        }
    }
}

/// Channel-major stacks for one view, concatenated in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInput {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub stacks: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprInput {
    pub base: ViewInput,
    pub wrist: ViewInput,
    pub target_id: InstanceId,
}

fn pack(h: usize, w: usize, channels: usize, stacks: Vec<Vec<f32>>) -> ViewInput {
    let n = stacks.len();
    ViewInput {
        channels,
        h,
        w,
        stacks: n,
        data: stacks.concat(),
    }
}

pub fn view_input(
    mode: &ReprMode,
    frame: &Frame,
    registry: &Registry,
    spec: &GroupSpec,
) -> Result<ViewInput, GroupError> {
    let (h, w) = (frame.height(), frame.width());
    let stacks: Vec<Vec<f32>> = match mode.kind {
        ReprKind::Docir => docir_stacks(frame, spec)?
            .into_iter()
            .map(|s| s.channels)
            .collect(),
        ReprKind::Ocr => ocr_slots(frame, registry, mode.slot_count)?
            .into_iter()
            .map(|s| s.channels)
            .collect(),
        ReprKind::Flat => vec![flat_obs(frame)],
        k => ablation_stacks(frame, spec, k.ablation().expect("ablation kind"))?
            .into_iter()
            .map(|s| s.channels)
            .collect(),
    };
    Ok(pack(h, w, mode.channels(), stacks))
}

/// Builds the representation of both views for one observation. `interest`
/// is the set of objects the skill acts on; `target_id` feeds the baselines'
/// ID embedding.
pub fn repr_input(
    mode: &ReprMode,
    base: &Frame,
    wrist: &Frame,
    registry: &Registry,
    interest: &BTreeSet<InstanceId>,
    target_id: InstanceId,
) -> Result<ReprInput, GroupError> {
    let spec = make_group_spec(registry, interest)?;
    Ok(ReprInput {
        base: view_input(mode, base, registry, &spec)?,
        wrist: view_input(mode, wrist, registry, &spec)?,
        target_id,
    })
}

/// Recomposes group stacks into one image: each pixel takes the color of the
/// stack whose mask covers it, white where none does. Also returns how many
/// stacks cover each pixel.
pub fn overlay(stacks: &[MaskedStack]) -> Result<(RgbRaster, Vec<u8>), GroupError> {
    let Some(first) = stacks.first() else {
        return Ok((RgbRaster::filled(0, 0, WHITE), Vec::new()));
    };
    let (h, w) = (first.h, first.w);
    let n = h * w;
    let mut rgb = RgbRaster::filled(h, w, WHITE);
    let mut cover = vec![0u8; n];
    for s in stacks {
        if s.h != h || s.w != w {
            return Err(ImagingError::ShapeMismatch(h, w, s.h, s.w).into());
        }
        let mask = s.plane(3);
        for p in 0..n {
            if mask[p] == 1.0 {
                cover[p] = cover[p].saturating_add(1);
                rgb.set(p / w, p % w, [s.channels[p], s.channels[n + p], s.channels[2 * n + p]]);
            }
        }
    }
    Ok((rgb, cover))
}
