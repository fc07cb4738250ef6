//! Domain types shared across the pipeline: positions in the tracked space,
//! condition labels, recorded sessions and the fixed-shape motion windows
//! cut from them.
//!
//! Positions are metric (meters) in the tracked-space frame: `x` runs along
//! the 10 m crossing axis, `y` along the 4 m lateral axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SceneLayout;

/// Physical extents of the tracked space in meters.
pub const TRACKED_EXTENTS: (f64, f64) = (10.0, 4.0);
/// Sampling rate of model inputs and outputs.
pub const FRAMES_PER_SECOND: f64 = 2.0;
pub const FRAME_DT: f64 = 1.0 / FRAMES_PER_SECOND;
/// 3 s of observed motion.
pub const PAST_LEN: usize = 6;
/// 5 s of predicted motion.
pub const FUTURE_LEN: usize = 10;
pub const WINDOW_LEN: usize = PAST_LEN + FUTURE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position2 {
    pub x: f64,
    pub y: f64,
}

impl Position2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Position2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Position2, alpha: f64) -> Position2 {
        Position2::new(
            self.x + (other.x - self.x) * alpha,
            self.y + (other.y - self.y) * alpha,
        )
    }
}

/// A 3D point, used for gaze hits and point-cloud samples (`z` is height).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance_sq(&self, other: &Position3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn lerp(&self, other: &Position3, alpha: f64) -> Position3 {
        Position3::new(
            self.x + (other.x - self.x) * alpha,
            self.y + (other.y - self.y) * alpha,
            self.z + (other.z - self.z) * alpha,
        )
    }
}

fn check_extents(extents: (f64, f64)) -> Result<()> {
    if !(extents.0 > 0.0 && extents.1 > 0.0 && extents.0.is_finite() && extents.1.is_finite()) {
        return Err(Error::invalid(format!(
            "extents must be strictly positive, got {extents:?}"
        )));
    }
    Ok(())
}

/// Divides each coordinate by the matching extent.
pub fn normalize_position(p: Position2, extents: (f64, f64)) -> Result<Position2> {
    check_extents(extents)?;
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("position ({}, {})", p.x, p.y)));
    }
    Ok(Position2::new(p.x / extents.0, p.y / extents.1))
}

pub fn denormalize_position(p: Position2, extents: (f64, f64)) -> Result<Position2> {
    check_extents(extents)?;
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("position ({}, {})", p.x, p.y)));
    }
    Ok(Position2::new(p.x * extents.0, p.y * extents.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vision {
    #[serde(rename = "NV")]
    Normal,
    #[serde(rename = "LV")]
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ST")]
    Simple,
    #[serde(rename = "CT")]
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lanes {
    One,
    Two,
}

impl Lanes {
    pub fn count(self) -> usize {
        match self {
            Lanes::One => 1,
            Lanes::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Cross,
    Return,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionLabels {
    pub vision: Vision,
    pub task: Task,
    pub lanes: Lanes,
    pub user_id: u32,
    pub scene_id: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Pedestrian,
    Vehicle,
    Button,
    TrafficLight,
}

impl EntityKind {
    pub fn is_mobile(self) -> bool {
        matches!(self, EntityKind::Pedestrian | EntityKind::Vehicle)
    }
}

/// Pedestrian signal colour, with the integer codes used in node attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightColor {
    Red,
    Orange,
    Green,
}

impl LightColor {
    pub fn code(self) -> i8 {
        match self {
            LightColor::Red => 0,
            LightColor::Orange => 1,
            LightColor::Green => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub id: u32,
    pub kind: EntityKind,
    /// Centre of the footprint.
    pub center: Position2,
    /// Footprint size (width along x, depth along y) in meters.
    pub size: (f64, f64),
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<LightColor>,
}

impl EntityState {
    pub fn bbox(&self) -> (Position2, Position2) {
        let (hw, hd) = (self.size.0 / 2.0, self.size.1 / 2.0);
        (
            Position2::new(self.center.x - hw, self.center.y - hd),
            Position2::new(self.center.x + hw, self.center.y + hd),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    PressButton,
    WaitForLight,
}

/// An interaction in progress at a given frame, between two entity ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub source: u32,
    pub target: u32,
    pub kind: InteractionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub head: Position2,
    pub gaze: Position3,
    pub entities: Vec<EntityState>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ButtonPress { button: u32 },
    LightChange { color: LightColor },
    CrossingStart,
    Clamp,
}

/// Instantaneous session-level event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub id: String,
    pub labels: ConditionLabels,
    pub layout: SceneLayout,
    pub events: Vec<LogEvent>,
    pub frames: Vec<FrameRecord>,
}

impl SessionLog {
    /// Checks the container invariants: strictly increasing timestamps, at
    /// least one full window of frames, finite coordinates.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < WINDOW_LEN {
            return Err(Error::invalid(format!(
                "session {} has {} frames, need at least {WINDOW_LEN}",
                self.id,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !f.t.is_finite() || !f.head.is_finite() {
                return Err(Error::NonFinite(format!("session {} frame {i}", self.id)));
            }
            if i > 0 && f.t <= self.frames[i - 1].t {
                return Err(Error::invalid(format!(
                    "session {}: timestamps not strictly increasing at frame {i}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Resamples to `fps` frames per second starting at the first timestamp.
    /// Head, gaze and entity positions are linearly interpolated; discrete
    /// state (presence, colours, interactions) is held from the earlier frame.
    pub fn resample(&self, fps: f64) -> Result<SessionLog> {
        if !(fps > 0.0) {
            return Err(Error::invalid("resampling rate must be positive"));
        }
        let mut frames = Vec::new();
        if let (Some(first), Some(last)) = (self.frames.first(), self.frames.last()) {
            let dt = 1.0 / fps;
            let mut j = 0usize;
            for k in 0.. {
                let t = first.t + k as f64 * dt;
                if t > last.t + 1e-9 {
                    break;
                }
                while j + 1 < self.frames.len() && self.frames[j + 1].t <= t {
                    j += 1;
                }
                let a = &self.frames[j];
                let frame = match self.frames.get(j + 1) {
                    Some(b) if t > a.t => interpolate_frame(a, b, (t - a.t) / (b.t - a.t), t),
                    _ => FrameRecord { t, ..a.clone() },
                };
                frames.push(frame);
            }
        }
        Ok(SessionLog {
            frames,
            ..self.clone()
        })
    }
}

fn interpolate_frame(a: &FrameRecord, b: &FrameRecord, alpha: f64, t: f64) -> FrameRecord {
    let entities = a
        .entities
        .iter()
        .map(|ea| {
            let mut e = ea.clone();
            if let Some(eb) = b.entities.iter().find(|eb| eb.id == ea.id) {
                if ea.present && eb.present {
                    e.center = ea.center.lerp(&eb.center, alpha);
                }
            }
            e
        })
        .collect();
    FrameRecord {
        t,
        head: a.head.lerp(&b.head, alpha),
        gaze: a.gaze.lerp(&b.gaze, alpha),
        entities,
        interactions: a.interactions.clone(),
    }
}

/// Six observed positions and ten future positions at 2 fps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionWindow {
    pub past: [Position2; PAST_LEN],
    pub future: [Position2; FUTURE_LEN],
    /// Frame index (in the resampled session) of the last observed frame.
    pub t0: usize,
}

impl MotionWindow {
    pub fn last_observed(&self) -> Position2 {
        self.past[PAST_LEN - 1]
    }
}

/// Number of windows [`extract_windows`] yields for a session of `n_frames`.
pub fn window_count(n_frames: usize, stride: usize) -> usize {
    if n_frames < WINDOW_LEN || stride == 0 {
        0
    } else {
        (n_frames - WINDOW_LEN) / stride + 1
    }
}

/// Cuts sliding windows from an already-resampled session, ordered by `t0`.
/// Sessions shorter than one window yield nothing.
pub fn extract_windows(session: &SessionLog, stride: usize) -> Vec<MotionWindow> {
    let n = window_count(session.frames.len(), stride);
    (0..n)
        .map(|w| {
            let start = w * stride;
            let frames = &session.frames[start..start + WINDOW_LEN];
            MotionWindow {
                past: std::array::from_fn(|i| frames[i].head),
                future: std::array::from_fn(|i| frames[PAST_LEN + i].head),
                t0: start + PAST_LEN - 1,
            }
        })
        .collect()
}
