//! Synthetic road-crossing sessions.
//!
//! A pedestrian follows a plan of steps (walk, dwell, press the button, wait
//! for green) through the standard layout. The simulation ticks at 10 Hz;
//! frames are recorded at `record_hz`. Light state, vehicles, interactions
//! and gaze hit points are derived at every tick.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ConditionLabels, Direction, EntityKind, EntityState, EventKind, FrameRecord, Interaction,
    InteractionKind, Lanes, LightColor, LogEvent, Position2, Position3, SessionLog, Task, Vision,
    FRAMES_PER_SECOND, TRACKED_EXTENTS,
};
use crate::error::{Error, Result};
use crate::layout::{LightCycle, SceneLayout, VehiclePass, CROSSING_BAND, VEHICLE_SIZE};
use crate::model::Matrix;

pub const SESSION_SCHEMA: &str = "divr-session/1";
pub const MANIFEST_SCHEMA: &str = "divr-manifest/1";
pub const SIM_HZ: u32 = 10;
pub const GAZE_KERNEL_SIGMA: f64 = 0.5;
pub const DEFAULT_CLOUD_POINTS: usize = 256;
pub const END_DWELL: f64 = 2.0;
pub const BUTTON_HEIGHT: f64 = 1.0;
pub const LIGHT_HEIGHT: f64 = 2.5;
pub const NV_GAZE_SCATTER: f64 = 0.15;
pub const LV_GAZE_SCATTER: f64 = 0.6;
pub const LV_SPEED_FACTOR: f64 = 0.8;
pub const PRESS_DURATION: f64 = 0.5;
const VEHICLE_SPEED: f64 = 6.0;
const VEHICLE_GAP: f64 = 3.0;

pub const PEDESTRIAN_ID: u32 = 0;
pub const BUTTON_ID: u32 = 1;
pub const LIGHT_ID: u32 = 2;
/// Vehicle in lane `k` has id `VEHICLE_ID_BASE + k`.
pub const VEHICLE_ID_BASE: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Step {
    WalkTo(Position2),
    Dwell(f64),
    PressButton,
    /// Hold until the next green onset, then log a crossing start.
    WaitForGreen,
    /// Marks the start of a crossing without waiting.
    StartCrossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub labels: ConditionLabels,
    pub layout: SceneLayout,
    pub start: Position2,
    pub plan: Vec<Step>,
    /// Standard deviation of the logged head jitter, meters.
    pub noise: f64,
    /// Walking speed, m/s.
    pub speed: f64,
    /// Standard deviation of gaze scatter around its target, meters.
    pub gaze_scatter: f64,
    /// Seconds added to the signal clock when it runs free.
    pub light_phase: f64,
    pub record_hz: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: Position2| {
            let (w, h) = TRACKED_EXTENTS;
            p.is_finite() && (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y)
        };
        if !inside(self.start) {
            return Err(Error::invalid(format!("{}: start {:?} outside tracked space", self.id, self.start)));
        }
        for s in &self.plan {
            match *s {
                Step::WalkTo(p) if !inside(p) => {
                    return Err(Error::invalid(format!("{}: waypoint {p:?} unreachable", self.id)))
                }
                Step::Dwell(d) if !(d >= 0.0 && d.is_finite()) => {
                    return Err(Error::invalid(format!("{}: dwell {d}", self.id)))
                }
                _ => {}
            }
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::invalid(format!("{}: speed must be positive", self.id)));
        }
        if !(self.noise >= 0.0 && self.gaze_scatter >= 0.0) {
            return Err(Error::invalid(format!("{}: noise must be non-negative", self.id)));
        }
        let per = SIM_HZ as f64 / self.record_hz;
        if !(self.record_hz > 0.0) || (per - per.round()).abs() > 1e-9 || per < 1.0 {
            return Err(Error::invalid(format!(
                "{}: record rate {} Hz must divide {SIM_HZ} Hz",
                self.id, self.record_hz
            )));
        }
        self.layout.validate()
    }
}

/// Signal colour at time `t`, given when (if ever) the button was pressed.
/// Pressed: red until `press + activation_delay`, then green → orange → red
/// cycles. Unpressed, the signal rests on red when `free_running` is false
/// and otherwise cycles from `t = −phase`.
pub fn light_color(cycle: &LightCycle, t: f64, press: Option<f64>, free_running: bool, phase: f64) -> LightColor {
    let total = cycle.green + cycle.orange + cycle.red;
    let since = match press {
        Some(p) if t >= p + cycle.activation_delay => t - p - cycle.activation_delay,
        Some(_) => return LightColor::Red,
        None if free_running => t + phase,
        None => return LightColor::Red,
    };
    let s = since.rem_euclid(total);
    if s < cycle.green {
        LightColor::Green
    } else if s < cycle.green + cycle.orange {
        LightColor::Orange
    } else {
        LightColor::Red
    }
}

/// Earliest green onset at or after `t` for a pressed signal.
pub fn next_green_onset(cycle: &LightCycle, t: f64, press: f64) -> f64 {
    let first = press + cycle.activation_delay;
    if t <= first {
        return first;
    }
    let total = cycle.green + cycle.orange + cycle.red;
    first + ((t - first) / total).ceil() * total
}

/// Red time left at `t` (infinite while an unpressed signal rests on red).
fn red_remaining(cycle: &LightCycle, t: f64, press: Option<f64>, free_running: bool, phase: f64) -> f64 {
    let total = cycle.green + cycle.orange + cycle.red;
    match press {
        None if !free_running => f64::INFINITY,
        None => total - (t + phase).rem_euclid(total),
        Some(p) if t < p + cycle.activation_delay => p + cycle.activation_delay - t,
        Some(p) => total - (t - p - cycle.activation_delay).rem_euclid(total),
    }
}

fn stable_round(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

struct Vehicle {
    spawn_t: f64,
}

fn vehicle_state(layout: &SceneLayout, lane: usize, active: Option<&Vehicle>, t: f64) -> EntityState {
    let (_, h) = TRACKED_EXTENTS;
    let x = layout.lane_center_x(lane);
    let half = VEHICLE_SIZE.1 / 2.0;
    let (present, y) = match active {
        Some(v) => {
            let travelled = (t - v.spawn_t) * VEHICLE_SPEED;
            let y = if lane.is_multiple_of(2) { -half + travelled } else { h + half - travelled };
            (y > -half && y < h + half, y)
        }
        None => (false, 0.0),
    };
    let parked = if lane.is_multiple_of(2) { 0.0 } else { h };
    EntityState {
        id: VEHICLE_ID_BASE + lane as u32,
        kind: EntityKind::Vehicle,
        center: Position2::new(x, if present { y } else { parked }),
        size: VEHICLE_SIZE,
        present,
        color: None,
    }
}

fn clamp_to_space(p: Position2) -> (Position2, bool) {
    let (w, h) = TRACKED_EXTENTS;
    let q = Position2::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h));
    (q, q != p)
}

/// Runs the plan. Deterministic given the spec (including its seed).
pub fn generate_session(spec: &ScenarioSpec) -> Result<SessionLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let scatter = Normal::new(0.0, spec.gaze_scatter).map_err(|e| Error::invalid(e.to_string()))?;
    let layout = &spec.layout;
    let cycle = layout.light_cycle;
    let dt = 1.0 / SIM_HZ as f64;
    let record_every = (SIM_HZ as f64 / spec.record_hz).round() as u64;
    let has_press = spec.plan.contains(&Step::PressButton);
    let free_running = !has_press;
    let lanes = layout.lanes.count();

    let mut pos = spec.start;
    let mut step = 0usize;
    let mut step_started = 0.0f64;
    let mut press_t: Option<f64> = None;
    let mut wait_until: Option<f64> = None;
    let mut events = Vec::new();
    let mut frames = Vec::new();
    let mut vehicles: Vec<Option<Vehicle>> = (0..lanes).map(|_| None).collect();
    let mut last_spawn = vec![f64::NEG_INFINITY; lanes];
    let mut schedule = Vec::new();
    let mut last_color: Option<LightColor> = None;

    for tick in 0u64.. {
        let t = stable_round(tick as f64 * dt);
        let color = light_color(&cycle, t, press_t, free_running, spec.light_phase);
        if last_color != Some(color) {
            if last_color.is_some() {
                events.push(LogEvent { t, kind: EventKind::LightChange { color } });
            }
            last_color = Some(color);
        }

        // vehicles only drive while pedestrians see red, and clear the road before green
        let pass_time = (TRACKED_EXTENTS.1 + VEHICLE_SIZE.1) / VEHICLE_SPEED;
        for lane in 0..lanes {
            if let Some(v) = &vehicles[lane] {
                if (t - v.spawn_t) * VEHICLE_SPEED > TRACKED_EXTENTS.1 + VEHICLE_SIZE.1 {
                    vehicles[lane] = None;
                }
            }
            let red_left = red_remaining(&cycle, t, press_t, free_running, spec.light_phase);
            if vehicles[lane].is_none()
                && color == LightColor::Red
                && red_left > pass_time + 0.5
                && t - last_spawn[lane] >= VEHICLE_GAP + lane as f64
            {
                vehicles[lane] = Some(Vehicle { spawn_t: t });
                last_spawn[lane] = t;
                schedule.push(VehiclePass { spawn_t: t, lane, speed: VEHICLE_SPEED });
            }
        }

        // advance the plan; instantaneous steps resolve within the tick
        let mut interactions = Vec::new();
        let mut gaze_target: Option<Position3> = None;
        let mut walking: Option<Position2> = None;
        let mut busy = false;
        while step < spec.plan.len() && !busy {
            match spec.plan[step] {
                Step::WalkTo(goal) => {
                    gaze_target = Some(Position3::new(goal.x, goal.y, 0.0));
                    if pos.distance(&goal) < 1e-9 {
                        step += 1;
                        step_started = t;
                    } else {
                        walking = Some(goal);
                        busy = true;
                    }
                }
                Step::Dwell(d) => {
                    if t - step_started + 1e-9 >= d {
                        step += 1;
                        step_started = t;
                    } else {
                        busy = true;
                    }
                }
                Step::PressButton => {
                    if press_t.is_none() {
                        press_t = Some(t);
                        events.push(LogEvent { t, kind: EventKind::ButtonPress { button: BUTTON_ID } });
                    }
                    gaze_target = Some(Position3::new(layout.button.x, layout.button.y, BUTTON_HEIGHT));
                    interactions.push(Interaction { source: PEDESTRIAN_ID, target: BUTTON_ID, kind: InteractionKind::PressButton });
                    if t - step_started + 1e-9 >= PRESS_DURATION {
                        step += 1;
                        step_started = t;
                        interactions.clear();
                    } else {
                        busy = true;
                    }
                }
                Step::WaitForGreen => {
                    let onset = match (wait_until, press_t) {
                        (Some(u), _) => u,
                        (None, Some(p)) => next_green_onset(&cycle, t, p),
                        (None, None) => t,
                    };
                    wait_until = Some(onset);
                    if t + 1e-9 >= onset {
                        wait_until = None;
                        events.push(LogEvent { t, kind: EventKind::CrossingStart });
                        step += 1;
                        step_started = t;
                    } else {
                        gaze_target = Some(Position3::new(layout.traffic_light.x, layout.traffic_light.y, LIGHT_HEIGHT));
                        interactions.push(Interaction { source: PEDESTRIAN_ID, target: LIGHT_ID, kind: InteractionKind::WaitForLight });
                        busy = true;
                    }
                }
                Step::StartCrossing => {
                    events.push(LogEvent { t, kind: EventKind::CrossingStart });
                    step += 1;
                    step_started = t;
                }
            }
        }
        if gaze_target.is_none() {
            // dwelling: look at the next walking goal, or straight ahead
            let next = spec.plan[step.min(spec.plan.len().saturating_sub(1))..]
                .iter()
                .find_map(|s| match s {
                    Step::WalkTo(g) => Some(*g),
                    _ => None,
                })
                .unwrap_or(pos);
            gaze_target = Some(Position3::new(next.x, next.y, 0.0));
        }

        if tick % record_every == 0 {
            let raw = Position2::new(pos.x + jitter.sample(&mut rng), pos.y + jitter.sample(&mut rng));
            let (head, clamped) = clamp_to_space(raw);
            if clamped {
                events.push(LogEvent { t, kind: EventKind::Clamp });
            }
            let g = gaze_target.expect("gaze target set above");
            let (w, h) = TRACKED_EXTENTS;
            let gaze = Position3::new(
                (g.x + scatter.sample(&mut rng)).clamp(0.0, w),
                (g.y + scatter.sample(&mut rng)).clamp(0.0, h),
                (g.z + scatter.sample(&mut rng)).clamp(0.0, 3.0),
            );
            let mut entities = vec![
                EntityState {
                    id: PEDESTRIAN_ID,
                    kind: EntityKind::Pedestrian,
                    center: head,
                    size: (0.5, 0.5),
                    present: true,
                    color: None,
                },
                EntityState {
                    id: BUTTON_ID,
                    kind: EntityKind::Button,
                    center: layout.button,
                    size: (0.2, 0.2),
                    present: true,
                    color: None,
                },
                EntityState {
                    id: LIGHT_ID,
                    kind: EntityKind::TrafficLight,
                    center: layout.traffic_light,
                    size: (0.3, 0.3),
                    present: true,
                    color: Some(color),
                },
            ];
            for (lane, v) in vehicles.iter().enumerate().take(lanes) {
                entities.push(vehicle_state(layout, lane, v.as_ref(), t));
            }
            frames.push(FrameRecord { t, head, gaze, entities, interactions });
        }
        if step >= spec.plan.len() {
            break;
        }
        // state above is the one at `t`; movement covers [t, t + dt)
        if let Some(goal) = walking {
            let d = pos.distance(&goal);
            let reach = spec.speed * dt;
            pos = if d <= reach + 1e-9 { goal } else { pos.lerp(&goal, reach / d) };
        }
        if tick > 3600 * SIM_HZ as u64 {
            return Err(Error::invalid(format!("{}: plan does not terminate", spec.id)));
        }
    }

    let mut layout = spec.layout.clone();
    layout.vehicle_schedule = schedule;
    let session = SessionLog {
        id: spec.id.clone(),
        labels: spec.labels,
        layout,
        events,
        frames,
    };
    session.validate()?;
    Ok(session)
}

/// One of the scenario templates: task × lanes × direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioKind {
    pub task: Task,
    pub lanes: Lanes,
    pub direction: Direction,
}

/// {ST, CT} × {one, two lanes} crossing, plus {ST, CT} one-lane return.
pub const DEFAULT_SCENARIOS: [ScenarioKind; 6] = [
    ScenarioKind { task: Task::Simple, lanes: Lanes::One, direction: Direction::Cross },
    ScenarioKind { task: Task::Complex, lanes: Lanes::One, direction: Direction::Cross },
    ScenarioKind { task: Task::Simple, lanes: Lanes::Two, direction: Direction::Cross },
    ScenarioKind { task: Task::Complex, lanes: Lanes::Two, direction: Direction::Cross },
    ScenarioKind { task: Task::Simple, lanes: Lanes::One, direction: Direction::Return },
    ScenarioKind { task: Task::Complex, lanes: Lanes::One, direction: Direction::Return },
];

/// Behavioural identity of a simulated participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub speed: f64,
    pub noise: f64,
}

impl UserProfile {
    pub fn draw(user_id: u32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            user_id,
            speed: rng.random_range(1.0..1.4),
            noise: rng.random_range(0.01..0.05),
        }
    }
}

/// Mixes a corpus seed with indices into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The plan and parameters for one user in one scenario.
pub fn scenario_spec(user: &UserProfile, kind: ScenarioKind, scene_id: u32, vision: Vision, seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, user.user_id as u64, 1000 + scene_id as u64));
    let layout = SceneLayout::road_crossing(kind.lanes);
    let (road_lo, road_hi) = layout.road_span();
    let (c0, c1) = CROSSING_BAND;
    let yc = (c0 + c1) / 2.0 + rng.random_range(-0.3..0.3);
    let home = Position2::new(0.75, yc + rng.random_range(-0.4..0.4));
    let curb_near = Position2::new(road_lo - 0.3, yc);
    let curb_far = Position2::new(road_hi + 0.4, yc);
    let far_goal = Position2::new((road_hi + TRACKED_EXTENTS.0) / 2.0, yc + rng.random_range(-0.5..0.5));
    let button_stand = Position2::new(layout.button.x - 0.35, layout.button.y);
    let curb_dwell = |rng: &mut ChaCha8Rng| Step::Dwell(rng.random_range(0.5..2.0));

    let mut plan = vec![Step::Dwell(rng.random_range(0.5..1.5))];
    match kind.task {
        Task::Simple => {
            plan.extend([Step::WalkTo(curb_near), curb_dwell(&mut rng), Step::StartCrossing]);
        }
        Task::Complex => {
            plan.extend([
                Step::WalkTo(button_stand),
                Step::PressButton,
                Step::WalkTo(curb_near),
                Step::WaitForGreen,
            ]);
        }
    }
    plan.extend([Step::WalkTo(curb_far), Step::WalkTo(far_goal)]);
    if kind.direction == Direction::Return {
        plan.push(Step::Dwell(rng.random_range(1.0..2.0)));
        plan.push(Step::WalkTo(curb_far));
        match kind.task {
            Task::Simple => plan.extend([curb_dwell(&mut rng), Step::StartCrossing]),
            Task::Complex => plan.push(Step::WaitForGreen),
        }
        plan.extend([Step::WalkTo(curb_near), Step::WalkTo(home)]);
    }
    plan.push(Step::Dwell(END_DWELL));

    let (speed, scatter) = match vision {
        Vision::Normal => (user.speed, NV_GAZE_SCATTER),
        Vision::Low => (user.speed * LV_SPEED_FACTOR, LV_GAZE_SCATTER),
    };
    let total = layout.light_cycle.green + layout.light_cycle.orange + layout.light_cycle.red;
    ScenarioSpec {
        id: format!("u{:03}-s{scene_id}", user.user_id),
        labels: ConditionLabels {
            vision,
            task: kind.task,
            lanes: kind.lanes,
            user_id: user.user_id,
            scene_id,
            direction: kind.direction,
        },
        layout,
        start: home,
        plan,
        noise: user.noise,
        speed,
        gaze_scatter: scatter,
        light_phase: rng.random_range(0.0..total),
        record_hz: FRAMES_PER_SECOND,
        seed: rng.random(),
    }
}

/// `n_users × scenarios.len()` sessions. Each user's speed and jitter are
/// drawn once; vision alternates so that each user sees both conditions.
pub fn generate_corpus(n_users: usize, scenarios: &[ScenarioKind], seed: u64) -> Result<Vec<SessionLog>> {
    if n_users == 0 {
        return Err(Error::invalid("corpus needs at least one user"));
    }
    let mut sessions = Vec::with_capacity(n_users * scenarios.len());
    for u in 0..n_users as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u as u64, 0));
        let user = UserProfile::draw(u, &mut rng);
        for (k, kind) in scenarios.iter().enumerate() {
            let vision = if (u as usize + k) % 2 == 1 { Vision::Low } else { Vision::Normal };
            sessions.push(generate_session(&scenario_spec(&user, *kind, k as u32, vision, seed))?);
        }
    }
    Ok(sessions)
}

/// Fixed-size gaze-weighted cloud: an even stride through the layout's
/// surface samples, each weighted by `exp(−d²/2σ²)` to the gaze point,
/// sorted by weight (descending) then coordinates.
pub fn sample_gaze_cloud(frame: &FrameRecord, layout: &SceneLayout, n_points: usize) -> Result<Matrix> {
    let surface = &layout.surface;
    if n_points == 0 || surface.is_empty() {
        return Err(Error::invalid("gaze cloud needs at least one point and one surface sample"));
    }
    let two_s2 = 2.0 * GAZE_KERNEL_SIGMA * GAZE_KERNEL_SIGMA;
    let mut rows: Vec<[f64; 4]> = (0..n_points)
        .map(|i| {
            let p = surface[(i * surface.len() / n_points) % surface.len()];
            let w = (-p.distance_sq(&frame.gaze) / two_s2).exp();
            [p.x, p.y, p.z, w]
        })
        .collect();
    rows.sort_by(|a, b| {
        b[3].total_cmp(&a[3])
            .then(a[0].total_cmp(&b[0]))
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    Ok(Matrix::from_rows(&rows))
}

#[derive(Serialize, Deserialize)]
struct SessionHeader {
    id: String,
    labels: ConditionLabels,
    layout: SceneLayout,
    events: Vec<LogEvent>,
}

/// Schema line, a JSON header, then one JSON frame per line.
pub fn write_session(path: &Path, s: &SessionLog) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = SessionHeader {
        id: s.id.clone(),
        labels: s.labels,
        layout: s.layout.clone(),
        events: s.events.clone(),
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{SESSION_SCHEMA}").map_err(io)?;
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for f in &s.frames {
        writeln!(w, "{}", serde_json::to_string(f)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_session(path: &Path) -> Result<SessionLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l.map_err(|e| Error::io(path, e))?)),
            None => Err(Error::Parse { line: 0, msg: format!("{}: missing {what}", path.display()) }),
        }
    };
    let (_, schema) = next("schema line")?;
    if schema.trim() != SESSION_SCHEMA {
        return Err(Error::Schema(format!(
            "{}: session schema `{}`, expected `{SESSION_SCHEMA}`",
            path.display(),
            schema.trim()
        )));
    }
    let (hl, header) = next("header")?;
    let header: SessionHeader = serde_json::from_str(&header).map_err(|e| Error::Parse { line: hl, msg: e.to_string() })?;
    let mut frames = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(SessionLog {
        id: header.id,
        labels: header.labels,
        layout: header.layout,
        events: header.events,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub id: String,
    pub labels: ConditionLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub sessions: Vec<ManifestEntry>,
}

/// Writes every session under `dir/sessions/` and a `dir/manifest.json`.
pub fn write_corpus(dir: &Path, sessions: &[SessionLog]) -> Result<PathBuf> {
    let sdir = dir.join("sessions");
    std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let mut entries = Vec::with_capacity(sessions.len());
    for s in sessions {
        let file = PathBuf::from("sessions").join(format!("{}.session", s.id));
        write_session(&dir.join(&file), s)?;
        entries.push(ManifestEntry { file, id: s.id.clone(), labels: s.labels });
    }
    let manifest = Manifest { schema: MANIFEST_SCHEMA.into(), sessions: entries };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
