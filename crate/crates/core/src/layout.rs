//! Road-crossing scene layout: axis-aligned location regions tiling the
//! tracked space, fixed props (button, traffic light), the signal cycle, the
//! vehicle schedule and the static surface samples used for gaze clouds.

use serde::{Deserialize, Serialize};

use crate::domain::{Lanes, Position2, Position3, TRACKED_EXTENTS};
use crate::error::{Error, Result};

pub const HOME_WIDTH: f64 = 1.5;
pub const SIDEWALK_WIDTH: f64 = 1.0;
/// Width of one lane in tracked-space meters: a 3.5 m world lane compressed
/// into the 10 m tracked space.
pub const LANE_WIDTH: f64 = 2.5;
pub const WORLD_LANE_WIDTH: f64 = 3.5;
/// Tracked-space meters per world meter along the crossing axis.
pub const WORLD_SCALE: f64 = LANE_WIDTH / WORLD_LANE_WIDTH;
/// Lateral band of the road marked as the pedestrian crossing.
pub const CROSSING_BAND: (f64, f64) = (1.5, 2.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Home,
    Sidewalk,
    Road,
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub kind: RegionKind,
    pub min: Position2,
    pub max: Position2,
}

impl Region {
    fn new(name: &str, kind: RegionKind, min: (f64, f64), max: (f64, f64)) -> Self {
        Self {
            name: name.to_string(),
            kind,
            min: Position2::new(min.0, min.1),
            max: Position2::new(max.0, max.1),
        }
    }

    pub fn contains(&self, p: Position2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn centroid(&self) -> Position2 {
        self.min.lerp(&self.max, 0.5)
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    /// Euclidean distance from `p` to the closest point of the box.
    pub fn distance_to(&self, p: Position2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }

    /// True when the two boxes share a boundary segment of positive length.
    pub fn touches(&self, other: &Region) -> bool {
        let eps = 1e-9;
        let overlap_x = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let overlap_y = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        (overlap_x.abs() < eps && overlap_y > eps) || (overlap_y.abs() < eps && overlap_x > eps)
    }

    pub fn is_road(&self) -> bool {
        matches!(self.kind, RegionKind::Road | RegionKind::Crossing)
    }
}

/// Pedestrian signal durations in seconds. The signal rests on red until the
/// button is pressed; green starts `activation_delay` seconds later and the
/// cycle then repeats green → orange → red.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightCycle {
    pub red: f64,
    pub orange: f64,
    pub green: f64,
    pub activation_delay: f64,
}

impl Default for LightCycle {
    fn default() -> Self {
        Self {
            red: 6.0,
            orange: 2.0,
            green: 8.0,
            activation_delay: 3.0,
        }
    }
}

/// A vehicle driving through one lane along +y (lane 0) or −y (lane 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehiclePass {
    pub spawn_t: f64,
    pub lane: usize,
    pub speed: f64,
}

pub const VEHICLE_SIZE: (f64, f64) = (1.4, 2.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub lanes: Lanes,
    pub regions: Vec<Region>,
    pub button: Position2,
    pub traffic_light: Position2,
    pub light_cycle: LightCycle,
    pub vehicle_schedule: Vec<VehiclePass>,
    /// Static scene surface samples (ground, facades, props).
    pub surface: Vec<Position3>,
}

impl SceneLayout {
    /// Standard layout: home, near sidewalk, road (split around the
    /// crossing band) and far sidewalk as bands along x.
    pub fn road_crossing(lanes: Lanes) -> Self {
        let road_w = LANE_WIDTH * lanes.count() as f64;
        let (w, h) = TRACKED_EXTENTS;
        let curb = HOME_WIDTH + SIDEWALK_WIDTH;
        let far = curb + road_w;
        let (c0, c1) = CROSSING_BAND;
        let regions = vec![
            Region::new("home", RegionKind::Home, (0.0, 0.0), (HOME_WIDTH, h)),
            Region::new("sidewalk_near", RegionKind::Sidewalk, (HOME_WIDTH, 0.0), (curb, h)),
            Region::new("road_south", RegionKind::Road, (curb, 0.0), (far, c0)),
            Region::new("crossing", RegionKind::Crossing, (curb, c0), (far, c1)),
            Region::new("road_north", RegionKind::Road, (curb, c1), (far, h)),
            Region::new("sidewalk_far", RegionKind::Sidewalk, (far, 0.0), (w, h)),
        ];
        let button = Position2::new(curb - 0.15, c0 - 0.2);
        let traffic_light = Position2::new(curb - 0.15, c1 + 0.2);
        let surface = surface_samples(button, traffic_light);
        Self {
            lanes,
            regions,
            button,
            traffic_light,
            light_cycle: LightCycle::default(),
            vehicle_schedule: Vec::new(),
            surface,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = TRACKED_EXTENTS;
        let total: f64 = self.regions.iter().map(Region::area).sum();
        if (total - w * h).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "regions cover {total} m², tracked space is {} m²",
                w * h
            )));
        }
        for (i, a) in self.regions.iter().enumerate() {
            if a.min.x < 0.0 || a.min.y < 0.0 || a.max.x > w || a.max.y > h {
                return Err(Error::invalid(format!("region {} leaves tracked space", a.name)));
            }
            for b in &self.regions[i + 1..] {
                let ox = a.max.x.min(b.max.x) - a.min.x.max(b.min.x);
                let oy = a.max.y.min(b.max.y) - a.min.y.max(b.min.y);
                if ox > 1e-9 && oy > 1e-9 {
                    return Err(Error::invalid(format!("regions {} and {} overlap", a.name, b.name)));
                }
            }
        }
        let c = &self.light_cycle;
        if !(c.red > 0.0 && c.orange > 0.0 && c.green > 0.0 && c.activation_delay >= 0.0) {
            return Err(Error::invalid("light cycle durations must be positive"));
        }
        Ok(())
    }

    pub fn region_containing(&self, p: Position2) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(p))
    }

    /// Closest region and the distance to it (zero when inside).
    pub fn nearest_region(&self, p: Position2) -> (usize, f64) {
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.distance_to(p)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    /// Unordered pairs of regions sharing a boundary.
    pub fn adjacency(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.regions.len() {
            for j in i + 1..self.regions.len() {
                if self.regions[i].touches(&self.regions[j]) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// x-range of the carriageway.
    pub fn road_span(&self) -> (f64, f64) {
        let road = self.regions.iter().filter(|r| r.is_road());
        let lo = road.clone().map(|r| r.min.x).fold(f64::INFINITY, f64::min);
        let hi = road.map(|r| r.max.x).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn road_width(&self) -> f64 {
        let (lo, hi) = self.road_span();
        hi - lo
    }

    pub fn is_on_road(&self, p: Position2) -> bool {
        let (lo, hi) = self.road_span();
        p.x > lo && p.x < hi
    }

    pub fn lane_center_x(&self, lane: usize) -> f64 {
        self.road_span().0 + LANE_WIDTH * (lane as f64 + 0.5)
    }
}

fn surface_samples(button: Position2, light: Position2) -> Vec<Position3> {
    let (w, h) = TRACKED_EXTENTS;
    let mut pts = Vec::new();
    // ground grid at cell centres
    let (nx, ny) = (30, 12);
    for i in 0..nx {
        for j in 0..ny {
            pts.push(Position3::new(
                (i as f64 + 0.5) * w / nx as f64,
                (j as f64 + 0.5) * h / ny as f64,
                0.0,
            ));
        }
    }
    // facades at both ends of the tracked space
    for x in [0.0, w] {
        for j in 0..12 {
            for k in 0..6 {
                pts.push(Position3::new(x, (j as f64 + 0.5) * h / 12.0, 0.25 + 0.5 * k as f64));
            }
        }
    }
    for k in 0..8 {
        pts.push(Position3::new(light.x, light.y, 0.4 * (k as f64 + 1.0)));
    }
    for k in 0..4 {
        pts.push(Position3::new(button.x, button.y, 0.3 * (k as f64 + 1.0)));
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_tile_tracked_space() {
        for lanes in [Lanes::One, Lanes::Two] {
            let l = SceneLayout::road_crossing(lanes);
            l.validate().unwrap();
            assert_eq!(l.regions.len(), 6);
        }
    }

    #[test]
    fn second_lane_adds_one_scaled_lane() {
        let one = SceneLayout::road_crossing(Lanes::One).road_width();
        let two = SceneLayout::road_crossing(Lanes::Two).road_width();
        assert!((two - one - LANE_WIDTH).abs() < 1e-12);
        assert!((two / one - 2.0).abs() < 1e-12);
        // expressed at world scale the extra lane is 3.5 m
        assert!(((two - one) / WORLD_SCALE - 3.5).abs() < 1e-12);
    }

    #[test]
    fn adjacency_matches_band_structure() {
        let l = SceneLayout::road_crossing(Lanes::One);
        let names = |(i, j): (usize, usize)| (l.regions[i].name.as_str(), l.regions[j].name.as_str());
        let adj: Vec<_> = l.adjacency().into_iter().map(names).collect();
        assert!(adj.contains(&("home", "sidewalk_near")));
        assert!(adj.contains(&("sidewalk_near", "crossing")));
        assert!(adj.contains(&("road_south", "crossing")));
        assert!(adj.contains(&("crossing", "sidewalk_far")));
        assert!(!adj.contains(&("home", "crossing")));
        assert!(!adj.contains(&("road_south", "road_north")));
        assert_eq!(adj.len(), 9);
    }

    #[test]
    fn nearest_region_outside_space() {
        let l = SceneLayout::road_crossing(Lanes::One);
        let (idx, d) = l.nearest_region(Position2::new(-1.0, 2.0));
        assert_eq!(l.regions[idx].name, "home");
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let mut l = SceneLayout::road_crossing(Lanes::One);
        l.regions[0].max.x += 0.5;
        assert!(l.validate().is_err());
    }
}
