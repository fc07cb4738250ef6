//! Per-frame heterogeneous scene graphs built from entity states and the
//! scene layout, their fixed-length feature encodings, the homogeneous
//! (untyped) view, and the `divr-graph/1` text format.
//!
//! Node ids: location regions take ids `0..R` in layout order, entities
//! follow in ascending entity-id order. Coordinates and distances are stored
//! as `f32` so that nine significant digits round-trip them exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{
    normalize_position, EntityKind, EntityState, Interaction, Position2, SessionLog, PAST_LEN,
    TRACKED_EXTENTS,
};
use crate::error::{Error, Result};
use crate::layout::SceneLayout;

pub const NODE_FEATURES: usize = 19;
pub const EDGE_FEATURES: usize = 9;
/// Edge features without the relation one-hot.
pub const HOMO_EDGE_FEATURES: usize = EDGE_FEATURES - RelationType::ALL.len();
pub const GRAPH_SCHEMA: &str = "divr-graph/1";
/// A mobile entity within this distance of a neighbouring region's boundary
/// gets a second (inactive) approach edge to it.
pub const APPROACH_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Location,
    Pedestrian,
    Vehicle,
    Button,
    TrafficLight,
}

impl NodeType {
    pub const ALL: [NodeType; 5] = [
        NodeType::Location,
        NodeType::Pedestrian,
        NodeType::Vehicle,
        NodeType::Button,
        NodeType::TrafficLight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Location => "location",
            NodeType::Pedestrian => "pedestrian",
            NodeType::Vehicle => "vehicle",
            NodeType::Button => "button",
            NodeType::TrafficLight => "traffic_light",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl From<EntityKind> for NodeType {
    fn from(k: EntityKind) -> Self {
        match k {
            EntityKind::Pedestrian => NodeType::Pedestrian,
            EntityKind::Vehicle => NodeType::Vehicle,
            EntityKind::Button => NodeType::Button,
            EntityKind::TrafficLight => NodeType::TrafficLight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    Approach,
    Adjacent,
    Interaction,
}

impl RelationType {
    pub const ALL: [RelationType; 3] = [
        RelationType::Approach,
        RelationType::Adjacent,
        RelationType::Interaction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Approach => "approach",
            RelationType::Adjacent => "adjacent",
            RelationType::Interaction => "interaction",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeAttr {
    pub id: u32,
    pub interactable: u8,
    pub localization: u8,
    pub movable: u8,
    /// −1 unless traffic light; otherwise red 0, orange 1, green 2.
    pub color: i8,
    pub presence: u8,
    /// x_min, y_min, x_max, y_max, x_cent, y_cent, normalized.
    pub bbox: [f32; 6],
}

impl NodeAttr {
    pub fn validate(&self, ty: NodeType) -> Result<()> {
        let flags = [self.interactable, self.localization, self.movable, self.presence];
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::invalid(format!("node {}: binary flag out of range", self.id)));
        }
        if !(-1..=2).contains(&self.color) {
            return Err(Error::invalid(format!("node {}: color {}", self.id, self.color)));
        }
        if self.color != -1 && ty != NodeType::TrafficLight {
            return Err(Error::invalid(format!(
                "node {}: only traffic lights carry a colour",
                self.id
            )));
        }
        if (self.localization == 1) != (ty == NodeType::Location) {
            return Err(Error::invalid(format!(
                "node {}: localization flag inconsistent with type {}",
                self.id,
                ty.name()
            )));
        }
        let b = &self.bbox;
        if b.iter().any(|v| !v.is_finite()) || !(b[0] <= b[4] && b[4] <= b[2] && b[1] <= b[5] && b[5] <= b[3]) {
            return Err(Error::invalid(format!("node {}: malformed bounding box", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttr {
    pub id: u32,
    pub location_type: u8,
    pub dynamic_type: u8,
    pub adjacent_type: u8,
    pub interaction_type: u8,
    pub active: u8,
    pub distance: f32,
}

impl EdgeAttr {
    fn for_relation(id: u32, rel: RelationType, active: bool, distance: f32) -> Self {
        let (location_type, dynamic_type, adjacent_type, interaction_type) = match rel {
            RelationType::Approach => (1, 1, 0, 0),
            RelationType::Adjacent => (0, 0, 1, 0),
            RelationType::Interaction => (0, 1, 0, 1),
        };
        Self {
            id,
            location_type,
            dynamic_type,
            adjacent_type,
            interaction_type,
            active: active as u8,
            distance,
        }
    }

    /// The relation implied by the type flags, if exactly one pattern matches.
    pub fn implied_relation(&self) -> Option<RelationType> {
        match (self.location_type, self.adjacent_type, self.interaction_type) {
            (1, 0, 0) => Some(RelationType::Approach),
            (0, 1, 0) => Some(RelationType::Adjacent),
            (0, 0, 1) => Some(RelationType::Interaction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub ty: NodeType,
    pub attr: NodeAttr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub rel: RelationType,
    pub attr: EdgeAttr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraphFrame {
    pub timestamp: f64,
    pub nodes: BTreeMap<u32, Node>,
    pub edges: Vec<Edge>,
}

impl HeteroGraphFrame {
    pub fn validate(&self) -> Result<()> {
        for (id, node) in &self.nodes {
            if node.attr.id != *id {
                return Err(Error::invalid(format!("node key {id} != attr id {}", node.attr.id)));
            }
            node.attr.validate(node.ty)?;
        }
        for e in &self.edges {
            if !self.nodes.contains_key(&e.src) || !self.nodes.contains_key(&e.dst) {
                return Err(Error::invalid(format!(
                    "edge {} references missing node ({} -> {})",
                    e.attr.id, e.src, e.dst
                )));
            }
            if e.attr.implied_relation() != Some(e.rel) {
                return Err(Error::invalid(format!(
                    "edge {}: type flags disagree with relation {}",
                    e.attr.id,
                    e.rel.name()
                )));
            }
            if !(0.0..=1.0).contains(&e.attr.distance) {
                return Err(Error::invalid(format!("edge {}: distance out of [0,1]", e.attr.id)));
            }
        }
        Ok(())
    }

    pub fn edges_of(&self, rel: RelationType) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.rel == rel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalHeteroGraph {
    pub frames: Vec<HeteroGraphFrame>,
}

impl TemporalHeteroGraph {
    pub fn new(frames: Vec<HeteroGraphFrame>) -> Result<Self> {
        let g = Self { frames };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != PAST_LEN {
            return Err(Error::invalid(format!(
                "temporal graph needs {PAST_LEN} frames, got {}",
                self.frames.len()
            )));
        }
        let ids: BTreeSet<u32> = self.frames[0].nodes.keys().copied().collect();
        for f in &self.frames {
            f.validate()?;
            if !f.nodes.keys().copied().eq(ids.iter().copied()) {
                return Err(Error::invalid("node id set differs between frames"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomoEdge {
    pub src: u32,
    pub dst: u32,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomoGraphFrame {
    pub timestamp: f64,
    pub nodes: BTreeMap<u32, Vec<f64>>,
    pub edges: Vec<HomoEdge>,
}

/// Euclidean distance divided by the tracked-space diagonal, clamped to [0, 1].
pub fn normalized_distance(a: Position2, b: Position2) -> f32 {
    let (w, h) = TRACKED_EXTENTS;
    (a.distance(&b) / w.hypot(h)).clamp(0.0, 1.0) as f32
}

fn normalized_bbox(min: Position2, max: Position2) -> Result<[f32; 6]> {
    let (w, h) = TRACKED_EXTENTS;
    let clamp = |p: Position2| Position2::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h));
    let lo = normalize_position(clamp(min), TRACKED_EXTENTS)?;
    let hi = normalize_position(clamp(max), TRACKED_EXTENTS)?;
    let c = lo.lerp(&hi, 0.5);
    let mut b = [lo.x, lo.y, hi.x, hi.y, c.x, c.y].map(|v| v as f32);
    // f32 rounding may push the centre past a degenerate box edge
    b[4] = b[4].clamp(b[0], b[2]);
    b[5] = b[5].clamp(b[1], b[3]);
    Ok(b)
}

/// Builds one graph frame.
///
/// Regions become location nodes linked by `adjacent` edges in both
/// directions. Each present mobile entity gets an active `approach` edge to
/// the region containing it and, when within [`APPROACH_RADIUS`] of another
/// region, an inactive one to the nearest such region; an entity outside
/// every region is attached (inactive) to the nearest one. Every present
/// pedestrian gets `interaction` edges to each button and traffic light,
/// active while a matching interaction is in progress.
pub fn build_frame(
    entities: &[EntityState],
    layout: &SceneLayout,
    interactions: &[Interaction],
    timestamp: f64,
) -> Result<HeteroGraphFrame> {
    let mut sorted: Vec<&EntityState> = entities.iter().collect();
    sorted.sort_by_key(|e| e.id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::invalid(format!("duplicate entity id {}", w[0].id)));
    }

    let n_regions = layout.regions.len() as u32;
    let mut nodes = BTreeMap::new();
    for (i, r) in layout.regions.iter().enumerate() {
        let id = i as u32;
        let attr = NodeAttr {
            id,
            interactable: 0,
            localization: 1,
            movable: 0,
            color: -1,
            presence: 1,
            bbox: normalized_bbox(r.min, r.max)?,
        };
        nodes.insert(id, Node { ty: NodeType::Location, attr });
    }
    let mut node_of_entity = BTreeMap::new();
    for (rank, e) in sorted.iter().enumerate() {
        let id = n_regions + rank as u32;
        node_of_entity.insert(e.id, id);
        let ty = NodeType::from(e.kind);
        let (min, max) = e.bbox();
        let attr = NodeAttr {
            id,
            interactable: matches!(e.kind, EntityKind::Pedestrian | EntityKind::Button | EntityKind::TrafficLight)
                as u8,
            localization: 0,
            movable: e.kind.is_mobile() as u8,
            color: match (e.kind, e.color) {
                (EntityKind::TrafficLight, Some(c)) => c.code(),
                _ => -1,
            },
            presence: e.present as u8,
            bbox: normalized_bbox(min, max)?,
        };
        nodes.insert(id, Node { ty, attr });
    }

    let mut edges = Vec::new();
    let mut push = |src: u32, dst: u32, rel: RelationType, active: bool, distance: f32| {
        let id = edges.len() as u32;
        edges.push(Edge {
            src,
            dst,
            rel,
            attr: EdgeAttr::for_relation(id, rel, active, distance),
        });
    };

    for (i, j) in layout.adjacency() {
        let (ri, rj) = (&layout.regions[i], &layout.regions[j]);
        let d = normalized_distance(ri.centroid(), rj.centroid());
        push(i as u32, j as u32, RelationType::Adjacent, false, d);
        push(j as u32, i as u32, RelationType::Adjacent, false, d);
    }

    for e in sorted.iter().filter(|e| e.kind.is_mobile() && e.present) {
        let src = node_of_entity[&e.id];
        match layout.region_containing(e.center) {
            Some(r) => {
                let d = normalized_distance(e.center, layout.regions[r].centroid());
                push(src, r as u32, RelationType::Approach, true, d);
                let next = layout
                    .regions
                    .iter()
                    .enumerate()
                    .filter(|(k, reg)| *k != r && !reg.contains(e.center))
                    .map(|(k, reg)| (k, reg.distance_to(e.center)))
                    .filter(|(_, dist)| *dist < APPROACH_RADIUS)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((k, _)) = next {
                    let d = normalized_distance(e.center, layout.regions[k].centroid());
                    push(src, k as u32, RelationType::Approach, false, d);
                }
            }
            None => {
                let (k, _) = layout.nearest_region(e.center);
                let d = normalized_distance(e.center, layout.regions[k].centroid());
                push(src, k as u32, RelationType::Approach, false, d);
            }
        }
    }

    for ped in sorted.iter().filter(|e| e.kind == EntityKind::Pedestrian && e.present) {
        for target in sorted
            .iter()
            .filter(|e| matches!(e.kind, EntityKind::Button | EntityKind::TrafficLight) && e.present)
        {
            let active = interactions
                .iter()
                .any(|i| i.source == ped.id && i.target == target.id);
            let d = normalized_distance(ped.center, target.center);
            push(
                node_of_entity[&ped.id],
                node_of_entity[&target.id],
                RelationType::Interaction,
                active,
                d,
            );
        }
    }

    Ok(HeteroGraphFrame {
        timestamp,
        nodes,
        edges,
    })
}

/// Graphs for the six observed frames ending at `t0` of a resampled session.
pub fn build_temporal_graph(session: &SessionLog, t0: usize) -> Result<TemporalHeteroGraph> {
    if t0 + 1 < PAST_LEN || t0 >= session.frames.len() {
        return Err(Error::invalid(format!("no full observation window ends at frame {t0}")));
    }
    let frames = session.frames[t0 + 1 - PAST_LEN..=t0]
        .iter()
        .map(|f| build_frame(&f.entities, &session.layout, &f.interactions, f.t))
        .collect::<Result<Vec<_>>>()?;
    TemporalHeteroGraph::new(frames)
}

/// `[type one-hot (5)] ++ [interactable, localization, movable, presence]
/// ++ [color one-hot over −1,0,1,2 (4)] ++ [bbox (6)]`; the id is not encoded.
pub fn encode_node(ty: NodeType, attr: &NodeAttr) -> [f64; NODE_FEATURES] {
    let mut v = [0.0; NODE_FEATURES];
    v[ty.index()] = 1.0;
    v[5] = attr.interactable as f64;
    v[6] = attr.localization as f64;
    v[7] = attr.movable as f64;
    v[8] = attr.presence as f64;
    v[9 + (attr.color + 1).clamp(0, 3) as usize] = 1.0;
    for (k, b) in attr.bbox.iter().enumerate() {
        v[13 + k] = *b as f64;
    }
    v
}

/// `[relation one-hot (3)] ++ [location, dynamic, adjacent, interaction,
/// active] ++ [distance]`.
pub fn encode_edge(rel: RelationType, attr: &EdgeAttr) -> Result<[f64; EDGE_FEATURES]> {
    if !(0.0..=1.0).contains(&attr.distance) {
        return Err(Error::invalid(format!(
            "edge {}: distance {} outside [0, 1]",
            attr.id, attr.distance
        )));
    }
    let mut v = [0.0; EDGE_FEATURES];
    v[rel.index()] = 1.0;
    v[3] = attr.location_type as f64;
    v[4] = attr.dynamic_type as f64;
    v[5] = attr.adjacent_type as f64;
    v[6] = attr.interaction_type as f64;
    v[7] = attr.active as f64;
    v[8] = attr.distance as f64;
    Ok(v)
}

pub fn to_homogeneous(frame: &HeteroGraphFrame) -> Result<HomoGraphFrame> {
    let nodes = frame
        .nodes
        .iter()
        .map(|(id, n)| (*id, encode_node(n.ty, &n.attr).to_vec()))
        .collect();
    let edges = frame
        .edges
        .iter()
        .map(|e| {
            Ok(HomoEdge {
                src: e.src,
                dst: e.dst,
                features: encode_edge(e.rel, &e.attr)?[RelationType::ALL.len()..].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HomoGraphFrame {
        timestamp: frame.timestamp,
        nodes,
        edges,
    })
}

fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

/// One graph record, labelled with a free-form token (no whitespace).
pub fn write_graph_record(out: &mut String, label: &str, g: &TemporalHeteroGraph) {
    let _ = writeln!(out, "graph {label} frames={}", g.frames.len());
    for f in &g.frames {
        let _ = writeln!(out, "frame t={} nodes={} edges={}", f.timestamp, f.nodes.len(), f.edges.len());
        for n in f.nodes.values() {
            let a = &n.attr;
            let _ = write!(
                out,
                "node {} {} {} {} {} {} {}",
                a.id,
                n.ty.name(),
                a.interactable,
                a.localization,
                a.movable,
                a.color,
                a.presence
            );
            for b in a.bbox {
                let _ = write!(out, " {}", fmt_f32(b));
            }
            out.push('\n');
        }
        for e in &f.edges {
            let a = &e.attr;
            let _ = writeln!(
                out,
                "edge {} {} {} {} {} {} {} {} {} {}",
                a.id,
                e.src,
                e.dst,
                e.rel.name(),
                a.location_type,
                a.dynamic_type,
                a.adjacent_type,
                a.interaction_type,
                a.active,
                fmt_f32(a.distance)
            );
        }
    }
    out.push_str("end\n");
}

pub fn write_graph_records(records: &[(String, TemporalHeteroGraph)]) -> String {
    let mut out = format!("{GRAPH_SCHEMA}\n");
    for (label, g) in records {
        write_graph_record(&mut out, label, g);
    }
    out
}

pub fn serialize_graph(g: &TemporalHeteroGraph) -> String {
    write_graph_records(&[("-".to_string(), g.clone())])
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                return Some((i + 1, toks));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        self.next_line().ok_or_else(|| Error::Parse {
            line: self.last + 1,
            msg: format!("unexpected end of input, expected {what}"),
        })
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse().map_err(|_| perr(line, format!("bad {what} `{tok}`")))
}

fn keyed<T: std::str::FromStr>(line: usize, tok: &str, key: &str) -> Result<T> {
    let v = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| perr(line, format!("expected `{key}=...`, found `{tok}`")))?;
    num(line, v, key)
}

fn parse_frame(lines: &mut Lines<'_>) -> Result<HeteroGraphFrame> {
    let (ln, toks) = lines.expect("frame header")?;
    if toks.len() != 4 || toks[0] != "frame" {
        return Err(perr(ln, "expected `frame t=.. nodes=.. edges=..`"));
    }
    let timestamp: f64 = keyed(ln, toks[1], "t")?;
    let n_nodes: usize = keyed(ln, toks[2], "nodes")?;
    let n_edges: usize = keyed(ln, toks[3], "edges")?;
    let mut nodes = BTreeMap::new();
    for _ in 0..n_nodes {
        let (ln, t) = lines.expect("node line")?;
        if t.len() != 14 || t[0] != "node" {
            return Err(perr(ln, "expected node record with 13 fields"));
        }
        let ty = NodeType::parse(t[2]).ok_or_else(|| perr(ln, format!("unknown node type `{}`", t[2])))?;
        let mut bbox = [0f32; 6];
        for (k, b) in bbox.iter_mut().enumerate() {
            *b = num(ln, t[8 + k], "coordinate")?;
        }
        let attr = NodeAttr {
            id: num(ln, t[1], "node id")?,
            interactable: num(ln, t[3], "interactable")?,
            localization: num(ln, t[4], "localization")?,
            movable: num(ln, t[5], "movable")?,
            color: num(ln, t[6], "color")?,
            presence: num(ln, t[7], "presence")?,
            bbox,
        };
        attr.validate(ty).map_err(|e| perr(ln, e.to_string()))?;
        if nodes.insert(attr.id, Node { ty, attr }).is_some() {
            return Err(perr(ln, format!("duplicate node id {}", attr.id)));
        }
    }
    let mut edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let (ln, t) = lines.expect("edge line")?;
        if t.len() != 11 || t[0] != "edge" {
            return Err(perr(ln, "expected edge record with 10 fields"));
        }
        let rel = RelationType::parse(t[4]).ok_or_else(|| perr(ln, format!("unknown relation `{}`", t[4])))?;
        edges.push(Edge {
            src: num(ln, t[2], "source id")?,
            dst: num(ln, t[3], "target id")?,
            rel,
            attr: EdgeAttr {
                id: num(ln, t[1], "edge id")?,
                location_type: num(ln, t[5], "location_type")?,
                dynamic_type: num(ln, t[6], "dynamic_type")?,
                adjacent_type: num(ln, t[7], "adjacent_type")?,
                interaction_type: num(ln, t[8], "interaction_type")?,
                active: num(ln, t[9], "active")?,
                distance: num(ln, t[10], "distance")?,
            },
        });
    }
    let frame = HeteroGraphFrame {
        timestamp,
        nodes,
        edges,
    };
    frame.validate().map_err(|e| perr(ln, e.to_string()))?;
    Ok(frame)
}

pub fn read_graph_records(text: &str) -> Result<Vec<(String, TemporalHeteroGraph)>> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (ln, header) = lines.expect("schema header")?;
    if header.len() != 1 {
        return Err(perr(ln, "expected schema header line"));
    }
    if header[0] != GRAPH_SCHEMA {
        return Err(Error::Schema(header[0].to_string()));
    }
    let mut out = Vec::new();
    while let Some((ln, toks)) = lines.next_line() {
        if toks.len() != 3 || toks[0] != "graph" {
            return Err(perr(ln, "expected `graph <label> frames=N`"));
        }
        let label = toks[1].to_string();
        let n_frames: usize = keyed(ln, toks[2], "frames")?;
        let frames = (0..n_frames)
            .map(|_| parse_frame(&mut lines))
            .collect::<Result<Vec<_>>>()?;
        let (end_ln, end) = lines.expect("`end`")?;
        if end != ["end"] {
            return Err(perr(end_ln, "expected `end`"));
        }
        let g = TemporalHeteroGraph { frames };
        g.validate().map_err(|e| perr(ln, e.to_string()))?;
        out.push((label, g));
    }
    Ok(out)
}

pub fn deserialize_graph(text: &str) -> Result<TemporalHeteroGraph> {
    let mut recs = read_graph_records(text)?;
    match recs.len() {
        1 => Ok(recs.remove(0).1),
        n => Err(perr(1, format!("expected exactly one graph record, found {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{InteractionKind, Lanes, LightColor};
    use proptest::prelude::*;

    fn layout() -> SceneLayout {
        SceneLayout::road_crossing(Lanes::One)
    }

    fn ped(id: u32, x: f64, y: f64) -> EntityState {
        EntityState {
            id,
            kind: EntityKind::Pedestrian,
            center: Position2::new(x, y),
            size: (0.5, 0.5),
            present: true,
            color: None,
        }
    }

    fn prop(id: u32, kind: EntityKind, at: Position2, color: Option<LightColor>) -> EntityState {
        EntityState {
            id,
            kind,
            center: at,
            size: (0.2, 0.2),
            present: true,
            color,
        }
    }

    #[test]
    fn pedestrian_at_home() {
        let l = layout();
        let g = build_frame(&[ped(1, 0.75, 2.0)], &l, &[], 0.0).unwrap();
        g.validate().unwrap();
        let peds: Vec<_> = g.nodes.values().filter(|n| n.ty == NodeType::Pedestrian).collect();
        assert_eq!(peds.len(), 1);
        assert!(g.nodes.values().filter(|n| n.ty == NodeType::Location).count() >= 4);
        // oracle: regions whose box contains the position
        let containing: Vec<u32> = l
            .regions
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                let p = Position2::new(0.75, 2.0);
                r.min.x <= p.x && p.x <= r.max.x && r.min.y <= p.y && p.y <= r.max.y
            })
            .map(|(i, _)| i as u32)
            .collect();
        let approach: Vec<_> = g.edges_of(RelationType::Approach).collect();
        assert_eq!(approach.len(), 1);
        assert_eq!(approach[0].src, peds[0].attr.id);
        assert_eq!(vec![approach[0].dst], containing);
        assert_eq!(l.regions[approach[0].dst as usize].name, "home");
        assert_eq!(approach[0].attr.active, 1);
    }

    #[test]
    fn button_press_is_active_interaction() {
        let l = layout();
        let ents = [
            ped(1, 2.3, 1.3),
            prop(2, EntityKind::Button, l.button, None),
            prop(3, EntityKind::TrafficLight, l.traffic_light, Some(LightColor::Red)),
        ];
        let press = Interaction {
            source: 1,
            target: 2,
            kind: InteractionKind::PressButton,
        };
        let g = build_frame(&ents, &l, &[press], 1.0).unwrap();
        let by_type = |t| g.nodes.values().find(|n| n.ty == t).unwrap().attr.id;
        let (u, b, tl) = (by_type(NodeType::Pedestrian), by_type(NodeType::Button), by_type(NodeType::TrafficLight));
        let inter: Vec<_> = g.edges_of(RelationType::Interaction).collect();
        assert_eq!(inter.len(), 2);
        let to_button = inter.iter().find(|e| e.dst == b).unwrap();
        assert_eq!(to_button.src, u);
        assert_eq!(to_button.attr.active, 1);
        assert_eq!(to_button.attr.interaction_type, 1);
        let to_light = inter.iter().find(|e| e.dst == tl).unwrap();
        assert_eq!(to_light.attr.active, 0);
    }

    #[test]
    fn empty_entities_give_static_skeleton() {
        let l = layout();
        let g = build_frame(&[], &l, &[], 0.0).unwrap();
        assert_eq!(g.nodes.len(), l.regions.len());
        assert!(g.edges.iter().all(|e| e.rel == RelationType::Adjacent));
        assert_eq!(g.edges.len(), 2 * l.adjacency().len());
    }

    #[test]
    fn near_boundary_adds_inactive_approach() {
        let l = layout();
        let g = build_frame(&[ped(1, 2.3, 2.0)], &l, &[], 0.0).unwrap();
        let approach: Vec<_> = g.edges_of(RelationType::Approach).collect();
        assert_eq!(approach.len(), 2);
        assert_eq!(l.regions[approach[0].dst as usize].name, "sidewalk_near");
        assert_eq!(approach[0].attr.active, 1);
        assert_eq!(l.regions[approach[1].dst as usize].name, "crossing");
        assert_eq!(approach[1].attr.active, 0);
    }

    #[test]
    fn outside_entity_attaches_to_nearest_region() {
        let l = layout();
        let mut car = ped(4, 3.75, -1.5);
        car.kind = EntityKind::Vehicle;
        let g = build_frame(&[car], &l, &[], 0.0).unwrap();
        let a: Vec<_> = g.edges_of(RelationType::Approach).collect();
        assert_eq!(a.len(), 1);
        assert_eq!(l.regions[a[0].dst as usize].name, "road_south");
        assert_eq!(a[0].attr.active, 0);
    }

    #[test]
    fn duplicate_entity_ids_rejected() {
        assert!(build_frame(&[ped(1, 1.0, 1.0), ped(1, 2.0, 1.0)], &layout(), &[], 0.0).is_err());
    }

    #[test]
    fn absent_entities_keep_nodes_without_edges() {
        let mut p = ped(1, 0.75, 2.0);
        p.present = false;
        let g = build_frame(&[p], &layout(), &[], 0.0).unwrap();
        assert_eq!(g.nodes.len(), 7);
        assert_eq!(g.nodes[&6].attr.presence, 0);
        assert!(g.edges.iter().all(|e| e.src != 6 && e.dst != 6));
    }

    #[test]
    fn node_encoding() {
        let l = layout();
        let g = build_frame(
            &[prop(3, EntityKind::TrafficLight, l.traffic_light, Some(LightColor::Green))],
            &l,
            &[],
            0.0,
        )
        .unwrap();
        let light = g.nodes.values().find(|n| n.ty == NodeType::TrafficLight).unwrap();
        let v = encode_node(light.ty, &light.attr);
        assert_eq!(v.len(), NODE_FEATURES);
        assert_eq!(&v[9..13], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(v, encode_node(light.ty, &light.attr));

        let home = &g.nodes[&0];
        let h = encode_node(home.ty, &home.attr);
        assert_eq!(h[0], 1.0);
        assert_eq!(h[6], 1.0, "localization");
        assert_eq!(h[7], 0.0, "movable");
        assert_eq!(&h[9..13], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn edge_encoding() {
        let adj = EdgeAttr::for_relation(0, RelationType::Adjacent, false, 0.0);
        let v = encode_edge(RelationType::Adjacent, &adj).unwrap();
        assert_eq!(&v[..3], &[0.0, 1.0, 0.0]);
        assert_eq!(v[8], 0.0);

        let inter = EdgeAttr::for_relation(1, RelationType::Interaction, true, 0.1);
        assert_eq!(encode_edge(RelationType::Interaction, &inter).unwrap()[7], 1.0);

        // opposite corners: √(10²+4²) / √(10²+4²)
        let d = normalized_distance(Position2::new(0.0, 0.0), Position2::new(10.0, 4.0));
        assert_eq!(d, 1.0);
        let corner = EdgeAttr::for_relation(2, RelationType::Approach, true, d);
        assert_eq!(encode_edge(RelationType::Approach, &corner).unwrap()[8], 1.0);

        let mut bad = corner;
        bad.distance = 1.5;
        assert!(encode_edge(RelationType::Approach, &bad).is_err());
    }

    #[test]
    fn homogeneous_view() {
        let l = layout();
        let ents = [
            ped(1, 2.3, 1.3),
            prop(2, EntityKind::Button, l.button, None),
            prop(3, EntityKind::TrafficLight, l.traffic_light, Some(LightColor::Orange)),
        ];
        let g = build_frame(&ents, &l, &[], 0.0).unwrap();
        let h = to_homogeneous(&g).unwrap();
        assert_eq!(h.nodes.len(), g.nodes.len());
        assert_eq!(h.edges.len(), g.edges.len());
        assert!(h.nodes.keys().eq(g.nodes.keys()));
        assert!(h.nodes.values().all(|v| v.len() == NODE_FEATURES));
        assert!(h.edges.iter().all(|e| e.features.len() == HOMO_EDGE_FEATURES));

        // two nodes differing only in type differ only in the type slice
        let mut a = g.nodes[&8];
        a.attr.interactable = 1;
        let va = encode_node(NodeType::Button, &a.attr);
        let vb = encode_node(NodeType::Pedestrian, &a.attr);
        for k in 5..NODE_FEATURES {
            assert_eq!(va[k], vb[k]);
        }
        assert_ne!(&va[..5], &vb[..5]);
    }

    fn sample_graph() -> TemporalHeteroGraph {
        let l = layout();
        let frames = (0..PAST_LEN)
            .map(|k| {
                let ents = [
                    ped(1, 0.4 + 0.37 * k as f64, 1.9 + 0.013 * k as f64),
                    prop(2, EntityKind::Button, l.button, None),
                    prop(3, EntityKind::TrafficLight, l.traffic_light, Some(LightColor::Red)),
                ];
                build_frame(&ents, &l, &[], 0.1 * k as f64).unwrap()
            })
            .collect();
        TemporalHeteroGraph::new(frames).unwrap()
    }

    #[test]
    fn graph_text_round_trip() {
        let g = sample_graph();
        let text = serialize_graph(&g);
        assert!(text.starts_with("divr-graph/1\n"));
        assert_eq!(deserialize_graph(&text).unwrap(), g);
        assert_eq!(serialize_graph(&deserialize_graph(&text).unwrap()), text);
    }

    #[test]
    fn wrong_frame_count_rejected() {
        assert!(TemporalHeteroGraph::new(vec![]).is_err());
        let text = format!("{GRAPH_SCHEMA}\ngraph - frames=0\nend\n");
        assert!(matches!(read_graph_records(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = serialize_graph(&sample_graph());
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[4] = lines[4].replace("location", "lamp_post");
        match read_graph_records(&lines.join("\n")) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("lamp_post"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            read_graph_records("divr-graph/9\n"),
            Err(Error::Schema(_))
        ));
    }

    proptest! {
        #[test]
        fn encodings_have_fixed_length_and_consistent_relations(
            x in -1.0f64..11.0, y in -1.0f64..5.0, press in any::<bool>(), present in any::<bool>()
        ) {
            let l = layout();
            let mut p = ped(1, x, y);
            p.present = present;
            let ents = [
                p,
                prop(2, EntityKind::Button, l.button, None),
                prop(3, EntityKind::TrafficLight, l.traffic_light, Some(LightColor::Green)),
            ];
            let inter = press.then_some(Interaction { source: 1, target: 2, kind: InteractionKind::PressButton });
            let g = build_frame(&ents, &l, inter.as_slice(), 0.0).unwrap();
            g.validate().unwrap();
            for n in g.nodes.values() {
                prop_assert_eq!(encode_node(n.ty, &n.attr).len(), NODE_FEATURES);
            }
            for e in &g.edges {
                let v = encode_edge(e.rel, &e.attr).unwrap();
                prop_assert_eq!(v.len(), EDGE_FEATURES);
                let hot: Vec<usize> = (0..3).filter(|&k| v[k] == 1.0).collect();
                prop_assert_eq!(hot, vec![e.rel.index()]);
                prop_assert_eq!(e.attr.implied_relation(), Some(e.rel));
            }
            let again = build_frame(&ents, &l, inter.as_slice(), 0.0).unwrap();
            prop_assert_eq!(g, again);
        }
    }
}
