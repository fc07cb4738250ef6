//! Corpus loading, train/val/test splits and model-ready samples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    extract_windows, ConditionLabels, Direction, Lanes, MotionWindow, SessionLog, Task, Vision,
    FRAMES_PER_SECOND,
};
use crate::error::{Error, Result};
use crate::model::{EncodedGraph, Matrix};
use crate::scenegraph::{build_temporal_graph, TemporalHeteroGraph};
use crate::synthdata::{read_session, sample_gaze_cloud, Manifest, MANIFEST_SCHEMA};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCorpus {
    pub sessions: Vec<SessionLog>,
    /// (file, reason) for every session that failed to load or validate.
    pub skipped: Vec<(String, String)>,
}

/// Loads every session listed in the manifest, resampled to 2 fps. Invalid
/// sessions are skipped and reported; an unknown manifest schema is fatal.
pub fn load_corpus(manifest_path: &Path) -> Result<LoadedCorpus> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::Schema(format!(
            "{}: manifest schema `{}`, expected `{MANIFEST_SCHEMA}`",
            manifest_path.display(),
            manifest.schema
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    let mut skipped = Vec::new();
    for entry in &manifest.sessions {
        let loaded = read_session(&base.join(&entry.file))
            .and_then(|s| s.resample(FRAMES_PER_SECOND))
            .and_then(|s| s.validate().map(|_| s));
        match loaded {
            Ok(s) => sessions.push(s),
            Err(e) => {
                log::warn!("skipping session {}: {e}", entry.file.display());
                skipped.push((entry.file.display().to_string(), e.to_string()));
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} of {} sessions skipped", skipped.len(), manifest.sessions.len());
    }
    Ok(LoadedCorpus { sessions, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Random,
    User,
    Scene,
    Task,
    Vision,
    DiverseTask,
    DiverseVision,
}

impl SplitKind {
    pub const ALL: [SplitKind; 7] = [
        SplitKind::Random,
        SplitKind::User,
        SplitKind::Scene,
        SplitKind::Task,
        SplitKind::Vision,
        SplitKind::DiverseTask,
        SplitKind::DiverseVision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Random => "random",
            SplitKind::User => "user",
            SplitKind::Scene => "scene",
            SplitKind::Task => "task",
            SplitKind::Vision => "vision",
            SplitKind::DiverseTask => "diverse-task",
            SplitKind::DiverseVision => "diverse-vision",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Users held out by the user split.
    pub held_out_users: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(kind: SplitKind, seed: u64) -> Self {
        Self {
            kind,
            train: 0.70,
            val: 0.15,
            test: 0.15,
            held_out_users: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Session ids per partition, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub kind: SplitKind,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn is_disjoint(&self) -> bool {
        let a: BTreeSet<_> = self.train.iter().collect();
        let b: BTreeSet<_> = self.val.iter().collect();
        let c: BTreeSet<_> = self.test.iter().collect();
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Id and labels of one session; all a split needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionMeta {
    pub id: String,
    pub labels: ConditionLabels,
}

impl From<&SessionLog> for SessionMeta {
    fn from(s: &SessionLog) -> Self {
        Self { id: s.id.clone(), labels: s.labels }
    }
}

fn floor_share(n: usize, ratio: f64) -> usize {
    // tolerate ratios like 0.15 whose products land a hair below an integer
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Shuffles within (vision, task) strata and interleaves them, so every
/// prefix is roughly balanced across conditions.
fn stratified_order(pool: &[&SessionMeta], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut strata: BTreeMap<(Vision, Task), Vec<String>> = BTreeMap::new();
    let mut sorted: Vec<&&SessionMeta> = pool.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for m in sorted {
        strata.entry((m.labels.vision, m.labels.task)).or_default().push(m.id.clone());
    }
    for ids in strata.values_mut() {
        ids.shuffle(rng);
    }
    let mut out = Vec::with_capacity(pool.len());
    let longest = strata.values().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for ids in strata.values() {
            if let Some(id) = ids.get(i) {
                out.push(id.clone());
            }
        }
    }
    out
}

/// Splits `pool` into (train, val, test) with `floor` shares for val and
/// test and the remainder in train.
fn ratio_split(pool: &[&SessionMeta], spec: &SplitSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>, Vec<String>) {
    let order = stratified_order(pool, rng);
    let n_test = floor_share(order.len(), spec.test);
    let n_val = floor_share(order.len(), spec.val);
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    (train, val, test)
}

/// Splits a pool that excludes the held-out test population into train and
/// val, keeping the train:val proportion of the spec.
fn train_val(pool: &[&SessionMeta], spec: &SplitSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let order = stratified_order(pool, rng);
    let n_val = floor_share(order.len(), spec.val / (spec.train + spec.val));
    (order[n_val..].to_vec(), order[..n_val].to_vec())
}

pub fn make_split(corpus: &[SessionMeta], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let ids: BTreeSet<&str> = corpus.iter().map(|m| m.id.as_str()).collect();
    if ids.len() != corpus.len() {
        return Err(Error::invalid("corpus contains duplicate session ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let partition = |pred: &dyn Fn(&ConditionLabels) -> bool| -> (Vec<&SessionMeta>, Vec<&SessionMeta>) {
        corpus.iter().partition(|m| pred(&m.labels))
    };
    let ids_of = |ms: &[&SessionMeta]| ms.iter().map(|m| m.id.clone()).collect::<Vec<_>>();

    let (train, val, test) = match spec.kind {
        SplitKind::Random => {
            let all: Vec<&SessionMeta> = corpus.iter().collect();
            ratio_split(&all, spec, &mut rng)
        }
        SplitKind::User => {
            let users: BTreeSet<u32> = corpus.iter().map(|m| m.labels.user_id).collect();
            if spec.held_out_users > users.len() {
                return Err(Error::invalid(format!(
                    "cannot hold out {} users from a population of {}",
                    spec.held_out_users,
                    users.len()
                )));
            }
            let mut users: Vec<u32> = users.into_iter().collect();
            users.shuffle(&mut rng);
            let held: BTreeSet<u32> = users[..spec.held_out_users].iter().copied().collect();
            let (test, pool) = partition(&|l| held.contains(&l.user_id));
            let (train, val) = train_val(&pool, spec, &mut rng);
            (train, val, ids_of(&test))
        }
        SplitKind::Scene | SplitKind::Task => {
            let held = |l: &ConditionLabels| match spec.kind {
                SplitKind::Scene => l.lanes == Lanes::Two,
                _ => l.direction == Direction::Return,
            };
            let (test, pool) = partition(&held);
            let (train, val) = train_val(&pool, spec, &mut rng);
            (train, val, ids_of(&test))
        }
        SplitKind::Vision | SplitKind::DiverseTask | SplitKind::DiverseVision => {
            let trainable = |l: &ConditionLabels| match spec.kind {
                SplitKind::Vision => l.vision == Vision::Normal && l.task == Task::Simple,
                SplitKind::DiverseTask => l.vision == Vision::Normal,
                _ => l.task == Task::Simple,
            };
            let (pool, rest) = partition(&trainable);
            let (train, val, mut test) = ratio_split(&pool, spec, &mut rng);
            test.extend(ids_of(&rest));
            (train, val, test)
        }
    };
    let sorted = |mut v: Vec<String>| {
        v.sort();
        v
    };
    Ok(Split {
        kind: spec.kind,
        train: sorted(train),
        val: sorted(val),
        test: sorted(test),
    })
}

/// One model-ready window with its context.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `session#t0`, unique within a corpus.
    pub key: String,
    pub session_id: String,
    pub labels: ConditionLabels,
    pub window: MotionWindow,
    /// 6×2 observed positions.
    pub past: Matrix,
    /// 10×2 future positions.
    pub future: Matrix,
    pub cloud: Matrix,
    pub graph: EncodedGraph,
}

fn positions(ps: &[crate::domain::Position2]) -> Matrix {
    let rows: Vec<[f64; 2]> = ps.iter().map(|p| [p.x, p.y]).collect();
    Matrix::from_rows(&rows)
}

pub fn window_key(session_id: &str, t0: usize) -> String {
    format!("{session_id}#{t0:04}")
}

/// The temporal graph behind every window of a session, keyed like
/// [`Sample::key`].
pub fn window_graphs(session: &SessionLog, stride: usize) -> Result<Vec<(String, TemporalHeteroGraph)>> {
    extract_windows(session, stride)
        .iter()
        .map(|w| Ok((window_key(&session.id, w.t0), build_temporal_graph(session, w.t0)?)))
        .collect()
}

/// Windows of an already-resampled session with the gaze cloud at the last
/// observed frame and the graphs of the six observed frames.
pub fn build_samples(session: &SessionLog, stride: usize, cloud_points: usize) -> Result<Vec<Sample>> {
    assemble(session, stride, cloud_points, |_, t0| build_temporal_graph(session, t0))
}

/// As [`build_samples`], with graphs looked up in precomputed records.
pub fn build_samples_from(
    session: &SessionLog,
    stride: usize,
    cloud_points: usize,
    graphs: &BTreeMap<String, TemporalHeteroGraph>,
) -> Result<Vec<Sample>> {
    assemble(session, stride, cloud_points, |key, _| {
        graphs
            .get(key)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no graph record for window {key}")))
    })
}

fn assemble(
    session: &SessionLog,
    stride: usize,
    cloud_points: usize,
    graph_of: impl Fn(&str, usize) -> Result<TemporalHeteroGraph>,
) -> Result<Vec<Sample>> {
    extract_windows(session, stride)
        .into_iter()
        .map(|w| {
            let key = window_key(&session.id, w.t0);
            let graph = graph_of(&key, w.t0)?;
            Ok(Sample {
                session_id: session.id.clone(),
                labels: session.labels,
                past: positions(&w.past),
                future: positions(&w.future),
                cloud: sample_gaze_cloud(&session.frames[w.t0], &session.layout, cloud_points)?,
                graph: EncodedGraph::from_temporal(&graph)?,
                window: w,
                key,
            })
        })
        .collect()
}

/// Samples for the listed session ids, in id order.
pub fn samples_for(sessions: &[SessionLog], ids: &[String], stride: usize, cloud_points: usize) -> Result<Vec<Sample>> {
    let by_id: BTreeMap<&str, &SessionLog> = sessions.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = Vec::new();
    let mut ids: Vec<&String> = ids.iter().collect();
    ids.sort();
    for id in ids {
        let s = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("split names unknown session {id}")))?;
        out.extend(build_samples(s, stride, cloud_points)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, write_corpus, DEFAULT_SCENARIOS};

    fn meta(n_users: u32, scenarios: usize) -> Vec<SessionMeta> {
        let mut out = Vec::new();
        for u in 0..n_users {
            for k in 0..scenarios {
                let kind = DEFAULT_SCENARIOS[k % DEFAULT_SCENARIOS.len()];
                out.push(SessionMeta {
                    id: format!("u{u:03}-s{k}"),
                    labels: ConditionLabels {
                        vision: if (u as usize + k) % 2 == 1 { Vision::Low } else { Vision::Normal },
                        task: kind.task,
                        lanes: kind.lanes,
                        user_id: u,
                        scene_id: k as u32,
                        direction: kind.direction,
                    },
                });
            }
        }
        out
    }

    #[test]
    fn random_split_counts() {
        // 20 sessions: floor(3.0) val, floor(3.0) test, the rest train
        let s = make_split(&meta(10, 2), &SplitSpec::new(SplitKind::Random, 1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        assert!(s.is_disjoint());
    }

    #[test]
    fn user_split_holds_out_ten_of_forty() {
        let corpus = meta(40, 6);
        let s = make_split(&corpus, &SplitSpec::new(SplitKind::User, 3)).unwrap();
        let user_of = |id: &String| corpus.iter().find(|m| &m.id == id).unwrap().labels.user_id;
        let test: BTreeSet<u32> = s.test.iter().map(user_of).collect();
        let rest: BTreeSet<u32> = s.train.iter().chain(&s.val).map(user_of).collect();
        assert_eq!(test.len(), 10);
        assert_eq!(rest.len(), 30);
        assert!(test.is_disjoint(&rest));
        let mut too_many = SplitSpec::new(SplitKind::User, 3);
        too_many.held_out_users = 41;
        assert!(make_split(&corpus, &too_many).is_err());
    }

    #[test]
    fn condition_splits_keep_held_out_conditions_in_test() {
        let corpus = meta(12, 6);
        let labels = |id: &String| corpus.iter().find(|m| &m.id == id).unwrap().labels;
        for kind in SplitKind::ALL {
            let s = make_split(&corpus, &SplitSpec::new(kind, 5)).unwrap();
            assert!(s.is_disjoint(), "{kind}");
            assert_eq!(s.len(), corpus.len(), "{kind}");
            for id in s.train.iter().chain(&s.val) {
                let l = labels(id);
                match kind {
                    SplitKind::Scene => assert_eq!(l.lanes, Lanes::One),
                    SplitKind::Task => assert_eq!(l.direction, Direction::Cross),
                    SplitKind::Vision => assert!(l.vision == Vision::Normal && l.task == Task::Simple),
                    SplitKind::DiverseTask => assert_eq!(l.vision, Vision::Normal),
                    SplitKind::DiverseVision => assert_eq!(l.task, Task::Simple),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let corpus = meta(8, 6);
        let spec = SplitSpec::new(SplitKind::Random, 11);
        assert_eq!(make_split(&corpus, &spec).unwrap(), make_split(&corpus, &spec).unwrap());
        let other = SplitSpec::new(SplitKind::Random, 12);
        assert_ne!(make_split(&corpus, &spec).unwrap(), make_split(&corpus, &other).unwrap());
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("diverse_task".parse::<SplitKind>().unwrap(), SplitKind::DiverseTask);
        assert_eq!("diverse-vision".parse::<SplitKind>().unwrap(), SplitKind::DiverseVision);
        assert!("window".parse::<SplitKind>().is_err());
        let mut bad = SplitSpec::new(SplitKind::Random, 0);
        bad.test = 0.3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn load_corpus_skip_policy() {
        let dir = tempfile::tempdir().unwrap();
        let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[..5], 2).unwrap();
        let manifest = write_corpus(dir.path(), &sessions[..4]).unwrap();
        assert_eq!(load_corpus(&manifest).unwrap().sessions.len(), 4);

        let manifest = write_corpus(dir.path(), &sessions).unwrap();
        let victim = dir.path().join("sessions").join(format!("{}.session", sessions[2].id));
        std::fs::write(&victim, "divr-session/1\nnot json\n").unwrap();
        let loaded = load_corpus(&manifest).unwrap();
        assert_eq!(loaded.sessions.len(), 4);
        assert_eq!(loaded.skipped.len(), 1);

        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, format!("{{\"schema\":\"{MANIFEST_SCHEMA}\",\"sessions\":[]}}")).unwrap();
        assert!(load_corpus(&empty).unwrap().sessions.is_empty());
        std::fs::write(&empty, "{\"schema\":\"divr-manifest/7\",\"sessions\":[]}").unwrap();
        assert!(matches!(load_corpus(&empty), Err(Error::Schema(_))));
    }

    #[test]
    fn samples_carry_all_modalities() {
        let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[1..2], 4).unwrap();
        let samples = build_samples(&sessions[0], 1, 256).unwrap();
        assert!(!samples.is_empty());
        let s = &samples[0];
        assert_eq!(s.past.shape(), (6, 2));
        assert_eq!(s.future.shape(), (10, 2));
        assert_eq!(s.cloud.shape(), (256, 4));
        assert_eq!(s.graph.frames.len(), 6);
        assert_eq!(s.past.row(5), &[s.window.last_observed().x, s.window.last_observed().y]);
    }

    #[test]
    fn precomputed_graphs_give_identical_samples() {
        let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[3..4], 8).unwrap();
        let s = &sessions[0];
        let text = crate::scenegraph::write_graph_records(&window_graphs(s, 2).unwrap());
        let graphs: BTreeMap<_, _> = crate::scenegraph::read_graph_records(&text).unwrap().into_iter().collect();
        assert_eq!(build_samples_from(s, 2, 32, &graphs).unwrap(), build_samples(s, 2, 32).unwrap());
        assert!(build_samples_from(s, 2, 32, &BTreeMap::new()).is_err());
    }
}
