//! Command-line front end: resolves flags, the TOML config file and
//! defaults, then runs one pipeline stage or all of them.
//!
//! Everything lands under one output root:
//!
//! ```text
//! corpus/manifest.json, corpus/sessions/*.session   synth
//! graphs/<session>.graphs                           graphs
//! splits/<split>.json                               split
//! runs/<variant>-<split>/{checkpoint.ckpt,metrics.jsonl}   train
//! reports/<variant>-<split>[-no-<branch>].{json,txt}       eval, ablate
//! plots/<variant>-<split>/*.svg                     plot
//! reports/summary.txt                               report
//! manifests/<command>[-<variant>-<split>].json     every command
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::SessionLog;
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::ingest::{build_samples_from, load_corpus, make_split, window_graphs, Sample, SessionMeta, Split, SplitKind, SplitSpec};
use crate::model::{Branch, DivrModel, ModelConfig, Preset, Variant};
use crate::scenegraph::{read_graph_records, write_graph_records};
use crate::synthdata::{generate_corpus, write_corpus, DEFAULT_CLOUD_POINTS, DEFAULT_SCENARIOS};
use crate::training::{self, RunFiles, TrainConfig};

pub const OUT_ENV: &str = "DIVR_OUT";
pub const DEFAULT_OUT: &str = "divr-out";

#[derive(Debug, Parser)]
#[command(name = "divr", version, about = "Synthetic VR road-crossing trajectory prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML file with per-command sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (default: $DIVR_OUT, else ./divr-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for synthesis, splits, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model size: full or tiny.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// divr-het, divr-hom, motion-gaze or mlp.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// random, user, scene, task, vision, diverse-task or diverse-vision.
    #[arg(long, global = true)]
    pub split: Option<SplitKind>,
    /// Branch to zero out for `ablate`; all branches of the variant if unset.
    #[arg(long, global = true)]
    pub ablate: Option<Branch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic session corpus.
    Synth,
    /// Build the scene graph of every window.
    Graphs,
    /// Partition sessions into train/val/test.
    Split,
    /// Train one variant on one split.
    Train,
    /// Score a trained checkpoint on its test split.
    Eval,
    /// Score with a branch input replaced by zeros.
    Ablate,
    /// Draw test-window trajectories as SVG.
    Plot,
    /// Tabulate every report found.
    Report,
    /// Run every stage in order.
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Graphs => "graphs",
            Command::Split => "split",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Plot => "plot",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub users: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { users: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub stride: usize,
    pub cloud_points: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self { stride: 1, cloud_points: DEFAULT_CLOUD_POINTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub kind: SplitKind,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub held_out_users: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::new(SplitKind::Random, 0);
        Self { kind: s.kind, train: s.train, val: s.val, test: s.test, held_out_users: s.held_out_users }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: Preset::Tiny, variant: Variant::DivrHet }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub max_plots: usize,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { max_plots: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Variants trained and evaluated by `pipeline`; empty means the
    /// configured variant only.
    pub variants: Vec<Variant>,
}

/// The config file. Every field is optional; `[train] seed` is replaced by
/// the run seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub synth: SynthSection,
    pub windows: WindowSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub plot: PlotSection,
    pub pipeline: PipelineSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

/// Effective settings after applying flags over the file over defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(skip)]
    pub out: PathBuf,
    pub seed: u64,
    pub synth: SynthSection,
    pub windows: WindowSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub plot: PlotSection,
    pub pipeline: PipelineSection,
    #[serde(skip)]
    pub ablate: Option<Branch>,
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let out = cli
            .out
            .clone()
            .or(file.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let seed = cli.seed.or(file.seed).unwrap_or(0);
        let mut model = file.model;
        if let Some(p) = cli.preset {
            model.preset = p;
        }
        if let Some(v) = cli.variant {
            model.variant = v;
        }
        let mut split = file.split;
        if let Some(k) = cli.split {
            split.kind = k;
        }
        let mut train = file.train;
        train.seed = seed;
        train.validate()?;
        if file.windows.stride == 0 || file.windows.cloud_points == 0 {
            return Err(Error::invalid("windows.stride and windows.cloud_points must be positive"));
        }
        let cfg = Self {
            out,
            seed,
            synth: file.synth,
            windows: file.windows,
            split,
            model,
            train,
            plot: file.plot,
            pipeline: file.pipeline,
            ablate: cli.ablate,
        };
        cfg.split_spec().validate()?;
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            kind: self.split.kind,
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            held_out_users: self.split.held_out_users,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON of the effective settings.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    fn with_variant(&self, v: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = v;
        c
    }
}

/// Paths of every artifact under the output root.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn corpus_manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }
    pub fn graphs_dir(&self) -> PathBuf {
        self.root.join("graphs")
    }
    pub fn graph_file(&self, session_id: &str) -> PathBuf {
        self.graphs_dir().join(format!("{session_id}.graphs"))
    }
    pub fn split_file(&self, kind: SplitKind) -> PathBuf {
        self.root.join("splits").join(format!("{kind}.json"))
    }
    fn run_name(v: Variant, kind: SplitKind) -> String {
        format!("{v}-{kind}")
    }
    pub fn run_dir(&self, v: Variant, kind: SplitKind) -> PathBuf {
        self.root.join("runs").join(Self::run_name(v, kind))
    }
    pub fn checkpoint(&self, v: Variant, kind: SplitKind) -> PathBuf {
        self.run_dir(v, kind).join("checkpoint.ckpt")
    }
    pub fn metrics(&self, v: Variant, kind: SplitKind) -> PathBuf {
        self.run_dir(v, kind).join("metrics.jsonl")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report(&self, v: Variant, kind: SplitKind, ablated: Option<Branch>, ext: &str) -> PathBuf {
        let suffix = ablated.map(|b| format!("-no-{}", b.name())).unwrap_or_default();
        self.reports_dir().join(format!("{}{suffix}.{ext}", Self::run_name(v, kind)))
    }
    pub fn summary(&self) -> PathBuf {
        self.reports_dir().join("summary.txt")
    }
    pub fn plots_dir(&self, v: Variant, kind: SplitKind) -> PathBuf {
        self.root.join("plots").join(Self::run_name(v, kind))
    }
    /// Per-run commands get one manifest per variant and split.
    pub fn manifest(&self, cmd: Command, v: Variant, kind: SplitKind) -> PathBuf {
        let name = match cmd {
            Command::Train | Command::Eval | Command::Ablate | Command::Plot => {
                format!("{}-{}", cmd.name(), Self::run_name(v, kind))
            }
            _ => cmd.name().to_string(),
        };
        self.root.join("manifests").join(format!("{name}.json"))
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    version: &'static str,
    config_hash: String,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { what, path: path.to_path_buf(), producer })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Runner {
    cfg: RunConfig,
    paths: OutputLayout,
}

impl Runner {
    fn new(cfg: RunConfig) -> Self {
        let paths = OutputLayout { root: cfg.out.clone() };
        Self { cfg, paths }
    }

    fn variant(&self) -> Variant {
        self.cfg.model.variant
    }

    fn kind(&self) -> SplitKind {
        self.cfg.split.kind
    }

    fn record(&self, cmd: Command, outputs: &[PathBuf]) -> Result<()> {
        let mut rel: Vec<String> = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.paths.root).unwrap_or(p).display().to_string())
            .collect();
        rel.sort();
        let manifest = RunManifest {
            command: cmd.name(),
            version: env!("CARGO_PKG_VERSION"),
            config_hash: self.cfg.hash()?,
            seed: self.cfg.seed,
            config: &self.cfg,
            outputs: rel,
        };
        write_file(&self.paths.manifest(cmd, self.variant(), self.kind()), serde_json::to_string_pretty(&manifest)? + "\n")
    }

    fn sessions(&self) -> Result<Vec<SessionLog>> {
        let manifest = self.paths.corpus_manifest();
        require(&manifest, "corpus manifest", "synth")?;
        let corpus = load_corpus(&manifest)?;
        if corpus.sessions.is_empty() {
            return Err(Error::invalid(format!("{} lists no loadable sessions", manifest.display())));
        }
        Ok(corpus.sessions)
    }

    fn split(&self) -> Result<Split> {
        let path = self.paths.split_file(self.kind());
        require(&path, "split file", "split")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn samples(&self, sessions: &[SessionLog], ids: &[String]) -> Result<Vec<Sample>> {
        let by_id: BTreeMap<&str, &SessionLog> = sessions.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut ids: Vec<&String> = ids.iter().collect();
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            let session = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("split names session {id}, absent from the corpus")))?;
            let path = self.paths.graph_file(id);
            require(&path, "graph file", "graphs")?;
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let graphs: BTreeMap<_, _> = read_graph_records(&text)?.into_iter().collect();
            out.extend(build_samples_from(session, self.cfg.windows.stride, self.cfg.windows.cloud_points, &graphs)?);
        }
        Ok(out)
    }

    fn test_samples(&self) -> Result<Vec<Sample>> {
        let sessions = self.sessions()?;
        let split = self.split()?;
        let samples = self.samples(&sessions, &split.test)?;
        if samples.is_empty() {
            return Err(Error::invalid(format!("test partition of the {} split has no windows", self.kind())));
        }
        Ok(samples)
    }

    fn model(&self) -> Result<DivrModel> {
        let path = self.paths.checkpoint(self.variant(), self.kind());
        require(&path, "checkpoint", "train")?;
        let model = DivrModel::load(&path)?;
        if model.variant != self.variant() {
            return Err(Error::invalid(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                model.variant,
                self.variant()
            )));
        }
        Ok(model)
    }

    fn synth(&self) -> Result<()> {
        let sessions = generate_corpus(self.cfg.synth.users, &DEFAULT_SCENARIOS, self.cfg.seed)?;
        let dir = self.paths.corpus_dir();
        reset_dir(&dir)?;
        let manifest = write_corpus(&dir, &sessions)?;
        log::info!("wrote {} sessions to {}", sessions.len(), dir.display());
        self.record(Command::Synth, &[manifest])
    }

    fn graphs(&self) -> Result<()> {
        let sessions = self.sessions()?;
        let dir = self.paths.graphs_dir();
        reset_dir(&dir)?;
        let mut outputs = Vec::with_capacity(sessions.len());
        for s in &sessions {
            let path = self.paths.graph_file(&s.id);
            write_file(&path, write_graph_records(&window_graphs(s, self.cfg.windows.stride)?))?;
            outputs.push(path);
        }
        self.record(Command::Graphs, &outputs)
    }

    fn split_cmd(&self) -> Result<()> {
        let sessions = self.sessions()?;
        let meta: Vec<SessionMeta> = sessions.iter().map(SessionMeta::from).collect();
        let split = make_split(&meta, &self.cfg.split_spec())?;
        log::info!(
            "{} split: {}/{}/{} sessions",
            split.kind,
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        let path = self.paths.split_file(self.kind());
        write_file(&path, serde_json::to_string_pretty(&split)? + "\n")?;
        self.record(Command::Split, &[path])
    }

    fn train(&self) -> Result<()> {
        let sessions = self.sessions()?;
        let split = self.split()?;
        let train_set = self.samples(&sessions, &split.train)?;
        let val_set = self.samples(&sessions, &split.val)?;
        log::info!("training {} on {} windows, validating on {}", self.variant(), train_set.len(), val_set.len());
        let model = DivrModel::new(ModelConfig::from_preset(self.cfg.model.preset), self.variant(), self.cfg.seed)?;
        let dir = self.paths.run_dir(self.variant(), self.kind());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files = RunFiles {
            checkpoint: self.paths.checkpoint(self.variant(), self.kind()),
            metrics: self.paths.metrics(self.variant(), self.kind()),
        };
        let outcome = training::train(model, &train_set, &val_set, &self.cfg.train, Some(&files))?;
        log::info!(
            "{} steps, best epoch {:?}, {} clipped steps",
            outcome.steps,
            outcome.best_epoch,
            outcome.clipped_steps
        );
        if !files.metrics.exists() {
            write_file(&files.metrics, "")?;
        }
        self.record(Command::Train, &[files.checkpoint, files.metrics])
    }

    fn write_report(&self, report: &MetricReport, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let json = self.paths.report(self.variant(), self.kind(), report.ablated, "json");
        let txt = self.paths.report(self.variant(), self.kind(), report.ablated, "txt");
        write_file(&json, serde_json::to_string_pretty(report)? + "\n")?;
        write_file(&txt, eval::report_tables(std::slice::from_ref(report)))?;
        outputs.push(json);
        outputs.push(txt);
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        let model = self.model()?;
        let report = eval::evaluate(&model, &self.test_samples()?, self.kind())?;
        let mut outputs = Vec::new();
        self.write_report(&report, &mut outputs)?;
        self.record(Command::Eval, &outputs)
    }

    fn ablate(&self) -> Result<()> {
        let model = self.model()?;
        let branches: Vec<Branch> = match self.cfg.ablate {
            Some(b) => vec![b],
            None => [Branch::Graph, Branch::Gaze].into_iter().filter(|b| model.variant.uses(*b)).collect(),
        };
        if branches.is_empty() {
            return Err(Error::invalid(format!("variant {} has no branch to ablate", model.variant)));
        }
        let samples = self.test_samples()?;
        let mut outputs = Vec::new();
        for b in branches {
            let report = eval::ablate(&model, b, &samples, self.kind())?;
            self.write_report(&report, &mut outputs)?;
        }
        self.record(Command::Ablate, &outputs)
    }

    fn plot(&self) -> Result<()> {
        let model = self.model()?;
        let mut samples = self.test_samples()?;
        samples.truncate(self.cfg.plot.max_plots);
        let predictions = samples
            .iter()
            .map(|s| model.predict(&training::model_input(&model, s)).map(|p| p.future))
            .collect::<Result<Vec<_>>>()?;
        let dir = self.paths.plots_dir(self.variant(), self.kind());
        reset_dir(&dir)?;
        let files = eval::render_trajectories(&samples, &predictions, &dir)?;
        self.record(Command::Plot, &files)
    }

    fn report(&self) -> Result<()> {
        let dir = self.paths.reports_dir();
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(_) => Vec::new(),
        };
        if files.is_empty() {
            return Err(Error::MissingArtifact { what: "evaluation report", path: dir, producer: "eval" });
        }
        files.sort();
        let mut by_split: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
        for f in &files {
            let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let r: MetricReport = serde_json::from_str(&text)?;
            by_split.entry(r.split.to_string()).or_default().push(r);
        }
        let mut out = String::new();
        for (split, reports) in &by_split {
            out.push_str(&format!("split: {split}\n"));
            out.push_str(&eval::report_tables(reports));
            out.push_str(&improvements(reports));
            out.push('\n');
        }
        let path = self.paths.summary();
        write_file(&path, &out)?;
        print!("{out}");
        self.record(Command::Report, &[path])
    }

    fn pipeline(&self) -> Result<()> {
        self.synth()?;
        self.graphs()?;
        self.split_cmd()?;
        let variants = if self.cfg.pipeline.variants.is_empty() {
            vec![self.variant()]
        } else {
            self.cfg.pipeline.variants.clone()
        };
        for v in variants {
            let r = Runner::new(self.cfg.with_variant(v));
            r.train()?;
            r.eval()?;
            if v.uses(Branch::Graph) || v.uses(Branch::Gaze) {
                r.ablate()?;
            }
            r.plot()?;
        }
        self.report()?;
        self.record(Command::Pipeline, &[self.paths.summary()])
    }

    fn run(&self, cmd: Command) -> Result<()> {
        match cmd {
            Command::Synth => self.synth(),
            Command::Graphs => self.graphs(),
            Command::Split => self.split_cmd(),
            Command::Train => self.train(),
            Command::Eval => self.eval(),
            Command::Ablate => self.ablate(),
            Command::Plot => self.plot(),
            Command::Report => self.report(),
            Command::Pipeline => self.pipeline(),
        }
    }
}

/// Percent ADE/FDE change of every unablated variant relative to the MLP
/// baseline and of every ablation relative to its full model, on the `all`
/// cell.
fn improvements(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let full = |variant: &str| reports.iter().find(|r| r.variant == variant && r.ablated.is_none());
    let all = |r: &MetricReport| r.cell("all").map(|c| (c.ade, c.fde));
    let base = full(Variant::Mlp.name()).and_then(all);
    for r in reports {
        let Some((ade, fde)) = all(r) else { continue };
        let (reference, what) = match r.ablated {
            None if r.variant != Variant::Mlp.name() => (base, "vs mlp"),
            Some(_) => (full(&r.variant).and_then(all), "vs full model"),
            None => continue,
        };
        let Some((ra, rf)) = reference else { continue };
        if let (Ok(da), Ok(df)) = (eval::percent_improvement(ra, ade), eval::percent_improvement(rf, fde)) {
            out.push_str(&format!("{} {what}: ADE {da:+.1}%, FDE {df:+.1}%\n", r.label()));
        }
    }
    out
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Runner::new(cfg).run(cli.command)
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    run(&cli)
}
