//! Displacement metrics, per-condition reports, input ablation, report
//! tables and SVG trajectory plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ConditionLabels, Task, Vision, TRACKED_EXTENTS};
use crate::error::{Error, Result};
use crate::ingest::{Sample, SplitKind};
use crate::layout::SceneLayout;
use crate::model::{Branch, DivrModel, Matrix, ModelInput};
use crate::training::model_input;

fn check_pair(pred: &Matrix, gt: &Matrix) -> Result<()> {
    if pred.shape() != gt.shape() || pred.cols != 2 {
        return Err(Error::Shape { op: "trajectory metric", left: pred.shape(), right: gt.shape() });
    }
    if pred.rows == 0 {
        return Err(Error::invalid("empty trajectory"));
    }
    Ok(())
}

fn step_distance(pred: &Matrix, gt: &Matrix, r: usize) -> f64 {
    let (a, b) = (pred.row(r), gt.row(r));
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean per-step Euclidean distance between two n×2 trajectories.
pub fn ade(pred: &Matrix, gt: &Matrix) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok((0..pred.rows).map(|r| step_distance(pred, gt, r)).sum::<f64>() / pred.rows as f64)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &Matrix, gt: &Matrix) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(step_distance(pred, gt, pred.rows - 1))
}

/// Named subsets of the test windows a report breaks down by.
pub const CELLS: [&str; 4] = ["all", "NV+ST", "CT", "LV"];

fn cell_contains(cell: &str, l: &ConditionLabels) -> bool {
    match cell {
        "all" => true,
        "NV+ST" => l.vision == Vision::Normal && l.task == Task::Simple,
        "CT" => l.task == Task::Complex,
        "LV" => l.vision == Vision::Low,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub ade: f64,
    pub fde: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub split: SplitKind,
    pub ablated: Option<Branch>,
    /// Only cells with at least one window.
    pub cells: BTreeMap<String, MetricCell>,
}

impl MetricReport {
    pub fn label(&self) -> String {
        match self.ablated {
            Some(b) => format!("{} -{}", self.variant, b.name()),
            None => self.variant.clone(),
        }
    }

    pub fn cell(&self, name: &str) -> Option<&MetricCell> {
        self.cells.get(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub key: String,
    pub labels: ConditionLabels,
    pub ade: f64,
    pub fde: f64,
}

/// Inputs for `s` with `ablate`'s raw input replaced by zeros.
fn ablated_inputs(s: &Sample, ablate: Option<Branch>) -> (Option<Matrix>, Option<crate::model::EncodedGraph>) {
    match ablate {
        Some(Branch::Gaze) => (Some(Matrix::zeros(s.cloud.rows, s.cloud.cols)), None),
        Some(Branch::Graph) => (None, Some(s.graph.zeroed())),
        None => (None, None),
    }
}

/// Per-window scores sorted by key, so any reduction over them is
/// independent of the input order.
pub fn score_windows(model: &DivrModel, samples: &[Sample], ablate: Option<Branch>) -> Result<Vec<WindowScore>> {
    if let Some(b) = ablate {
        if !model.variant.uses(b) {
            return Err(Error::invalid(format!("variant {} has no {} branch to ablate", model.variant, b.name())));
        }
    }
    let mut scores: Vec<WindowScore> = samples
        .par_iter()
        .map(|s| {
            let (cloud, graph) = ablated_inputs(s, ablate);
            let base = model_input(model, s);
            let input = ModelInput {
                past: base.past,
                cloud: cloud.as_ref().or(base.cloud),
                graph: graph.as_ref().or(base.graph),
            };
            let p = model.predict(&input)?;
            Ok(WindowScore {
                key: s.key.clone(),
                labels: s.labels,
                ade: ade(&p.future, &s.future)?,
                fde: fde(&p.future, &s.future)?,
            })
        })
        .collect::<Result<_>>()?;
    scores.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(scores)
}

pub fn aggregate(variant: &str, split: SplitKind, ablated: Option<Branch>, scores: &[WindowScore]) -> Result<MetricReport> {
    if scores.is_empty() {
        return Err(Error::invalid("test split has no windows"));
    }
    let mut cells = BTreeMap::new();
    for name in CELLS {
        let members: Vec<&WindowScore> = scores.iter().filter(|s| cell_contains(name, &s.labels)).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        cells.insert(
            name.to_string(),
            MetricCell {
                ade: members.iter().map(|s| s.ade).sum::<f64>() / n,
                fde: members.iter().map(|s| s.fde).sum::<f64>() / n,
                count: members.len(),
            },
        );
    }
    Ok(MetricReport { variant: variant.to_string(), split, ablated, cells })
}

pub fn evaluate(model: &DivrModel, samples: &[Sample], split: SplitKind) -> Result<MetricReport> {
    let scores = score_windows(model, samples, None)?;
    aggregate(model.variant.name(), split, None, &scores)
}

pub fn ablate(model: &DivrModel, branch: Branch, samples: &[Sample], split: SplitKind) -> Result<MetricReport> {
    let scores = score_windows(model, samples, Some(branch))?;
    aggregate(model.variant.name(), split, Some(branch), &scores)
}

/// `(base − new) / base × 100`, rounded to one decimal.
pub fn percent_improvement(base: f64, new: f64) -> Result<f64> {
    if !(base.is_finite() && new.is_finite()) || base == 0.0 {
        return Err(Error::invalid(format!("cannot compare {new} against base {base}")));
    }
    // + 0.0 folds a rounded -0.0 into 0.0
    Ok(((base - new) / base * 1000.0).round() / 10.0 + 0.0)
}

const TABLE_DECIMALS: usize = 4;

/// Plain-text table: one row per report, ADE and FDE per cell, the lowest
/// value of each column marked with `*`.
pub fn report_tables(reports: &[MetricReport]) -> String {
    let cells: Vec<&str> = CELLS
        .into_iter()
        .filter(|c| reports.iter().any(|r| r.cells.contains_key(*c)))
        .collect();
    let mut columns: Vec<Vec<Option<f64>>> = Vec::new();
    for c in &cells {
        columns.push(reports.iter().map(|r| r.cell(c).map(|m| m.ade)).collect());
        columns.push(reports.iter().map(|r| r.cell(c).map(|m| m.fde)).collect());
    }
    let minima: Vec<Option<f64>> = columns
        .iter()
        .map(|col| col.iter().flatten().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))))
        .collect();

    let label_w = reports.iter().map(|r| r.label().len()).max().unwrap_or(0).max("model".len());
    let col_w = TABLE_DECIMALS + 4;
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "model");
    for c in &cells {
        for m in ["ADE", "FDE"] {
            let _ = write!(out, " | {:>col_w$}", format!("{c} {m}"));
        }
    }
    out.push('\n');
    for (i, r) in reports.iter().enumerate() {
        let _ = write!(out, "{:<label_w$}", r.label());
        for (col, min) in columns.iter().zip(&minima) {
            let text = match col[i] {
                Some(v) => {
                    let star = if Some(v) == *min { "*" } else { "" };
                    format!("{v:.TABLE_DECIMALS$}{star}")
                }
                None => "-".to_string(),
            };
            let _ = write!(out, " | {text:>col_w$}");
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`report_tables`]: column headers and, per row, the label,
/// values and min flags.
pub type ParsedTable = (Vec<String>, Vec<(String, Vec<Option<(f64, bool)>>)>);

pub fn parse_report_table(text: &str) -> Result<ParsedTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse { line: 1, msg: "empty table".into() })?;
    let headers: Vec<String> = header.split(" | ").skip(1).map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut parts = line.split(" | ");
        let label = parts.next().unwrap_or_default().trim().to_string();
        let mut values = Vec::new();
        for p in parts {
            let p = p.trim();
            if p == "-" {
                values.push(None);
                continue;
            }
            let (num, flagged) = match p.strip_suffix('*') {
                Some(n) => (n, true),
                None => (p, false),
            };
            let v = num
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: i + 2, msg: format!("`{p}`: {e}") })?;
            values.push(Some((v, flagged)));
        }
        if values.len() != headers.len() {
            return Err(Error::Parse { line: i + 2, msg: format!("{} values for {} columns", values.len(), headers.len()) });
        }
        rows.push((label, values));
    }
    Ok((headers, rows))
}

/// SVG canvas pixels per meter.
const PX_PER_M: f64 = 60.0;
const MARGIN: f64 = 20.0;

fn to_px(x: f64, y: f64) -> (f64, f64) {
    // y up in the tracked space, down on the canvas
    (MARGIN + x * PX_PER_M, MARGIN + (TRACKED_EXTENTS.1 - y) * PX_PER_M)
}

fn polyline(out: &mut String, class: &str, color: &str, pts: impl Iterator<Item = (f64, f64)>) {
    let coords: Vec<String> = pts
        .map(|(x, y)| {
            let (px, py) = to_px(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"  <polyline class="{class}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
        coords.join(" ")
    );
}

fn rows(m: &Matrix) -> impl Iterator<Item = (f64, f64)> + '_ {
    (0..m.rows).map(|r| (m.get(r, 0), m.get(r, 1)))
}

/// One trajectory plot: layout outlines, then the red observed path, the
/// green last observation, the blue ground truth and the magenta
/// prediction.
pub fn render_svg(sample: &Sample, prediction: &Matrix, layout: &SceneLayout) -> String {
    let w = 2.0 * MARGIN + TRACKED_EXTENTS.0 * PX_PER_M;
    let h = 2.0 * MARGIN + TRACKED_EXTENTS.1 * PX_PER_M;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, "  <title>{}</title>", sample.key);
    let _ = writeln!(out, r#"  <g class="layout" fill="none" stroke="gray" stroke-width="1">"#);
    for region in &layout.regions {
        let (x0, y0) = to_px(region.min.x, region.max.y);
        let (x1, y1) = to_px(region.max.x, region.min.y);
        let _ = writeln!(
            out,
            r#"    <rect class="region" x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}"><title>{}</title></rect>"#,
            x1 - x0,
            y1 - y0,
            region.name
        );
    }
    out.push_str("  </g>\n");
    polyline(&mut out, "past", "red", rows(&sample.past));
    let last = sample.window.last_observed();
    let (cx, cy) = to_px(last.x, last.y);
    let _ = writeln!(out, r#"  <circle class="last-observed" cx="{cx:.2}" cy="{cy:.2}" r="5" fill="green"/>"#);
    polyline(&mut out, "ground-truth", "blue", rows(&sample.future));
    polyline(&mut out, "prediction", "magenta", rows(prediction));
    out.push_str("</svg>\n");
    out
}

/// Writes one SVG per sample into `dir`, named after the window key.
pub fn render_trajectories(samples: &[Sample], predictions: &[Matrix], dir: &Path) -> Result<Vec<PathBuf>> {
    if samples.len() != predictions.len() {
        return Err(Error::invalid(format!("{} samples but {} predictions", samples.len(), predictions.len())));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layouts: BTreeMap<usize, SceneLayout> = BTreeMap::new();
    let mut written = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(predictions) {
        if !p.is_finite() || p.cols != 2 {
            return Err(Error::invalid(format!("prediction for {} is not a finite n×2 trajectory", s.key)));
        }
        let layout = layouts
            .entry(s.labels.lanes.count())
            .or_insert_with(|| SceneLayout::road_crossing(s.labels.lanes));
        let path = dir.join(format!("{}.svg", s.key.replace('#', "_")));
        std::fs::write(&path, render_svg(s, p, layout)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_samples;
    use crate::model::{ModelConfig, Variant};
    use crate::synthdata::{generate_corpus, DEFAULT_SCENARIOS};

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn metric_hand_cases() {
        let gt = m(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]]);
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        let off = gt.zip_map(&m(&[[0.3, 0.4]; 3]), |a, b| a + b);
        assert!((ade(&off, &gt).unwrap() - 0.5).abs() < 1e-15);
        let pred = m(&[[0.0, 0.0], [3.0, 4.0]]);
        let zero = m(&[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(ade(&pred, &zero).unwrap(), 2.5);
        assert_eq!(fde(&pred, &zero).unwrap(), 5.0);
        let mid = m(&[[0.0, 0.0], [9.0, 9.0], [2.0, 0.5]]);
        assert_eq!(fde(&mid, &gt).unwrap(), 0.0);
    }

    #[test]
    fn metric_errors() {
        assert!(ade(&Matrix::zeros(10, 2), &Matrix::zeros(9, 2)).is_err());
        assert!(fde(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn improvement_rounding() {
        assert_eq!(percent_improvement(0.854, 0.588).unwrap(), 31.1);
        assert!(percent_improvement(0.0, 1.0).is_err());
    }

    fn report(variant: &str, all: (f64, f64), ct: Option<(f64, f64)>) -> MetricReport {
        let mut cells = BTreeMap::new();
        cells.insert("all".into(), MetricCell { ade: all.0, fde: all.1, count: 5 });
        if let Some((a, f)) = ct {
            cells.insert("CT".into(), MetricCell { ade: a, fde: f, count: 2 });
        }
        MetricReport { variant: variant.into(), split: SplitKind::Random, ablated: None, cells }
    }

    #[test]
    fn table_flags_minima_and_parses_back() {
        let reports = vec![
            report("mlp", (0.854, 1.512), Some((0.9, 1.2))),
            report("divr-het", (0.588, 0.842), Some((0.95, 1.1))),
        ];
        let text = report_tables(&reports);
        let (headers, rows) = parse_report_table(&text).unwrap();
        assert_eq!(headers, ["all ADE", "all FDE", "CT ADE", "CT FDE"]);
        assert_eq!(rows[0].0, "mlp");
        assert_eq!(rows[0].1[0], Some((0.854, false)));
        assert_eq!(rows[1].1[0], Some((0.588, true)));
        assert_eq!(rows[0].1[2], Some((0.9, true)));
        assert_eq!(rows[1].1[3], Some((1.1, true)));

        let single = report_tables(&reports[..1]);
        assert_eq!(single.lines().count(), 2);
    }

    #[test]
    fn evaluation_and_ablation() {
        let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[1..2], 3).unwrap();
        let samples = build_samples(&sessions[0], 4, 64).unwrap();
        let mlp = DivrModel::new(ModelConfig::tiny(), Variant::Mlp, 0).unwrap();
        assert!(ablate(&mlp, Branch::Graph, &samples, SplitKind::Random).is_err());
        assert!(evaluate(&mlp, &[], SplitKind::Random).is_err());

        let het = DivrModel::new(ModelConfig::tiny(), Variant::DivrHet, 0).unwrap();
        let base = evaluate(&het, &samples, SplitKind::Random).unwrap();
        let mut reversed = samples.clone();
        reversed.reverse();
        assert_eq!(evaluate(&het, &reversed, SplitKind::Random).unwrap(), base);
        for b in [Branch::Graph, Branch::Gaze] {
            let r = ablate(&het, b, &samples, SplitKind::Random).unwrap();
            assert_eq!(r.ablated, Some(b));
            assert_eq!(r.cell("all").unwrap().count, samples.len());
        }
    }

    #[test]
    fn svg_has_the_documented_layers() {
        let sessions = generate_corpus(1, &DEFAULT_SCENARIOS[..1], 1).unwrap();
        let samples = build_samples(&sessions[0], 50, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(render_trajectories(&[], &[], dir.path()).unwrap().is_empty());
        let files = render_trajectories(&samples[..1], &[samples[0].future.clone()], dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let svg = std::fs::read_to_string(&files[0]).unwrap();
        let order: Vec<usize> = ["stroke=\"red\"", "fill=\"green\"", "stroke=\"blue\"", "stroke=\"magenta\""]
            .iter()
            .map(|needle| {
                assert_eq!(svg.matches(needle).count(), 1, "{needle}");
                svg.find(needle).unwrap()
            })
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(svg.matches("<rect").count(), sessions[0].layout.regions.len());
    }
}
