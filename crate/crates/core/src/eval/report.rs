//! Dataset evaluation over a directory of runs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::metrics::{
    clipscore_f64, image_matches, inception_score_rows, CLIPSCORE_WEIGHT, DEFAULT_CONF_THRESHOLD,
    DEFAULT_IS_SPLITS,
};
use crate::backends::Backends;
use crate::error::{Error, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::types::GeneratedImage;

pub const REPORT_FORMAT: &str = "sound2img-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Clipscore,
    InceptionScore,
    Yolo,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Clipscore, Metric::InceptionScore, Metric::Yolo];

    pub fn column(&self) -> &'static str {
        match self {
            Metric::Clipscore => "CLIPscore",
            Metric::InceptionScore => "IS",
            Metric::Yolo => "Yolo",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clipscore" | "clip" => Ok(Metric::Clipscore),
            "is" | "inception" | "inception_score" => Ok(Metric::InceptionScore),
            "yolo" => Ok(Metric::Yolo),
            other => Err(Error::Argument(format!(
                "unknown metric {other:?} (expected clipscore, is, yolo)"
            ))),
        }
    }
}

/// Parse a comma-separated metric list; duplicates collapse, order is canonical.
pub fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    let set: BTreeSet<Metric> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(Metric::from_str)
        .collect::<Result<_>>()?;
    if set.is_empty() {
        return Err(Error::Argument("no metrics requested".into()));
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub conf_threshold: f64,
    pub is_splits: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            is_splits: DEFAULT_IS_SPLITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub clipscore_weight: f64,
    pub conf_threshold: f64,
    pub is_splits_requested: usize,
    pub is_splits_used: Option<usize>,
    pub class_mapping: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub available: bool,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Items that contributed.
    pub count: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    /// Manifest path relative to the runs directory.
    pub manifest: String,
    pub clipscore: Option<f64>,
    pub yolo_hit: Option<bool>,
    pub class_probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    pub dataset: String,
    pub settings: EvalSettings,
    pub sample_count: usize,
    pub metrics: Vec<MetricSummary>,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad report: {e}")))
    }

    pub fn summary(&self, m: Metric) -> Option<&MetricSummary> {
        self.metrics.iter().find(|s| s.metric == m)
    }

    /// Aligned text table: a settings header, then one row for the dataset.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "# items={} clipscore_weight={} conf_threshold={} is_splits={} class_mapping={}\n",
            self.sample_count,
            self.settings.clipscore_weight,
            self.settings.conf_threshold,
            self.settings
                .is_splits_used
                .map_or("-".to_string(), |s| s.to_string()),
            self.settings.class_mapping,
        );
        let mut header = vec!["Dataset".to_string()];
        let mut cells = vec![self.dataset.clone()];
        for s in &self.metrics {
            header.push(s.metric.column().to_string());
            cells.push(match (s.available, s.mean, s.std) {
                (true, Some(m), Some(sd)) if s.metric == Metric::InceptionScore => {
                    format!("{m:.4} ± {sd:.4}")
                }
                (true, Some(m), _) => format!("{m:.4}"),
                _ => "unavailable".to_string(),
            });
        }
        let widths: Vec<usize> = header
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.chars().count().max(c.chars().count()))
            .collect();
        let line = |v: &[String]| {
            v.iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        out.push_str(&line(&header));
        out.push('\n');
        out.push_str(&line(&cells));
        out.push('\n');
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn unavailable(metric: Metric, note: impl Into<String>) -> MetricSummary {
    let note = note.into();
    log::warn!("{metric}: {note}");
    MetricSummary {
        metric,
        available: false,
        mean: None,
        std: None,
        count: 0,
        note: Some(note),
    }
}

/// Every `manifest.json` under `dir`, in path order.
pub fn find_runs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "runs directory not found"),
        ));
    }
    let mut found = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() && entry.file_name() == MANIFEST_FILE {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

pub fn evaluate_dataset(
    runs_dir: &Path,
    metrics: &[Metric],
    backends: &Backends,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if !(0.0..=1.0).contains(&opts.conf_threshold) {
        return Err(Error::Argument(
            "confidence threshold must be in [0, 1]".into(),
        ));
    }
    if opts.is_splits == 0 {
        return Err(Error::Argument("is_splits must be >= 1".into()));
    }
    let paths = find_runs(runs_dir)?;
    if paths.is_empty() {
        return Err(Error::Argument(format!(
            "no runs found under {}",
            runs_dir.display()
        )));
    }
    let want = |m: Metric| metrics.contains(&m);

    let mut rows = Vec::with_capacity(paths.len());
    for path in &paths {
        let manifest = RunManifest::read(path)?;
        let run_dir = path.parent().expect("manifest has a parent directory");
        let record = manifest
            .file("image")
            .ok_or_else(|| Error::Validation(format!("{} lists no image", path.display())))?;
        let image_path = run_dir.join(&record.path);
        let bytes = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let image = GeneratedImage::from_png(&bytes, manifest.seed)?;

        let clipscore = match (
            &manifest.annotations.ground_truth_caption,
            want(Metric::Clipscore),
        ) {
            (Some(gt), true) => Some(clipscore_f64(
                &backends.scorer.embed_image(&image)?,
                &backends.scorer.embed_text(gt)?,
            )?),
            _ => None,
        };
        let yolo_hit = if want(Metric::Yolo) && !manifest.annotations.expected_classes.is_empty() {
            let dets = backends.detector.detect(&image)?;
            for d in &dets {
                d.validate(image.width(), image.height())
                    .map_err(|e| Error::backend("detector", e.to_string()))?;
            }
            let expected: BTreeSet<String> = manifest
                .annotations
                .expected_classes
                .iter()
                .cloned()
                .collect();
            Some(image_matches(&dets, &expected, opts.conf_threshold))
        } else {
            None
        };
        let class_probabilities = if want(Metric::InceptionScore) {
            Some(backends.classifier.class_probabilities(&image)?)
        } else {
            None
        };
        rows.push(ReportRow {
            run_id: manifest.run_id.clone(),
            manifest: path
                .strip_prefix(runs_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/"),
            clipscore,
            yolo_hit,
            class_probabilities,
        });
    }

    let mut is_splits_used = None;
    let mut summaries = Vec::new();
    for &m in &Metric::ALL {
        if !want(m) {
            continue;
        }
        let summary = match m {
            Metric::Clipscore => {
                let v: Vec<f64> = rows.iter().filter_map(|r| r.clipscore).collect();
                if v.is_empty() {
                    unavailable(m, "no run has a ground-truth caption")
                } else {
                    if v.len() < rows.len() {
                        log::warn!(
                            "{m}: {} of {} runs lack a ground-truth caption",
                            rows.len() - v.len(),
                            rows.len()
                        );
                    }
                    let (mean, std) = mean_std(&v);
                    MetricSummary {
                        metric: m,
                        available: true,
                        mean: Some(mean),
                        std: Some(std),
                        count: v.len(),
                        note: None,
                    }
                }
            }
            Metric::Yolo => {
                let v: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.yolo_hit.map(|h| if h { 1.0 } else { 0.0 }))
                    .collect();
                if v.is_empty() {
                    unavailable(m, "no run has expected object classes")
                } else {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    MetricSummary {
                        metric: m,
                        available: true,
                        mean: Some(mean),
                        std: None,
                        count: v.len(),
                        note: None,
                    }
                }
            }
            Metric::InceptionScore => {
                let probs: Vec<Vec<f64>> = rows
                    .iter()
                    .filter_map(|r| r.class_probabilities.clone())
                    .collect();
                let mut splits = opts.is_splits;
                let mut note = None;
                if probs.len() < 10 * splits {
                    splits = (probs.len() / 10).max(1).min(opts.is_splits);
                    if splits != opts.is_splits {
                        let msg = format!(
                            "{} images are too few for {} splits; using {splits}",
                            probs.len(),
                            opts.is_splits
                        );
                        log::warn!("{m}: {msg}");
                        note = Some(msg);
                    }
                }
                is_splits_used = Some(splits);
                let (mean, std) = inception_score_rows(&probs, splits)
                    .map_err(|e| Error::backend("classifier", e.to_string()))?;
                MetricSummary {
                    metric: m,
                    available: true,
                    mean: Some(mean),
                    std: Some(std),
                    count: probs.len(),
                    note,
                }
            }
        };
        summaries.push(summary);
    }

    let dataset = runs_dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("runs")
        .to_string();
    Ok(MetricReport {
        format: REPORT_FORMAT.into(),
        dataset,
        settings: EvalSettings {
            clipscore_weight: CLIPSCORE_WEIGHT,
            conf_threshold: opts.conf_threshold,
            is_splits_requested: opts.is_splits,
            is_splits_used,
            class_mapping: "per-run expected_classes".into(),
        },
        sample_count: rows.len(),
        metrics: summaries,
        rows,
    })
}
