use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use sound2img_core::audio::read_wav;
use sound2img_core::backends::Backends;
use sound2img_core::eval::dataset::{entry_path, DATASET_FILE};
use sound2img_core::eval::metrics::image_matches;
use sound2img_core::eval::{
    build_multi_esc50, clipscore_f64, evaluate_dataset, DatasetManifest, PairSpec,
};
use sound2img_core::manifest::{write_atomic, Annotations, MANIFEST_FILE};
use sound2img_core::pipeline::{
    ablation_variants, run_generation, write_run, PipelineConfig, RunResult,
};
use sound2img_core::{Error, Result};

use crate::config::Settings;
use crate::{exit_code, EXIT_OK};

#[derive(Debug, Clone)]
struct Input {
    path: PathBuf,
    label: Option<String>,
    annotations: Annotations,
    /// Base run identifier: file stem plus seed.
    id: String,
}

fn merge_expected(a: &[String], b: &[String]) -> Vec<String> {
    a.iter()
        .chain(b)
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn collect_inputs(s: &Settings) -> Result<Vec<Input>> {
    let mut inputs = Vec::new();
    let annotations = |expected: &[String]| Annotations {
        ground_truth_caption: s.gt_caption.clone(),
        expected_classes: merge_expected(expected, &s.expect),
    };
    for p in &s.audio {
        inputs.push(Input {
            path: p.clone(),
            label: None,
            annotations: annotations(&[]),
            id: String::new(),
        });
    }
    if let Some(d) = &s.dataset {
        let manifest = DatasetManifest::read(d)?;
        let base = d.parent().unwrap_or(Path::new("."));
        for e in &manifest.entries {
            inputs.push(Input {
                path: entry_path(base, e),
                label: Some(e.pair.clone()),
                annotations: annotations(&e.expected_classes),
                id: String::new(),
            });
        }
    }
    if inputs.is_empty() {
        return Err(Error::Argument(
            "no input: pass --audio or --dataset".into(),
        ));
    }
    let mut seen = HashSet::new();
    for inp in &mut inputs {
        let stem = inp
            .path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("clip")
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || "-_+".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>();
        inp.id = format!("{stem}-s{}", s.pipeline.seed);
        if !seen.insert(inp.id.clone()) {
            return Err(Error::Argument(format!(
                "two inputs map to run id {:?}",
                inp.id
            )));
        }
    }
    Ok(inputs)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {jobs} workers: {e}")))
}

fn load(inp: &Input) -> Result<sound2img_core::AudioClip> {
    let mut clip = read_wav(&inp.path)?;
    clip.label = inp.label.clone();
    Ok(clip)
}

fn prepare(s: &Settings) -> Result<(PipelineConfig, Backends, Vec<Input>)> {
    let cfg = s.pipeline_config()?;
    cfg.validate()?;
    let backends = Backends::resolve(&cfg.backends, &cfg.mock)?;
    let inputs = collect_inputs(s)?;
    Ok((cfg, backends, inputs))
}

/// Report per-input failures in input order; the first one sets the exit code.
fn finish<T>(inputs: &[Input], results: Vec<Result<T>>, mut ok: impl FnMut(T)) -> i32 {
    let mut code = EXIT_OK;
    for (inp, r) in inputs.iter().zip(results) {
        match r {
            Ok(v) => ok(v),
            Err(e) => {
                eprintln!("error: {}: {e}", inp.path.display());
                if code == EXIT_OK {
                    code = exit_code(&e);
                }
            }
        }
    }
    code
}

pub fn generate(s: &Settings) -> Result<i32> {
    let (cfg, backends, inputs) = prepare(s)?;
    let names = cfg.ablation.names();
    let results: Vec<Result<PathBuf>> = pool(s.jobs)?.install(|| {
        inputs
            .par_iter()
            .map(|inp| {
                let clip = load(inp)?;
                let id = if names.is_empty() {
                    inp.id.clone()
                } else {
                    format!("{}-{}", inp.id, names.join("+"))
                };
                let result = run_generation(&clip, &cfg, &backends)?;
                let dir = s.out.join(&id);
                write_run(&result, &cfg, &id, &inp.annotations, &dir)?;
                Ok(dir.join(MANIFEST_FILE))
            })
            .collect()
    });
    Ok(finish(&inputs, results, |p| println!("{}", p.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub input: String,
    pub variant: String,
    pub ablation: Vec<String>,
    pub manifest: String,
    pub l_total: Option<f64>,
    pub s_audio: Option<f64>,
    pub s_clip: Option<f64>,
    pub clipscore: Option<f64>,
    pub yolo_hit: Option<bool>,
}

fn variant_metrics(
    r: &RunResult,
    annotations: &Annotations,
    backends: &Backends,
    conf: f64,
) -> Result<(Option<f64>, Option<bool>)> {
    let clip = match &annotations.ground_truth_caption {
        Some(gt) => Some(clipscore_f64(
            &backends.scorer.embed_image(&r.image)?,
            &backends.scorer.embed_text(gt)?,
        )?),
        None => None,
    };
    let yolo = if annotations.expected_classes.is_empty() {
        None
    } else {
        let expected: BTreeSet<String> = annotations.expected_classes.iter().cloned().collect();
        Some(image_matches(
            &backends.detector.detect(&r.image)?,
            &expected,
            conf,
        ))
    };
    Ok((clip, yolo))
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let header = [
        "input",
        "variant",
        "l_total",
        "s_audio",
        "s_clip",
        "CLIPscore",
        "Yolo",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.input.clone(),
                r.variant.clone(),
                cell(r.l_total),
                cell(r.s_audio),
                cell(r.s_clip),
                cell(r.clipscore),
                r.yolo_hit
                    .map_or("-".into(), |h| if h { "1".into() } else { "0".into() }),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    let mut out = line(header.to_vec());
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn ablate(s: &Settings) -> Result<i32> {
    let (base, backends, inputs) = prepare(s)?;
    let variants = ablation_variants();
    let results: Vec<Result<Vec<AblationRow>>> = pool(s.jobs)?.install(|| {
        inputs
            .par_iter()
            .map(|inp| {
                let clip = load(inp)?;
                let mut rows = Vec::new();
                for (variant, flags) in &variants {
                    let cfg = PipelineConfig {
                        ablation: *flags,
                        ..base.clone()
                    };
                    let r = run_generation(&clip, &cfg, &backends)?;
                    let id = format!("{}/{variant}", inp.id);
                    let dir = s.out.join(&inp.id).join(variant);
                    write_run(&r, &cfg, &id, &inp.annotations, &dir)?;
                    let (clipscore, yolo_hit) =
                        variant_metrics(&r, &inp.annotations, &backends, s.eval.conf_threshold)?;
                    rows.push(AblationRow {
                        input: inp.id.clone(),
                        variant: variant.to_string(),
                        ablation: flags.names().iter().map(|n| n.to_string()).collect(),
                        manifest: dir.join(MANIFEST_FILE).display().to_string(),
                        l_total: r.final_loss.map(|l| l.l_total),
                        s_audio: r.final_loss.map(|l| l.l_aclip),
                        s_clip: r.final_loss.map(|l| l.l_clip),
                        clipscore,
                        yolo_hit,
                    });
                }
                Ok(rows)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let code = finish(&inputs, results, |r| rows.extend(r));
    std::fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))?;
    let mut json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    json.push('\n');
    write_atomic(&s.out.join("ablation.json"), json.as_bytes())?;
    print!("{}", render_ablation_table(&rows));
    Ok(code)
}

pub fn eval(s: &Settings) -> Result<i32> {
    let cfg = s.pipeline_config()?;
    let backends = Backends::resolve(&cfg.backends, &cfg.mock)?;
    let report = evaluate_dataset(&s.runs, &s.metrics, &backends, &s.eval)?;
    let path = s
        .report
        .clone()
        .unwrap_or_else(|| s.runs.join("report.json"));
    write_atomic(&path, report.to_json().as_bytes())?;
    print!("{}", report.render_table());
    eprintln!("report: {}", path.display());
    Ok(EXIT_OK)
}

pub fn build_dataset(s: &Settings) -> Result<i32> {
    let root = s
        .esc50_root
        .as_ref()
        .ok_or_else(|| Error::Argument("--esc50-root is required".into()))?;
    let spec = match s.pairs.as_deref() {
        None => {
            return Err(Error::Argument(
                "--pairs is required (a file or \"default\")".into(),
            ))
        }
        Some("default") => PairSpec::multi_esc50(100),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            PairSpec::from_json(&bytes)?
        }
    };
    let manifest = build_multi_esc50(root, &spec, &s.out, s.pipeline.seed)?;
    println!(
        "{}: {} files",
        s.out.join(DATASET_FILE).display(),
        manifest.file_count
    );
    Ok(EXIT_OK)
}
