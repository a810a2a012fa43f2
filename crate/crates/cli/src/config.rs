//! Settings shared by config files and command-line flags.
//!
//! Every setting is a row in [`KEYS`]. A key `foo_bar` is written `foo_bar = value` in
//! a config file and `--foo-bar value` on the command line. Flags are applied after the
//! file, so they always win.
//!
//! File format: UTF-8, one `key = value` per line, blank lines and `#` comments
//! ignored. A value may be double-quoted (with `\"` and `\\` escapes) to keep a `#`.
//! List keys (`audio`, `expect`) may repeat; any other key may appear once.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sound2img_core::backends::BackendSelection;
use sound2img_core::eval::{parse_metrics, EvalOptions, Metric};
use sound2img_core::fusion::PositionalArgument;
use sound2img_core::pipeline::{AblationSet, PipelineConfig, TextPosition};
use sound2img_core::{Error, Result};

pub const GENERATE: u8 = 1;
pub const ABLATE: u8 = 2;
pub const EVAL: u8 = 4;
pub const DATASET: u8 = 8;
const RUN: u8 = GENERATE | ABLATE;
const BACKENDS: u8 = RUN | EVAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    List,
    Bool,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyDef {
    pub key: &'static str,
    pub scope: u8,
    pub kind: Kind,
    /// Documented default; empty when unset by default.
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(
    key: &'static str,
    scope: u8,
    kind: Kind,
    default: &'static str,
    help: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        scope,
        kind,
        default,
        help,
    }
}

use Kind::{Bool, List, Value};

pub const KEYS: &[KeyDef] = &[
    k("audio", RUN, List, "", "Input WAV file (repeatable)"),
    k(
        "dataset",
        RUN,
        Value,
        "",
        "Dataset manifest whose entries are used as inputs",
    ),
    k("out", RUN | DATASET, Value, "runs", "Output directory"),
    k(
        "backend_set",
        BACKENDS,
        Value,
        "mock",
        "Backend set for every role: mock or real",
    ),
    k(
        "captioner",
        BACKENDS,
        Value,
        "",
        "Captioner backend override",
    ),
    k(
        "tagger",
        BACKENDS,
        Value,
        "",
        "Noun tagger backend override",
    ),
    k(
        "text_encoder",
        BACKENDS,
        Value,
        "",
        "Text encoder backend override",
    ),
    k(
        "generator",
        BACKENDS,
        Value,
        "",
        "Image generator backend override",
    ),
    k(
        "scorer",
        BACKENDS,
        Value,
        "",
        "Similarity scorer backend override",
    ),
    k(
        "detector",
        BACKENDS,
        Value,
        "",
        "Object detector backend override",
    ),
    k(
        "classifier",
        BACKENDS,
        Value,
        "",
        "Image classifier backend override",
    ),
    k(
        "seed",
        RUN | DATASET,
        Value,
        "0",
        "Run seed; per-stage seeds are derived from it",
    ),
    k(
        "mock_seed",
        BACKENDS,
        Value,
        "0",
        "Seed of the mock backends' fixed parameters",
    ),
    k(
        "mock_token_count",
        BACKENDS,
        Value,
        "32",
        "Mock text encoder token count",
    ),
    k(
        "mock_channel_dim",
        BACKENDS,
        Value,
        "8",
        "Mock text encoder channel count",
    ),
    k(
        "mock_image_size",
        BACKENDS,
        Value,
        "64",
        "Mock generator image side in pixels",
    ),
    k(
        "mock_scorer_resolution",
        BACKENDS,
        Value,
        "32",
        "Mock scorer input side in pixels",
    ),
    k(
        "mock_class_count",
        BACKENDS,
        Value,
        "10",
        "Mock classifier class count",
    ),
    k(
        "amplify",
        RUN,
        Value,
        "1",
        "Scale the audio amplitude by this factor (> 0)",
    ),
    k(
        "text",
        RUN,
        Value,
        "",
        "User text combined with the audio caption",
    ),
    k(
        "text_position",
        RUN,
        Value,
        "prepend",
        "Where user text goes: prepend or append",
    ),
    k(
        "ablate",
        GENERATE,
        Value,
        "none",
        "Comma-separated ablations: no-a-attn, no-s-attn, no-attns, no-dso, no-all",
    ),
    k(
        "noun_audio_scale",
        RUN,
        Value,
        "0.1",
        "Scale on a noun's audio attention",
    ),
    k(
        "noun_threshold",
        RUN,
        Value,
        "0.5",
        "Noun probability at or above which a word is a noun",
    ),
    k(
        "positional_argument",
        RUN,
        Value,
        "position_index",
        "Positional encoding input: position_index or attention_value",
    ),
    k(
        "weight_audio",
        RUN,
        Value,
        "0.9",
        "Loss weight of audio-image similarity",
    ),
    k(
        "weight_clip",
        RUN,
        Value,
        "1",
        "Loss weight of text-image similarity",
    ),
    k(
        "weight_l2",
        RUN,
        Value,
        "0.01",
        "Loss weight of the L2 anchor",
    ),
    k("dso_steps", RUN, Value, "10", "Optimization steps"),
    k(
        "lr_noun",
        RUN,
        Value,
        "0.01",
        "Learning rate of noun tokens",
    ),
    k(
        "lr_non_noun",
        RUN,
        Value,
        "0.001",
        "Learning rate of other caption tokens",
    ),
    k("adam_beta1", RUN, Value, "0.9", "Adam first-moment decay"),
    k(
        "adam_beta2",
        RUN,
        Value,
        "0.999",
        "Adam second-moment decay",
    ),
    k("adam_epsilon", RUN, Value, "0.00000001", "Adam epsilon"),
    k(
        "augmentations",
        RUN,
        Value,
        "8",
        "Augmented images per step",
    ),
    k("crop_min", RUN, Value, "0.7", "Smallest crop side fraction"),
    k("crop_max", RUN, Value, "1", "Largest crop side fraction"),
    k(
        "flip_probability",
        RUN,
        Value,
        "0.5",
        "Horizontal flip probability",
    ),
    k(
        "l2_squared",
        RUN,
        Bool,
        "true",
        "Use the squared L2 distance",
    ),
    k(
        "rescore_every",
        RUN,
        Value,
        "1",
        "Regenerate the image every N steps",
    ),
    k("sampler", RUN, Value, "plms", "Diffusion sampler name"),
    k("sampler_steps", RUN, Value, "40", "Diffusion steps"),
    k("width", RUN, Value, "512", "Generated image width"),
    k("height", RUN, Value, "512", "Generated image height"),
    k(
        "trace",
        RUN,
        Value,
        "",
        "Write the per-step loss trace to this file name in each run directory",
    ),
    k(
        "dump_tensors",
        RUN,
        Bool,
        "false",
        "Write z, z_n and weight tensors (WTB1) into each run directory",
    ),
    k(
        "record_timings",
        RUN,
        Bool,
        "false",
        "Record stage timings in manifests (makes them non-reproducible)",
    ),
    k("jobs", RUN, Value, "1", "Input files processed in parallel"),
    k(
        "gt_caption",
        RUN,
        Value,
        "",
        "Ground-truth caption recorded for evaluation",
    ),
    k(
        "expect",
        RUN,
        List,
        "",
        "Expected detector class recorded for evaluation (repeatable)",
    ),
    k("runs", EVAL, Value, "runs", "Directory of runs to evaluate"),
    k(
        "metrics",
        EVAL,
        Value,
        "clipscore,is,yolo",
        "Comma-separated metrics: clipscore, is, yolo",
    ),
    k(
        "conf_threshold",
        EVAL,
        Value,
        "0.25",
        "Detector confidence threshold",
    ),
    k("is_splits", EVAL, Value, "10", "Inception Score splits"),
    k(
        "report",
        EVAL,
        Value,
        "",
        "Report JSON path (default: <runs>/report.json)",
    ),
    k(
        "esc50_root",
        DATASET,
        Value,
        "",
        "ESC-50 root laid out as <class>/*.wav",
    ),
    k(
        "pairs",
        DATASET,
        Value,
        "",
        "Pair spec JSON file, or \"default\" for the built-in 7 x 100 spec",
    ),
];

pub fn key_def(key: &str) -> Option<&'static KeyDef> {
    KEYS.iter().find(|d| d.key == key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub audio: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub backend_set: String,
    pub role_overrides: BTreeMap<String, String>,
    pub pipeline: PipelineConfig,
    pub jobs: usize,
    pub gt_caption: Option<String>,
    pub expect: Vec<String>,
    pub runs: PathBuf,
    pub metrics: Vec<Metric>,
    pub eval: EvalOptions,
    pub report: Option<PathBuf>,
    pub esc50_root: Option<PathBuf>,
    pub pairs: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            audio: Vec::new(),
            dataset: None,
            out: PathBuf::from("runs"),
            backend_set: "mock".into(),
            role_overrides: BTreeMap::new(),
            pipeline: PipelineConfig::default(),
            jobs: 1,
            gt_caption: None,
            expect: Vec::new(),
            runs: PathBuf::from("runs"),
            metrics: Metric::ALL.to_vec(),
            eval: EvalOptions::default(),
            report: None,
            esc50_root: None,
            pairs: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Argument(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn nonempty(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

impl Settings {
    /// Apply one `key = value`. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "audio" => self.audio.push(PathBuf::from(v)),
            "dataset" => self.dataset = nonempty(v).map(PathBuf::from),
            "out" => self.out = PathBuf::from(v),
            "backend_set" => {
                BackendSelection::for_set(v)?;
                self.backend_set = v.into();
            }
            "captioner" | "tagger" | "text_encoder" | "generator" | "scorer" | "detector"
            | "classifier" => {
                if v.is_empty() {
                    self.role_overrides.remove(key);
                } else {
                    self.role_overrides.insert(key.into(), v.into());
                }
            }
            "seed" => p.seed = num(key, v)?,
            "mock_seed" => p.mock.seed = num(key, v)?,
            "mock_token_count" => p.mock.token_count = num(key, v)?,
            "mock_channel_dim" => p.mock.channel_dim = num(key, v)?,
            "mock_image_size" => p.mock.image_size = num(key, v)?,
            "mock_scorer_resolution" => p.mock.scorer_resolution = num(key, v)?,
            "mock_class_count" => p.mock.class_count = num(key, v)?,
            "amplify" => p.amplify = num(key, v)?,
            "text" => p.user_text = nonempty(v),
            "text_position" => p.text_position = v.parse::<TextPosition>()?,
            "ablate" => p.ablation = v.parse::<AblationSet>()?,
            "noun_audio_scale" => p.fusion.noun_audio_scale = num(key, v)?,
            "noun_threshold" => p.fusion.noun_threshold = num(key, v)?,
            "positional_argument" => {
                p.fusion.positional_argument_mode = v.parse::<PositionalArgument>()?
            }
            "weight_audio" => p.dso.weight_audio = num(key, v)?,
            "weight_clip" => p.dso.weight_clip = num(key, v)?,
            "weight_l2" => p.dso.weight_l2 = num(key, v)?,
            "dso_steps" => p.dso.steps = num(key, v)?,
            "lr_noun" => p.dso.lr_noun = num(key, v)?,
            "lr_non_noun" => p.dso.lr_non_noun = num(key, v)?,
            "adam_beta1" => p.dso.adam_beta1 = num(key, v)?,
            "adam_beta2" => p.dso.adam_beta2 = num(key, v)?,
            "adam_epsilon" => p.dso.adam_epsilon = num(key, v)?,
            "augmentations" => p.dso.augmentation_count = num(key, v)?,
            "crop_min" => p.dso.crop_min = num(key, v)?,
            "crop_max" => p.dso.crop_max = num(key, v)?,
            "flip_probability" => p.dso.flip_probability = num(key, v)?,
            "l2_squared" => p.dso.l2_squared = boolean(key, v)?,
            "rescore_every" => p.dso.rescore_every = num(key, v)?,
            "sampler" => p.sampler.sampler = v.into(),
            "sampler_steps" => p.sampler.steps = num(key, v)?,
            "width" => p.sampler.width = num(key, v)?,
            "height" => p.sampler.height = num(key, v)?,
            "trace" => p.trace_file = nonempty(v),
            "dump_tensors" => p.dump_tensors = boolean(key, v)?,
            "record_timings" => p.record_timings = boolean(key, v)?,
            "jobs" => {
                self.jobs = num(key, v)?;
                if self.jobs == 0 {
                    return Err(Error::Argument("jobs must be >= 1".into()));
                }
            }
            "gt_caption" => self.gt_caption = nonempty(v),
            "expect" => self.expect.push(v.into()),
            "runs" => self.runs = PathBuf::from(v),
            "metrics" => self.metrics = parse_metrics(v)?,
            "conf_threshold" => self.eval.conf_threshold = num(key, v)?,
            "is_splits" => self.eval.is_splits = num(key, v)?,
            "report" => self.report = nonempty(v).map(PathBuf::from),
            "esc50_root" => self.esc50_root = nonempty(v).map(PathBuf::from),
            "pairs" => self.pairs = nonempty(v),
            other => return Err(Error::Argument(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Backend identifiers after applying per-role overrides to the set.
    pub fn backend_selection(&self) -> Result<BackendSelection> {
        let mut sel = BackendSelection::for_set(&self.backend_set)?;
        for (role, id) in &self.role_overrides {
            let slot = match role.as_str() {
                "captioner" => &mut sel.captioner,
                "tagger" => &mut sel.tagger,
                "text_encoder" => &mut sel.text_encoder,
                "generator" => &mut sel.generator,
                "scorer" => &mut sel.scorer,
                "detector" => &mut sel.detector,
                "classifier" => &mut sel.classifier,
                _ => unreachable!("only role keys are stored"),
            };
            *slot = id.clone();
        }
        Ok(sel)
    }

    /// The pipeline configuration with resolved backend identifiers.
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = self.pipeline.clone();
        cfg.backends = self.backend_selection()?;
        Ok(cfg)
    }
}

/// A parsed config file: `(line number, key, value)` in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<(usize, String, String)>,
}

fn config_error(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("config line {line}: {msg}"))
}

fn unquote(raw: &str, line: usize) -> Result<String> {
    let body = &raw[1..];
    let mut out = String::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(e @ ('"' | '\\')) => out.push(e),
                Some('n') => out.push('\n'),
                _ => return Err(config_error(line, "bad escape in quoted value")),
            },
            '"' => {
                let rest = chars.as_str().trim();
                if !(rest.is_empty() || rest.starts_with('#')) {
                    return Err(config_error(line, "text after closing quote"));
                }
                return Ok(out);
            }
            c => out.push(c),
        }
    }
    Err(config_error(line, "unterminated quoted value"))
}

/// Parse config text. Rejects unknown keys and repeated non-list keys, naming the line.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut entries = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(line_no, "expected key = value"))?;
        let key = key.trim();
        let def =
            key_def(key).ok_or_else(|| config_error(line_no, format!("unknown key {key:?}")))?;
        let value = value.trim();
        let value = if value.starts_with('"') {
            unquote(value, line_no)?
        } else {
            match value.find(" #").or_else(|| value.find("\t#")) {
                Some(pos) => value[..pos].trim_end().to_string(),
                None => value.to_string(),
            }
        };
        if def.kind != Kind::List {
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(config_error(
                    line_no,
                    format!("{key:?} already set on line {prev}"),
                ));
            }
        }
        entries.push((line_no, key.to_string(), value));
    }
    Ok(ConfigFile { entries })
}

impl ConfigFile {
    /// Apply entries relevant to `scope`; keys of other commands are accepted and skipped.
    pub fn apply(&self, settings: &mut Settings, scope: u8) -> Result<()> {
        for (line, key, value) in &self.entries {
            let def = key_def(key).expect("parsed keys are known");
            if def.scope & scope == 0 {
                continue;
            }
            settings
                .apply(key, value)
                .map_err(|e| config_error(*line, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_are_the_defaults() {
        for d in KEYS {
            if d.default.is_empty() || d.kind == Kind::List {
                continue;
            }
            let mut s = Settings::default();
            s.apply(d.key, d.default).unwrap();
            assert_eq!(s, Settings::default(), "default of {}", d.key);
        }
    }

    #[test]
    fn every_key_applies() {
        for d in KEYS {
            let mut s = Settings::default();
            let v = if d.default.is_empty() { "x" } else { d.default };
            let v = match d.key {
                "captioner" | "tagger" | "text_encoder" | "generator" | "scorer" | "detector"
                | "classifier" => "mock",
                _ => v,
            };
            s.apply(d.key, v)
                .unwrap_or_else(|e| panic!("{}: {e}", d.key));
        }
        assert!(Settings::default().apply("nope", "1").is_err());
    }

    #[test]
    fn parses_comments_quotes_and_lists() {
        let text = "# header\n\nseed = 7 # lucky\ntext = \"a # b\"\naudio = a.wav\naudio=b.wav\n";
        let cfg = parse_config(text).unwrap();
        let mut s = Settings::default();
        cfg.apply(&mut s, GENERATE).unwrap();
        assert_eq!(s.pipeline.seed, 7);
        assert_eq!(s.pipeline.user_text.as_deref(), Some("a # b"));
        assert_eq!(
            s.audio,
            vec![PathBuf::from("a.wav"), PathBuf::from("b.wav")]
        );
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_config("seed = 1\n\nbogus = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = parse_config("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_config("just words\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        let cfg = parse_config("amplify = zero\n").unwrap();
        let e = cfg.apply(&mut Settings::default(), GENERATE).unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn other_command_keys_are_skipped() {
        let cfg = parse_config("metrics = yolo\nseed = 3\n").unwrap();
        let mut s = Settings::default();
        cfg.apply(&mut s, DATASET).unwrap();
        assert_eq!(s.metrics, Metric::ALL.to_vec());
        assert_eq!(s.pipeline.seed, 3);
    }

    #[test]
    fn role_overrides_survive_set_changes() {
        let mut s = Settings::default();
        s.apply("generator", "stable-diffusion").unwrap();
        s.apply("backend_set", "mock").unwrap();
        assert_eq!(s.backend_selection().unwrap().generator, "stable-diffusion");
        assert_eq!(s.backend_selection().unwrap().captioner, "mock");
    }
}
