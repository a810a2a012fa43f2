//! End-to-end orchestration: caption, attentions, `W_init`, modulation, DSO and the
//! final image, plus run-directory output and replay from a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{amplify, read_wav, AudioClip};
use crate::backends::{BackendSelection, Backends, Captioner, MockSuite, SamplerSettings, Tagger};
use crate::dso::{evaluate, run_dso, DsoConfig, DsoContext, LossBreakdown};
use crate::error::{Error, Result, Stage, StageExt};
use crate::fusion::{
    assemble_w_init_with, modulate, sentence_attention, FusionConfig, FusionTerms,
};
use crate::manifest::{
    sha256_hex, write_atomic, Annotations, AudioSummary, FileRecord, RunManifest, MANIFEST_FILE,
    MANIFEST_FORMAT,
};
use crate::seed::derive_seed;
use crate::tensor::{encode_tensor, LatentConditioning};
use crate::types::{
    tokenize_words, AttentionKind, AttentionVector, Caption, GeneratedImage, TokenWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPosition {
    Prepend,
    Append,
}

impl FromStr for TextPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prepend" => Ok(Self::Prepend),
            "append" => Ok(Self::Append),
            other => Err(Error::Argument(format!(
                "text_position must be prepend or append, got {other:?}"
            ))),
        }
    }
}

/// Ablation switches. Serialized as the list of set flag names.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSet {
    pub no_audio_attention: bool,
    pub no_sentence_attention: bool,
    pub no_all_attentions: bool,
    pub no_dso: bool,
    pub no_all: bool,
}

impl AblationSet {
    pub const NAMES: [&'static str; 5] = ["no-a-attn", "no-s-attn", "no-attns", "no-dso", "no-all"];

    /// `no_all` switches on the other four.
    pub fn normalized(mut self) -> Self {
        if self.no_all {
            self.no_audio_attention = true;
            self.no_sentence_attention = true;
            self.no_all_attentions = true;
            self.no_dso = true;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_all && *self != self.normalized() {
            return Err(Error::Validation(
                "no_all requires every other ablation flag".into(),
            ));
        }
        Ok(())
    }

    pub fn flags(&self) -> [bool; 5] {
        [
            self.no_audio_attention,
            self.no_sentence_attention,
            self.no_all_attentions,
            self.no_dso,
            self.no_all,
        ]
    }

    /// Set flag names; `no-all` stands for itself since it implies the rest.
    pub fn names(&self) -> Vec<&'static str> {
        if self.no_all {
            return vec!["no-all"];
        }
        Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn skips_dso(&self) -> bool {
        self.no_dso || self.no_all
    }

    fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no-a-attn" | "no_audio_attention" => self.no_audio_attention = true,
            "no-s-attn" | "no_sentence_attention" => self.no_sentence_attention = true,
            "no-attns" | "no_all_attentions" => self.no_all_attentions = true,
            "no-dso" | "no-opt" | "no_dso" => self.no_dso = true,
            "no-all" | "no_all" => self.no_all = true,
            other => {
                return Err(Error::Argument(format!(
                    "unknown ablation {other:?} (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

impl FromStr for AblationSet {
    type Err = Error;
    /// Comma-separated flag names; empty or "none" means no ablation.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = Self::default();
        for part in s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != "none")
        {
            set.set(part)?;
        }
        Ok(set.normalized())
    }
}

impl fmt::Display for AblationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl Serialize for AblationSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AblationSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut set = Self::default();
        for n in &names {
            set.set(n).map_err(serde::de::Error::custom)?;
        }
        Ok(set.normalized())
    }
}

/// The six comparison variants: the full model and five ablations.
pub fn ablation_variants() -> Vec<(&'static str, AblationSet)> {
    let one = |f: fn(&mut AblationSet)| {
        let mut s = AblationSet::default();
        f(&mut s);
        s.normalized()
    };
    vec![
        ("full", AblationSet::default()),
        ("wo-all", one(|s| s.no_all = true)),
        ("wo-attns", one(|s| s.no_all_attentions = true)),
        ("wo-a-attn", one(|s| s.no_audio_attention = true)),
        ("wo-s-attn", one(|s| s.no_sentence_attention = true)),
        ("wo-opt", one(|s| s.no_dso = true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backends: BackendSelection,
    /// Parameters of the mock backends (their "weights" seed is independent of `seed`).
    pub mock: MockSuite,
    pub fusion: FusionConfig,
    pub dso: DsoConfig,
    pub sampler: SamplerSettings,
    pub seed: u64,
    pub ablation: AblationSet,
    pub user_text: Option<String>,
    pub text_position: TextPosition,
    pub amplify: f64,
    /// Write WTB1 dumps of z, z_n, W_init and the final weights.
    pub dump_tensors: bool,
    /// File name (inside the run directory) for the per-step loss trace.
    pub trace_file: Option<String>,
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backends: BackendSelection::mock(),
            mock: MockSuite::default(),
            fusion: FusionConfig::default(),
            dso: DsoConfig::default(),
            sampler: SamplerSettings::default(),
            seed: 0,
            ablation: AblationSet::default(),
            user_text: None,
            text_position: TextPosition::Prepend,
            amplify: 1.0,
            dump_tensors: false,
            trace_file: None,
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.fusion.validate()?;
        self.dso.validate()?;
        self.mock.validate()?;
        if self.sampler.width == 0 || self.sampler.height == 0 {
            return Err(Error::Argument("image size must be positive".into()));
        }
        if !(self.amplify > 0.0) || !self.amplify.is_finite() {
            return Err(Error::Argument("amplify must be > 0".into()));
        }
        if let Some(t) = &self.trace_file {
            let p = Path::new(t);
            if p.components().count() != 1 || p.file_name().is_none() {
                return Err(Error::Argument(format!(
                    "trace must be a plain file name, got {t:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Seeds derived from the run seed, one per stage.
pub fn derived_seeds(seed: u64) -> BTreeMap<String, u64> {
    ["augment", "generator"]
        .iter()
        .map(|s| (s.to_string(), derive_seed(seed, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedAudio {
    pub caption: Caption,
    pub audio_attention: AttentionVector,
    pub sentence_attention: AttentionVector,
    pub noun_mask: Vec<bool>,
}

/// Caption the clip and compute both attentions. The caption's encoder alignment is
/// left empty; it is filled once the prompt has been encoded.
pub fn caption_audio(
    clip: &AudioClip,
    captioner: &dyn Captioner,
    tagger: &dyn Tagger,
    fusion: &FusionConfig,
) -> Result<CaptionedAudio> {
    let out = captioner.caption(clip).stage(Stage::Caption)?;
    if out.words.is_empty() || out.text.trim().is_empty() {
        return Err(Error::Validation("empty caption".into()).at(Stage::Caption));
    }
    if out.words != tokenize_words(&out.text) {
        return Err(
            Error::backend("captioner", "caption words do not match its text").at(Stage::Caption),
        );
    }
    if out.audio_attention.len() != out.words.len() {
        return Err(Error::backend(
            "captioner",
            format!(
                "{} attention values for {} words",
                out.audio_attention.len(),
                out.words.len()
            ),
        )
        .at(Stage::Attention));
    }
    let audio_attention = AttentionVector::new(AttentionKind::Audio, out.audio_attention)
        .map_err(|e| Error::backend("captioner", e.to_string()))
        .stage(Stage::Attention)?;
    let mut caption = Caption::from_text(out.text);
    let (sentence_attention, noun_mask) =
        sentence_attention(&caption, tagger, fusion).stage(Stage::Attention)?;
    caption.noun_probability = sentence_attention.values().to_vec();
    Ok(CaptionedAudio {
        caption,
        audio_attention,
        sentence_attention,
        noun_mask,
    })
}

/// `user_text + ", " + caption` (or the caption first when appending).
pub fn combine_prompt(caption: &str, user_text: Option<&str>, position: TextPosition) -> String {
    match user_text.map(str::trim).filter(|t| !t.is_empty()) {
        None => caption.to_string(),
        Some(t) => match position {
            TextPosition::Prepend => format!("{t}, {caption}"),
            TextPosition::Append => format!("{caption}, {t}"),
        },
    }
}

/// Index of the caption's first word within the combined prompt's words.
pub fn caption_word_offset(user_text: Option<&str>, position: TextPosition) -> usize {
    match (user_text, position) {
        (Some(t), TextPosition::Prepend) => tokenize_words(t).len(),
        _ => 0,
    }
}

/// Attentions and `W_init` under the ablation flags.
pub fn apply_ablation(
    captioned: &CaptionedAudio,
    fusion: &FusionConfig,
    flags: &AblationSet,
    token_count: usize,
) -> Result<(AttentionVector, AttentionVector, TokenWeights)> {
    flags.validate()?;
    let n = captioned.caption.word_count();
    let audio = if flags.no_audio_attention || flags.no_all_attentions {
        AttentionVector::zeros(AttentionKind::Audio, n)
    } else {
        captioned.audio_attention.clone()
    };
    let sentence = if flags.no_sentence_attention || flags.no_all_attentions {
        AttentionVector::zeros(AttentionKind::Sentence, n)
    } else {
        captioned.sentence_attention.clone()
    };
    let terms = FusionTerms {
        audio: !flags.no_audio_attention,
        sentence: !flags.no_sentence_attention,
    };
    let mut w = assemble_w_init_with(
        &captioned.caption,
        &captioned.audio_attention,
        &captioned.sentence_attention,
        &captioned.noun_mask,
        fusion,
        token_count,
        terms,
    )?;
    if flags.no_all_attentions {
        for i in 0..w.len() {
            if w.caption_mask[i] {
                w.weights[i] = 1.0;
            }
        }
    }
    Ok((audio, sentence, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub clip: AudioClip,
    pub prompt: String,
    pub caption: Caption,
    pub audio_attention: AttentionVector,
    pub sentence_attention: AttentionVector,
    pub noun_mask: Vec<bool>,
    pub z: LatentConditioning,
    pub z_n: LatentConditioning,
    pub z_final: LatentConditioning,
    pub w_init: TokenWeights,
    pub w_final: TokenWeights,
    pub i_init: GeneratedImage,
    pub image: GeneratedImage,
    pub trace: Vec<LossBreakdown>,
    /// Loss at the final weights (evaluated for every run, with or without DSO).
    pub final_loss: Option<LossBreakdown>,
    pub backends: BTreeMap<String, crate::backends::BackendInfo>,
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

struct Timer {
    on: bool,
    last: Instant,
    laps: BTreeMap<String, f64>,
}

impl Timer {
    fn lap(&mut self, name: &str) {
        if self.on {
            let now = Instant::now();
            self.laps
                .insert(name.into(), (now - self.last).as_secs_f64() * 1e3);
            self.last = now;
        }
    }
}

pub fn run_generation(
    clip: &AudioClip,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<RunResult> {
    cfg.validate().stage(Stage::Input)?;
    let mut timer = Timer {
        on: cfg.record_timings,
        last: Instant::now(),
        laps: BTreeMap::new(),
    };
    let clip = if cfg.amplify == 1.0 {
        clip.clone()
    } else {
        amplify(clip, cfg.amplify).stage(Stage::Input)?
    };

    let mut captioned = caption_audio(&clip, &*backends.captioner, &*backends.tagger, &cfg.fusion)?;
    timer.lap("caption");
    log::info!("{}: caption {:?}", clip.source_path, captioned.caption.text);

    let user_text = cfg.user_text.as_deref().filter(|t| !t.trim().is_empty());
    let prompt = combine_prompt(&captioned.caption.text, user_text, cfg.text_position);
    let encoded = backends.text_encoder.encode(&prompt).stage(Stage::Encode)?;
    let offset = caption_word_offset(user_text, cfg.text_position);
    let n = captioned.caption.word_count();
    if encoded.word_alignment.len() < offset + n {
        return Err(Error::backend(
            "text_encoder",
            format!(
                "alignment covers {} words, prompt needs {}",
                encoded.word_alignment.len(),
                offset + n
            ),
        )
        .at(Stage::Encode));
    }
    captioned.caption.encoder_alignment = encoded.word_alignment[offset..offset + n].to_vec();
    let z = encoded.z;
    timer.lap("encode");

    let (audio_attention, sentence_attention, w_init) =
        apply_ablation(&captioned, &cfg.fusion, &cfg.ablation, z.token_count())
            .stage(Stage::Fusion)?;
    let z_n = modulate(&z, &w_init).stage(Stage::Fusion)?;
    timer.lap("fusion");

    let seeds = derived_seeds(cfg.seed);
    let gen_seed = seeds["generator"];
    let i_init = backends
        .generator
        .generate(&z_n, gen_seed, &cfg.sampler)
        .stage(Stage::Generate)?;
    timer.lap("generate_init");

    let ctx = DsoContext {
        generator: &*backends.generator,
        scorer: &*backends.scorer,
        sampler: &cfg.sampler,
        audio: &clip,
        caption_text: &prompt,
        generator_seed: gen_seed,
        augment_seed: seeds["augment"],
    };
    let (z_final, w_final, trace) = if cfg.ablation.skips_dso() {
        (z_n.clone(), w_init.clone(), Vec::new())
    } else {
        let out = run_dso(&z, &w_init, &ctx, &cfg.dso).stage(Stage::Optimize)?;
        (out.z_final, out.weights, out.trace)
    };
    timer.lap("optimize");
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        log::info!(
            "{}: l_total {:.4} -> {:.4} over {} steps",
            clip.source_path,
            first.l_total,
            last.l_total,
            trace.len()
        );
    }

    let final_loss = evaluate(&z, &w_final.weights, &ctx, &cfg.dso, cfg.dso.steps, false)
        .stage(Stage::Optimize)?
        .loss;
    let image = backends
        .generator
        .generate(&z_final, gen_seed, &cfg.sampler)
        .stage(Stage::Generate)?;
    timer.lap("generate_final");

    Ok(RunResult {
        clip,
        prompt,
        caption: captioned.caption,
        audio_attention,
        sentence_attention,
        noun_mask: captioned.noun_mask,
        z,
        z_n,
        z_final,
        w_init,
        w_final,
        i_init,
        image,
        trace,
        final_loss: Some(final_loss),
        backends: backends.describe(),
        timings_ms: cfg.record_timings.then_some(timer.laps),
    })
}

fn samples_sha256(clip: &AudioClip) -> String {
    let bytes: Vec<u8> = clip
        .samples()
        .iter()
        .flat_map(|s| s.to_le_bytes())
        .collect();
    sha256_hex(&bytes)
}

/// Write the run's artifacts into `dir` (created if needed) and return its manifest.
/// The manifest is written last, atomically.
pub fn write_run(
    result: &RunResult,
    cfg: &PipelineConfig,
    run_id: &str,
    annotations: &Annotations,
    dir: &Path,
) -> Result<RunManifest> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .stage(Stage::Output)?;
    let mut files = Vec::new();
    let mut put = |role: &str, name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        files.push(FileRecord {
            role: role.into(),
            path: name.into(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    };
    (|| -> Result<()> {
        put("image", "image.png", result.image.to_png()?)?;
        put("i_init", "i_init.png", result.i_init.to_png()?)?;
        if let Some(name) = &cfg.trace_file {
            let mut body = String::new();
            for (step, b) in result.trace.iter().enumerate() {
                body.push_str(&serde_json::json!({ "step": step, "loss": b }).to_string());
                body.push('\n');
            }
            put("trace", name, body.into_bytes())?;
        }
        if cfg.dump_tensors {
            put("z", "z.wtb", encode_tensor(result.z.embedding()))?;
            put("z_n", "z_n.wtb", encode_tensor(result.z_n.embedding()))?;
            put(
                "w_init",
                "w_init.wtb",
                encode_tensor(&result.w_init.to_tensor()?),
            )?;
            put(
                "w_final",
                "w_final.wtb",
                encode_tensor(&result.w_final.to_tensor()?),
            )?;
        }
        Ok(())
    })()
    .stage(Stage::Output)?;

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        run_id: run_id.into(),
        seed: cfg.seed,
        derived_seeds: derived_seeds(cfg.seed),
        config: cfg.clone(),
        backends: result.backends.clone(),
        audio: AudioSummary {
            source_path: result.clip.source_path.clone(),
            sample_rate: result.clip.sample_rate(),
            sample_count: result.clip.samples().len(),
            label: result.clip.label.clone(),
            samples_sha256: samples_sha256(&result.clip),
        },
        annotations: annotations.clone(),
        prompt: result.prompt.clone(),
        caption: result.caption.clone(),
        audio_attention: result.audio_attention.values().to_vec(),
        sentence_attention: result.sentence_attention.values().to_vec(),
        noun_mask: result.w_init.noun_mask.clone(),
        caption_mask: result.w_init.caption_mask.clone(),
        w_init: result.w_init.weights.clone(),
        w_final: result.w_final.weights.clone(),
        trace: result.trace.clone(),
        final_loss: result.final_loss,
        files,
        timings_ms: result.timings_ms.clone(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes()).stage(Stage::Output)?;
    log::info!("wrote {}", dir.display());
    Ok(manifest)
}

/// Run identifier: the audio file stem (or "clip") plus the seed.
pub fn default_run_id(clip: &AudioClip, seed: u64) -> String {
    let stem = Some(clip.source_path.as_str())
        .filter(|p| !p.is_empty())
        .and_then(|p| Path::new(p).file_stem())
        .and_then(|s| s.to_str())
        .unwrap_or("clip");
    let safe: String = stem
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '_' || c == '+' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}-s{seed}")
}

/// Re-run a manifest's configuration on its recorded audio. The amplification in the
/// config is re-applied to the original file, so the result matches the original run.
pub fn replay(manifest: &RunManifest, base: &Path) -> Result<RunResult> {
    let recorded = Path::new(&manifest.audio.source_path);
    let path: PathBuf = if recorded.is_absolute() {
        recorded.into()
    } else {
        base.join(recorded)
    };
    let mut clip = read_wav(&path).stage(Stage::Input)?;
    clip.source_path = manifest.audio.source_path.clone();
    clip.label = manifest.audio.label.clone();
    let backends = Backends::resolve(&manifest.config.backends, &manifest.config.mock)?;
    run_generation(&clip, &manifest.config, &backends)
}
