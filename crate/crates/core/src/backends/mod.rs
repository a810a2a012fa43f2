//! Contracts for the external model roles the pipeline consumes.
//!
//! Every role is a trait object. Pretrained-model adapters implement the same traits;
//! the [`mock`] suite provides deterministic, differentiable stand-ins so every
//! downstream formula can be exercised without model weights.

pub mod mock;
pub mod oracle;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::{LatentConditioning, LatentGrid};
use crate::types::GeneratedImage;

pub use mock::MockSuite;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub version: String,
    pub concurrent_safe: bool,
    pub deterministic: bool,
}

impl BackendInfo {
    pub fn new(id: &str, version: &str) -> Self {
        Self {
            id: id.into(),
            version: version.into(),
            concurrent_safe: true,
            deterministic: true,
        }
    }
}

/// Caption text, its words and one audio-attention value per word.
///
/// Adapters must document how attention is derived. The mock derives it from the RMS of
/// the clip segment each word covers.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutput {
    pub text: String,
    pub words: Vec<String>,
    pub audio_attention: Vec<f64>,
}

pub trait Captioner: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn caption(&self, clip: &AudioClip) -> Result<CaptionOutput>;
}

pub trait Tagger: Send + Sync {
    fn info(&self) -> BackendInfo;
    /// Probability that each word is a noun.
    fn noun_probabilities(&self, words: &[String]) -> Result<Vec<f64>>;
}

/// Encoded text plus, for each word of `tokenize_words(text)`, the encoder-token
/// indices it occupies (empty if truncated away).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: LatentConditioning,
    pub word_alignment: Vec<Vec<usize>>,
}

pub trait TextEncoder: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn token_count(&self) -> usize;
    fn channel_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Encoded>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub sampler: String,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            sampler: "plms".into(),
            steps: 40,
            width: 512,
            height: 512,
        }
    }
}

pub trait Generator: Send + Sync {
    fn info(&self) -> BackendInfo;
    /// Must be deterministic in `(conditioning, seed, settings)`.
    fn generate(
        &self,
        conditioning: &LatentConditioning,
        seed: u64,
        settings: &SamplerSettings,
    ) -> Result<GeneratedImage>;
}

/// What an image is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Text(&'a str),
    Audio(&'a AudioClip),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedScore {
    pub value: f64,
    /// d value / d z_n, row-major `[tokens, channels]`.
    pub gradient: Option<Vec<f64>>,
}

pub trait Scorer: Send + Sync {
    fn info(&self) -> BackendInfo;

    /// Resolution augmented crops are resized to, `(height, width)`.
    fn input_resolution(&self) -> (usize, usize);

    fn embed_image(&self, image: &GeneratedImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_audio(&self, audio: &AudioClip) -> Result<Vec<f64>>;

    /// Text-image similarity in [-1, 1].
    fn text_image_similarity(&self, image: &GeneratedImage, text: &str) -> Result<f64> {
        cosine(&self.embed_image(image)?, &self.embed_text(text)?)
    }

    /// Audio-image similarity in [-1, 1].
    fn audio_image_similarity(&self, image: &GeneratedImage, audio: &AudioClip) -> Result<f64> {
        cosine(&self.embed_image(image)?, &self.embed_audio(audio)?)
    }

    /// Whether [`Scorer::guided_similarity`] can return gradients.
    fn supports_gradient(&self) -> bool {
        false
    }

    /// Similarity of `image`, generated from `conditioning`, against `reference`; with
    /// `want_gradient`, also its derivative with respect to every element of
    /// `conditioning`.
    fn guided_similarity(
        &self,
        image: &GeneratedImage,
        conditioning: &LatentGrid,
        reference: Reference<'_>,
        want_gradient: bool,
    ) -> Result<GuidedScore> {
        let _ = conditioning;
        if want_gradient {
            return Err(Error::Capability(format!(
                "scorer '{}' cannot differentiate with respect to the conditioning",
                self.info().id
            )));
        }
        let value = match reference {
            Reference::Text(t) => self.text_image_similarity(image, t)?,
            Reference::Audio(a) => self.audio_image_similarity(image, a)?,
        };
        Ok(GuidedScore {
            value,
            gradient: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub confidence: f64,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
}

pub trait Detector: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn detect(&self, image: &GeneratedImage) -> Result<Vec<Detection>>;
}

/// Class-probability source for the Inception Score.
pub trait Classifier: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn class_count(&self) -> usize;
    fn class_probabilities(&self, image: &GeneratedImage) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Backend identifiers per role, as named in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSelection {
    pub captioner: String,
    pub tagger: String,
    pub text_encoder: String,
    pub generator: String,
    pub scorer: String,
    pub detector: String,
    pub classifier: String,
}

impl BackendSelection {
    pub fn mock() -> Self {
        Self::uniform("mock")
    }

    /// Pretrained-model adapters for every role.
    pub fn real() -> Self {
        Self {
            captioner: "act".into(),
            tagger: "flair".into(),
            text_encoder: "clip".into(),
            generator: "stable-diffusion".into(),
            scorer: "audioclip".into(),
            detector: "yolov5".into(),
            classifier: "inception-v3".into(),
        }
    }

    pub fn for_set(set: &str) -> Result<Self> {
        match set {
            "mock" => Ok(Self::mock()),
            "real" => Ok(Self::real()),
            other => Err(Error::Argument(format!(
                "unknown backend set {other:?} (expected mock or real)"
            ))),
        }
    }

    fn uniform(id: &str) -> Self {
        Self {
            captioner: id.into(),
            tagger: id.into(),
            text_encoder: id.into(),
            generator: id.into(),
            scorer: id.into(),
            detector: id.into(),
            classifier: id.into(),
        }
    }
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self::mock()
    }
}

/// Resolved backends for one configuration.
#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn Captioner>,
    pub tagger: Arc<dyn Tagger>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub generator: Arc<dyn Generator>,
    pub scorer: Arc<dyn Scorer>,
    pub detector: Arc<dyn Detector>,
    pub classifier: Arc<dyn Classifier>,
}

fn unavailable(role: &str, id: &str) -> Error {
    Error::backend(
        role,
        format!("backend {id:?} is not available in this build (only \"mock\" is built in)"),
    )
}

impl Backends {
    pub fn mock(suite: &MockSuite) -> Self {
        Self {
            captioner: Arc::new(suite.captioner()),
            tagger: Arc::new(suite.tagger()),
            text_encoder: Arc::new(suite.text_encoder()),
            generator: Arc::new(suite.generator()),
            scorer: Arc::new(suite.scorer()),
            detector: Arc::new(suite.detector()),
            classifier: Arc::new(suite.classifier()),
        }
    }

    /// Resolve each role by identifier. Backends that do not declare themselves
    /// concurrent-safe are wrapped so calls into them are serialized.
    pub fn resolve(sel: &BackendSelection, suite: &MockSuite) -> Result<Self> {
        suite.validate()?;
        let mock = Self::mock(suite);
        let pick = |role: &str, id: &str| -> Result<()> {
            if id == "mock" {
                Ok(())
            } else {
                Err(unavailable(role, id))
            }
        };
        pick("captioner", &sel.captioner)?;
        pick("tagger", &sel.tagger)?;
        pick("text_encoder", &sel.text_encoder)?;
        pick("generator", &sel.generator)?;
        pick("scorer", &sel.scorer)?;
        pick("detector", &sel.detector)?;
        pick("classifier", &sel.classifier)?;
        Ok(mock.guarded())
    }

    /// Wrap every backend whose info does not declare concurrent safety.
    pub fn guarded(self) -> Self {
        Self {
            captioner: guard_if_needed(self.captioner, |b| Arc::new(Exclusive::new(b))),
            tagger: guard_if_needed(self.tagger, |b| Arc::new(Exclusive::new(b))),
            text_encoder: guard_if_needed(self.text_encoder, |b| Arc::new(Exclusive::new(b))),
            generator: guard_if_needed(self.generator, |b| Arc::new(Exclusive::new(b))),
            scorer: guard_if_needed(self.scorer, |b| Arc::new(Exclusive::new(b))),
            detector: guard_if_needed(self.detector, |b| Arc::new(Exclusive::new(b))),
            classifier: guard_if_needed(self.classifier, |b| Arc::new(Exclusive::new(b))),
        }
    }

    pub fn describe(&self) -> BTreeMap<String, BackendInfo> {
        BTreeMap::from([
            ("captioner".to_string(), self.captioner.info()),
            ("classifier".to_string(), self.classifier.info()),
            ("detector".to_string(), self.detector.info()),
            ("generator".to_string(), self.generator.info()),
            ("scorer".to_string(), self.scorer.info()),
            ("tagger".to_string(), self.tagger.info()),
            ("text_encoder".to_string(), self.text_encoder.info()),
        ])
    }
}

trait HasInfo {
    fn concurrent_safe(&self) -> bool;
}

macro_rules! has_info {
    ($($t:ident),*) => {$(
        impl HasInfo for dyn $t {
            fn concurrent_safe(&self) -> bool {
                self.info().concurrent_safe
            }
        }
    )*};
}
has_info!(
    Captioner,
    Tagger,
    TextEncoder,
    Generator,
    Scorer,
    Detector,
    Classifier
);

fn guard_if_needed<T: ?Sized + HasInfo>(b: Arc<T>, wrap: impl FnOnce(Arc<T>) -> Arc<T>) -> Arc<T> {
    if b.concurrent_safe() {
        b
    } else {
        wrap(b)
    }
}

/// Serializes every call into a backend that is not safe for concurrent use.
pub struct Exclusive<T: ?Sized> {
    inner: Arc<T>,
    lock: Mutex<()>,
}

impl<T: ?Sized> Exclusive<T> {
    pub fn new(inner: Arc<T>) -> Self {
        Self {
            inner,
            lock: Mutex::new(()),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _held = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        f(&self.inner)
    }
}

impl Captioner for Exclusive<dyn Captioner> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn caption(&self, clip: &AudioClip) -> Result<CaptionOutput> {
        self.with(|b| b.caption(clip))
    }
}

impl Tagger for Exclusive<dyn Tagger> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn noun_probabilities(&self, words: &[String]) -> Result<Vec<f64>> {
        self.with(|b| b.noun_probabilities(words))
    }
}

impl TextEncoder for Exclusive<dyn TextEncoder> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn token_count(&self) -> usize {
        self.inner.token_count()
    }
    fn channel_dim(&self) -> usize {
        self.inner.channel_dim()
    }
    fn encode(&self, text: &str) -> Result<Encoded> {
        self.with(|b| b.encode(text))
    }
}

impl Generator for Exclusive<dyn Generator> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn generate(
        &self,
        conditioning: &LatentConditioning,
        seed: u64,
        settings: &SamplerSettings,
    ) -> Result<GeneratedImage> {
        self.with(|b| b.generate(conditioning, seed, settings))
    }
}

impl Scorer for Exclusive<dyn Scorer> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn input_resolution(&self) -> (usize, usize) {
        self.inner.input_resolution()
    }
    fn embed_image(&self, image: &GeneratedImage) -> Result<Vec<f64>> {
        self.with(|b| b.embed_image(image))
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.with(|b| b.embed_text(text))
    }
    fn embed_audio(&self, audio: &AudioClip) -> Result<Vec<f64>> {
        self.with(|b| b.embed_audio(audio))
    }
    fn text_image_similarity(&self, image: &GeneratedImage, text: &str) -> Result<f64> {
        self.with(|b| b.text_image_similarity(image, text))
    }
    fn audio_image_similarity(&self, image: &GeneratedImage, audio: &AudioClip) -> Result<f64> {
        self.with(|b| b.audio_image_similarity(image, audio))
    }
    fn supports_gradient(&self) -> bool {
        self.inner.supports_gradient()
    }
    fn guided_similarity(
        &self,
        image: &GeneratedImage,
        conditioning: &LatentGrid,
        reference: Reference<'_>,
        want_gradient: bool,
    ) -> Result<GuidedScore> {
        self.with(|b| b.guided_similarity(image, conditioning, reference, want_gradient))
    }
}

impl Detector for Exclusive<dyn Detector> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn detect(&self, image: &GeneratedImage) -> Result<Vec<Detection>> {
        self.with(|b| b.detect(image))
    }
}

impl Classifier for Exclusive<dyn Classifier> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn class_probabilities(&self, image: &GeneratedImage) -> Result<Vec<f64>> {
        self.with(|b| b.class_probabilities(image))
    }
}
