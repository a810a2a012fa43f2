//! Deterministic mock backends.
//!
//! All mocks are pure functions of their inputs and the suite seed. They are wired so
//! that their outputs are mutually coherent:
//!
//! * the generator writes the mean-pooled conditioning into horizontal bands of the
//!   image (channel 0 carries `0.5 + 0.35 * pooled[k]` in band `k`), so image
//!   statistics are a fixed linear function of the conditioning before clamping;
//! * the scorer's image embedding reads those bands back, and its differentiable
//!   (guided) similarity is the analytic toy cosine between the pooled conditioning and
//!   the reference embedding;
//! * the detector and classifier are seeded linear heads on the same image embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::toy_similarity;
use super::{
    BackendInfo, CaptionOutput, Captioner, Classifier, Detection, Detector, Encoded, Generator,
    GuidedScore, Reference, SamplerSettings, Scorer, Tagger, TextEncoder,
};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::seed::{fnv1a, fnv1a_extend, splitmix64, stage_rng};
use crate::tensor::{LatentConditioning, LatentGrid, TensorBuffer};
use crate::types::{tokenize_words, GeneratedImage};

const VERSION: &str = "1";
const BAND_GAIN: f64 = 0.35;
const CHANNEL_GAIN: [f64; 3] = [1.0, -0.6, 0.3];
const NOISE_AMPLITUDE: f64 = 0.03;

/// Objects the mock detector can report.
pub const DETECTOR_CLASSES: [&str; 10] = [
    "person", "dog", "cat", "car", "bird", "train", "cow", "sheep", "airplane", "horse",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSuite {
    pub seed: u64,
    pub token_count: usize,
    pub channel_dim: usize,
    pub image_size: usize,
    pub scorer_resolution: usize,
    pub class_count: usize,
}

impl Default for MockSuite {
    fn default() -> Self {
        Self {
            seed: 0,
            token_count: 32,
            channel_dim: 8,
            image_size: 64,
            scorer_resolution: 32,
            class_count: 10,
        }
    }
}

impl MockSuite {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_count < 3 {
            return Err(Error::Argument(
                "mock token_count must be at least 3".into(),
            ));
        }
        if self.channel_dim == 0 || self.channel_dim > self.scorer_resolution.min(self.image_size) {
            return Err(Error::Argument(format!(
                "mock channel_dim must be in 1..={}",
                self.scorer_resolution.min(self.image_size)
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Argument(
                "mock class_count must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn captioner(&self) -> MockCaptioner {
        MockCaptioner { seed: self.seed }
    }

    pub fn tagger(&self) -> MockTagger {
        MockTagger
    }

    pub fn text_encoder(&self) -> MockTextEncoder {
        MockTextEncoder {
            suite: self.clone(),
        }
    }

    pub fn generator(&self) -> MockGenerator {
        MockGenerator {
            size: self.image_size,
        }
    }

    pub fn scorer(&self) -> MockScorer {
        MockScorer {
            suite: self.clone(),
        }
    }

    pub fn detector(&self) -> MockDetector {
        MockDetector {
            suite: self.clone(),
        }
    }

    pub fn classifier(&self) -> MockClassifier {
        MockClassifier {
            suite: self.clone(),
        }
    }

    /// Seeded `rows x cols` matrix with entries uniform in [-1, 1].
    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Vec<f64> {
        let mut rng = stage_rng(self.seed, name);
        (0..rows * cols)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect()
    }
}

fn info(id: &str) -> BackendInfo {
    BackendInfo::new(&format!("mock-{id}"), VERSION)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

// --- captioner ------------------------------------------------------------------

/// `(noun, verb, countable)` sound sources the mock captioner can describe.
const SOURCES: [(&str, &str, bool); 14] = [
    ("dog", "barks", true),
    ("baby", "cries", true),
    ("man", "speaks", true),
    ("woman", "laughs", true),
    ("engine", "revs", true),
    ("car", "passes", true),
    ("bird", "chirps", true),
    ("rain", "falls", false),
    ("wind", "blows", false),
    ("water", "splashes", false),
    ("train", "rumbles", true),
    ("crowd", "cheers", true),
    ("siren", "wails", true),
    ("cat", "meows", true),
];

pub struct MockCaptioner {
    seed: u64,
}

impl MockCaptioner {
    fn clause(&self, segment: &[f32], words: &mut Vec<String>) {
        let n = segment.len().max(1) as f64;
        let rms = (segment.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>() / n).sqrt();
        let zcr = segment
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count() as f64
            / n;
        let mut h = fnv1a(&self.seed.to_le_bytes());
        h = fnv1a_extend(h, &((rms * 20.0).round() as i64).to_le_bytes());
        h = fnv1a_extend(h, &((zcr * 20.0).round() as i64).to_le_bytes());
        let (noun, verb, countable) = SOURCES[(splitmix64(h) % SOURCES.len() as u64) as usize];
        if countable {
            words.push("a".into());
        }
        words.push(noun.into());
        words.push(verb.into());
        if rms > 0.3 {
            words.push("loudly".into());
        } else if rms < 0.03 {
            words.push("softly".into());
        }
    }
}

impl Captioner for MockCaptioner {
    fn info(&self) -> BackendInfo {
        info("captioner")
    }

    /// Clips of two seconds or more get one clause per half. Each word's attention is
    /// `1 - exp(-4 rms)` over the slice of the clip it covers.
    fn caption(&self, clip: &AudioClip) -> Result<CaptionOutput> {
        let samples = clip.samples();
        let mut words = Vec::new();
        if clip.duration_secs() >= 2.0 {
            let mid = samples.len() / 2;
            self.clause(&samples[..mid], &mut words);
            let mut second = Vec::new();
            self.clause(&samples[mid..], &mut second);
            if second[..] != words[..] {
                words.push("and".into());
                words.extend(second);
            }
        } else {
            self.clause(samples, &mut words);
        }
        let audio_attention = clip
            .segment_rms(words.len())
            .into_iter()
            .map(|rms| 1.0 - (-4.0 * rms).exp())
            .collect();
        Ok(CaptionOutput {
            text: words.join(" "),
            words,
            audio_attention,
        })
    }
}

// --- tagger ---------------------------------------------------------------------

pub struct MockTagger;

const LEXICON: &[(&str, f64)] = &[
    ("dog", 0.9),
    ("baby", 0.92),
    ("man", 0.9),
    ("woman", 0.9),
    ("person", 0.93),
    ("people", 0.9),
    ("child", 0.91),
    ("children", 0.9),
    ("engine", 0.88),
    ("car", 0.91),
    ("bird", 0.9),
    ("birds", 0.89),
    ("rain", 0.86),
    ("wind", 0.85),
    ("water", 0.84),
    ("train", 0.89),
    ("crowd", 0.87),
    ("siren", 0.83),
    ("cat", 0.9),
    ("tires", 0.88),
    ("thunder", 0.86),
    ("door", 0.9),
    ("music", 0.85),
    ("barks", 0.1),
    ("cries", 0.12),
    ("speaks", 0.1),
    ("laughs", 0.11),
    ("revs", 0.1),
    ("passes", 0.14),
    ("chirps", 0.12),
    ("falls", 0.13),
    ("blows", 0.12),
    ("splashes", 0.15),
    ("rumbles", 0.11),
    ("cheers", 0.16),
    ("wails", 0.1),
    ("meows", 0.1),
    ("revving", 0.15),
    ("falling", 0.18),
    ("squealing", 0.12),
    ("a", 0.02),
    ("an", 0.02),
    ("the", 0.02),
    ("and", 0.03),
    ("then", 0.03),
    ("while", 0.03),
    ("is", 0.02),
    ("loudly", 0.05),
    ("softly", 0.05),
];

impl MockTagger {
    pub fn probability(word: &str) -> f64 {
        let w = word.to_lowercase();
        if let Some(&(_, p)) = LEXICON.iter().find(|(k, _)| *k == w) {
            return p;
        }
        if w.ends_with("ly") {
            0.1
        } else if w.ends_with("ing") {
            0.2
        } else if w.ends_with('s') {
            0.4
        } else {
            0.6
        }
    }
}

impl Tagger for MockTagger {
    fn info(&self) -> BackendInfo {
        info("tagger")
    }

    fn noun_probabilities(&self, words: &[String]) -> Result<Vec<f64>> {
        Ok(words.iter().map(|w| Self::probability(w)).collect())
    }
}

// --- text encoder ---------------------------------------------------------------

pub struct MockTextEncoder {
    suite: MockSuite,
}

/// Deterministic stand-in for a text encoder.
///
/// Token layout: `<bos>`, each word lowercased and split into chunks of up to four
/// characters, `<eos>`, then `<pad>` up to `token_count`. Content that does not fit is
/// truncated. Row `i` is a unit vector drawn from a stream seeded by the hash of
/// `(suite seed, i, token text)`.
pub fn mock_text_encoder(text: &str, suite: &MockSuite) -> Result<Encoded> {
    suite.validate()?;
    if text.trim().is_empty() {
        return Err(Error::Argument("text to encode is empty".into()));
    }
    let capacity = suite.token_count - 2;
    let mut tokens = vec!["<bos>".to_string()];
    let mut alignment = Vec::new();
    for word in tokenize_words(text) {
        let lower: Vec<char> = word.to_lowercase().chars().collect();
        let mut idx = Vec::new();
        for chunk in lower.chunks(4) {
            if tokens.len() > capacity {
                break;
            }
            idx.push(tokens.len());
            tokens.push(chunk.iter().collect());
        }
        alignment.push(idx);
    }
    tokens.push("<eos>".into());
    while tokens.len() < suite.token_count {
        tokens.push("<pad>".into());
    }

    let d = suite.channel_dim;
    let mut data = Vec::with_capacity(suite.token_count * d);
    for (i, tok) in tokens.iter().enumerate() {
        let mut h = fnv1a(&suite.seed.to_le_bytes());
        h = fnv1a_extend(h, &(i as u64).to_le_bytes());
        h = fnv1a_extend(h, tok.as_bytes());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(splitmix64(h));
        let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        normalize(&mut row);
        data.extend(row.into_iter().map(|v| v as f32));
    }
    let z = LatentConditioning::new(TensorBuffer::new(vec![suite.token_count, d], data)?)?;
    Ok(Encoded {
        z,
        word_alignment: alignment,
    })
}

impl TextEncoder for MockTextEncoder {
    fn info(&self) -> BackendInfo {
        info("text-encoder")
    }
    fn token_count(&self) -> usize {
        self.suite.token_count
    }
    fn channel_dim(&self) -> usize {
        self.suite.channel_dim
    }
    fn encode(&self, text: &str) -> Result<Encoded> {
        mock_text_encoder(text, &self.suite)
    }
}

// --- generator ------------------------------------------------------------------

pub struct MockGenerator {
    size: usize,
}

/// Band `k` covers rows `y` with `y * bands / height == k`.
fn band_of(y: usize, height: usize, bands: usize) -> usize {
    y * bands / height
}

impl Generator for MockGenerator {
    fn info(&self) -> BackendInfo {
        info("generator")
    }

    /// Renders a `size x size` image; sampler settings are recorded upstream but do not
    /// affect the mock.
    fn generate(
        &self,
        conditioning: &LatentConditioning,
        seed: u64,
        _settings: &SamplerSettings,
    ) -> Result<GeneratedImage> {
        let pooled = conditioning.to_grid().mean_pool();
        let bands = pooled.len();
        if bands > self.size {
            return Err(Error::backend("generator", "more channels than image rows"));
        }
        let mut rng = stage_rng(seed, "mock-generator-noise");
        let mut data = Vec::with_capacity(self.size * self.size * 3);
        for y in 0..self.size {
            let p = pooled[band_of(y, self.size, bands)];
            for _x in 0..self.size {
                for gain in CHANNEL_GAIN {
                    let noise: f64 = rng.gen_range(-1.0..=1.0);
                    let v = 0.5 + BAND_GAIN * p * gain + NOISE_AMPLITUDE * noise;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        GeneratedImage::new(
            TensorBuffer::new(vec![self.size, self.size, 3], data)?,
            seed,
        )
    }
}

/// Read the band signal back out of an image.
fn decode_bands(image: &GeneratedImage, bands: usize) -> Result<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    if h < bands {
        return Err(Error::Shape(format!(
            "image has {h} rows, needs at least {bands}"
        )));
    }
    let mut sums = vec![0.0; bands];
    let mut counts = vec![0usize; bands];
    for y in 0..h {
        let k = band_of(y, h, bands);
        for x in 0..w {
            sums[k] += f64::from(image.pixel(y, x, 0));
        }
        counts[k] += w;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (s / c as f64 - 0.5) / BAND_GAIN)
        .collect())
}

// --- scorer ---------------------------------------------------------------------

pub struct MockScorer {
    suite: MockSuite,
}

impl MockScorer {
    fn target(&self, reference: Reference<'_>) -> Result<Vec<f64>> {
        match reference {
            Reference::Text(t) => self.embed_text(t),
            Reference::Audio(a) => self.embed_audio(a),
        }
    }
}

impl Scorer for MockScorer {
    fn info(&self) -> BackendInfo {
        info("scorer")
    }

    fn input_resolution(&self) -> (usize, usize) {
        (self.suite.scorer_resolution, self.suite.scorer_resolution)
    }

    fn embed_image(&self, image: &GeneratedImage) -> Result<Vec<f64>> {
        decode_bands(image, self.suite.channel_dim)
    }

    /// Unit-normalized mean-pooled mock encoding.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = mock_text_encoder(text, &self.suite)?
            .z
            .to_grid()
            .mean_pool();
        normalize(&mut v);
        Ok(v)
    }

    /// Seeded projection of per-segment RMS plus a bias term.
    fn embed_audio(&self, audio: &AudioClip) -> Result<Vec<f64>> {
        let d = self.suite.channel_dim;
        let mut features = audio.segment_rms(d);
        features.push(1.0);
        let m = self.suite.matrix("mock-audio-projection", d, d + 1);
        let mut v: Vec<f64> = m
            .chunks_exact(d + 1)
            .map(|row| row.iter().zip(&features).map(|(a, b)| a * b).sum())
            .collect();
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate("audio embedding is zero".into()));
        }
        normalize(&mut v);
        Ok(v)
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    /// The toy cosine between pooled `z_n` and the reference embedding; the image does
    /// not enter the value, so the gradient is exact.
    fn guided_similarity(
        &self,
        _image: &GeneratedImage,
        conditioning: &LatentGrid,
        reference: Reference<'_>,
        want_gradient: bool,
    ) -> Result<GuidedScore> {
        let target = self.target(reference)?;
        let (value, grad) = toy_similarity(conditioning, &target)?;
        Ok(GuidedScore {
            value,
            gradient: want_gradient.then_some(grad),
        })
    }
}

// --- detector and classifier ----------------------------------------------------

pub struct MockDetector {
    suite: MockSuite,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Detector for MockDetector {
    fn info(&self) -> BackendInfo {
        info("detector")
    }

    /// One detection per image from a seeded linear head on the band embedding; a second
    /// one when the runner-up logit is also strong.
    fn detect(&self, image: &GeneratedImage) -> Result<Vec<Detection>> {
        let d = self.suite.channel_dim;
        let e = decode_bands(image, d)?;
        let m = self
            .suite
            .matrix("mock-detector-head", DETECTOR_CLASSES.len(), d);
        let mut logits: Vec<(usize, f64)> = m
            .chunks_exact(d)
            .map(|row| row.iter().zip(&e).map(|(a, b)| a * b).sum())
            .enumerate()
            .collect();
        logits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let strongest = e
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let (h, w) = (image.height() as f64, image.width() as f64);
        let y0 = (strongest as f64 * h / d as f64).floor();
        let y1 = ((strongest + 1) as f64 * h / d as f64).ceil().min(h);
        let bbox = [0.0, y0, w, y1 - y0];

        let mut out = Vec::new();
        for (rank, &(class, logit)) in logits.iter().take(2).enumerate() {
            if rank == 1 && logit < 0.5 {
                break;
            }
            out.push(Detection {
                class_name: DETECTOR_CLASSES[class].into(),
                confidence: sigmoid(3.0 * logit),
                bbox,
            });
        }
        Ok(out)
    }
}

pub struct MockClassifier {
    suite: MockSuite,
}

impl Classifier for MockClassifier {
    fn info(&self) -> BackendInfo {
        info("classifier")
    }

    fn class_count(&self) -> usize {
        self.suite.class_count
    }

    fn class_probabilities(&self, image: &GeneratedImage) -> Result<Vec<f64>> {
        let d = self.suite.channel_dim;
        let k = self.suite.class_count;
        let e = decode_bands(image, d)?;
        let m = self.suite.matrix("mock-classifier-head", k, d);
        let logits: Vec<f64> = m
            .chunks_exact(d)
            .map(|row| 4.0 * row.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(seconds: f64, amp: f32) -> AudioClip {
        let rate = 8000;
        let n = (seconds * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * ((i as f32) * 0.05).sin() * (1.0 + (i as f32 / n as f32)) / 2.0)
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    #[test]
    fn encoder_is_deterministic_and_unit_norm() {
        let suite = MockSuite::default();
        let a = mock_text_encoder("a dog barks loudly", &suite).unwrap();
        let b = mock_text_encoder("a dog barks loudly", &suite).unwrap();
        assert_eq!(a, b);
        for i in 0..a.z.token_count() {
            let n: f64 =
                a.z.row(i)
                    .iter()
                    .map(|&v| f64::from(v).powi(2))
                    .sum::<f64>()
                    .sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {i} norm {n}");
        }
        assert_eq!(
            a.word_alignment,
            vec![vec![1], vec![2], vec![3, 4], vec![5, 6]]
        );
    }

    #[test]
    fn encoder_seed_changes_embedding() {
        let a = mock_text_encoder("rain falls", &MockSuite::with_seed(1)).unwrap();
        let b = mock_text_encoder("rain falls", &MockSuite::with_seed(2)).unwrap();
        assert_ne!(a.z, b.z);
    }

    #[test]
    fn encoder_truncates_and_rejects_empty() {
        let suite = MockSuite {
            token_count: 5,
            ..MockSuite::default()
        };
        let e = mock_text_encoder("one two three four five", &suite).unwrap();
        assert_eq!(
            e.word_alignment,
            vec![vec![1], vec![2], vec![3], vec![], vec![]]
        );
        assert!(mock_text_encoder("  ", &suite).is_err());
    }

    #[test]
    fn captioner_attention_matches_words() {
        let cap = MockSuite::default().captioner();
        for clip in [tone(0.5, 0.2), tone(3.0, 0.9), tone(1.0, 0.01)] {
            let out = cap.caption(&clip).unwrap();
            assert_eq!(out.words.len(), out.audio_attention.len());
            assert!(!out.words.is_empty());
            assert!(out.audio_attention.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!(out.audio_attention.iter().sum::<f64>() <= out.words.len() as f64);
            assert_eq!(out, cap.caption(&clip).unwrap());
            assert_eq!(out.words, tokenize_words(&out.text));
        }
    }

    #[test]
    fn tagger_lexicon() {
        let p = MockTagger
            .noun_probabilities(&["dog".into(), "barks".into()])
            .unwrap();
        assert_eq!(p, vec![0.9, 0.1]);
    }

    #[test]
    fn generator_bands_decode_to_pooled_conditioning() {
        let suite = MockSuite::default();
        let z = mock_text_encoder("a bird chirps", &suite).unwrap().z;
        let img = suite
            .generator()
            .generate(&z, 11, &SamplerSettings::default())
            .unwrap();
        assert_eq!((img.height(), img.width()), (64, 64));
        let pooled = z.to_grid().mean_pool();
        let decoded = suite.scorer().embed_image(&img).unwrap();
        for (p, e) in pooled.iter().zip(&decoded) {
            assert!((p - e).abs() < 0.02, "{p} vs {e}");
        }
        let again = suite
            .generator()
            .generate(&z, 11, &SamplerSettings::default())
            .unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn classifier_rows_are_distributions() {
        let suite = MockSuite::default();
        let z = mock_text_encoder("a cat meows", &suite).unwrap().z;
        let img = suite
            .generator()
            .generate(&z, 1, &SamplerSettings::default())
            .unwrap();
        let p = suite.classifier().class_probabilities(&img).unwrap();
        assert_eq!(p.len(), 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dets = suite.detector().detect(&img).unwrap();
        assert!(!dets.is_empty());
        assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.confidence)));
    }

    #[test]
    fn audio_embedding_is_unit() {
        let e = MockSuite::default()
            .scorer()
            .embed_audio(&tone(1.0, 0.5))
            .unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
