use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorBuffer;

/// Split text into words: whitespace-separated, with leading and trailing
/// punctuation stripped. Captioners and text encoders share this segmentation
/// so that caption words line up with encoder alignments.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub words: Vec<String>,
    pub noun_probability: Vec<f64>,
    /// Encoder-token indices covered by each word.
    pub encoder_alignment: Vec<Vec<usize>>,
}

impl Caption {
    /// A caption with words taken from `text`, no noun probabilities and no alignment yet.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let words = tokenize_words(&text);
        let n = words.len();
        Self {
            text,
            words,
            noun_probability: vec![0.0; n],
            encoder_alignment: vec![Vec::new(); n],
        }
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        if self.noun_probability.len() != n || self.encoder_alignment.len() != n {
            return Err(Error::Shape(format!(
                "caption has {n} words, {} noun probabilities, {} alignments",
                self.noun_probability.len(),
                self.encoder_alignment.len()
            )));
        }
        if let Some(p) = self
            .noun_probability
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Validation(format!(
                "noun probability {p} outside [0, 1]"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (w, idx) in self.encoder_alignment.iter().enumerate() {
            if idx.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Alignment(format!(
                    "alignment of word {w} is not strictly increasing"
                )));
            }
            for &i in idx {
                if !seen.insert(i) {
                    return Err(Error::Alignment(format!(
                        "encoder token {i} is aligned to more than one word"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Audio,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionVector {
    pub kind: AttentionKind,
    values: Vec<f64>,
}

impl AttentionVector {
    pub fn new(kind: AttentionKind, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "{kind:?} attention value {v} outside [0, 1]"
            )));
        }
        Ok(Self { kind, values })
    }

    pub fn zeros(kind: AttentionKind, n: usize) -> Self {
        Self {
            kind,
            values: vec![0.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-encoder-token modulation weights (`W_init` and its optimized successors).
///
/// Tokens outside the caption span carry weight 1.0 and are in neither group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub weights: Vec<f64>,
    pub noun_mask: Vec<bool>,
    /// Which tokens belong to the caption span; the rest are neutral.
    pub caption_mask: Vec<bool>,
    pub caption_token_count: usize,
}

impl TokenWeights {
    /// All-neutral weights for `n` tokens.
    pub fn neutral(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            noun_mask: vec![false; n],
            caption_mask: vec![false; n],
            caption_token_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if self.noun_mask.len() != n || self.caption_mask.len() != n {
            return Err(Error::Shape("token weight masks differ in length".into()));
        }
        if self.caption_mask.iter().filter(|&&c| c).count() != self.caption_token_count {
            return Err(Error::Validation(
                "caption_token_count disagrees with mask".into(),
            ));
        }
        for i in 0..n {
            let w = self.weights[i];
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Validation(format!(
                    "weight {i} = {w} is not a non-negative real"
                )));
            }
            if !self.caption_mask[i] && (w != 1.0 || self.noun_mask[i]) {
                return Err(Error::Validation(format!(
                    "neutral token {i} must have weight 1.0 and no noun flag"
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Result<TensorBuffer> {
        TensorBuffer::from_f64(vec![self.weights.len()], &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    /// `[height, width, 3]`, values in [0, 1].
    pub pixels: TensorBuffer,
    pub seed: u64,
}

impl GeneratedImage {
    pub fn new(pixels: TensorBuffer, seed: u64) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Shape(format!(
                "image must be [h, w, 3], got {shape:?}"
            )));
        }
        if pixels.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("pixel outside [0, 1]".into()));
        }
        Ok(Self { pixels, seed })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels.data()[(y * self.width() + x) * 3 + c]
    }

    /// 8-bit RGB PNG encoding.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .pixels
            .data()
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8], seed: u64) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("png decode: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f32::from(b) / 255.0)
            .collect();
        Self::new(
            TensorBuffer::new(vec![h as usize, w as usize, 3], data)?,
            seed,
        )
    }
}
