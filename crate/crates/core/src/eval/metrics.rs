//! CLIPscore, Inception Score and YOLO score.

use std::collections::BTreeSet;

use crate::backends::{cosine, Detection};
use crate::error::{Error, Result};
use crate::tensor::TensorBuffer;

pub const CLIPSCORE_WEIGHT: f64 = 2.5;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_IS_SPLITS: usize = 10;

/// `2.5 · max(cos(image, text), 0)`.
pub fn clipscore(image_embedding: &TensorBuffer, text_embedding: &TensorBuffer) -> Result<f64> {
    clipscore_f64(&image_embedding.to_f64(), &text_embedding.to_f64())
}

pub fn clipscore_f64(image_embedding: &[f64], text_embedding: &[f64]) -> Result<f64> {
    if image_embedding.len() != text_embedding.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            image_embedding.len(),
            text_embedding.len()
        )));
    }
    Ok(CLIPSCORE_WEIGHT * cosine(image_embedding, text_embedding)?.max(0.0))
}

/// Inception Score of a `[n_images, n_classes]` probability table.
///
/// Images are split into `splits` contiguous chunks; each chunk scores
/// `exp(mean_x KL(p(y|x) || p(y)))` against its own marginal. Returns the mean and the
/// population standard deviation over chunks.
pub fn inception_score(probs: &TensorBuffer, splits: usize) -> Result<(f64, f64)> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "probabilities must be 2-D, got {shape:?}"
        )));
    }
    let k = shape[1];
    let rows: Vec<Vec<f64>> = probs
        .to_f64()
        .chunks_exact(k.max(1))
        .map(<[f64]>::to_vec)
        .collect();
    inception_score_rows(&rows, splits)
}

pub fn inception_score_rows(rows: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = rows.len();
    if splits == 0 {
        return Err(Error::Argument("splits must be >= 1".into()));
    }
    if n < splits {
        return Err(Error::Argument(format!(
            "{n} images cannot fill {splits} splits"
        )));
    }
    let k = rows[0].len();
    if k == 0 {
        return Err(Error::Shape("no classes".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(Error::Shape(format!(
                "row {i} has {} classes, expected {k}",
                r.len()
            )));
        }
        let sum: f64 = r.iter().sum();
        if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "row {i} is not a probability distribution"
            )));
        }
    }

    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let chunk = &rows[s * n / splits..(s + 1) * n / splits];
            let m = chunk.len() as f64;
            let marginal: Vec<f64> = (0..k)
                .map(|j| chunk.iter().map(|r| r[j]).sum::<f64>() / m)
                .collect();
            let mean_kl = chunk
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p.ln() - q.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            mean_kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of images with at least one detection of an expected class at
/// `confidence >= conf_threshold`.
pub fn yolo_score(
    detections: &[Vec<Detection>],
    expected: &[BTreeSet<String>],
    conf_threshold: f64,
) -> Result<f64> {
    if detections.is_empty() {
        return Err(Error::Argument("no images to score".into()));
    }
    if detections.len() != expected.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} expectation sets",
            detections.len(),
            expected.len()
        )));
    }
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Argument(
            "confidence threshold must be in [0, 1]".into(),
        ));
    }
    let hits = detections
        .iter()
        .zip(expected)
        .filter(|(dets, want)| image_matches(dets, want, conf_threshold))
        .count();
    Ok(hits as f64 / detections.len() as f64)
}

pub fn image_matches(dets: &[Detection], expected: &BTreeSet<String>, conf_threshold: f64) -> bool {
    dets.iter()
        .any(|d| d.confidence >= conf_threshold && expected.contains(&d.class_name))
}

impl Detection {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        let [x, y, w, h] = self.bbox;
        let inside = x >= 0.0
            && y >= 0.0
            && w >= 0.0
            && h >= 0.0
            && x + w <= width as f64
            && y + h <= height as f64;
        if !inside {
            return Err(Error::Validation(format!(
                "box {:?} outside {width}x{height}",
                self.bbox
            )));
        }
        Ok(())
    }
}
