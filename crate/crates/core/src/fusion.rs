//! Attention fusion: positional encoding, per-word weights, `W_init` assembly and
//! conditioning modulation.
//!
//! For word `i` with sentence attention `s`, audio attention `a` and noun flag:
//!
//! ```text
//! P(x)      = 1 / (2 + e^(2 - x/2))
//! noun:       w = s + λ_a·a + P(x)
//! non-noun:   w = s + a + P(x)
//! ```
//!
//! `x` is the word's 1-based position or its audio attention, depending on
//! [`PositionalArgument`]. Word weights are scattered onto the encoder tokens the word
//! covers; every other token keeps the neutral weight 1.0.

use serde::{Deserialize, Serialize};

use crate::backends::Tagger;
use crate::error::{Error, Result};
use crate::tensor::{LatentConditioning, LatentGrid, TensorBuffer};
use crate::types::{AttentionKind, AttentionVector, Caption, TokenWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalArgument {
    PositionIndex,
    AttentionValue,
}

impl std::str::FromStr for PositionalArgument {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position_index" => Ok(Self::PositionIndex),
            "attention_value" => Ok(Self::AttentionValue),
            other => Err(Error::Argument(format!(
                "positional_argument_mode must be position_index or attention_value, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// `λ_a`, the scale on a noun's audio attention.
    pub noun_audio_scale: f64,
    pub noun_threshold: f64,
    pub positional_argument_mode: PositionalArgument,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            noun_audio_scale: 0.1,
            noun_threshold: 0.5,
            positional_argument_mode: PositionalArgument::PositionIndex,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noun_audio_scale >= 0.0) || !self.noun_audio_scale.is_finite() {
            return Err(Error::Argument("noun_audio_scale must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.noun_threshold) {
            return Err(Error::Argument("noun_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which additive terms enter a word weight. Ablations switch terms off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionTerms {
    /// Scaled audio attention and its positional-encoding term.
    pub audio: bool,
    /// Sentence (noun-probability) attention.
    pub sentence: bool,
}

impl FusionTerms {
    pub const ALL: Self = Self {
        audio: true,
        sentence: true,
    };
}

pub fn positional_encoding(x: f64) -> f64 {
    1.0 / (2.0 + (2.0 - 0.5 * x).exp())
}

/// `0.5 - P(x)`, evaluated without cancellation. Stays strictly positive and strictly
/// decreasing where `P` itself has already rounded to 0.5 in `f64` (x above ~76).
pub fn positional_encoding_complement(x: f64) -> f64 {
    let e = (2.0 - 0.5 * x).exp();
    e / (2.0 * (2.0 + e))
}

pub fn fuse_token_weight(s: f64, a: f64, pe_arg: f64, is_noun: bool, cfg: &FusionConfig) -> f64 {
    fuse_with_terms(s, a, pe_arg, is_noun, cfg, FusionTerms::ALL)
}

fn fuse_with_terms(
    s: f64,
    a: f64,
    pe_arg: f64,
    is_noun: bool,
    cfg: &FusionConfig,
    terms: FusionTerms,
) -> f64 {
    let mut w = if terms.sentence { s } else { 0.0 };
    if terms.audio {
        let scale = if is_noun { cfg.noun_audio_scale } else { 1.0 };
        w += scale * a + positional_encoding(pe_arg);
    }
    w
}

/// Sentence attention from the tagger, plus the noun mask obtained by thresholding.
pub fn sentence_attention(
    caption: &Caption,
    tagger: &dyn Tagger,
    cfg: &FusionConfig,
) -> Result<(AttentionVector, Vec<bool>)> {
    if caption.words.is_empty() {
        return Err(Error::Argument("caption has no words".into()));
    }
    let probs = tagger.noun_probabilities(&caption.words)?;
    if probs.len() != caption.words.len() {
        return Err(Error::backend(
            "tagger",
            format!(
                "returned {} probabilities for {} words",
                probs.len(),
                caption.words.len()
            ),
        ));
    }
    let mask = probs.iter().map(|&p| p >= cfg.noun_threshold).collect();
    let attn = AttentionVector::new(AttentionKind::Sentence, probs)
        .map_err(|e| Error::backend("tagger", e.to_string()))?;
    Ok((attn, mask))
}

/// Build `W_init`: per-word weights, split into noun and non-noun groups, scattered
/// back to token order.
pub fn assemble_w_init(
    caption: &Caption,
    audio_attn: &AttentionVector,
    sent_attn: &AttentionVector,
    noun_mask: &[bool],
    cfg: &FusionConfig,
    encoder_token_count: usize,
) -> Result<TokenWeights> {
    assemble_w_init_with(
        caption,
        audio_attn,
        sent_attn,
        noun_mask,
        cfg,
        encoder_token_count,
        FusionTerms::ALL,
    )
}

pub fn assemble_w_init_with(
    caption: &Caption,
    audio_attn: &AttentionVector,
    sent_attn: &AttentionVector,
    noun_mask: &[bool],
    cfg: &FusionConfig,
    encoder_token_count: usize,
    terms: FusionTerms,
) -> Result<TokenWeights> {
    cfg.validate()?;
    let n = caption.words.len();
    if audio_attn.len() != n || sent_attn.len() != n || noun_mask.len() != n {
        return Err(Error::Shape(format!(
            "caption has {n} words; audio attention {}, sentence attention {}, noun mask {}",
            audio_attn.len(),
            sent_attn.len(),
            noun_mask.len()
        )));
    }
    caption.validate()?;
    if let Some(&bad) = caption
        .encoder_alignment
        .iter()
        .flatten()
        .find(|&&i| i >= encoder_token_count)
    {
        return Err(Error::Alignment(format!(
            "token index {bad} outside encoder length {encoder_token_count}"
        )));
    }

    let a = audio_attn.values();
    let s = sent_attn.values();
    let pe_arg = |i: usize| match cfg.positional_argument_mode {
        PositionalArgument::PositionIndex => (i + 1) as f64,
        PositionalArgument::AttentionValue => a[i],
    };
    // W_n and W_wn: (word index, weight) per group.
    let (nouns, others): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| noun_mask[i]);
    let w_n: Vec<(usize, f64)> = nouns
        .iter()
        .map(|&i| (i, fuse_with_terms(s[i], a[i], pe_arg(i), true, cfg, terms)))
        .collect();
    let w_wn: Vec<(usize, f64)> = others
        .iter()
        .map(|&i| (i, fuse_with_terms(s[i], a[i], pe_arg(i), false, cfg, terms)))
        .collect();

    let mut out = TokenWeights::neutral(encoder_token_count);
    for &(word, weight) in w_n.iter().chain(&w_wn) {
        for &tok in &caption.encoder_alignment[word] {
            out.weights[tok] = weight;
            out.noun_mask[tok] = noun_mask[word];
            out.caption_mask[tok] = true;
        }
    }
    out.caption_token_count = out.caption_mask.iter().filter(|&&c| c).count();
    Ok(out)
}

/// `z_n = W ⊙ z`: row `i` of `z` scaled by `weights[i]`.
pub fn modulate(z: &LatentConditioning, w: &TokenWeights) -> Result<LatentConditioning> {
    if w.len() != z.token_count() {
        return Err(Error::Shape(format!(
            "{} weights for {} tokens",
            w.len(),
            z.token_count()
        )));
    }
    let c = z.channel_dim();
    let data = z
        .embedding()
        .data()
        .chunks_exact(c)
        .zip(&w.weights)
        .flat_map(|(row, &wi)| row.iter().map(move |&v| (wi * f64::from(v)) as f32))
        .collect();
    LatentConditioning::new(TensorBuffer::new(z.embedding().shape().to_vec(), data)?)
}

/// Working-precision modulation used inside the optimizer.
pub fn modulate_grid(z: &LatentGrid, weights: &[f64]) -> LatentGrid {
    let data = z
        .data
        .chunks_exact(z.channels)
        .zip(weights)
        .flat_map(|(row, &wi)| row.iter().map(move |&v| wi * v))
        .collect();
    LatentGrid {
        tokens: z.tokens,
        channels: z.channels,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockTagger;
    use proptest::prelude::*;

    fn caption(words: &[&str], alignment: Vec<Vec<usize>>) -> Caption {
        let mut c = Caption::from_text(words.join(" "));
        c.encoder_alignment = alignment;
        c
    }

    #[test]
    fn pe_fixed_points() {
        assert!((positional_encoding(4.0) - 1.0 / 3.0).abs() < 1e-12);
        // 1 / (2 + e^2), evaluated at 30 digits
        assert!((positional_encoding(0.0) - 0.106_506_978_919_200_75).abs() < 1e-6);
        let (p40, p41) = (positional_encoding(40.0), positional_encoding(41.0));
        assert!(p40 > 0.49 && p40 < 0.5 && p41 > 0.49 && p41 < 0.5 && p41 > p40);
    }

    #[test]
    fn complement_tracks_pe() {
        for x in [-50.0, -3.0, 0.0, 4.0, 20.0, 60.0] {
            let sum = positional_encoding(x) + positional_encoding_complement(x);
            assert!((sum - 0.5).abs() < 1e-15, "x={x}");
        }
        assert!(positional_encoding_complement(100.0) > 0.0);
        assert!(positional_encoding_complement(99.0) > positional_encoding_complement(100.0));
    }

    #[test]
    fn fused_weights_worked_example() {
        let cfg = FusionConfig::default();
        let noun = fuse_token_weight(0.7, 0.5, 4.0, true, &cfg);
        let other = fuse_token_weight(0.7, 0.5, 4.0, false, &cfg);
        assert!((noun - (0.7 + 0.05 + 1.0 / 3.0)).abs() < 1e-6);
        assert!((noun - 1.083333).abs() < 1e-6);
        assert!((other - 1.533333).abs() < 1e-6);
        for pe in [-3.0, 1.0, 9.5] {
            assert_eq!(
                fuse_token_weight(0.0, 0.0, pe, true, &cfg),
                positional_encoding(pe)
            );
            assert_eq!(
                fuse_token_weight(0.0, 0.0, pe, false, &cfg),
                positional_encoding(pe)
            );
        }
    }

    #[test]
    fn sentence_attention_from_tagger() {
        let c = caption(&["dog", "barks"], vec![vec![1], vec![2]]);
        let (attn, mask) = sentence_attention(&c, &MockTagger, &FusionConfig::default()).unwrap();
        assert_eq!(attn.values(), &[0.9, 0.1]);
        assert_eq!(mask, vec![true, false]);

        let c = caption(&["dog", "cat", "car"], vec![vec![1], vec![2], vec![3]]);
        let (_, mask) = sentence_attention(&c, &MockTagger, &FusionConfig::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    struct ShortTagger;
    impl Tagger for ShortTagger {
        fn info(&self) -> crate::backends::BackendInfo {
            crate::backends::BackendInfo::new("short", "0")
        }
        fn noun_probabilities(&self, _: &[String]) -> Result<Vec<f64>> {
            Ok(vec![0.5])
        }
    }

    #[test]
    fn tagger_length_mismatch_is_backend_error() {
        let c = caption(&["dog", "barks"], vec![vec![1], vec![2]]);
        assert!(matches!(
            sentence_attention(&c, &ShortTagger, &FusionConfig::default()),
            Err(Error::Backend { .. })
        ));
    }

    #[test]
    fn scatter_one_word_to_two_tokens() {
        let c = caption(&["thunder"], vec![vec![1, 2]]);
        let a = AttentionVector::new(AttentionKind::Audio, vec![0.4]).unwrap();
        let s = AttentionVector::new(AttentionKind::Sentence, vec![0.86]).unwrap();
        let cfg = FusionConfig::default();
        let w = assemble_w_init(&c, &a, &s, &[true], &cfg, 4).unwrap();
        let expected = fuse_token_weight(0.86, 0.4, 1.0, true, &cfg);
        assert_eq!(w.weights, vec![1.0, expected, expected, 1.0]);
        assert_eq!(w.noun_mask, vec![false, true, true, false]);
        assert_eq!(w.caption_token_count, 2);
        w.validate().unwrap();
    }

    #[test]
    fn zero_attention_value_mode_is_uniform() {
        let c = caption(&["a", "b", "c"], vec![vec![1], vec![2], vec![3]]);
        let z = AttentionVector::zeros(AttentionKind::Audio, 3);
        let s = AttentionVector::zeros(AttentionKind::Sentence, 3);
        let cfg = FusionConfig {
            positional_argument_mode: PositionalArgument::AttentionValue,
            ..FusionConfig::default()
        };
        let w = assemble_w_init(&c, &z, &s, &[true, false, true], &cfg, 6).unwrap();
        let p0 = positional_encoding(0.0);
        assert_eq!(&w.weights[1..4], &[p0, p0, p0]);
        assert_eq!(&w.weights[4..], &[1.0, 1.0]);
    }

    #[test]
    fn out_of_range_alignment() {
        let c = caption(&["dog"], vec![vec![5]]);
        let a = AttentionVector::zeros(AttentionKind::Audio, 1);
        let s = AttentionVector::zeros(AttentionKind::Sentence, 1);
        assert!(matches!(
            assemble_w_init(&c, &a, &s, &[true], &FusionConfig::default(), 5),
            Err(Error::Alignment(_))
        ));
    }

    fn latent(rows: &[&[f32]]) -> LatentConditioning {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LatentConditioning::new(TensorBuffer::new(vec![rows.len(), c], data).unwrap()).unwrap()
    }

    #[test]
    fn modulate_examples() {
        let z = latent(&[&[0.3, 0.7], &[0.5, -1.0], &[2.0, 3.0]]);
        let mut w = TokenWeights::neutral(3);
        assert_eq!(modulate(&z, &w).unwrap(), z);
        w.weights = vec![1.0, 2.0, 0.0];
        let out = modulate(&z, &w).unwrap();
        assert_eq!(out.row(0), z.row(0));
        assert_eq!(out.row(1), &[1.0, -2.0]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
        assert!(matches!(
            modulate(&z, &TokenWeights::neutral(2)),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn pe_is_bounded_and_monotone(x1 in -100.0f64..100.0, x2 in -100.0f64..100.0) {
            let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
            prop_assert!(positional_encoding(lo) > 0.0);
            prop_assert!(positional_encoding_complement(hi) > 0.0);
            prop_assert!(positional_encoding(lo) <= positional_encoding(hi));
            if lo < hi {
                prop_assert!(
                    positional_encoding(lo) < positional_encoding(hi)
                        || positional_encoding_complement(lo) > positional_encoding_complement(hi)
                );
            }
        }

        #[test]
        fn noun_minus_non_noun(s in 0.0f64..=1.0, a in 0.0f64..=1.0, pe in -10.0f64..10.0) {
            let cfg = FusionConfig::default();
            let d = fuse_token_weight(s, a, pe, true, &cfg) - fuse_token_weight(s, a, pe, false, &cfg);
            prop_assert!((d - (cfg.noun_audio_scale - 1.0) * a).abs() <= 4.0 * f64::EPSILON * 4.0);
        }

        #[test]
        fn scatter_sets_each_caption_token_once(
            lens in prop::collection::vec(0usize..4, 1..8),
            seed in any::<u64>(),
        ) {
            // Disjoint increasing alignments laid out after a begin marker.
            let mut next = 1;
            let alignment: Vec<Vec<usize>> = lens.iter().map(|&l| {
                let idx: Vec<usize> = (next..next + l).collect();
                next += l;
                idx
            }).collect();
            let tokens = next + 3;
            let words: Vec<String> = (0..lens.len()).map(|i| format!("w{i}")).collect();
            let mut c = Caption::from_text(words.join(" "));
            c.encoder_alignment = alignment.clone();
            let n = words.len();
            let vals = |k: u64| (0..n).map(|i| ((seed.wrapping_mul(k + i as u64 + 1) >> 11) % 1000) as f64 / 999.0).collect::<Vec<_>>();
            let a = AttentionVector::new(AttentionKind::Audio, vals(3)).unwrap();
            let s = AttentionVector::new(AttentionKind::Sentence, vals(7)).unwrap();
            let mask: Vec<bool> = s.values().iter().map(|&p| p >= 0.5).collect();
            let cfg = FusionConfig::default();
            let w = assemble_w_init(&c, &a, &s, &mask, &cfg, tokens).unwrap();

            // Brute force: every token index, which words claim it.
            for t in 0..tokens {
                let owners: Vec<usize> = (0..n).filter(|&i| alignment[i].contains(&t)).collect();
                prop_assert!(owners.len() <= 1);
                match owners.first() {
                    Some(&i) => {
                        let expect = fuse_token_weight(s.values()[i], a.values()[i], (i + 1) as f64, mask[i], &cfg);
                        prop_assert_eq!(w.weights[t], expect);
                        prop_assert_eq!(w.noun_mask[t], mask[i]);
                        prop_assert!(w.caption_mask[t]);
                    }
                    None => {
                        prop_assert_eq!(w.weights[t], 1.0);
                        prop_assert!(!w.noun_mask[t] && !w.caption_mask[t]);
                    }
                }
                prop_assert!(w.weights[t] >= 0.0);
            }
            prop_assert_eq!(w.caption_token_count, lens.iter().sum::<usize>());
        }

        #[test]
        fn modulate_is_linear_for_power_of_two_scales(
            data in prop::collection::vec(-4.0f32..4.0, 12),
            weights in prop::collection::vec(0.0f64..3.0, 4),
            k in -4i32..4,
        ) {
            let alpha = 2f32.powi(k);
            let z = LatentConditioning::new(TensorBuffer::new(vec![4, 3], data.clone()).unwrap()).unwrap();
            let za = LatentConditioning::new(
                TensorBuffer::new(vec![4, 3], data.iter().map(|v| v * alpha).collect()).unwrap(),
            ).unwrap();
            let mut w = TokenWeights::neutral(4);
            w.weights = weights;
            let lhs = modulate(&za, &w).unwrap();
            let rhs = modulate(&z, &w).unwrap();
            for (l, r) in lhs.embedding().data().iter().zip(rhs.embedding().data()) {
                prop_assert_eq!(*l, r * alpha);
            }
        }
    }
}
