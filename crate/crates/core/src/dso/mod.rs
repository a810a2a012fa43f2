//! Direct sound optimization.
//!
//! The optimization variable is the token weight vector `w`; the conditioning is
//! always `z_n = w ⊙ z`. Each step generates an image from `z_n`, augments it, scores
//! the batch against the audio and the caption, and takes an Adam step on the noun and
//! non-noun token groups with separate learning rates. Tokens outside the caption span
//! are never touched.
//!
//! Loss, minimized:
//!
//! ```text
//! l_total = -λ_aCLIP · s_audio - λ_CLIP · s_clip + λ_L2 · ‖z_n - z‖²
//! ```
//!
//! Similarities are batch means. The breakdown stores the raw similarities so it is
//! visible that they are being maximized.

pub mod adam;
pub mod augment;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::backends::{Generator, Reference, SamplerSettings, Scorer};
use crate::error::{Error, Result};
use crate::fusion::modulate_grid;
use crate::seed::derive_seed;
use crate::tensor::{LatentConditioning, LatentGrid};
use crate::types::{GeneratedImage, TokenWeights};

pub use adam::{adam_step, OptimizerState, ParamGroup};
pub use augment::{augment_batch, resize_image, AugmentPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsoConfig {
    pub weight_audio: f64,
    pub weight_clip: f64,
    pub weight_l2: f64,
    pub steps: usize,
    pub lr_noun: f64,
    pub lr_non_noun: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub augmentation_count: usize,
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_probability: f64,
    /// Squared L2 distance (smooth at zero) instead of the plain norm.
    pub l2_squared: bool,
    /// Regenerate and re-augment the image every this many steps.
    pub rescore_every: usize,
}

impl Default for DsoConfig {
    fn default() -> Self {
        Self {
            weight_audio: 0.9,
            weight_clip: 1.0,
            weight_l2: 0.01,
            steps: 10,
            lr_noun: 0.01,
            lr_non_noun: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            augmentation_count: 8,
            crop_min: 0.7,
            crop_max: 1.0,
            flip_probability: 0.5,
            l2_squared: true,
            rescore_every: 1,
        }
    }
}

impl DsoConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("weight_audio", self.weight_audio),
            ("weight_clip", self.weight_clip),
            ("weight_l2", self.weight_l2),
            ("lr_noun", self.lr_noun),
            ("lr_non_noun", self.lr_non_noun),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!(
                    "{name} must be a finite value >= 0"
                )));
            }
        }
        if self.lr_noun < self.lr_non_noun {
            return Err(Error::Argument("lr_noun must be >= lr_non_noun".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Argument("Adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Argument("adam_epsilon must be > 0".into()));
        }
        if self.rescore_every == 0 {
            return Err(Error::Argument("rescore_every must be >= 1".into()));
        }
        self.policy(0, (1, 1)).validate()
    }

    fn policy(&self, seed: u64, output_size: (usize, usize)) -> AugmentPolicy {
        AugmentPolicy {
            count: self.augmentation_count,
            crop_min: self.crop_min,
            crop_max: self.crop_max,
            flip_probability: self.flip_probability,
            seed,
            output_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_aclip: f64,
    pub l_clip: f64,
    pub l_l2: f64,
    pub l_total: f64,
}

pub fn compose_loss(s_audio: f64, s_clip: f64, l2: f64, cfg: &DsoConfig) -> LossBreakdown {
    LossBreakdown {
        l_aclip: s_audio,
        l_clip: s_clip,
        l_l2: l2,
        l_total: -cfg.weight_audio * s_audio - cfg.weight_clip * s_clip + cfg.weight_l2 * l2,
    }
}

/// Caption-token indices split by noun flag. Neutral tokens are in neither group.
pub fn split_param_groups(w: &TokenWeights) -> (Vec<usize>, Vec<usize>) {
    (0..w.len())
        .filter(|&i| w.caption_mask[i])
        .partition(|&i| w.noun_mask[i])
}

/// Everything the loop needs besides `z`, `w` and the config.
pub struct DsoContext<'a> {
    pub generator: &'a dyn Generator,
    pub scorer: &'a dyn Scorer,
    pub sampler: &'a SamplerSettings,
    pub audio: &'a AudioClip,
    pub caption_text: &'a str,
    /// Seed for image generation (kept fixed across steps).
    pub generator_seed: u64,
    /// Root of the per-step augmentation seeds.
    pub augment_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsoOutcome {
    pub z_final: LatentConditioning,
    pub weights: TokenWeights,
    pub trace: Vec<LossBreakdown>,
}

/// Loss at one weight vector and, optionally, its gradient with respect to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub weight_gradient: Option<Vec<f64>>,
}

fn augmented_batch(
    zn: &LatentGrid,
    ctx: &DsoContext<'_>,
    cfg: &DsoConfig,
    step: usize,
) -> Result<Vec<GeneratedImage>> {
    let image = ctx
        .generator
        .generate(&zn.to_conditioning()?, ctx.generator_seed, ctx.sampler)?;
    let seed = derive_seed(ctx.augment_seed, &format!("augment/{step}"));
    augment_batch(&image, &cfg.policy(seed, ctx.scorer.input_resolution()))
}

fn batch_similarity(
    batch: &[GeneratedImage],
    zn: &LatentGrid,
    scorer: &dyn Scorer,
    reference: Reference<'_>,
    want_gradient: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; if want_gradient { zn.data.len() } else { 0 }];
    for img in batch {
        let s = scorer.guided_similarity(img, zn, reference, want_gradient)?;
        value += s.value;
        if want_gradient {
            let g = s.gradient.ok_or_else(|| {
                Error::Capability(format!(
                    "scorer '{}' returned no gradient",
                    scorer.info().id
                ))
            })?;
            if g.len() != grad.len() {
                return Err(Error::backend(
                    "scorer",
                    format!("gradient has {} elements, expected {}", g.len(), grad.len()),
                ));
            }
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((value / n, grad))
}

fn evaluate_on_batch(
    z: &LatentGrid,
    weights: &[f64],
    batch: &[GeneratedImage],
    ctx: &DsoContext<'_>,
    cfg: &DsoConfig,
    want_gradient: bool,
) -> Result<Evaluation> {
    let zn = modulate_grid(z, weights);
    let (s_audio, g_audio) = batch_similarity(
        batch,
        &zn,
        ctx.scorer,
        Reference::Audio(ctx.audio),
        want_gradient,
    )?;
    let (s_clip, g_clip) = batch_similarity(
        batch,
        &zn,
        ctx.scorer,
        Reference::Text(ctx.caption_text),
        want_gradient,
    )?;
    let diff: Vec<f64> = zn.data.iter().zip(&z.data).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let l2 = if cfg.l2_squared { sq } else { sq.sqrt() };
    let loss = compose_loss(s_audio, s_clip, l2, cfg);

    let weight_gradient = want_gradient.then(|| {
        let l2_scale = if cfg.l2_squared {
            2.0
        } else if sq > 0.0 {
            1.0 / sq.sqrt()
        } else {
            0.0
        };
        // d l_total / d z_n, then chain through z_n[i, c] = w[i] · z[i, c].
        let c = z.channels;
        (0..z.tokens)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let k = i * c + j;
                        let d_zn = -cfg.weight_audio * g_audio[k] - cfg.weight_clip * g_clip[k]
                            + cfg.weight_l2 * l2_scale * diff[k];
                        d_zn * z.data[k]
                    })
                    .sum()
            })
            .collect()
    });
    Ok(Evaluation {
        loss,
        weight_gradient,
    })
}

/// Evaluate the loss at `weights` using the augmentation batch of `step`.
pub fn evaluate(
    z: &LatentConditioning,
    weights: &[f64],
    ctx: &DsoContext<'_>,
    cfg: &DsoConfig,
    step: usize,
    want_gradient: bool,
) -> Result<Evaluation> {
    if weights.len() != z.token_count() {
        return Err(Error::Shape(format!(
            "{} weights for {} tokens",
            weights.len(),
            z.token_count()
        )));
    }
    let grid = z.to_grid();
    let zn = modulate_grid(&grid, weights);
    let batch = augmented_batch(&zn, ctx, cfg, step)?;
    evaluate_on_batch(&grid, weights, &batch, ctx, cfg, want_gradient)
}

pub fn run_dso(
    z: &LatentConditioning,
    w_init: &TokenWeights,
    ctx: &DsoContext<'_>,
    cfg: &DsoConfig,
) -> Result<DsoOutcome> {
    cfg.validate()?;
    w_init.validate()?;
    if w_init.len() != z.token_count() {
        return Err(Error::Shape(format!(
            "{} weights for {} tokens",
            w_init.len(),
            z.token_count()
        )));
    }
    if cfg.steps > 0 && !ctx.scorer.supports_gradient() {
        return Err(Error::Capability(format!(
            "scorer '{}' does not provide gradients with respect to the conditioning",
            ctx.scorer.info().id
        )));
    }

    let (nouns, others) = split_param_groups(w_init);
    let mut state = OptimizerState::new(
        vec![
            ParamGroup::new(nouns, cfg.lr_noun),
            ParamGroup::new(others, cfg.lr_non_noun),
        ],
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_epsilon,
    );
    state.lower_bound = Some(0.0);

    let grid = z.to_grid();
    let mut weights = w_init.weights.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut batch: Vec<GeneratedImage> = Vec::new();
    for step in 0..cfg.steps {
        if step % cfg.rescore_every == 0 {
            let zn = modulate_grid(&grid, &weights);
            batch = augmented_batch(&zn, ctx, cfg, step)?;
        }
        let eval = evaluate_on_batch(&grid, &weights, &batch, ctx, cfg, true)?;
        if !eval.loss.l_total.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                message: format!("non-finite loss {:?}", eval.loss),
            });
        }
        trace.push(eval.loss);
        let grad = eval.weight_gradient.expect("gradient requested");
        let grouped: Vec<Vec<f64>> = state
            .groups
            .iter()
            .map(|g| g.indices.iter().map(|&i| grad[i]).collect())
            .collect();
        state.step(&mut weights, &grouped).map_err(|e| match e {
            Error::Diverged { message, .. } => Error::Diverged {
                step: step + 1,
                message,
            },
            other => other,
        })?;
    }

    let final_weights = TokenWeights {
        weights,
        ..w_init.clone()
    };
    let z_final = crate::fusion::modulate(z, &final_weights)?;
    Ok(DsoOutcome {
        z_final,
        weights: final_weights,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_worked_example() {
        let cfg = DsoConfig::default();
        let b = compose_loss(0.5, 0.6, 2.0, &cfg);
        assert!((b.l_total - (-1.03)).abs() < 1e-9);
        assert_eq!((b.l_aclip, b.l_clip, b.l_l2), (0.5, 0.6, 2.0));
        assert_eq!(compose_loss(0.0, 0.0, 0.0, &cfg).l_total, 0.0);
        let no_l2 = DsoConfig {
            weight_l2: 0.0,
            ..cfg
        };
        assert!((compose_loss(1.0, 1.0, 123.0, &no_l2).l_total - (-1.9)).abs() < 1e-12);
    }

    #[test]
    fn groups_partition_caption_tokens() {
        let w = TokenWeights {
            weights: vec![1.0, 1.2, 0.8, 0.9, 1.0],
            noun_mask: vec![false, true, false, false, false],
            caption_mask: vec![false, true, true, true, false],
            caption_token_count: 3,
        };
        assert_eq!(split_param_groups(&w), (vec![1], vec![2, 3]));
        let all_false = TokenWeights {
            noun_mask: vec![false; 5],
            ..w
        };
        assert!(split_param_groups(&all_false).0.is_empty());
    }

    #[test]
    fn config_validation() {
        DsoConfig::default().validate().unwrap();
        let bad = DsoConfig {
            lr_noun: 0.0001,
            ..DsoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DsoConfig {
            weight_l2: -1.0,
            ..DsoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DsoConfig {
            augmentation_count: 0,
            ..DsoConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn groups_are_disjoint_and_cover(mask in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
                let n = mask.len();
                let w = TokenWeights {
                    weights: vec![1.0; n],
                    noun_mask: mask.iter().map(|&(c, noun)| c && noun).collect(),
                    caption_mask: mask.iter().map(|&(c, _)| c).collect(),
                    caption_token_count: mask.iter().filter(|m| m.0).count(),
                };
                let (a, b) = split_param_groups(&w);
                let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
                all.sort_unstable();
                let caption: Vec<usize> = (0..n).filter(|&i| mask[i].0).collect();
                prop_assert_eq!(all, caption);
                prop_assert!(a.iter().all(|i| !b.contains(i)));
            }
        }
    }
}
