//! Seeded random-crop / flip augmentation of generated images.

use image::imageops::{self, FilterType};
use image::Rgb32FImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stage_rng;
use crate::tensor::TensorBuffer;
use crate::types::GeneratedImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub count: usize,
    /// Crop side as a fraction of the image side, sampled uniformly in this range.
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_probability: f64,
    pub seed: u64,
    /// Output `(height, width)`, normally the scorer's input resolution.
    pub output_size: (usize, usize),
}

impl AugmentPolicy {
    pub fn new(count: usize, seed: u64, output_size: (usize, usize)) -> Self {
        Self {
            count,
            crop_min: 0.7,
            crop_max: 1.0,
            flip_probability: 0.5,
            seed,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Argument("augmentation count must be >= 1".into()));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(Error::Argument(
                "crop fractions must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Argument("flip probability must be in [0, 1]".into()));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Argument(
                "augmentation output size must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn to_buffer(img: &GeneratedImage) -> Rgb32FImage {
    Rgb32FImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels.data().to_vec(),
    )
    .expect("image tensor matches its dimensions")
}

fn from_buffer(buf: Rgb32FImage, seed: u64) -> Result<GeneratedImage> {
    let (w, h) = buf.dimensions();
    let data = buf
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GeneratedImage::new(
        TensorBuffer::new(vec![h as usize, w as usize, 3], data)?,
        seed,
    )
}

/// Bilinear resize to `(height, width)`; a no-op copy when the size already matches.
pub fn resize_image(img: &GeneratedImage, size: (usize, usize)) -> Result<GeneratedImage> {
    if (img.height(), img.width()) == size {
        return Ok(img.clone());
    }
    let out = imageops::resize(
        &to_buffer(img),
        size.1 as u32,
        size.0 as u32,
        FilterType::Triangle,
    );
    from_buffer(out, img.seed)
}

pub fn augment_batch(img: &GeneratedImage, policy: &AugmentPolicy) -> Result<Vec<GeneratedImage>> {
    policy.validate()?;
    let mut rng = stage_rng(policy.seed, "augment");
    let full = to_buffer(img);
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(policy.count);
    for _ in 0..policy.count {
        let frac = if policy.crop_min == policy.crop_max {
            policy.crop_min
        } else {
            rng.gen_range(policy.crop_min..=policy.crop_max)
        };
        let ch = ((frac * h as f64).round() as usize).clamp(1, h);
        let cw = ((frac * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        let flip = rng.gen_bool(policy.flip_probability);

        let mut crop =
            imageops::crop_imm(&full, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
        if flip {
            imageops::flip_horizontal_in_place(&mut crop);
        }
        let cropped = from_buffer(crop, img.seed)?;
        out.push(resize_image(&cropped, policy.output_size)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(size: usize) -> GeneratedImage {
        let data = (0..size * size * 3)
            .map(|i| (i % 251) as f32 / 250.0)
            .collect();
        GeneratedImage::new(TensorBuffer::new(vec![size, size, 3], data).unwrap(), 0).unwrap()
    }

    #[test]
    fn identity_policy_returns_resized_input() {
        let img = gradient_image(16);
        let mut p = AugmentPolicy::new(1, 5, (8, 8));
        p.crop_min = 1.0;
        p.flip_probability = 0.0;
        let out = augment_batch(&img, &p).unwrap();
        assert_eq!(out, vec![resize_image(&img, (8, 8)).unwrap()]);

        p.output_size = (16, 16);
        assert_eq!(augment_batch(&img, &p).unwrap(), vec![img]);
    }

    #[test]
    fn seeded_and_in_range() {
        let img = gradient_image(20);
        let p = AugmentPolicy::new(8, 42, (12, 12));
        let a = augment_batch(&img, &p).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, augment_batch(&img, &p).unwrap());
        for im in &a {
            assert_eq!((im.height(), im.width()), (12, 12));
            assert!(im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other = augment_batch(&img, &AugmentPolicy { seed: 43, ..p }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn bad_policies() {
        let img = gradient_image(4);
        assert!(augment_batch(&img, &AugmentPolicy::new(0, 0, (4, 4))).is_err());
        let mut p = AugmentPolicy::new(1, 0, (4, 4));
        p.crop_min = 0.0;
        assert!(augment_batch(&img, &p).is_err());
    }
}
