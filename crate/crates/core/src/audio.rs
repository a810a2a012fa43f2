//! Mono audio clips and 16-bit PCM WAV ingestion.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    pub source_path: String,
    pub label: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Validation("audio clip has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Validation(format!(
                "sample {i} ({}) outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_path: String::new(),
            label: None,
        })
    }

    pub fn with_source(mut self, path: impl Into<String>) -> Self {
        self.source_path = path.into();
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples
            .iter()
            .map(|&s| f64::from(s) * f64::from(s))
            .sum()
    }

    /// RMS of each of `n` contiguous, near-equal segments.
    pub fn segment_rms(&self, n: usize) -> Vec<f64> {
        let len = self.samples.len();
        (0..n)
            .map(|k| {
                let start = k * len / n;
                let end = ((k + 1) * len / n).max(start + 1).min(len);
                let seg = &self.samples[start.min(len - 1)..end];
                let e: f64 = seg.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
                (e / seg.len() as f64).sqrt()
            })
            .collect()
    }

    /// Fraction of adjacent sample pairs that change sign.
    pub fn zero_crossing_rate(&self) -> f64 {
        if self.samples.len() < 2 {
            return 0.0;
        }
        let crossings = self
            .samples
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count();
        crossings as f64 / (self.samples.len() - 1) as f64
    }
}

/// Multiply every sample by `k`, saturating at the [-1, 1] bounds.
pub fn amplify(clip: &AudioClip, k: f64) -> Result<AudioClip> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Argument("amplify must be > 0".into()));
    }
    let samples = clip
        .samples
        .iter()
        .map(|&s| (f64::from(s) * k).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_path: clip.source_path.clone(),
        label: clip.label.clone(),
    })
}

/// Decode a 16-bit PCM WAV (mono or stereo). Stereo is averaged down to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| Error::Format(format!("not a readable WAV: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "only 16-bit PCM is supported, got {} bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let channels = usize::from(spec.channels);
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!(
            "{channels} channels; only mono or stereo"
        )));
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<i16>, _>>()
        .map_err(|e| Error::Corruption(format!("bad WAV payload: {e}")))?;
    if raw.len() % channels != 0 {
        return Err(Error::Corruption("partial stereo frame".into()));
    }
    let samples: Vec<f32> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| f32::from(s) / 32768.0).sum();
            sum / channels as f32
        })
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Encode as mono 16-bit PCM. Samples produced by [`decode_wav`] of a mono file
/// re-encode to the original integers.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut cursor, spec).map_err(|e| Error::Format(e.to_string()))?;
        for &s in &clip.samples {
            let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_wav(&bytes)?.with_source(path.to_string_lossy()))
}

pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let bytes = encode_wav(clip)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(s: &[f32]) -> AudioClip {
        AudioClip::new(s.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn amplify_scales() {
        let out = amplify(&clip(&[0.1, -0.2]), 2.0).unwrap();
        assert_eq!(out.samples(), &[0.2, -0.4]);
        assert_eq!(out.sample_rate(), 16_000);
    }

    #[test]
    fn amplify_clamps() {
        assert_eq!(amplify(&clip(&[0.8]), 3.0).unwrap().samples(), &[1.0]);
        assert_eq!(amplify(&clip(&[-0.5]), 3.0).unwrap().samples(), &[-1.0]);
    }

    #[test]
    fn amplify_identity_and_bad_factor() {
        let c = clip(&[0.3, -0.7, 0.0]);
        assert_eq!(amplify(&c, 1.0).unwrap(), c);
        for k in [0.0, -1.0, f64::NAN] {
            assert!(matches!(amplify(&c, k), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn clip_invariants() {
        assert!(AudioClip::new(vec![], 8000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        assert!(AudioClip::new(vec![1.5], 8000).is_err());
    }

    #[test]
    fn wav_round_trip_and_stereo_downmix() {
        let c = clip(&[0.0, 0.5, -0.25, -1.0]);
        let back = decode_wav(&encode_wav(&c).unwrap()).unwrap();
        assert_eq!(back.samples(), c.samples());

        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cur = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cur, spec).unwrap();
            for s in [16384i16, 0, -16384, -16384] {
                w.write_sample(s).unwrap();
            }
            w.finalize().unwrap();
        }
        let stereo = decode_wav(&cur.into_inner()).unwrap();
        assert_eq!(stereo.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn non_pcm16_rejected() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut cur = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cur, spec).unwrap();
            w.write_sample(0.5f32).unwrap();
            w.finalize().unwrap();
        }
        assert!(matches!(
            decode_wav(&cur.into_inner()),
            Err(Error::Format(_))
        ));
        assert!(decode_wav(b"RIFF").is_err());
    }

    #[test]
    fn energy_is_ordered_under_amplification() {
        let c = clip(&[0.1, -0.2, 0.05, 0.3]);
        let e1 = c.energy();
        let e2 = amplify(&c, 2.0).unwrap().energy();
        let e3 = amplify(&c, 3.0).unwrap().energy();
        assert!(e1 < e2 && e2 < e3);
    }

    proptest! {
        #[test]
        fn amplify_composes_without_clamping(
            samples in prop::collection::vec(-0.1f32..0.1, 1..64),
            j in 0.5f64..3.0,
            k in 0.5f64..3.0,
        ) {
            let c = clip(&samples);
            let twice = amplify(&amplify(&c, j).unwrap(), k).unwrap();
            let once = amplify(&c, j * k).unwrap();
            for (a, b) in twice.samples().iter().zip(once.samples()) {
                // the intermediate clip is stored as f32
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
            }
        }

        #[test]
        fn decode_wav_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
            let _ = decode_wav(&bytes);
        }
    }
}
