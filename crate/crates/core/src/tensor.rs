//! Shape-tagged `f32` buffers and the `WTB1` tensor file format.
//!
//! Layout of a `WTB1` file:
//!
//! ```text
//! b"WTB1" | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE * product(shape)
//! ```
//!
//! The header is the compact JSON object `{"dtype":"f32","shape":[..],"order":"C"}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WTB1";

/// Upper bound on the JSON header, so a hostile length field cannot force a huge read.
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBuffer {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBuffer {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape(
                "tensor shape must have at least one dimension".into(),
            ));
        }
        if let Some(d) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension {d} is zero")));
        }
        let expected = element_count(&shape)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "element {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

/// Serialize a tensor to `WTB1` bytes.
pub fn encode_tensor(t: &TensorBuffer) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        shape: t.shape.clone(),
        order: "C".into(),
    })
    .expect("header serialization is infallible");
    let mut out = Vec::with_capacity(8 + header.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse `WTB1` bytes. Never panics on malformed input.
pub fn decode_tensor(bytes: &[u8]) -> Result<TensorBuffer> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing WTB1 magic".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Corruption("truncated header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds limit"
        )));
    }
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Corruption(format!(
            "header needs {header_len} bytes, {} available",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.order != "C" {
        return Err(Error::Format(format!(
            "unsupported order {:?}",
            header.order
        )));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::Format(format!("invalid shape {:?}", header.shape)));
    }
    let count = element_count(&header.shape)
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
        .ok_or_else(|| Error::Format(format!("shape {:?} overflows", header.shape)))?;
    let payload = &body[header_len..];
    if payload.len() != count.1 {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count.1
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TensorBuffer::new(header.shape, data)
}

pub fn write_tensor(t: &TensorBuffer, path: &Path) -> Result<()> {
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("element {i} is not finite")));
    }
    let bytes = encode_tensor(t);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Text-encoder output `z` (or a modulated `z_n`): a `[token_count, channel_dim]` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConditioning {
    embedding: TensorBuffer,
}

impl LatentConditioning {
    pub fn new(embedding: TensorBuffer) -> Result<Self> {
        if embedding.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "conditioning must be 2-D, got shape {:?}",
                embedding.shape()
            )));
        }
        Ok(Self { embedding })
    }

    pub fn token_count(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn channel_dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn embedding(&self) -> &TensorBuffer {
        &self.embedding
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.channel_dim();
        &self.embedding.data()[i * c..(i + 1) * c]
    }

    pub fn to_grid(&self) -> LatentGrid {
        LatentGrid {
            tokens: self.token_count(),
            channels: self.channel_dim(),
            data: self.embedding.to_f64(),
        }
    }
}

/// Working-precision (`f64`) view of a conditioning tensor used inside the optimizer
/// and by differentiable scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub tokens: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(tokens: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if tokens == 0 || channels == 0 || tokens * channels != data.len() {
            return Err(Error::Shape(format!(
                "grid {tokens}x{channels} does not fit {} values",
                data.len()
            )));
        }
        Ok(Self {
            tokens,
            channels,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Mean over tokens.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut pooled = vec![0.0; self.channels];
        for row in self.data.chunks_exact(self.channels) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let n = self.tokens as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        pooled
    }

    pub fn to_conditioning(&self) -> Result<LatentConditioning> {
        LatentConditioning::new(TensorBuffer::from_f64(
            vec![self.tokens, self.channels],
            &self.data,
        )?)
    }
}
