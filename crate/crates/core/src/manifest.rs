//! Run manifest: the provenance record of one generation run.
//!
//! Serialized as pretty-printed UTF-8 JSON. Keys appear in struct declaration order, and
//! maps are ordered, so manifests diff cleanly and are byte-identical for identical
//! runs. Wall-clock timings are only recorded when `record_timings` is enabled since
//! they would otherwise break that property.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendInfo;
use crate::dso::LossBreakdown;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::types::Caption;

pub const MANIFEST_FORMAT: &str = "sound2img-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSummary {
    pub source_path: String,
    pub sample_rate: u32,
    pub sample_count: usize,
    pub label: Option<String>,
    /// SHA-256 of the (amplified) samples as little-endian `f32`.
    pub samples_sha256: String,
}

/// Per-input facts used by evaluation, not by generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default)]
    pub ground_truth_caption: Option<String>,
    #[serde(default)]
    pub expected_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub run_id: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub config: PipelineConfig,
    pub backends: BTreeMap<String, BackendInfo>,
    pub audio: AudioSummary,
    pub annotations: Annotations,
    pub prompt: String,
    pub caption: Caption,
    pub audio_attention: Vec<f64>,
    pub sentence_attention: Vec<f64>,
    pub noun_mask: Vec<bool>,
    pub caption_mask: Vec<bool>,
    pub w_init: Vec<f64>,
    pub w_final: Vec<f64>,
    pub trace: Vec<LossBreakdown>,
    pub final_loss: Option<LossBreakdown>,
    pub files: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "unsupported manifest format {:?}",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn file(&self, role: &str) -> Option<&FileRecord> {
        self.files.iter().find(|f| f.role == role)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
