//! Multi-ESC50: two-class concatenations of ESC-50 clips.
//!
//! Source layout is `<root>/<class>/*.wav`. Each output concatenates one clip of
//! `class_a` and one of `class_b`, picked by a seeded RNG per pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, encode_wav, AudioClip};
use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::seed::stage_rng;

pub const DATASET_FORMAT: &str = "multi-esc50/1";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub class_a: String,
    pub class_b: String,
    pub count: usize,
}

impl PairEntry {
    pub fn label(&self) -> String {
        format!("{}+{}", self.class_a, self.class_b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pairs: Vec<PairEntry>,
    /// ESC-50 class to detector classes that count as a match.
    #[serde(default)]
    pub expected_objects: BTreeMap<String, Vec<String>>,
}

impl PairSpec {
    /// Three object+object pairs and four object+background pairs, `count` each.
    pub fn multi_esc50(count: usize) -> Self {
        let pairs = [
            ("crying_baby", "laughing"),
            ("dog", "cat"),
            ("cow", "rooster"),
            ("car_horn", "rain"),
            ("train", "wind"),
            ("airplane", "thunderstorm"),
            ("sheep", "sea_waves"),
        ]
        .iter()
        .map(|(a, b)| PairEntry {
            class_a: a.to_string(),
            class_b: b.to_string(),
            count,
        })
        .collect();
        let expected_objects = [
            ("crying_baby", &["person"][..]),
            ("laughing", &["person"]),
            ("dog", &["dog"]),
            ("cat", &["cat"]),
            ("cow", &["cow"]),
            ("rooster", &["bird"]),
            ("car_horn", &["car"]),
            ("train", &["train"]),
            ("airplane", &["airplane"]),
            ("sheep", &["sheep"]),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
        .collect();
        Self {
            pairs,
            expected_objects,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("bad pair spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation("no pairs".into()));
        }
        for p in &self.pairs {
            if p.count == 0 {
                return Err(Error::Validation(format!("pair {} has count 0", p.label())));
            }
            if p.class_a == p.class_b {
                return Err(Error::Validation(format!(
                    "pair {} repeats a class",
                    p.label()
                )));
            }
            for c in [&p.class_a, &p.class_b] {
                if c.is_empty() || c.contains(['/', '\\', '+']) || c == ".." || c == "." {
                    return Err(Error::Validation(format!("invalid class name {c:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn expected_for(&self, pair: &PairEntry) -> Vec<String> {
        let mut out = BTreeSet::new();
        for c in [&pair.class_a, &pair.class_b] {
            if let Some(v) = self.expected_objects.get(c) {
                out.extend(v.iter().cloned());
            }
        }
        out.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub pair: String,
    /// Relative to the ESC-50 root.
    pub sources: [String; 2],
    pub sample_rate: u32,
    pub sample_count: usize,
    pub expected_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub spec: PairSpec,
    pub file_count: usize,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::Format(format!("bad dataset manifest: {e}")))?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unsupported dataset format {:?}",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn class_files(root: &Path, class: &str) -> Result<Vec<String>> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing class directory {}",
            dir.display()
        )));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".wav"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "class directory {} has no .wav files",
            dir.display()
        )));
    }
    Ok(names.into_iter().map(|n| format!("{class}/{n}")).collect())
}

/// Pick `count` (a, b) index pairs: distinct combinations when there are enough,
/// otherwise independent draws with replacement.
fn pick_sources(
    rng: &mut impl Rng,
    na: usize,
    nb: usize,
    count: usize,
    label: &str,
) -> Vec<(usize, usize)> {
    let combos = na.saturating_mul(nb);
    if count <= combos {
        sample(rng, combos, count)
            .into_iter()
            .map(|c| (c / nb, c % nb))
            .collect()
    } else {
        log::warn!("pair {label}: {count} outputs requested but only {combos} distinct combinations; sampling with replacement");
        (0..count)
            .map(|_| (rng.gen_range(0..na), rng.gen_range(0..nb)))
            .collect()
    }
}

pub fn build_multi_esc50(
    esc50_root: &Path,
    spec: &PairSpec,
    out: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    // Fail on any missing class before writing anything.
    let mut files: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in &spec.pairs {
        for c in [&p.class_a, &p.class_b] {
            if !files.contains_key(c.as_str()) {
                files.insert(c, class_files(esc50_root, c)?);
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut cache: HashMap<String, AudioClip> = HashMap::new();
    let mut load = |rel: &str| -> Result<AudioClip> {
        if let Some(c) = cache.get(rel) {
            return Ok(c.clone());
        }
        let path = esc50_root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let clip =
            decode_wav(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cache.insert(rel.to_string(), clip.clone());
        Ok(clip)
    };

    let mut entries = Vec::new();
    for p in &spec.pairs {
        let label = p.label();
        let (fa, fb) = (&files[p.class_a.as_str()], &files[p.class_b.as_str()]);
        let mut rng = stage_rng(seed, &format!("multi-esc50/{label}"));
        let picks = pick_sources(&mut rng, fa.len(), fb.len(), p.count, &label);
        let dir = out.join(&label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let expected = spec.expected_for(p);
        for (i, (ia, ib)) in picks.into_iter().enumerate() {
            let (a, b) = (load(&fa[ia])?, load(&fb[ib])?);
            if a.sample_rate() != b.sample_rate() {
                return Err(Error::Format(format!(
                    "sample rates differ: {} is {} Hz, {} is {} Hz",
                    fa[ia],
                    a.sample_rate(),
                    fb[ib],
                    b.sample_rate()
                )));
            }
            let mut samples = a.samples().to_vec();
            samples.extend_from_slice(b.samples());
            let clip = AudioClip::new(samples, a.sample_rate())?;
            let rel = format!("{label}/{label}_{i:03}.wav");
            let target = out.join(&rel);
            fs::write(&target, encode_wav(&clip)?).map_err(|e| Error::io(&target, e))?;
            entries.push(DatasetEntry {
                path: rel,
                pair: label.clone(),
                sources: [fa[ia].clone(), fb[ib].clone()],
                sample_rate: clip.sample_rate(),
                sample_count: clip.samples().len(),
                expected_classes: expected.clone(),
            });
        }
    }

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed,
        spec: spec.clone(),
        file_count: entries.len(),
        entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("dataset manifest serializes");
    json.push('\n');
    write_atomic(&out.join(DATASET_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Resolve an entry's audio path against the directory holding the manifest.
pub fn entry_path(manifest_dir: &Path, entry: &DatasetEntry) -> PathBuf {
    manifest_dir.join(&entry.path)
}
