//! On-disk dataset of precomputed two-level image features and tokenized captions.
//!
//! A dataset directory holds `manifest.json` and three little-endian blobs:
//! `global.bin` and `regional.bin` (`f32`, item → node → dim) and
//! `captions.bin` (`u32`, item → caption → word, zero-padded).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GLOBAL_BLOB: &str = "global.bin";
pub const REGIONAL_BLOB: &str = "regional.bin";
pub const CAPTIONS_BLOB: &str = "captions.bin";
pub const FORMAT_VERSION: u32 = 1;
pub const PAD_TOKEN: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_items: usize,
    pub captions_per_image: usize,
    pub global_nodes: usize,
    pub regional_nodes: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub max_words: usize,
    pub dtype: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported dataset version {}",
                self.version
            )));
        }
        if self.dtype != "f32le" {
            return Err(Error::Config(format!("unsupported dtype {:?}", self.dtype)));
        }
        for (name, v) in [
            ("n_items", self.n_items),
            ("captions_per_image", self.captions_per_image),
            ("global_nodes", self.global_nodes),
            ("regional_nodes", self.regional_nodes),
            ("feature_dim", self.feature_dim),
            ("max_words", self.max_words),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("manifest field {name} must be ≥ 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must leave room for padding".into(),
            ));
        }
        Ok(())
    }

    pub fn global_bytes(&self) -> u64 {
        (self.n_items * self.global_nodes * self.feature_dim * 4) as u64
    }

    pub fn regional_bytes(&self) -> u64 {
        (self.n_items * self.regional_nodes * self.feature_dim * 4) as u64
    }

    pub fn caption_bytes(&self) -> u64 {
        (self.n_items * self.captions_per_image * self.max_words * 4) as u64
    }
}

/// Features and captions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// Global grid features, `n × D_o`.
    pub global: Tensor,
    /// Regional object features, `k × D_o`.
    pub regional: Tensor,
    /// Token ids without padding; every caption has at least one token.
    pub captions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<FeatureSet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Captions in ground-truth order: caption `j` belongs to image `j / captions_per_image`.
    pub fn all_captions(&self) -> Vec<&[u32]> {
        self.items
            .iter()
            .flat_map(|it| it.captions.iter().map(Vec::as_slice))
            .collect()
    }

    /// Items `start..end` as a standalone dataset.
    pub fn subset(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.items.len() {
            return Err(Error::Config(format!(
                "item range {start}..{end} outside dataset of {}",
                self.items.len()
            )));
        }
        let mut manifest = self.manifest.clone();
        manifest.n_items = end - start;
        Ok(Dataset {
            manifest,
            items: self.items[start..end].to_vec(),
        })
    }
}

/// Tokens before the first padding id.
pub fn strip_padding(tokens: &[u32]) -> &[u32] {
    let len = tokens
        .iter()
        .position(|&t| t == PAD_TOKEN)
        .unwrap_or(tokens.len());
    &tokens[..len]
}

fn read_blob(path: &Path, expected: u64) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingBlob(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn f32_matrices(
    bytes: &[u8],
    items: usize,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Vec<Tensor>> {
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        let per_item = rows * cols;
        return Err(Error::NonFinite(format!(
            "{what} features of item {}",
            pos / per_item
        )));
    }
    Ok(values
        .chunks_exact(rows * cols)
        .take(items)
        .map(|c| Array2::from_shape_vec((rows, cols), c.to_vec()).expect("chunk size"))
        .collect())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads and validates a dataset from its manifest path (or its directory).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = load_manifest(&manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let m = &manifest;

    let global = read_blob(&dir.join(GLOBAL_BLOB), m.global_bytes())?;
    let regional = read_blob(&dir.join(REGIONAL_BLOB), m.regional_bytes())?;
    let captions = read_blob(&dir.join(CAPTIONS_BLOB), m.caption_bytes())?;

    let global = f32_matrices(&global, m.n_items, m.global_nodes, m.feature_dim, "global")?;
    let regional = f32_matrices(
        &regional,
        m.n_items,
        m.regional_nodes,
        m.feature_dim,
        "regional",
    )?;

    let tokens: Vec<u32> = captions
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut items = Vec::with_capacity(m.n_items);
    let per_item = m.captions_per_image * m.max_words;
    for (i, (g, r)) in global.into_iter().zip(regional).enumerate() {
        let mut caps = Vec::with_capacity(m.captions_per_image);
        for (c, row) in tokens[i * per_item..(i + 1) * per_item]
            .chunks_exact(m.max_words)
            .enumerate()
        {
            caps.push(validate_caption(row, m.vocab_size, i, c)?.to_vec());
        }
        items.push(FeatureSet {
            global: g,
            regional: r,
            captions: caps,
        });
    }
    Ok(Dataset { manifest, items })
}

fn validate_caption(row: &[u32], vocab_size: usize, item: usize, caption: usize) -> Result<&[u32]> {
    let context = || format!("item {item}, caption {caption}");
    if let Some(&bad) = row.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::BadToken {
            id: bad,
            vocab_size,
            context: context(),
        });
    }
    let words = strip_padding(row);
    if words.is_empty() {
        return Err(Error::EmptyCaption);
    }
    if let Some(&t) = row[words.len()..].iter().find(|&&t| t != PAD_TOKEN) {
        return Err(Error::BadToken {
            id: t,
            vocab_size,
            context: format!("{} (token after padding)", context()),
        });
    }
    Ok(words)
}

/// Recipe for a deterministic synthetic dataset.
///
/// Item `i` belongs to latent concept `i % cluster_count`. Each concept has a
/// feature prototype; regional "object" rows sit near it, global grid rows
/// carry a weaker copy, and caption words are mostly drawn from the concept's
/// own tokens `{t ≥ 1 : (t − 1) mod cluster_count = concept}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_items: usize,
    pub global_nodes: usize,
    pub regional_nodes: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub max_words: usize,
    pub captions_per_image: usize,
    pub cluster_count: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 16,
            global_nodes: 16,
            regional_nodes: 12,
            feature_dim: 64,
            vocab_size: 200,
            max_words: 12,
            captions_per_image: 5,
            cluster_count: 16,
        }
    }
}

const GLOBAL_SIGNAL: f64 = 0.5;
const OBJECT_NOISE: f64 = 0.5;
const OBJECT_FRACTION: f64 = 0.5;
const CONCEPT_WORD_FRACTION: f64 = 0.75;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_items", self.n_items),
            ("global_nodes", self.global_nodes),
            ("regional_nodes", self.regional_nodes),
            ("feature_dim", self.feature_dim),
            ("max_words", self.max_words),
            ("captions_per_image", self.captions_per_image),
            ("cluster_count", self.cluster_count),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.cluster_count > self.n_items {
            return Err(Error::Config(format!(
                "cluster_count {} exceeds n_items {}",
                self.cluster_count, self.n_items
            )));
        }
        if self.vocab_size < self.cluster_count + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no token for each of {} concepts",
                self.vocab_size, self.cluster_count
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: FORMAT_VERSION,
            n_items: self.n_items,
            captions_per_image: self.captions_per_image,
            global_nodes: self.global_nodes,
            regional_nodes: self.regional_nodes,
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            max_words: self.max_words,
            dtype: "f32le".into(),
        }
    }

    /// Latent concept of a (non-padding) token.
    pub fn token_concept(&self, token: u32) -> Option<usize> {
        (token != PAD_TOKEN).then(|| (token as usize - 1) % self.cluster_count)
    }

    pub fn item_concept(&self, item: usize) -> usize {
        item % self.cluster_count
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Builds the synthetic dataset in memory. Features are rounded to `f32` so
/// the in-memory copy equals what a later load returns.
pub fn synthesize(synth: &SyntheticConfig) -> Result<Dataset> {
    synth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let d = synth.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..synth.cluster_count)
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();
    let concept_tokens: Vec<Vec<u32>> = (0..synth.cluster_count)
        .map(|c| {
            (1..synth.vocab_size as u32)
                .filter(|&t| synth.token_concept(t) == Some(c))
                .collect()
        })
        .collect();
    let round = |v: f64| v as f32 as f64;

    let mut items = Vec::with_capacity(synth.n_items);
    for i in 0..synth.n_items {
        let c = synth.item_concept(i);
        let proto = &prototypes[c];
        let mut global = Array2::zeros((synth.global_nodes, d));
        for mut row in global.rows_mut() {
            for (x, &p) in row.iter_mut().zip(proto) {
                *x = round(GLOBAL_SIGNAL * p + normal(&mut rng));
            }
        }
        let forced_object = rng.random_range(0..synth.regional_nodes);
        let mut regional = Array2::zeros((synth.regional_nodes, d));
        for (r, mut row) in regional.rows_mut().into_iter().enumerate() {
            let is_object = r == forced_object || rng.random_bool(OBJECT_FRACTION);
            for (x, &p) in row.iter_mut().zip(proto) {
                let noise = normal(&mut rng);
                *x = round(if is_object {
                    p + OBJECT_NOISE * noise
                } else {
                    noise
                });
            }
        }
        let min_len = synth.max_words.div_ceil(2);
        let captions = (0..synth.captions_per_image)
            .map(|_| {
                let len = rng.random_range(min_len..=synth.max_words);
                (0..len)
                    .map(|_| {
                        if rng.random_bool(CONCEPT_WORD_FRACTION) {
                            *concept_tokens[c]
                                .choose(&mut rng)
                                .expect("concept has tokens")
                        } else {
                            rng.random_range(1..synth.vocab_size as u32)
                        }
                    })
                    .collect()
            })
            .collect();
        items.push(FeatureSet {
            global,
            regional,
            captions,
        });
    }
    Ok(Dataset {
        manifest: synth.manifest(),
        items,
    })
}

/// Writes `dataset` to `out_dir` in the blob format.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<()> {
    let m = &dataset.manifest;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut global = Vec::with_capacity(m.global_bytes() as usize);
    let mut regional = Vec::with_capacity(m.regional_bytes() as usize);
    let mut captions = Vec::with_capacity(m.caption_bytes() as usize);
    for item in &dataset.items {
        global.extend(item.global.iter().flat_map(|&v| (v as f32).to_le_bytes()));
        regional.extend(item.regional.iter().flat_map(|&v| (v as f32).to_le_bytes()));
        for cap in &item.captions {
            for w in 0..m.max_words {
                let t = cap.get(w).copied().unwrap_or(PAD_TOKEN);
                captions.extend(t.to_le_bytes());
            }
        }
    }
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    let manifest = serde_json::to_string_pretty(m).expect("manifest serializes");
    write(MANIFEST_FILE, manifest.as_bytes())?;
    write(GLOBAL_BLOB, &global)?;
    write(REGIONAL_BLOB, &regional)?;
    write(CAPTIONS_BLOB, &captions)?;
    Ok(())
}

/// Generates a synthetic dataset into `out_dir` and returns its manifest.
pub fn generate_synthetic(synth: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let dataset = synthesize(synth)?;
    write_dataset(&dataset, out_dir)?;
    Ok(dataset.manifest)
}
