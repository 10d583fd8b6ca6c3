//! Synthetic cross-modality identity benchmark.
//!
//! Each identity is a latent signature vector. A capture renders the
//! signature as a striped body inside a vertical ellipse, through a fixed
//! linear map that differs per modality (three maps for the rgb channels,
//! one for ir), then adds translation jitter, background rectangles and
//! pixel noise. Every image is a pure function of the dataset seed and its
//! [`SampleSpec`].

mod render;

pub use render::{identity_signature, modality_map, RenderConfig, Renderer, SampleSpec};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NfsError, Result};
use crate::modality::Modality;
use crate::net::ImageBatch;
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointEntry, Tensor};
use render::{mix, stream};

const TAG_SPEC: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train_ids: u32,
    pub n_test_ids: u32,
    pub images_per_modality: u32,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train_ids: 64,
            n_test_ids: 32,
            images_per_modality: 20,
            render: RenderConfig::default(),
        }
    }
}

/// Every capture of the benchmark. Training identities are
/// `0..n_train_ids`, test identities follow without overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub train_ids: (u32, u32),
    pub test_ids: (u32, u32),
    pub samples: Vec<SampleSpec>,
}

impl DatasetManifest {
    pub fn is_train_id(&self, id: u32) -> bool {
        (self.train_ids.0..self.train_ids.1).contains(&id)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.is_train_id(self.samples[i].id)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| !self.is_train_id(self.samples[i].id)).collect()
    }
}

pub fn build_dataset(n_train_ids: u32, n_test_ids: u32, images_per_modality: u32, seed: u64) -> Result<DatasetManifest> {
    build_dataset_with(&DatasetConfig {
        seed,
        n_train_ids,
        n_test_ids,
        images_per_modality,
        ..DatasetConfig::default()
    })
}

pub fn build_dataset_with(config: &DatasetConfig) -> Result<DatasetManifest> {
    if config.n_train_ids == 0 || config.n_test_ids == 0 || config.images_per_modality == 0 {
        return Err(NfsError::Config(format!(
            "dataset counts must be positive (train ids {}, test ids {}, images {})",
            config.n_train_ids, config.n_test_ids, config.images_per_modality
        )));
    }
    let r = &config.render;
    if r.height < 8 || r.width < 4 || r.cell_rows == 0 || r.cell_cols == 0 || r.signature_dim == 0 {
        return Err(NfsError::Config("render geometry too small".into()));
    }
    let total = config
        .n_train_ids
        .checked_add(config.n_test_ids)
        .ok_or_else(|| NfsError::Config("identity count overflows".into()))?;
    let mut samples = Vec::with_capacity(total as usize * 2 * config.images_per_modality as usize);
    for id in 0..total {
        for modality in Modality::ALL {
            for instance in 0..config.images_per_modality {
                let key = [config.seed, TAG_SPEC, u64::from(id), modality.index() as u64, u64::from(instance)];
                let mut rng = stream(&key);
                samples.push(SampleSpec {
                    id,
                    modality,
                    instance,
                    dx: rng.random_range(-r.jitter..=r.jitter),
                    dy: rng.random_range(-r.jitter..=r.jitter),
                    noise_seed: rng.random(),
                    clutter_seed: mix(rng.random()),
                });
            }
        }
    }
    Ok(DatasetManifest {
        config: config.clone(),
        train_ids: (0, config.n_train_ids),
        test_ids: (config.n_train_ids, total),
        samples,
    })
}

/// A manifest with every image rendered.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn render(manifest: DatasetManifest) -> Self {
        let renderer = Renderer::new(manifest.config.render.clone(), manifest.config.seed);
        let images = manifest.samples.iter().map(|s| renderer.render(s)).collect();
        Self { manifest, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn spec(&self, index: usize) -> &SampleSpec {
        &self.manifest.samples[index]
    }

    pub fn image(&self, index: usize) -> &[f64] {
        &self.images[index]
    }

    /// SHA-256 over every pixel, for pinning a corpus in run manifests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            for v in img {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Stacks the given samples into a batch, rgb rows first. Within a
    /// modality the order of `indices` is kept.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<ImageBatch<T>> {
        let r = &self.manifest.config.render;
        let mut parts = Vec::with_capacity(2);
        for m in Modality::ALL {
            let rows: Vec<usize> = indices.iter().copied().filter(|&i| self.spec(i).modality == m).collect();
            if rows.is_empty() {
                parts.push(None);
                continue;
            }
            let values = rows.iter().flat_map(|&i| self.images[i].iter().map(|&v| T::lit(v))).collect();
            let tensor = Tensor::from_vec(&[rows.len(), m.channels(), r.height, r.width], values)?;
            parts.push(Some((tensor, rows.iter().map(|&i| self.spec(i).id).collect())));
        }
        let ir = parts.pop().flatten();
        let rgb = parts.pop().flatten();
        ImageBatch::new(rgb, ir)
    }

    /// Writes every image into an NFS1 container.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let r = &self.manifest.config.render;
        let entries: Vec<CheckpointEntry> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| CheckpointEntry {
                name: format!("sample{i}"),
                shape: vec![self.spec(i).modality.channels(), r.height, r.width],
                values: img.clone(),
            })
            .collect();
        write_checkpoint(path, &entries)
    }

    /// Loads cached images, checking they match the manifest's layout.
    pub fn from_cache(manifest: DatasetManifest, path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        if entries.len() != manifest.samples.len() {
            return Err(NfsError::format(
                path,
                format!("{} images cached, manifest lists {}", entries.len(), manifest.samples.len()),
            ));
        }
        let r = &manifest.config.render;
        let mut images = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let expected = [manifest.samples[i].modality.channels(), r.height, r.width];
            if e.name != format!("sample{i}") || e.shape != expected {
                return Err(NfsError::format(path, format!("entry {i} ({}) does not match the manifest", e.name)));
            }
            images.push(e.values);
        }
        Ok(Self { manifest, images })
    }
}

/// Per-identity, per-modality sample indices of a subset of a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplePool {
    by_id: BTreeMap<u32, [Vec<usize>; 2]>,
}

impl SamplePool {
    pub fn new(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut by_id: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
        for &i in indices {
            let s = dataset.spec(i);
            by_id.entry(s.id).or_default()[s.modality.index()].push(i);
        }
        Self { by_id }
    }

    pub fn identity_count(&self) -> usize {
        self.by_id.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_id.keys().copied()
    }

    pub fn samples(&self, id: u32, modality: Modality) -> &[usize] {
        self.by_id.get(&id).map_or(&[], |s| &s[modality.index()])
    }

    /// Number of `P`-identity batches that visit every identity once in
    /// expectation.
    pub fn batches_per_epoch(&self, p: usize) -> usize {
        self.identity_count().div_ceil(p.max(1))
    }

    /// `p` distinct identities with `k` rgb and `k` ir captures each, drawn
    /// without replacement. Rows are grouped by identity within each
    /// modality.
    pub fn sample_batch<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if p == 0 || k == 0 {
            return Err(NfsError::Config("batch needs p >= 1 and k >= 1".into()));
        }
        if p > self.by_id.len() {
            return Err(NfsError::Insufficient(format!(
                "{p} identities requested, {} available",
                self.by_id.len()
            )));
        }
        let ids: Vec<u32> = self.by_id.keys().copied().collect();
        let chosen: Vec<u32> = index::sample(rng, ids.len(), p).into_iter().map(|i| ids[i]).collect();
        let mut rows = [Vec::with_capacity(p * k), Vec::with_capacity(p * k)];
        for id in chosen {
            for m in Modality::ALL {
                let pool = self.samples(id, m);
                if pool.len() < k {
                    return Err(NfsError::Insufficient(format!(
                        "identity {id} has {} {m} images, batch needs {k}",
                        pool.len()
                    )));
                }
                rows[m.index()].extend(index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
            }
        }
        let [rgb, ir] = rows;
        Ok(rgb.into_iter().chain(ir).collect())
    }
}

const TAG_SPLIT: u64 = 5;

/// Seeded stream for dataset splits, independent of the render streams.
pub(crate) fn split_stream(parts: &[u64]) -> rand_chacha::ChaCha8Rng {
    let mut key = vec![TAG_SPLIT];
    key.extend_from_slice(parts);
    stream(&key)
}
