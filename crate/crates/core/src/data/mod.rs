//! Datasets: synthetic domain pairs, augmentation, IDX files and export.
//!
//! Every generator is a pure function of its parameters and seed. Each sample
//! draws from its own ChaCha8 stream (`stream = sample id`), so samples can be
//! produced in any order, or in parallel, with identical results.

pub mod augment;
pub mod export;
pub mod idx;
pub mod shift;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_affine, augment, AffineParams, AugmentSpec};
pub use export::export_dataset;
pub use idx::{parse_idx, read_idx};
pub use shift::{apply_domain_shift, ShiftSpec};
pub use synth::{gen_synth_digits, gen_synth_keypoints};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Keypoints in image pixels, `(row, col)`, laid out `[sample][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointLabels {
    pub joints: usize,
    pub coords: Vec<[f64; 2]>,
    /// False for joints that left the image under augmentation.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    None,
    Classes(Vec<usize>),
    Keypoints(KeypointLabels),
}

/// Images in `[0, 1]`, NCHW, with optional labels and stable sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub images: Tensor,
    pub domain: Domain,
    pub labels: Labels,
    pub ids: Vec<u64>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn classes(&self) -> Result<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Ok(c),
            _ => Err(Error::invalid("labels", "batch has no class labels")),
        }
    }

    pub fn keypoints(&self) -> Result<&KeypointLabels> {
        match &self.labels {
            Labels::Keypoints(k) => Ok(k),
            _ => Err(Error::invalid("labels", "batch has no keypoint labels")),
        }
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<DomainBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("select", "empty selection"));
        }
        let (c, h, w) = self.image_dims();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("select", format!("index {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * plane..][..plane]);
        }
        let labels = match &self.labels {
            Labels::None => Labels::None,
            Labels::Classes(cl) => Labels::Classes(indices.iter().map(|&i| cl[i]).collect()),
            Labels::Keypoints(k) => {
                let j = k.joints;
                Labels::Keypoints(KeypointLabels {
                    joints: j,
                    coords: indices.iter().flat_map(|&i| k.coords[i * j..][..j].to_vec()).collect(),
                    valid: indices.iter().flat_map(|&i| k.valid[i * j..][..j].to_vec()).collect(),
                })
            }
        };
        Ok(DomainBatch {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            domain: self.domain,
            labels,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// Contiguous slice `[start, start + len)`.
    pub fn range(&self, start: usize, len: usize) -> Result<DomainBatch> {
        self.select(&(start..start + len).collect::<Vec<_>>())
    }

    /// Copy with labels removed, as the trainer sees target data.
    pub fn unlabeled(&self) -> DomainBatch {
        DomainBatch {
            labels: Labels::None,
            ..self.clone()
        }
    }
}

/// Generator for sample `id` under `seed`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Index order for one epoch: a seeded permutation, truncated to whole batches.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut sample_rng(seed, epoch));
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
