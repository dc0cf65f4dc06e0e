use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_rng, Domain, DomainBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample appearance transform that turns a source set into a target
/// domain. Steps run in field order and each is skipped at its neutral value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// `p -> (p - 0.5) * contrast + 0.5 + brightness`.
    pub contrast: f64,
    pub brightness: f64,
    /// `p -> 1 - p`.
    pub invert: bool,
    /// Amplitude of an added random sinusoidal grating.
    pub texture_amplitude: f64,
    /// Standard deviation of added Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            contrast: 1.0,
            brightness: 0.0,
            invert: false,
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::config("shift.contrast", format!("must be positive, got {}", self.contrast)));
        }
        if !self.brightness.is_finite() || self.brightness.abs() > 1.0 {
            return Err(Error::config("shift.brightness", format!("must lie in [-1, 1], got {}", self.brightness)));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return Err(Error::config(
                "shift.texture_amplitude",
                format!("must lie in [0, 1], got {}", self.texture_amplitude),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("shift.noise_sigma", format!("must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    fn transform(&self, img: &mut [f64], h: usize, w: usize, rng: &mut impl Rng) {
        let changed = self.contrast != 1.0 || self.brightness != 0.0 || self.texture_amplitude > 0.0 || self.noise_sigma > 0.0;
        if self.contrast != 1.0 || self.brightness != 0.0 {
            for p in img.iter_mut() {
                *p = (*p - 0.5) * self.contrast + 0.5 + self.brightness;
            }
        }
        if self.invert {
            for p in img.iter_mut() {
                *p = 1.0 - *p;
            }
        }
        if self.texture_amplitude > 0.0 {
            let fy: f64 = rng.random_range(1.0..4.0);
            let fx: f64 = rng.random_range(1.0..4.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let tau = std::f64::consts::TAU;
            for r in 0..h {
                for c in 0..w {
                    let g = (tau * (fy * r as f64 / h as f64 + fx * c as f64 / w as f64) + phase).sin();
                    img[r * w + c] += self.texture_amplitude * 0.5 * (1.0 + g);
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            for p in img.iter_mut() {
                *p += normal.sample(rng);
            }
        }
        if changed {
            for p in img.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
        }
    }
}

/// Applies `spec` to every image; labels and ids are carried through and the
/// result is tagged as the target domain.
pub fn apply_domain_shift(data: &DomainBatch, spec: &ShiftSpec) -> Result<DomainBatch> {
    spec.validate()?;
    let (c, h, w) = data.image_dims();
    let plane = c * h * w;
    let mut pixels = data.images.data().to_vec();
    pixels
        .par_chunks_mut(plane)
        .zip(data.ids.par_iter())
        .for_each(|(img, &id)| {
            let mut rng = sample_rng(spec.seed, id);
            for ch in img.chunks_mut(h * w) {
                spec.transform(ch, h, w, &mut rng);
            }
        });
    Ok(DomainBatch {
        images: Tensor::new(data.images.shape().to_vec(), pixels)?,
        domain: Domain::Target,
        labels: data.labels.clone(),
        ids: data.ids.clone(),
    })
}
