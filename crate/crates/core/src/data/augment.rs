//! Random affine warps and contrast jitter.
//!
//! Warps act about the image centre `((H-1)/2, (W-1)/2)`: a point `p` moves to
//! `M (p - c) + c + t` with `M = rotation * shear * scale`. Pixels are filled
//! by inverse mapping with bilinear interpolation and zero fill.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_rng, DomainBatch, KeypointLabels, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Translation per axis as a fraction of the image size.
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec::identity()
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            translate_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            contrast: 0.0,
        }
    }

    /// Mild ranges for digits.
    pub fn digits() -> Self {
        AugmentSpec {
            rotation_deg: 15.0,
            shear_deg: 0.0,
            translate_frac: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            contrast: 0.25,
        }
    }

    /// Full-strength pose ranges: 60 degree rotations, shear 30, translation
    /// 0.05, scale 0.6 to 1.3, contrast 0.25.
    pub fn pose() -> Self {
        AugmentSpec {
            rotation_deg: 60.0,
            shear_deg: 30.0,
            translate_frac: 0.05,
            scale_min: 0.6,
            scale_max: 1.3,
            contrast: 0.25,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentSpec::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("augment.rotation_deg", (0.0..=180.0).contains(&self.rotation_deg)),
            ("augment.shear_deg", (0.0..60.0).contains(&self.shear_deg)),
            ("augment.translate_frac", (0.0..=0.5).contains(&self.translate_frac)),
            ("augment.scale_min", self.scale_min > 0.0 && self.scale_min <= self.scale_max),
            ("augment.scale_max", self.scale_max.is_finite()),
            ("augment.contrast", (0.0..1.0).contains(&self.contrast)),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(field, "value outside its allowed range"));
            }
        }
        Ok(())
    }

    fn draw(&self, size: (usize, usize), rng: &mut impl Rng) -> (AffineParams, f64) {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation_deg = sym(rng, self.rotation_deg);
        let shear_deg = sym(rng, self.shear_deg);
        let ty = sym(rng, self.translate_frac) * size.0 as f64;
        let tx = sym(rng, self.translate_frac) * size.1 as f64;
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let contrast = 1.0 + sym(rng, self.contrast);
        (
            AffineParams {
                rotation_deg,
                shear_deg,
                ty,
                tx,
                scale,
            },
            contrast,
        )
    }
}

/// One concrete warp. Translations are in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub ty: f64,
    pub tx: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn translation(ty: f64, tx: f64) -> Self {
        AffineParams {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            ty,
            tx,
            scale: 1.0,
        }
    }

    pub fn rotation(deg: f64) -> Self {
        AffineParams {
            rotation_deg: deg,
            ..AffineParams::translation(0.0, 0.0)
        }
    }

    /// The same warp expressed on a grid `factor` times as large.
    pub fn rescaled(&self, factor: f64) -> Self {
        AffineParams {
            ty: self.ty * factor,
            tx: self.tx * factor,
            ..*self
        }
    }

    /// `M` acting on `(row, col)` offsets.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        // In (x, y) = (col, row): R * [[1, k], [0, 1]] * scale.
        let rx = [[c, -s], [s, c]];
        let m_xy = [
            [rx[0][0], rx[0][0] * k + rx[0][1]],
            [rx[1][0], rx[1][0] * k + rx[1][1]],
        ];
        // Reorder to (row, col).
        [
            [m_xy[1][1] * self.scale, m_xy[1][0] * self.scale],
            [m_xy[0][1] * self.scale, m_xy[0][0] * self.scale],
        ]
    }

    pub fn apply_point(&self, p: [f64; 2], h: usize, w: usize) -> [f64; 2] {
        let m = self.matrix();
        let c = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
        let d = [p[0] - c[0], p[1] - c[1]];
        [
            m[0][0] * d[0] + m[0][1] * d[1] + c[0] + self.ty,
            m[1][0] * d[0] + m[1][1] * d[1] + c[1] + self.tx,
        ]
    }

    /// Inverse-maps every output pixel into `src` (h x w).
    pub fn warp_plane(&self, src: &[f64], h: usize, w: usize) -> Vec<f64> {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let c = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for col in 0..w {
                let d = [r as f64 - c[0] - self.ty, col as f64 - c[1] - self.tx];
                let y = inv[0][0] * d[0] + inv[0][1] * d[1] + c[0];
                let x = inv[1][0] * d[0] + inv[1][1] * d[1] + c[1];
                out[r * w + col] = bilinear(src, h, w, y, x);
            }
        }
        out
    }
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            src[r as usize * w + c as usize]
        }
    };
    let mut v = 0.0;
    for (dr, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dc, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * at(y0 + dr, x0 + dc);
            }
        }
    }
    v
}

fn warp_sample(
    img: &mut [f64],
    kps: Option<(&mut [[f64; 2]], &mut [bool])>,
    dims: (usize, usize, usize),
    params: &AffineParams,
    contrast: f64,
) {
    let (c, h, w) = dims;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..][..h * w];
        let warped = params.warp_plane(plane, h, w);
        plane.copy_from_slice(&warped);
        if contrast != 1.0 {
            for p in plane.iter_mut() {
                *p = ((*p - 0.5) * contrast + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    if let Some((coords, valid)) = kps {
        for (p, ok) in coords.iter_mut().zip(valid.iter_mut()) {
            *p = params.apply_point(*p, h, w);
            let inside = |v: f64, n: usize| v >= 0.0 && v <= n as f64 - 1.0;
            if !(inside(p[0], h) && inside(p[1], w)) {
                *ok = false;
            }
        }
    }
}

/// Applies one explicit warp per sample; keypoints follow the images and
/// joints pushed outside the image are marked invalid.
pub fn apply_affine(batch: &DomainBatch, params: &[AffineParams]) -> Result<DomainBatch> {
    if params.len() != batch.len() {
        return Err(Error::invalid("apply_affine", format!("{} warps for {} samples", params.len(), batch.len())));
    }
    let contrast = vec![1.0; batch.len()];
    warp_batch(batch, params, &contrast)
}

fn warp_batch(batch: &DomainBatch, params: &[AffineParams], contrast: &[f64]) -> Result<DomainBatch> {
    let dims = batch.image_dims();
    let plane = dims.0 * dims.1 * dims.2;
    let mut out = batch.clone();
    let mut pixels = batch.images.data().to_vec();
    match &mut out.labels {
        Labels::Keypoints(KeypointLabels { joints, coords, valid }) => {
            let j = *joints;
            pixels
                .par_chunks_mut(plane)
                .zip(coords.par_chunks_mut(j).zip(valid.par_chunks_mut(j)))
                .enumerate()
                .for_each(|(i, (img, (c, v)))| warp_sample(img, Some((c, v)), dims, &params[i], contrast[i]));
        }
        _ => pixels
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, img)| warp_sample(img, None, dims, &params[i], contrast[i])),
    }
    out.images = Tensor::new(batch.images.shape().to_vec(), pixels)?;
    Ok(out)
}

/// Random per-sample augmentation; sample `id` draws from stream `id` of `seed`.
pub fn augment(batch: &DomainBatch, spec: &AugmentSpec, seed: u64) -> Result<DomainBatch> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(batch.clone());
    }
    let (_, h, w) = batch.image_dims();
    let (params, contrast): (Vec<_>, Vec<_>) = batch
        .ids
        .iter()
        .map(|&id| spec.draw((h, w), &mut sample_rng(seed, id)))
        .unzip();
    warp_batch(batch, &params, &contrast)
}
