//! Gaussian keypoint heatmaps.
//!
//! Coordinates are `(row, col)` with pixel centres at integers. Mapping between
//! an image of size `S` and a heatmap of size `s` uses half-pixel centres:
//! `hm = (img + 0.5) * s / S - 0.5`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEATMAP_SIGMA: f64 = 2.0;

pub fn image_to_heatmap(coord: f64, image_size: usize, heatmap_size: usize) -> f64 {
    (coord + 0.5) * heatmap_size as f64 / image_size as f64 - 0.5
}

pub fn heatmap_to_image(coord: f64, heatmap_size: usize, image_size: usize) -> f64 {
    (coord + 0.5) * image_size as f64 / heatmap_size as f64 - 0.5
}

/// Unnormalized Gaussian with peak 1 at `center`, written into `out` (h*w).
pub fn render_gaussian(out: &mut [f64], h: usize, w: usize, center: [f64; 2], sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..h {
        let dr = r as f64 - center[0];
        for c in 0..w {
            let dc = c as f64 - center[1];
            out[r * w + c] = (-(dr * dr + dc * dc) * inv).exp();
        }
    }
}

/// `N x J x size x size` targets from keypoints given in image pixels.
/// Joints with `valid == false` get all-zero maps.
pub fn render_heatmaps(
    keypoints: &[[f64; 2]],
    valid: &[bool],
    joints: usize,
    image_size: usize,
    heatmap_size: usize,
    sigma: f64,
) -> Result<Tensor> {
    if joints == 0 || !keypoints.len().is_multiple_of(joints) || valid.len() != keypoints.len() {
        return Err(Error::invalid(
            "render_heatmaps",
            format!("{} keypoints, {} flags for {joints} joints", keypoints.len(), valid.len()),
        ));
    }
    let n = keypoints.len() / joints;
    let plane = heatmap_size * heatmap_size;
    let mut data = vec![0.0; keypoints.len() * plane];
    for (i, (kp, &ok)) in keypoints.iter().zip(valid).enumerate() {
        if ok {
            let center = kp.map(|v| image_to_heatmap(v, image_size, heatmap_size));
            render_gaussian(&mut data[i * plane..][..plane], heatmap_size, heatmap_size, center, sigma);
        }
    }
    Tensor::new(vec![n, joints, heatmap_size, heatmap_size], data)
}

/// Per-joint peak location `(row, col)` and value; ties go to the lowest
/// flat index.
pub fn decode_with_peaks(heatmaps: &Tensor) -> Result<Vec<([usize; 2], f64)>> {
    let (n, j, h, w) = heatmaps.dims4()?;
    let plane = h * w;
    Ok((0..n * j)
        .map(|i| {
            let m = &heatmaps.data()[i * plane..][..plane];
            let mut best = 0;
            for (k, &v) in m.iter().enumerate() {
                if v > m[best] {
                    best = k;
                }
            }
            ([best / w, best % w], m[best])
        })
        .collect())
}

/// Argmax `(row, col)` of every joint map, laid out `[sample][joint]`.
pub fn decode_keypoints(heatmaps: &Tensor) -> Result<Vec<[usize; 2]>> {
    Ok(decode_with_peaks(heatmaps)?.into_iter().map(|(p, _)| p).collect())
}

/// Decoded argmax locations mapped to image pixels.
pub fn decode_to_image(heatmaps: &Tensor, image_size: usize) -> Result<Vec<[f64; 2]>> {
    let h = heatmaps.shape().get(2).copied().unwrap_or(1);
    Ok(decode_keypoints(heatmaps)?
        .into_iter()
        .map(|[r, c]| [heatmap_to_image(r as f64, h, image_size), heatmap_to_image(c as f64, h, image_size)])
        .collect())
}
