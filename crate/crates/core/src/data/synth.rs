//! Procedural glyphs and stick figures.

use rand::Rng;
use rayon::prelude::*;

use super::{sample_rng, Domain, DomainBatch, KeypointLabels, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance from `p` to the segment `a`-`b`.
fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

/// Anti-aliased stroke of width `thick`, max-composited into `img`.
fn draw_segment(img: &mut [f64], size: usize, a: [f64; 2], b: [f64; 2], thick: f64, value: f64) {
    let r = thick / 2.0 + 1.0;
    let lo = |x: f64, y: f64| (x.min(y) - r).floor().max(0.0) as usize;
    let hi = |x: f64, y: f64| ((x.max(y) + r).ceil() as usize).min(size - 1);
    for row in lo(a[0], b[0])..=hi(a[0], b[0]) {
        for col in lo(a[1], b[1])..=hi(a[1], b[1]) {
            let d = seg_dist([row as f64, col as f64], a, b);
            let cover = (thick / 2.0 + 0.5 - d).clamp(0.0, 1.0) * value;
            let px = &mut img[row * size + col];
            *px = px.max(cover);
        }
    }
}

fn draw_disc(img: &mut [f64], size: usize, c: [f64; 2], radius: f64, value: f64) {
    draw_segment(img, size, c, c, 2.0 * radius, value);
}

// Seven-segment layout in a unit box: a top, b top-right, c bottom-right,
// d bottom, e bottom-left, f top-left, g middle.
const SEGMENTS: [([f64; 2], [f64; 2]); 7] = [
    ([0.0, 0.0], [0.0, 1.0]),
    ([0.0, 1.0], [0.5, 1.0]),
    ([0.5, 1.0], [1.0, 1.0]),
    ([1.0, 0.0], [1.0, 1.0]),
    ([0.5, 0.0], [1.0, 0.0]),
    ([0.0, 0.0], [0.5, 0.0]),
    ([0.5, 0.0], [0.5, 1.0]),
];

const DIGITS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 2, 3],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn render_digit(class: usize, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let height = s * rng.random_range(0.5..0.62);
    let width = height * rng.random_range(0.5..0.62);
    let center = [
        s / 2.0 + rng.random_range(-0.06..0.06) * s,
        s / 2.0 + rng.random_range(-0.06..0.06) * s,
    ];
    let tilt = rng.random_range(-0.12f64..0.12);
    let thick = rng.random_range(0.06..0.1) * s;
    let value = rng.random_range(0.75..1.0);
    let place = |p: [f64; 2]| {
        let y = (p[0] - 0.5) * height;
        let x = (p[1] - 0.5) * width - tilt * y;
        [center[0] + y, center[1] + x]
    };
    let mut img = vec![0.0; size * size];
    for &seg in DIGITS[class] {
        let (a, b) = SEGMENTS[seg];
        draw_segment(&mut img, size, place(a), place(b), thick, value);
    }
    img
}

/// `count` grayscale glyphs, class `i % classes` for sample `i`.
pub fn gen_synth_digits(count: usize, classes: usize, size: usize, seed: u64) -> Result<DomainBatch> {
    if size < 16 || !(1..=10).contains(&classes) || count == 0 {
        return Err(Error::invalid(
            "gen_synth_digits",
            format!("need count >= 1, 1 <= classes <= 10, size >= 16; got {count}, {classes}, {size}"),
        ));
    }
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let images: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| render_digit(labels[i], size, &mut sample_rng(seed, i as u64)))
        .collect();
    Ok(DomainBatch {
        images: Tensor::new(vec![count, 1, size, size], images.concat())?,
        domain: Domain::Source,
        labels: Labels::Classes(labels),
        ids: (0..count as u64).collect(),
    })
}

const MARGIN: f64 = 2.0;

fn pose_chain(joints: usize, size: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let s = size as f64;
    let mut reach = 0.22 * s;
    for attempt in 0.. {
        if attempt > 0 && attempt % 20 == 0 {
            reach *= 0.9;
        }
        let root = [rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s)];
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut len = reach * rng.random_range(0.85..1.15);
        let mut pts = vec![root];
        for _ in 1..joints {
            let last = *pts.last().expect("root");
            pts.push([last[0] + len * heading.sin(), last[1] + len * heading.cos()]);
            heading += rng.random_range(-1.05..1.05);
            len *= 0.8;
        }
        if pts.iter().all(|p| p.iter().all(|&v| v >= MARGIN && v <= s - 1.0 - MARGIN)) {
            return pts;
        }
    }
    unreachable!("the reach shrinks until the chain fits")
}

fn render_figure(pts: &[[f64; 2]], size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = size as f64;
    let value = rng.random_range(0.75..1.0);
    let mut img = vec![0.0; size * size];
    for (i, w) in pts.windows(2).enumerate() {
        let thick = (0.055 * s - 0.006 * s * i as f64).max(0.02 * s);
        draw_segment(&mut img, size, w[0], w[1], thick, value);
    }
    // The disc makes the root, and so the joint order, identifiable.
    draw_disc(&mut img, size, pts[0], 0.07 * s, value);
    img
}

/// Articulated chains: a root disc, then `joints - 1` limbs of decreasing
/// length and thickness. Every joint lies at least 2 px inside the image.
pub fn gen_synth_keypoints(count: usize, joints: usize, size: usize, seed: u64) -> Result<DomainBatch> {
    if !(2..=8).contains(&joints) || size < 16 || count == 0 {
        return Err(Error::invalid(
            "gen_synth_keypoints",
            format!("need count >= 1, 2 <= joints <= 8, size >= 16; got {count}, {joints}, {size}"),
        ));
    }
    let samples: Vec<(Vec<[f64; 2]>, Vec<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let pts = pose_chain(joints, size, &mut rng);
            let img = render_figure(&pts, size, &mut rng);
            (pts, img)
        })
        .collect();
    let mut coords = Vec::with_capacity(count * joints);
    let mut data = Vec::with_capacity(count * size * size);
    for (pts, img) in samples {
        coords.extend(pts);
        data.extend(img);
    }
    Ok(DomainBatch {
        images: Tensor::new(vec![count, 1, size, size], data)?,
        domain: Domain::Source,
        labels: Labels::Keypoints(KeypointLabels {
            joints,
            valid: vec![true; coords.len()],
            coords,
        }),
        ids: (0..count as u64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_in_range() {
        let d = gen_synth_digits(20, 10, 32, 1).unwrap();
        assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(d.images.data().iter().any(|&v| v > 0.5));
    }

    #[test]
    fn bad_arguments() {
        assert!(gen_synth_digits(10, 11, 32, 0).is_err());
        assert!(gen_synth_digits(10, 10, 8, 0).is_err());
        assert!(gen_synth_keypoints(10, 9, 64, 0).is_err());
        assert!(gen_synth_keypoints(10, 1, 64, 0).is_err());
    }
}
