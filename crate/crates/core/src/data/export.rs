//! Dataset export: one raw little-endian f64 file per sample plus a
//! `manifest.txt` with one line per sample.
//!
//! ```text
//! # domain=source shape=1x32x32 labels=class
//! 000000.f64 0 7
//! ```
//!
//! Keypoint lines carry `row col valid` triples per joint after the id.

use std::fmt::Write as _;
use std::path::Path;

use super::{DomainBatch, Labels};
use crate::error::{Error, Result};

/// Writes `data` into `dir` (created if needed) and returns the file count.
pub fn export_dataset(data: &DomainBatch, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = data.image_dims();
    let plane = c * h * w;
    let kind = match &data.labels {
        Labels::None => "none",
        Labels::Classes(_) => "class",
        Labels::Keypoints(_) => "keypoints",
    };
    let mut manifest = format!("# domain={} shape={c}x{h}x{w} labels={kind}\n", data.domain.as_str());
    for (i, &id) in data.ids.iter().enumerate() {
        let file = format!("{id:06}.f64");
        let bytes: Vec<u8> = data.images.data()[i * plane..][..plane]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let _ = write!(manifest, "{file} {id}");
        match &data.labels {
            Labels::None => {}
            Labels::Classes(cl) => {
                let _ = write!(manifest, " {}", cl[i]);
            }
            Labels::Keypoints(k) => {
                for j in 0..k.joints {
                    let p = k.coords[i * k.joints + j];
                    let _ = write!(manifest, " {} {} {}", p[0], p[1], u8::from(k.valid[i * k.joints + j]));
                }
            }
        }
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(data.len())
}
