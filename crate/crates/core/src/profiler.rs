//! Parameter and MAC accounting for layer graphs, and tap-feature export.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::data::{DomainBatch, Labels};
use crate::error::{Error, Result};
use crate::models::{Layer, LayerGraph, Network, Shape};

/// Stated in every report: what one MAC is for each layer kind.
pub const MAC_CONVENTION: &str = "MACs per batch of N: conv2d oH*oW*oC*iC*K*K and convtranspose2d \
iH*iW*iC*oC*K*K per sample; linear in*out per sample; batchnorm2d 2 per element; imsty and adain \
4*N*H*W*C + 4*C per call; relu, pooling, upsampling, flatten and gradient reversal count 0";

/// Element count of every parameter tensor. Alignment blocks own none.
pub fn count_params(graph: &LayerGraph) -> usize {
    graph.param_count()
}

fn spatial(s: Shape) -> (u64, u64, u64) {
    match s {
        Shape::Spatial { c, h, w } => (c as u64, h as u64, w as u64),
        Shape::Flat(f) => (f as u64, 1, 1),
    }
}

/// MACs of one layer on a batch of `batch`, given its per-sample input and
/// output shapes.
pub fn layer_macs(layer: &Layer, input: Shape, output: Shape, batch: u64) -> u64 {
    let (ic, ih, iw) = spatial(input);
    let (oc, oh, ow) = spatial(output);
    match *layer {
        Layer::Conv2d { k, .. } => batch * oh * ow * oc * ic * (k * k) as u64,
        Layer::ConvTranspose2d { k, .. } => batch * ih * iw * ic * oc * (k * k) as u64,
        Layer::Linear { in_f, out_f } => batch * (in_f * out_f) as u64,
        Layer::BatchNorm2d { .. } => batch * 2 * input.numel() as u64,
        Layer::Imsty | Layer::Adain => 4 * batch * ih * iw * ic + 4 * ic,
        Layer::Relu | Layer::MaxPool2d { .. } | Layer::Upsample { .. } | Layer::Flatten | Layer::GradReverse => 0,
    }
}

/// Total MACs of `graph` on a batch of `batch`.
pub fn count_macs(graph: &LayerGraph, batch: usize) -> Result<u64> {
    Ok(cost_report(graph, batch)?.total_macs)
}

/// `graph` with its spatial input resized to `size` x `size`.
pub fn at_resolution(graph: &LayerGraph, size: usize) -> Result<LayerGraph> {
    let mut g = graph.clone();
    match g.input {
        Shape::Spatial { c, .. } if size > 0 => g.input = Shape::Spatial { c, h: size, w: size },
        Shape::Spatial { .. } => return Err(Error::config("resolution", "must be positive")),
        Shape::Flat(_) => return Err(Error::config("resolution", "graph has a flat input")),
    }
    g.shapes().map_err(|e| Error::config("resolution", format!("{size} does not fit the graph: {e}")))?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub index: usize,
    pub kind: &'static str,
    pub output: Shape,
    pub params: usize,
    pub trainable: bool,
    pub macs: u64,
}

impl CostRow {
    pub fn is_alignment(&self) -> bool {
        self.kind == "imsty"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub input: Shape,
    pub batch: usize,
    pub rows: Vec<CostRow>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub total_macs: u64,
    pub alignment_params: usize,
    pub alignment_macs: u64,
}

pub fn cost_report(graph: &LayerGraph, batch: usize) -> Result<CostReport> {
    if batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let shapes = graph.shapes()?;
    let rows: Vec<CostRow> = graph
        .layers
        .iter()
        .enumerate()
        .map(|(index, spec)| CostRow {
            index,
            kind: spec.layer.kind(),
            output: shapes[index + 1],
            params: spec.layer.param_count(),
            trainable: !spec.frozen,
            macs: layer_macs(&spec.layer, shapes[index], shapes[index + 1], batch as u64),
        })
        .collect();
    let align = rows.iter().filter(|r| r.is_alignment());
    Ok(CostReport {
        input: graph.input,
        batch,
        total_params: rows.iter().map(|r| r.params).sum(),
        trainable_params: rows.iter().filter(|r| r.trainable).map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        alignment_params: align.clone().map(|r| r.params).sum(),
        alignment_macs: align.map(|r| r.macs).sum(),
        rows,
    })
}

impl CostReport {
    /// Aligned text table with the convention header and totals.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {MAC_CONVENTION}\n# input {} batch {}\n", self.input, self.batch);
        let head = ["#", "layer", "output", "params", "trainable", "MACs"];
        let mut cells: Vec<[String; 6]> = vec![head.map(String::from)];
        for r in &self.rows {
            cells.push([
                r.index.to_string(),
                r.kind.to_string(),
                r.output.to_string(),
                r.params.to_string(),
                if r.trainable { "yes" } else { "no" }.to_string(),
                r.macs.to_string(),
            ]);
        }
        cells.push([
            String::new(),
            "alignment".into(),
            String::new(),
            self.alignment_params.to_string(),
            String::new(),
            self.alignment_macs.to_string(),
        ]);
        cells.push([
            String::new(),
            "total".into(),
            String::new(),
            self.total_params.to_string(),
            self.trainable_params.to_string(),
            self.total_macs.to_string(),
        ]);
        let mut width = [0usize; 6];
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        for row in &cells {
            let mut line = String::new();
            for (i, (c, w)) in row.iter().zip(width).enumerate() {
                // Text columns left-aligned, counts right-aligned.
                if i == 1 || i == 2 {
                    let _ = write!(line, "{c:<w$}  ");
                } else {
                    let _ = write!(line, "{c:>w$}  ");
                }
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }

    /// CSV with the convention as a leading comment; `alignment` and
    /// `total` rows close the file.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {MAC_CONVENTION}\nindex,layer,output,params,trainable,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.index, r.kind, r.output, r.params, u8::from(r.trainable), r.macs);
        }
        let _ = writeln!(s, ",alignment,,{},,{}", self.alignment_params, self.alignment_macs);
        let _ = writeln!(s, ",total,,{},{},{}", self.total_params, self.trainable_params, self.total_macs);
        s
    }
}

/// Writes `sample_id,domain,label,f0,...` for every sample of every set: the
/// eval-mode tap activation, channel-mean pooled unless `full_resolution`.
/// The label column is empty for unlabeled and keypoint data. Returns the
/// row count.
pub fn export_features(
    model: &Network,
    sets: &[&DomainBatch],
    mut out: impl Write,
    full_resolution: bool,
    path_for_errors: &Path,
) -> Result<usize> {
    const CHUNK: usize = 256;
    let io = |e| Error::io(path_for_errors, e);
    let (c, h, w) = match model.tap_shape() {
        Shape::Spatial { c, h, w } => (c, h, w),
        Shape::Flat(f) => (f, 1, 1),
    };
    let cols = if full_resolution { c * h * w } else { c };
    let mut header = String::from("sample_id,domain,label");
    for k in 0..cols {
        let _ = write!(header, ",f{k}");
    }
    writeln!(out, "{header}").map_err(io)?;
    let mut rows = 0;
    for data in sets {
        let mut start = 0;
        while start < data.len() {
            let len = CHUNK.min(data.len() - start);
            let (_, tap) = model.predict_with_tap(&data.images.slice_outer(start, len)?)?;
            let per = tap.numel() / len;
            for (i, feat) in tap.data().chunks(per).enumerate() {
                let k = start + i;
                let label = match &data.labels {
                    Labels::Classes(cl) => cl[k].to_string(),
                    _ => String::new(),
                };
                let mut line = format!("{},{},{label}", data.ids[k], data.domain.as_str());
                if full_resolution {
                    for v in feat {
                        let _ = write!(line, ",{v}");
                    }
                } else {
                    let plane = per / c;
                    for ch in feat.chunks(plane) {
                        let _ = write!(line, ",{}", ch.iter().sum::<f64>() / plane as f64);
                    }
                }
                writeln!(out, "{line}").map_err(io)?;
            }
            start += len;
        }
        rows += data.len();
    }
    out.flush().map_err(io)?;
    Ok(rows)
}

/// [`export_features`] into a file at `path`.
pub fn export_features_to(model: &Network, sets: &[&DomainBatch], path: &Path, full_resolution: bool) -> Result<usize> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    export_features(model, sets, std::io::BufWriter::new(file), full_resolution, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::zoo;

    #[test]
    fn imsty_example_geometry() {
        let g = zoo::imsty_only(2048, 8, 8);
        assert_eq!(count_params(&g), 0);
        assert_eq!(count_macs(&g, 32).unwrap(), 16_785_408);
        assert_eq!(count_macs(&g, 1).unwrap(), 4 * 8 * 8 * 2048 + 4 * 2048);
    }

    #[test]
    fn linear_rule() {
        let mut g = LayerGraph::new(Shape::Flat(400));
        g.push(Layer::Linear { in_f: 400, out_f: 120 });
        assert_eq!(count_macs(&g, 1).unwrap(), 48_000);
        assert_eq!(count_params(&LayerGraph::new(Shape::Flat(3))), 0);
    }

    #[test]
    fn report_totals_are_row_sums() {
        let r = cost_report(&zoo::pose_model(1, 4, 16, 64).unwrap(), 2).unwrap();
        assert_eq!(r.total_macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        assert_eq!(r.alignment_params, 0);
        assert!(r.to_text().lines().count() == r.rows.len() + 5);
        assert!(r.to_csv().starts_with("# MACs"));
    }
}
