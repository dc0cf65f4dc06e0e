//! Built-in layer graphs.

use super::graph::{Layer, LayerGraph, Shape};
use crate::error::{Error, Result};

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv2d {
        in_c,
        out_c,
        k,
        stride,
        pad,
        bias: true,
    }
}

/// LeNet-5 encoder for 32x32 inputs, conv-BN-ReLU-pool twice, with the
/// alignment tap on the 16x5x5 map before flattening.
pub fn lenet5_encoder(in_channels: usize) -> Result<LayerGraph> {
    if !matches!(in_channels, 1 | 3) {
        return Err(Error::invalid("lenet5_encoder", format!("in_channels must be 1 or 3, got {in_channels}")));
    }
    let mut g = LayerGraph::new(Shape::Spatial {
        c: in_channels,
        h: 32,
        w: 32,
    });
    g.push(conv(in_channels, 6, 5, 1, 0))
        .push(Layer::BatchNorm2d { c: 6 })
        .push(Layer::Relu)
        .push(Layer::MaxPool2d { window: 2 })
        .push(conv(6, 16, 5, 1, 0))
        .push(Layer::BatchNorm2d { c: 16 })
        .push(Layer::Relu)
        .push(Layer::MaxPool2d { window: 2 })
        .push(Layer::Imsty)
        .push(Layer::Flatten);
    Ok(g)
}

/// `fc(120) -> ReLU -> fc(84) -> ReLU -> fc(C)` producing logits.
pub fn classifier_head(feature_dim: usize, num_classes: usize) -> Result<LayerGraph> {
    if feature_dim == 0 || num_classes == 0 {
        return Err(Error::invalid("classifier_head", "feature_dim and num_classes must be positive"));
    }
    let mut g = LayerGraph::new(Shape::Flat(feature_dim));
    g.push(Layer::Linear {
        in_f: feature_dim,
        out_f: 120,
    })
    .push(Layer::Relu)
    .push(Layer::Linear { in_f: 120, out_f: 84 })
    .push(Layer::Relu)
    .push(Layer::Linear {
        in_f: 84,
        out_f: num_classes,
    });
    Ok(g)
}

/// Encoder plus head for digit classification.
pub fn lenet5_classifier(in_channels: usize, num_classes: usize) -> Result<LayerGraph> {
    let enc = lenet5_encoder(in_channels)?;
    let dim = enc.output_shape()?.numel();
    enc.then(&classifier_head(dim, num_classes)?)
}

/// Four stride-2 conv-BN-ReLU stages (x16 down), the alignment tap, three
/// stride-2 transpose-conv-BN-ReLU upsampling blocks, and a 1x1 conv to
/// `joints` heatmaps at half the input resolution.
pub fn pose_model(in_channels: usize, joints: usize, width: usize, size: usize) -> Result<LayerGraph> {
    if joints == 0 || width < 8 || !size.is_multiple_of(16) || size == 0 {
        return Err(Error::invalid(
            "pose_model",
            format!("need joints >= 1, width >= 8 and size a multiple of 16; got {joints}, {width}, {size}"),
        ));
    }
    let mut g = LayerGraph::new(Shape::Spatial {
        c: in_channels,
        h: size,
        w: size,
    });
    let mut c = in_channels;
    for _ in 0..4 {
        g.push(conv(c, width, 3, 2, 1))
            .push(Layer::BatchNorm2d { c: width })
            .push(Layer::Relu);
        c = width;
    }
    g.push(Layer::Imsty);
    for _ in 0..3 {
        g.push(Layer::ConvTranspose2d {
            in_c: width,
            out_c: width,
            k: 4,
            stride: 2,
            pad: 1,
            bias: true,
        })
        .push(Layer::BatchNorm2d { c: width })
        .push(Layer::Relu);
    }
    g.push(conv(width, joints, 1, 1, 0));
    Ok(g)
}

/// A lone alignment block on a `c x h x w` feature map.
pub fn imsty_only(c: usize, h: usize, w: usize) -> LayerGraph {
    let mut g = LayerGraph::new(Shape::Spatial { c, h, w });
    g.push(Layer::Imsty);
    g
}

/// Explicit stylization network in the AdaIN style: a frozen VGG-19 encoder
/// up to relu4_1, an AdaIN block, and a trainable mirrored decoder with
/// nearest upsampling. Used for cost comparison only.
pub fn stylenet(size: usize) -> LayerGraph {
    let mut g = LayerGraph::new(Shape::Spatial { c: 3, h: size, w: size });
    let enc: &[(usize, usize)] = &[(3, 64), (64, 64), (0, 0), (64, 128), (128, 128), (0, 0), (128, 256), (256, 256), (256, 256), (256, 256), (0, 0), (256, 512)];
    for &(i, o) in enc {
        if i == 0 {
            g.push_frozen(Layer::MaxPool2d { window: 2 });
        } else {
            g.push_frozen(conv(i, o, 3, 1, 1)).push_frozen(Layer::Relu);
        }
    }
    g.push(Layer::Adain);
    let dec: &[(usize, usize)] = &[(512, 256), (0, 0), (256, 256), (256, 256), (256, 256), (256, 128), (0, 0), (128, 128), (128, 64), (0, 0), (64, 64)];
    for &(i, o) in dec {
        if i == 0 {
            g.push(Layer::Upsample { factor: 2 });
        } else {
            g.push(conv(i, o, 3, 1, 1)).push(Layer::Relu);
        }
    }
    g.push(conv(64, 3, 3, 1, 1));
    g
}

/// Gradient-reversal domain classifier on pooled `features`-dim vectors.
pub fn revgrad(features: usize) -> LayerGraph {
    let mut g = LayerGraph::new(Shape::Flat(features));
    g.push(Layer::GradReverse)
        .push(Layer::Linear {
            in_f: features,
            out_f: 1024,
        })
        .push(Layer::Relu)
        .push(Layer::Linear { in_f: 1024, out_f: 1024 })
        .push(Layer::Relu)
        .push(Layer::Linear { in_f: 1024, out_f: 2 });
    g
}

/// Looks up a built-in graph by name: `lenet5`, `lenet5-classifier`,
/// `pose`, `imsty`, `stylenet`, `revgrad`.
pub fn builtin(name: &str) -> Result<LayerGraph> {
    match name {
        "lenet5" => lenet5_encoder(1),
        "lenet5-classifier" => lenet5_classifier(1, 10),
        "pose" => pose_model(1, 4, 32, 64),
        "imsty" => Ok(imsty_only(2048, 8, 8)),
        "stylenet" => Ok(stylenet(256)),
        "revgrad" => Ok(revgrad(2048)),
        other => Err(Error::config("graph", format!("unknown built-in graph `{other}`"))),
    }
}

pub const BUILTIN_NAMES: &[&str] = &["lenet5", "lenet5-classifier", "pose", "imsty", "stylenet", "revgrad"];
