//! Layer graphs: an ordered list of layer descriptors with a static shape walk
//! and a line-oriented text form.
//!
//! ```text
//! # comment
//! input 1 32 32
//! conv2d in=1 out=6 k=5
//! batchnorm2d c=6
//! relu
//! maxpool2d window=2
//! imsty
//! flatten
//! linear in=400 out=120
//! ```
//!
//! A trailing `frozen` token excludes a layer's parameters from the
//! trainable count. `imsty` marks the alignment tap.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    ConvTranspose2d {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm2d {
        c: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
    },
    /// Nearest-neighbour upsampling.
    Upsample {
        factor: usize,
    },
    Flatten,
    Linear {
        in_f: usize,
        out_f: usize,
    },
    /// Implicit stylization: the alignment tap.
    Imsty,
    /// Explicit AdaIN inside a stylization network; same cost as `Imsty`.
    Adain,
    /// Gradient reversal: identity forward, negated gradient backward.
    GradReverse,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::ConvTranspose2d { .. } => "convtranspose2d",
            Layer::BatchNorm2d { .. } => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Upsample { .. } => "upsample",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "linear",
            Layer::Imsty => "imsty",
            Layer::Adain => "adain",
            Layer::GradReverse => "gradreverse",
        }
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Conv2d {
                in_c, out_c, k, bias, ..
            } => {
                let mut v = vec![vec![out_c, in_c, k, k]];
                if bias {
                    v.push(vec![out_c]);
                }
                v
            }
            Layer::ConvTranspose2d {
                in_c, out_c, k, bias, ..
            } => {
                let mut v = vec![vec![in_c, out_c, k, k]];
                if bias {
                    v.push(vec![out_c]);
                }
                v
            }
            Layer::BatchNorm2d { c } => vec![vec![c], vec![c]],
            Layer::Linear { in_f, out_f } => vec![vec![out_f, in_f], vec![out_f]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub layer: Layer,
    pub frozen: bool,
}

/// Activation shape of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(f) => f,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { c, h, w } => vec![c, h, w],
            Shape::Flat(f) => vec![f],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGraph {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl LayerGraph {
    pub fn new(input: Shape) -> Self {
        LayerGraph {
            input,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(LayerSpec { layer, frozen: false });
        self
    }

    pub fn push_frozen(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(LayerSpec { layer, frozen: true });
        self
    }

    /// Appends `next`, whose input must match this graph's output.
    pub fn then(&self, next: &LayerGraph) -> Result<LayerGraph> {
        let out = self.output_shape()?;
        if out != next.input {
            return Err(Error::GraphShape {
                index: self.layers.len(),
                kind: "compose".into(),
                msg: format!("output {out} does not feed input {}", next.input),
            });
        }
        let mut g = self.clone();
        g.layers.extend(next.layers.iter().copied());
        Ok(g)
    }

    /// Index of the single `imsty` layer.
    pub fn tap_index(&self) -> Result<usize> {
        let taps: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.layer == Layer::Imsty)
            .map(|(i, _)| i)
            .collect();
        match taps[..] {
            [i] => Ok(i),
            _ => Err(Error::GraphShape {
                index: taps.get(1).copied().unwrap_or(self.layers.len()),
                kind: "imsty".into(),
                msg: format!("expected exactly one alignment tap, found {}", taps.len()),
            }),
        }
    }

    /// Per-sample shape after every layer; `shapes()[i]` is the input of
    /// layer `i` and the last entry is the graph output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input;
        out.push(cur);
        for (index, spec) in self.layers.iter().enumerate() {
            cur = step_shape(cur, &spec.layer).map_err(|msg| Error::GraphShape {
                index,
                kind: spec.layer.kind().into(),
                msg,
            })?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().expect("input shape is always present"))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.layer.param_count()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(|l| l.layer.param_count())
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self.input {
            Shape::Spatial { c, h, w } => s.push_str(&format!("input {c} {h} {w}\n")),
            Shape::Flat(f) => s.push_str(&format!("input {f}\n")),
        }
        for spec in &self.layers {
            s.push_str(&layer_line(&spec.layer));
            if spec.frozen {
                s.push_str(" frozen");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<LayerGraph> {
        let mut input = None;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::GraphParse { line: line_no, msg };
            let mut toks = line.split_whitespace();
            let kind = toks.next().expect("non-empty line");
            let rest: Vec<&str> = toks.collect();
            if kind == "input" {
                if input.is_some() {
                    return Err(err("duplicate `input` line".into()));
                }
                let dims = rest
                    .iter()
                    .map(|t| t.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err(format!("bad input dimensions `{}`", rest.join(" "))))?;
                input = Some(match dims[..] {
                    [c, h, w] => Shape::Spatial { c, h, w },
                    [f] => Shape::Flat(f),
                    _ => return Err(err("`input` takes C H W or a single feature count".into())),
                });
                continue;
            }
            if input.is_none() {
                return Err(err("layers must follow an `input` line".into()));
            }
            let frozen = rest.last() == Some(&"frozen");
            let args = if frozen { &rest[..rest.len() - 1] } else { &rest[..] };
            let layer = parse_layer(kind, args).map_err(err)?;
            layers.push(LayerSpec { layer, frozen });
        }
        let input = input.ok_or(Error::GraphParse {
            line: text.lines().count().max(1),
            msg: "missing `input` line".into(),
        })?;
        Ok(LayerGraph { input, layers })
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> std::result::Result<usize, String> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(format!("kernel {k} larger than padded input {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

fn step_shape(cur: Shape, layer: &Layer) -> std::result::Result<Shape, String> {
    let spatial = || match cur {
        Shape::Spatial { c, h, w } => Ok((c, h, w)),
        Shape::Flat(_) => Err(format!("expects a spatial input, got {cur}")),
    };
    Ok(match *layer {
        Layer::Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            ..
        } => {
            let (c, h, w) = spatial()?;
            if c != in_c {
                return Err(format!("expects {in_c} channels, got {cur}"));
            }
            Shape::Spatial {
                c: out_c,
                h: conv_out(h, k, stride, pad)?,
                w: conv_out(w, k, stride, pad)?,
            }
        }
        Layer::ConvTranspose2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            ..
        } => {
            let (c, h, w) = spatial()?;
            if c != in_c {
                return Err(format!("expects {in_c} channels, got {cur}"));
            }
            let t = |s: usize| {
                ((s - 1) * stride + k)
                    .checked_sub(2 * pad)
                    .filter(|&o| o > 0)
                    .ok_or_else(|| format!("padding {pad} leaves no output"))
            };
            Shape::Spatial {
                c: out_c,
                h: t(h)?,
                w: t(w)?,
            }
        }
        Layer::BatchNorm2d { c: bc } => {
            let (c, _, _) = spatial()?;
            if c != bc {
                return Err(format!("expects {bc} channels, got {cur}"));
            }
            cur
        }
        Layer::MaxPool2d { window } => {
            let (c, h, w) = spatial()?;
            if h < window || w < window {
                return Err(format!("window {window} larger than {cur}"));
            }
            Shape::Spatial {
                c,
                h: h / window,
                w: w / window,
            }
        }
        Layer::Upsample { factor } => {
            let (c, h, w) = spatial()?;
            Shape::Spatial {
                c,
                h: h * factor,
                w: w * factor,
            }
        }
        Layer::Flatten => Shape::Flat(cur.numel()),
        Layer::Linear { in_f, out_f } => match cur {
            Shape::Flat(f) if f == in_f => Shape::Flat(out_f),
            _ => return Err(format!("expects {in_f} features, got {cur}")),
        },
        Layer::Imsty | Layer::Adain => {
            spatial()?;
            cur
        }
        Layer::Relu | Layer::GradReverse => cur,
    })
}

fn layer_line(layer: &Layer) -> String {
    let kind = layer.kind();
    match *layer {
        Layer::Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            bias,
        }
        | Layer::ConvTranspose2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            bias,
        } => format!("{kind} in={in_c} out={out_c} k={k} stride={stride} pad={pad} bias={bias}"),
        Layer::BatchNorm2d { c } => format!("{kind} c={c}"),
        Layer::MaxPool2d { window } => format!("{kind} window={window}"),
        Layer::Upsample { factor } => format!("{kind} factor={factor}"),
        Layer::Linear { in_f, out_f } => format!("{kind} in={in_f} out={out_f}"),
        _ => kind.to_string(),
    }
}

struct Args<'a> {
    kind: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
    used: Vec<bool>,
}

impl<'a> Args<'a> {
    fn new(kind: &'a str, toks: &[&'a str]) -> std::result::Result<Self, String> {
        let pairs = toks
            .iter()
            .map(|t| t.split_once('=').ok_or_else(|| format!("{kind}: expected key=value, got `{t}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let used = vec![false; pairs.len()];
        Ok(Args { kind, pairs, used })
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let i = self.pairs.iter().position(|(k, _)| *k == key)?;
        self.used[i] = true;
        Some(self.pairs[i].1)
    }

    fn usize_or(&mut self, key: &str, default: Option<usize>) -> std::result::Result<usize, String> {
        match self.raw(key) {
            Some(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&x| x > 0 || key == "pad")
                .ok_or_else(|| format!("{}: bad value `{v}` for `{key}`", self.kind)),
            None => default.ok_or_else(|| format!("{}: missing `{key}`", self.kind)),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> std::result::Result<bool, String> {
        match self.raw(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(format!("{}: bad value `{v}` for `{key}`", self.kind)),
            None => Ok(default),
        }
    }

    fn finish(self) -> std::result::Result<(), String> {
        match self.pairs.iter().zip(&self.used).find(|(_, u)| !**u) {
            Some(((k, _), _)) => Err(format!("{}: unknown argument `{k}`", self.kind)),
            None => Ok(()),
        }
    }
}

fn parse_layer(kind: &str, toks: &[&str]) -> std::result::Result<Layer, String> {
    let mut a = Args::new(kind, toks)?;
    let layer = match kind {
        "conv2d" | "convtranspose2d" => {
            let in_c = a.usize_or("in", None)?;
            let out_c = a.usize_or("out", None)?;
            let k = a.usize_or("k", None)?;
            let stride = a.usize_or("stride", Some(1))?;
            let pad = a.usize_or("pad", Some(0))?;
            let bias = a.bool_or("bias", true)?;
            if kind == "conv2d" {
                Layer::Conv2d {
                    in_c,
                    out_c,
                    k,
                    stride,
                    pad,
                    bias,
                }
            } else {
                Layer::ConvTranspose2d {
                    in_c,
                    out_c,
                    k,
                    stride,
                    pad,
                    bias,
                }
            }
        }
        "batchnorm2d" => Layer::BatchNorm2d {
            c: a.usize_or("c", None)?,
        },
        "relu" => Layer::Relu,
        "maxpool2d" => Layer::MaxPool2d {
            window: a.usize_or("window", Some(2))?,
        },
        "upsample" => Layer::Upsample {
            factor: a.usize_or("factor", Some(2))?,
        },
        "flatten" => Layer::Flatten,
        "linear" => Layer::Linear {
            in_f: a.usize_or("in", None)?,
            out_f: a.usize_or("out", None)?,
        },
        "imsty" => Layer::Imsty,
        "adain" => Layer::Adain,
        "gradreverse" => Layer::GradReverse,
        other => return Err(format!("unknown layer kind `{other}`")),
    };
    a.finish()?;
    Ok(layer)
}
