use std::ops::Range;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Layer, LayerGraph, Shape};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Gradients, NamedTensor, RunningStats, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const META_GRAPH: &str = "meta.graph";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; running buffers are updated.
    Train,
    /// Running statistics in BN; nothing is mutated.
    Eval,
    /// Batch statistics in BN with the buffers left untouched.
    Batch,
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    params: Range<usize>,
    bn: Option<usize>,
}

/// A layer graph with concrete parameters and batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    graph: LayerGraph,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
    slots: Vec<Slot>,
    tap: usize,
}

enum Bn<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
    Batch,
}

fn fan_in(layer: &Layer) -> usize {
    match *layer {
        Layer::Conv2d { in_c, k, .. } => in_c * k * k,
        // Each output of a strided transpose conv sees about k^2 / s^2 taps per input channel.
        Layer::ConvTranspose2d { in_c, k, stride, .. } => (in_c * k * k / (stride * stride)).max(1),
        Layer::Linear { in_f, .. } => in_f,
        _ => 1,
    }
}

impl Network {
    /// He-uniform weights, zero biases, unit BN scale and zero BN shift.
    pub fn new(graph: LayerGraph, seed: u64) -> Result<Self> {
        graph.shapes()?;
        let tap = graph.tap_index()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::with_capacity(graph.layers.len());
        for (index, spec) in graph.layers.iter().enumerate() {
            let layer = spec.layer;
            if matches!(layer, Layer::Upsample { .. } | Layer::Adain | Layer::GradReverse) {
                return Err(Error::GraphShape {
                    index,
                    kind: layer.kind().into(),
                    msg: "layer kind is profile-only and cannot be executed".into(),
                });
            }
            let start = params.len();
            let shapes = layer.param_shapes();
            match layer {
                Layer::BatchNorm2d { c } => {
                    params.push(Tensor::ones(vec![c]));
                    params.push(Tensor::zeros(vec![c]));
                }
                _ => {
                    let bound = (6.0 / fan_in(&layer) as f64).sqrt();
                    for (i, shape) in shapes.into_iter().enumerate() {
                        if i == 0 {
                            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                            let n = shape.iter().product();
                            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                            params.push(Tensor::new(shape, data)?);
                        } else {
                            params.push(Tensor::zeros(shape));
                        }
                    }
                }
            }
            let bn = match layer {
                Layer::BatchNorm2d { c } => {
                    running.push(RunningStats::new(c));
                    Some(running.len() - 1)
                }
                _ => None,
            };
            slots.push(Slot {
                params: start..params.len(),
                bn,
            });
        }
        Ok(Network {
            graph,
            params,
            running,
            slots,
            tap,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn tap_index(&self) -> usize {
        self.tap
    }

    /// Shape of one sample at the alignment tap.
    pub fn tap_shape(&self) -> Shape {
        self.graph.shapes().expect("checked at construction")[self.tap]
    }

    /// Zeros the parameters of the last layer that has any.
    pub fn zero_last_layer(&mut self) {
        if let Some(slot) = self.slots.iter().rev().find(|s| !s.params.is_empty()) {
            for p in &mut self.params[slot.params.clone()] {
                p.data_mut().fill(0.0);
            }
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid tensor"))
                }
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.graph.input.dims();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            let mut expect = vec![shape.first().copied().unwrap_or(1)];
            expect.extend(want);
            return Err(Error::shape("forward", shape, &expect));
        }
        Ok(())
    }

    fn run(
        &self,
        bn: &mut Bn<'_>,
        tape: &mut Tape,
        vars: &[Var],
        mut x: Var,
        range: Range<usize>,
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(
                "forward",
                format!("{} bound parameters for a network with {}", vars.len(), self.params.len()),
            ));
        }
        if range.start == 0 {
            self.check_input(tape.shape(x))?;
        }
        for i in range {
            let slot = &self.slots[i];
            let p = &vars[slot.params.clone()];
            x = match self.graph.layers[i].layer {
                Layer::Conv2d { stride, pad, bias, .. } => {
                    let y = tape.conv2d(x, p[0], stride, pad)?;
                    if bias {
                        tape.add_channel_bias(y, p[1])?
                    } else {
                        y
                    }
                }
                Layer::ConvTranspose2d { stride, pad, bias, .. } => {
                    let y = tape.conv_transpose2d(x, p[0], stride, pad)?;
                    if bias {
                        tape.add_channel_bias(y, p[1])?
                    } else {
                        y
                    }
                }
                Layer::BatchNorm2d { c } => {
                    let j = slot.bn.expect("bn slot");
                    let mode = match bn {
                        Bn::Train(r) => BatchNormMode::Train {
                            running: &mut r[j],
                            momentum: BN_MOMENTUM,
                        },
                        Bn::Eval(r) => BatchNormMode::Eval { running: &r[j] },
                        Bn::Batch => {
                            // Momentum 0 keeps this scratch buffer unchanged.
                            let mut scratch = RunningStats::new(c);
                            let y = tape.batch_norm2d(
                                x,
                                p[0],
                                p[1],
                                BatchNormMode::Train {
                                    running: &mut scratch,
                                    momentum: 0.0,
                                },
                                BN_EPS,
                            )?;
                            x = y;
                            continue;
                        }
                    };
                    tape.batch_norm2d(x, p[0], p[1], mode, BN_EPS)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool2d { window } => tape.max_pool2d(x, window)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Linear { .. } => tape.linear(x, p[0], Some(p[1]))?,
                Layer::Imsty => x,
                Layer::Upsample { .. } | Layer::Adain | Layer::GradReverse => unreachable!("rejected at construction"),
            };
        }
        Ok(x)
    }

    /// Runs layers `range` on the tape.
    pub fn forward_range(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<Var> {
        let mut running = std::mem::take(&mut self.running);
        let out = match mode {
            Mode::Train => self.run(&mut Bn::Train(&mut running), tape, vars, x, range),
            Mode::Eval => self.run(&mut Bn::Eval(&running), tape, vars, x, range),
            Mode::Batch => self.run(&mut Bn::Batch, tape, vars, x, range),
        };
        self.running = running;
        out
    }

    /// Eval-mode segment that leaves the network untouched.
    pub fn forward_range_eval(&self, tape: &mut Tape, vars: &[Var], x: Var, range: Range<usize>) -> Result<Var> {
        self.forward_range_frozen(tape, vars, x, range, Mode::Eval)
    }

    /// Segment in `Eval` or `Batch` mode; `Train` is rejected because it
    /// would update the buffers.
    pub fn forward_range_frozen(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        range: Range<usize>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Eval => self.run(&mut Bn::Eval(&self.running), tape, vars, x, range),
            Mode::Batch => self.run(&mut Bn::Batch, tape, vars, x, range),
            Mode::Train => Err(Error::invalid("forward", "train mode needs a mutable network")),
        }
    }

    /// Encoder: input to alignment tap.
    pub fn encode(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.forward_range(tape, vars, x, 0..self.tap, mode)
    }

    /// Head or decoder: alignment tap to output.
    pub fn decode(&mut self, tape: &mut Tape, vars: &[Var], f: Var, mode: Mode) -> Result<Var> {
        let end = self.graph.layers.len();
        self.forward_range(tape, vars, f, self.tap + 1..end, mode)
    }

    /// Full forward; returns `(output, tap activation)`.
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<(Var, Var)> {
        let f = self.encode(tape, vars, x, mode)?;
        let y = self.decode(tape, vars, f, mode)?;
        Ok((y, f))
    }

    /// Eval-mode output and tap activation, without gradients.
    pub fn predict_with_tap(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_range_eval(&mut tape, &vars, xv, 0..self.tap)?;
        let y = self.forward_range_eval(&mut tape, &vars, f, self.tap + 1..self.graph.layers.len())?;
        Ok((tape.value(y).clone(), tape.value(f).clone()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_tap(x)?.0)
    }

    /// Moves the gradients of `vars` into each parameter's `grad`, filling
    /// zeros for parameters the loss did not reach.
    pub fn load_grads(&mut self, grads: &mut Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()]));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for (i, spec) in self.graph.layers.iter().enumerate() {
            let kind = spec.layer.kind();
            let suffixes: &[&str] = match spec.layer {
                Layer::BatchNorm2d { .. } => &["gamma", "beta"],
                Layer::Conv2d { bias: false, .. } | Layer::ConvTranspose2d { bias: false, .. } => &["weight"],
                _ => &["weight", "bias"],
            };
            for s in suffixes.iter().take(self.slots[i].params.len()) {
                names.push(format!("{i}.{kind}.{s}"));
            }
        }
        names
    }

    /// Parameters, BN buffers and the graph text, for checkpointing.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let text = self.graph.to_text();
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let mut out = vec![NamedTensor::new(META_GRAPH, Tensor::new(vec![bytes.len()], bytes).expect("non-empty graph text"))];
        for (name, p) in self.param_names().into_iter().zip(&self.params) {
            out.push(NamedTensor::new(name, p.clone().with_requires_grad(false)));
        }
        for (i, slot) in self.slots.iter().enumerate() {
            if let Some(j) = slot.bn {
                let r = &self.running[j];
                let c = r.mean.len();
                out.push(NamedTensor::new(format!("{i}.batchnorm2d.running_mean"), Tensor::new(vec![c], r.mean.clone()).expect("c > 0")));
                out.push(NamedTensor::new(format!("{i}.batchnorm2d.running_var"), Tensor::new(vec![c], r.var.clone()).expect("c > 0")));
            }
        }
        out
    }

    /// Rebuilds a network from [`Network::named_tensors`] output.
    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == META_GRAPH)
            .ok_or_else(|| Error::invalid("load_network", "checkpoint has no `meta.graph` entry"))?;
        let text: String = meta
            .tensor
            .data()
            .iter()
            .map(|&b| char::from(b as u8))
            .collect();
        let mut net = Network::new(LayerGraph::parse(&text)?, 0)?;
        let names = net.param_names();
        for (name, p) in names.iter().zip(net.params.iter_mut()) {
            let t = find(tensors, name)?;
            if t.shape() != p.shape() {
                return Err(Error::shape("load_network", p.shape(), t.shape()));
            }
            *p = t.clone();
        }
        for (i, slot) in net.slots.iter().enumerate() {
            if let Some(j) = slot.bn {
                let mean = find(tensors, &format!("{i}.batchnorm2d.running_mean"))?;
                let var = find(tensors, &format!("{i}.batchnorm2d.running_var"))?;
                let r = &mut net.running[j];
                if mean.numel() != r.mean.len() || var.numel() != r.var.len() {
                    return Err(Error::shape("load_network", &[r.mean.len()], mean.shape()));
                }
                r.mean = mean.data().to_vec();
                r.var = var.data().to_vec();
            }
        }
        Ok(net)
    }

    /// SHA-256 over the bit patterns of the trainable parameters.
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .map(|t| &t.tensor)
        .ok_or_else(|| Error::invalid("load_network", format!("checkpoint is missing `{name}`")))
}
