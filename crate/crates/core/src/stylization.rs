//! Implicit stylization: swapping per-channel feature statistics between two
//! domains inside the network.
//!
//! Given content features `F_a` and style features `F_b`, each channel of
//! `F_a` is normalized with its own mean and standard deviation, re-scaled
//! with the statistics of `F_b`, and blended with the original:
//!
//! ```text
//! F_a->b = alpha * ((F_a - mu_a) / sigma_a * sigma_b + mu_b) + (1 - alpha) * F_a
//! ```
//!
//! Standard deviations use the population variance with `eps` inside the
//! square root, so `sigma >= sqrt(eps)`. The operation has no trainable
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{StatScope, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel mean and standard deviation of a feature batch.
///
/// With [`StatScope::Minibatch`] there is one entry per channel; with
/// [`StatScope::PerInstance`] entries are laid out `[sample][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
    pub scope: StatScope,
    pub channels: usize,
}

impl ChannelStats {
    fn stat_shape(&self) -> Vec<usize> {
        match self.scope {
            StatScope::Minibatch => vec![self.channels],
            StatScope::PerInstance => vec![self.mu.len() / self.channels, self.channels],
        }
    }

    /// Records the statistics on `tape` as constants.
    pub fn to_tape(&self, tape: &mut Tape) -> StyleStats {
        let shape = self.stat_shape();
        StyleStats {
            mu: tape.constant(Tensor::from_parts(shape.clone(), self.mu.clone())),
            sigma: tape.constant(Tensor::from_parts(shape, self.sigma.clone())),
            scope: self.scope,
        }
    }
}

/// Statistics recorded on a tape, either derived from features (and thus
/// differentiable) or injected as constants.
#[derive(Clone, Copy, Debug)]
pub struct StyleStats {
    pub mu: Var,
    pub sigma: Var,
    pub scope: StatScope,
}

impl StyleStats {
    /// Reads the recorded values back out.
    pub fn values(&self, tape: &Tape, eps: f64) -> ChannelStats {
        let mu = tape.value(self.mu);
        let channels = *mu.shape().last().expect("stats have a channel axis");
        ChannelStats {
            mu: mu.data().to_vec(),
            sigma: tape.value(self.sigma).data().to_vec(),
            eps,
            scope: self.scope,
            channels,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("channel_stats", format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Records `mu` and `sigma = sqrt(var + eps)` of `features` on the tape.
pub fn stats_on_tape(tape: &mut Tape, features: Var, scope: StatScope, eps: f64) -> Result<StyleStats> {
    check_eps(eps)?;
    let shape = tape.shape(features).to_vec();
    let mu = tape.channel_mean(features, scope)?;
    let mu_b = tape.broadcast_channels(mu, scope, &shape)?;
    let centered = tape.sub(features, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.channel_mean(sq, scope)?;
    let var_eps = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(var_eps)?;
    Ok(StyleStats { mu, sigma, scope })
}

/// `(features - mu) / sigma`, channel-wise.
pub fn normalize_on_tape(tape: &mut Tape, features: Var, stats: &StyleStats) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    let mu = tape.broadcast_channels(stats.mu, stats.scope, &shape)?;
    let sigma = tape.broadcast_channels(stats.sigma, stats.scope, &shape)?;
    let centered = tape.sub(features, mu)?;
    tape.div(centered, sigma)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("implicit_stylize", format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Re-styles `content` with `style` statistics and blends by `alpha`.
///
/// `alpha == 0` returns `content` itself, so the tape is left untouched.
pub fn stylize_on_tape(
    tape: &mut Tape,
    content: Var,
    style: &StyleStats,
    alpha: f64,
    eps: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(content);
    }
    let shape = tape.shape(content).to_vec();
    let c = *shape.get(1).ok_or_else(|| Error::invalid("implicit_stylize", "content is not NCHW"))?;
    let style_c = *tape.shape(style.mu).last().unwrap_or(&0);
    if style_c != c {
        return Err(Error::shape("implicit_stylize", &shape, tape.shape(style.mu)));
    }
    let own = stats_on_tape(tape, content, style.scope, eps)?;
    let normed = normalize_on_tape(tape, content, &own)?;
    let sigma = tape.broadcast_channels(style.sigma, style.scope, &shape)?;
    let mu = tape.broadcast_channels(style.mu, style.scope, &shape)?;
    let scaled = tape.mul(normed, sigma)?;
    let restyled = tape.add(scaled, mu)?;
    if alpha == 1.0 {
        return Ok(restyled);
    }
    let a = tape.scale(restyled, alpha);
    let b = tape.scale(content, 1.0 - alpha);
    tape.add(a, b)
}

/// Per-channel statistics of an NCHW tensor.
pub fn compute_channel_stats(features: &Tensor, scope: StatScope, eps: f64) -> Result<ChannelStats> {
    features.dims4()?;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let stats = stats_on_tape(&mut tape, x, scope, eps)?;
    Ok(stats.values(&tape, eps))
}

/// Normalizes `features` channel-wise with `stats`.
pub fn normalize_features(features: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let (n, c, _, _) = features.dims4()?;
    if c != stats.channels || (stats.scope == StatScope::PerInstance && stats.mu.len() != n * c) {
        return Err(Error::shape("normalize_features", features.shape(), &stats.stat_shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let s = stats.to_tape(&mut tape);
    let out = normalize_on_tape(&mut tape, x, &s)?;
    Ok(tape.value(out).clone())
}

/// `alpha * (normalize(f_a) * sigma_b + mu_b) + (1 - alpha) * f_a`.
pub fn implicit_stylize(f_a: &Tensor, f_b: &Tensor, alpha: f64, scope: StatScope, eps: f64) -> Result<Tensor> {
    let (_, ca, _, _) = f_a.dims4()?;
    let (_, cb, _, _) = f_b.dims4()?;
    if ca != cb {
        return Err(Error::shape("implicit_stylize", f_a.shape(), f_b.shape()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(f_a.clone());
    let b = tape.constant(f_b.clone());
    let style = stats_on_tape(&mut tape, b, scope, eps)?;
    let out = stylize_on_tape(&mut tape, a, &style, alpha, eps)?;
    Ok(tape.value(out).clone())
}

/// Where the style statistics of a stylization call come from.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'a> {
    /// Derived on the tape from these features.
    Features(Var),
    /// Fixed, precomputed statistics.
    Stats(&'a ChannelStats),
}

/// The alignment block: feature-statistic swapping with no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitStylization {
    pub scope: StatScope,
    pub eps: f64,
    /// Treat the statistics as constants during back-propagation.
    pub stop_gradient: bool,
}

impl Default for ImplicitStylization {
    fn default() -> Self {
        ImplicitStylization {
            scope: StatScope::Minibatch,
            eps: DEFAULT_EPS,
            stop_gradient: false,
        }
    }
}

impl ImplicitStylization {
    /// Trainable parameters of the block: there are none.
    pub fn parameters(&self) -> &[Tensor] {
        &[]
    }

    pub fn style_stats(&self, tape: &mut Tape, source: StyleSource<'_>) -> Result<StyleStats> {
        match source {
            StyleSource::Stats(s) => {
                if s.scope != self.scope {
                    return Err(Error::invalid("implicit_stylize", "statistics computed at a different scope"));
                }
                Ok(s.to_tape(tape))
            }
            StyleSource::Features(f) => {
                let f = if self.stop_gradient { tape.detach(f) } else { f };
                stats_on_tape(tape, f, self.scope, self.eps)
            }
        }
    }

    /// Stylizes `content` toward `source`.
    pub fn apply(&self, tape: &mut Tape, content: Var, source: StyleSource<'_>, alpha: f64) -> Result<Var> {
        check_alpha(alpha)?;
        if alpha == 0.0 {
            return Ok(content);
        }
        let style = self.style_stats(tape, source)?;
        if !self.stop_gradient {
            return stylize_on_tape(tape, content, &style, alpha, self.eps);
        }
        // Own statistics are constants too; the content path keeps its gradient.
        let detached = tape.detach(content);
        let own = stats_on_tape(tape, detached, self.scope, self.eps)?;
        let normed = normalize_on_tape(tape, content, &own)?;
        let shape = tape.shape(content).to_vec();
        let sigma = tape.broadcast_channels(style.sigma, style.scope, &shape)?;
        let mu = tape.broadcast_channels(style.mu, style.scope, &shape)?;
        let scaled = tape.mul(normed, sigma)?;
        let restyled = tape.add(scaled, mu)?;
        let a = tape.scale(restyled, alpha);
        let b = tape.scale(content, 1.0 - alpha);
        tape.add(a, b)
    }
}

/// How the blend weight is chosen each training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Uniform(0, 1) from a seeded generator.
    Uniform01 { seed: u64 },
    Fixed { value: f64 },
}

impl AlphaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaPolicy::Fixed { value } if !(0.0..=1.0).contains(&value) => Err(Error::config(
                "alpha.value",
                format!("fixed alpha {value} outside [0, 1]"),
            )),
            _ => Ok(()),
        }
    }

    pub fn sampler(&self) -> AlphaSampler {
        AlphaSampler {
            policy: *self,
            rng: ChaCha8Rng::seed_from_u64(match self {
                AlphaPolicy::Uniform01 { seed } => *seed,
                AlphaPolicy::Fixed { .. } => 0,
            }),
        }
    }
}

/// Stateful draw of one alpha per training step.
#[derive(Clone, Debug)]
pub struct AlphaSampler {
    policy: AlphaPolicy,
    rng: ChaCha8Rng,
}

impl AlphaSampler {
    pub fn sample_alpha(&mut self) -> f64 {
        match self.policy {
            AlphaPolicy::Fixed { value } => value,
            AlphaPolicy::Uniform01 { .. } => self.rng.random::<f64>(),
        }
    }
}
