//! Pyramid pixel context adaption.
//!
//! For a feature map `X: [B, C, H, W]` the module
//!
//! 1. pools every pixel across contiguous channel groups at several group
//!    counts ("scales") and stacks the results into `D = Σ scales` context
//!    maps `T: [B, D, H, W]` (cross-channel pyramid pooling);
//! 2. standardises the `D` context values at each pixel independently
//!    (pixel normalisation) giving `T̂`;
//! 3. combines them with per-pixel weights `W: [D, H, W]`, squashes with a
//!    sigmoid into a gate `G: [B, 1, H, W]` and rescales `Y = G ⊙ X`.
//!
//! The normalisation and adaption steps have ablation variants selected by
//! [`NormKind`] and [`AdaptionKind`].

use crate::params::{BufferId, Mode, ParamId, ParamRole, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::{Error, Graph, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Per-pixel standardisation across the `D` context maps.
    Pixel,
    Batch,
    Instance,
    Layer,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptionKind {
    /// Pixel-wise fully connected: an independent weight per (d, i, j).
    Pfc,
    Conv1x1,
    Conv5x5,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitKind {
    Zero,
    One,
}

string_enum!(NormKind {
    NormKind::Pixel => "pn",
    NormKind::Batch => "bn",
    NormKind::Instance => "in",
    NormKind::Layer => "ln",
    NormKind::None => "none",
});

string_enum!(AdaptionKind {
    AdaptionKind::Pfc => "pfc",
    AdaptionKind::Conv1x1 => "conv1x1",
    AdaptionKind::Conv5x5 => "conv5x5",
    AdaptionKind::Sum => "sum",
});

string_enum!(InitKind {
    InitKind::Zero => "zero",
    InitKind::One => "one",
});

#[derive(Clone, Debug, PartialEq)]
pub struct PpcaConfig {
    /// Group counts of the channel pyramid, in output order.
    pub scales: Vec<usize>,
    pub norm: NormKind,
    pub adaption: AdaptionKind,
    pub init: InitKind,
    /// ξ, added outside the square root of the pixel standard deviation
    /// (and inside it for the BN/IN/LN variants).
    pub epsilon: f64,
    /// Running-statistics momentum of the BN variant.
    pub bn_momentum: f64,
}

impl Default for PpcaConfig {
    fn default() -> Self {
        PpcaConfig {
            scales: vec![1, 2, 4],
            norm: NormKind::Pixel,
            adaption: AdaptionKind::Pfc,
            init: InitKind::Zero,
            epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl PpcaConfig {
    /// Number of context maps `D`.
    pub fn context_dim(&self) -> usize {
        self.scales.iter().sum()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::invalid("ppca scales must not be empty"));
        }
        for &s in &self.scales {
            if s == 0 || s > channels {
                return Err(Error::invalid(format!("ppca scale {s} outside 1..={channels} channels")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("ppca epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Scales for a pyramid of `count` levels: `[1, 2, 4, ..., 2^(count-1)]`.
pub fn scales_for_count(count: usize) -> Vec<usize> {
    (0..count).map(|k| 1usize << k).collect()
}

/// Contiguous channel groups `(start, len)` for `groups` partitions of
/// `channels`; the first `channels % groups` groups take one extra channel.
pub fn group_bounds(channels: usize, groups: usize) -> Result<Vec<(usize, usize)>> {
    if groups == 0 || groups > channels {
        return Err(Error::invalid(format!("cannot split {channels} channels into {groups} groups")));
    }
    let (base, extra) = (channels / groups, channels % groups);
    let mut start = 0;
    Ok((0..groups)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let b = (start, len);
            start += len;
            b
        })
        .collect())
}

/// Mean over each channel group at every pixel: `[B, C, H, W] -> [B, s, H, W]`.
pub fn cross_channel_pool(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!("cross_channel_pool expects [B, C, H, W], got {shape:?}")));
    }
    let mut maps = Vec::with_capacity(groups);
    for (start, len) in group_bounds(shape[1], groups)? {
        let part = g.slice(x, 1, start, len)?;
        maps.push(g.mean(part, &[1], true)?);
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    g.concat(&maps, 1)
}

/// Cross-channel pyramid pooling: one pooled block per scale, concatenated
/// along the context axis.
pub fn ccpp(g: &mut Graph, x: Var, scales: &[usize]) -> Result<Var> {
    if scales.is_empty() {
        return Err(Error::invalid("ccpp needs at least one scale"));
    }
    let maps = scales.iter().map(|&s| cross_channel_pool(g, x, s)).collect::<Result<Vec<_>>>()?;
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    g.concat(&maps, 1)
}

/// Pixel normalisation of `t: [B, D, H, W]`: `(t - μ) / (σ + ξ)` with the
/// population mean and standard deviation taken over the `D` axis at each
/// pixel.
pub fn pixel_normalize(g: &mut Graph, t: Var, xi: f64) -> Result<Var> {
    let mu = g.mean(t, &[1], true)?;
    let var = g.variance(t, &[1], true)?;
    let sd = g.sqrt(var);
    let delta = g.add_scalar(sd, xi);
    let centered = g.sub(t, mu)?;
    g.div(centered, delta)
}

/// `(t - mean) / sqrt(var + eps)` with statistics over `axes`.
fn standardize(g: &mut Graph, t: Var, axes: &[usize], eps: f64) -> Result<Var> {
    let mu = g.mean(t, axes, true)?;
    let var = g.variance(t, axes, true)?;
    let var = g.add_scalar(var, eps);
    let sd = g.sqrt(var);
    let centered = g.sub(t, mu)?;
    g.div(centered, sd)
}

/// Values recorded at one attention site.
#[derive(Clone, Copy, Debug)]
pub struct PpcaOutput {
    /// Recalibrated features `G ⊙ X`.
    pub y: Var,
    /// Pixel attention weights `G: [B, 1, H, W]`.
    pub gate: Var,
    /// Multi-scale pixel context `T` before normalisation.
    pub context: Var,
    /// Context after the configured normalisation.
    pub normalized: Var,
}

#[derive(Clone, Debug)]
pub struct PpcaModule {
    cfg: PpcaConfig,
    channels: usize,
    height: usize,
    width: usize,
    weight: Option<ParamId>,
    running: Option<(BufferId, BufferId)>,
}

impl PpcaModule {
    pub fn new(
        cfg: PpcaConfig,
        channels: usize,
        height: usize,
        width: usize,
        store: &mut ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let d = cfg.context_dim();
        let init = match cfg.init {
            InitKind::Zero => 0.0,
            InitKind::One => 1.0,
        };
        let weight_shape = match cfg.adaption {
            AdaptionKind::Pfc => Some(vec![d, height, width]),
            AdaptionKind::Conv1x1 => Some(vec![1, d, 1, 1]),
            AdaptionKind::Conv5x5 => Some(vec![1, d, 5, 5]),
            AdaptionKind::Sum => None,
        };
        let weight = weight_shape
            .map(|shape| store.add(format!("{prefix}.weight"), ParamRole::Attention, Tensor::full(&shape, init)));
        let running = (cfg.norm == NormKind::Batch).then(|| {
            (
                store.add_buffer(format!("{prefix}.running_mean"), None),
                store.add_buffer(format!("{prefix}.running_var"), None),
            )
        });
        Ok(PpcaModule { cfg, channels, height, width, weight, running })
    }

    pub fn config(&self) -> &PpcaConfig {
        &self.cfg
    }

    pub fn weight(&self) -> Option<ParamId> {
        self.weight
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Allocated learnable parameters of this module.
    pub fn param_count(&self) -> usize {
        let d = self.cfg.context_dim();
        match self.cfg.adaption {
            AdaptionKind::Pfc => d * self.height * self.width,
            AdaptionKind::Conv1x1 => d,
            AdaptionKind::Conv5x5 => d * 25,
            AdaptionKind::Sum => 0,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<PpcaOutput> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::ShapeMismatch {
                left: vec![0, self.channels, self.height, self.width],
                right: shape,
            });
        }
        let context = ccpp(&mut s.graph, x, &self.cfg.scales)?;
        let normalized = self.normalize(s, context)?;
        let gate = self.adapt(s, normalized)?;
        let y = s.graph.mul(gate, x)?;
        Ok(PpcaOutput { y, gate, context, normalized })
    }

    /// The configured normalisation of the context maps.
    pub fn normalize(&self, s: &mut Session, t: Var) -> Result<Var> {
        let eps = self.cfg.epsilon;
        match self.cfg.norm {
            NormKind::Pixel => pixel_normalize(&mut s.graph, t, eps),
            NormKind::None => Ok(t),
            NormKind::Instance => standardize(&mut s.graph, t, &[2, 3], eps),
            NormKind::Layer => standardize(&mut s.graph, t, &[1, 2, 3], eps),
            NormKind::Batch => self.batch_normalize(s, t),
        }
    }

    fn batch_normalize(&self, s: &mut Session, t: Var) -> Result<Var> {
        let (mean_id, var_id) = self.running.expect("BN variant owns running buffers");
        let d = s.graph.shape(t)[1];
        let eps = self.cfg.epsilon;
        match s.mode {
            Mode::Train => {
                let one = s.graph.constant(Tensor::ones(&[d]));
                let zero = s.graph.constant(Tensor::zeros(&[d]));
                let (y, stats) = s.graph.batch_norm(t, one, zero, eps)?;
                let m = self.cfg.bn_momentum;
                let blend = |old: Option<&Tensor>, new: &[f64]| -> Tensor {
                    match old {
                        Some(o) => Tensor::from_vec(o.data().iter().zip(new).map(|(a, b)| m * a + (1.0 - m) * b).collect()),
                        None => Tensor::from_vec(new.to_vec()),
                    }
                };
                let rm = blend(s.store.buffer(mean_id), &stats.mean);
                let rv = blend(s.store.buffer(var_id), &stats.var);
                s.store.set_buffer(mean_id, rm);
                s.store.set_buffer(var_id, rv);
                Ok(y)
            }
            Mode::Eval => {
                let (Some(rm), Some(rv)) = (s.store.buffer(mean_id), s.store.buffer(var_id)) else {
                    return Err(Error::MissingRunningStats);
                };
                let rm = rm.clone().reshape(&[1, d, 1, 1])?;
                let sd = rv.map(|v| (v + eps).sqrt()).reshape(&[1, d, 1, 1])?;
                let (rm, sd) = (s.graph.constant(rm), s.graph.constant(sd));
                let centered = s.graph.sub(t, rm)?;
                s.graph.div(centered, sd)
            }
        }
    }

    /// Collapse normalised context `[B, D, H, W]` to the gate `[B, 1, H, W]`.
    pub fn adapt(&self, s: &mut Session, t_hat: Var) -> Result<Var> {
        let d = self.cfg.context_dim();
        let shape = s.graph.shape(t_hat).to_vec();
        if shape.len() != 4 || shape[1] != d {
            return Err(Error::ShapeMismatch { left: vec![0, d, self.height, self.width], right: shape });
        }
        let z = match (self.cfg.adaption, self.weight) {
            (AdaptionKind::Pfc, Some(w)) => {
                let w = s.var(w);
                let weighted = s.graph.mul(t_hat, w)?;
                s.graph.sum(weighted, &[1], true)?
            }
            (AdaptionKind::Conv1x1, Some(w)) => s.graph.conv2d(t_hat, s.var(w), 1, 0)?,
            (AdaptionKind::Conv5x5, Some(w)) => s.graph.conv2d(t_hat, s.var(w), 1, 2)?,
            (AdaptionKind::Sum, None) => s.graph.sum(t_hat, &[1], true)?,
            (kind, _) => return Err(Error::invalid(format!("adaption kind {kind} does not match module state"))),
        };
        Ok(s.graph.sigmoid(z))
    }
}

#[cfg(test)]
mod tests;
