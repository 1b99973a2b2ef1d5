//! Residual classifier with pluggable attention (PPCA, squeeze-and-excitation
//! or none) on the residual branch.
//!
//! The network is `stem conv → BN → ReLU [→ max pool] → stages of residual
//! blocks → global average pooling → linear classifier`. A block is
//!
//! ```text
//! conv3x3(stride) → BN → ReLU → conv3x3 → BN → attention ─┐
//!                                                        (+) → ReLU
//! x ─────────────── [conv1x1(stride) → BN] ──────────────┘
//! ```
//!
//! with the attention optionally moved after the addition
//! ([`Placement::PostAddition`]).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{BufferId, Mode, ParamId, ParamRole, ParamStore, Session};
use crate::ppca::{PpcaConfig, PpcaModule, PpcaOutput};
use crate::tensor::{kernels, Tensor, Var};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Ppca,
    Se,
    None,
}

string_enum!(AttentionKind {
    AttentionKind::Ppca => "ppca",
    AttentionKind::Se => "se",
    AttentionKind::None => "none",
});

/// Where the attention module sits relative to the skip addition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    PreAddition,
    PostAddition,
}

string_enum!(Placement {
    Placement::PreAddition => "pre",
    Placement::PostAddition => "post",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub channels: usize,
    /// Odd square kernel, padded by `kernel / 2`.
    pub kernel: usize,
    pub stride: usize,
    /// 3x3 stride-2 max pool after the stem activation.
    pub max_pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Stride of the first block of the stage.
    pub stride: usize,
}

/// A stage with its feature-map extents resolved from the input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedStage {
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub attention: AttentionKind,
    pub placement: Placement,
    pub num_classes: usize,
    /// Used when `attention` is PPCA.
    pub ppca: PpcaConfig,
    /// SE reduction ratio `r`, used when `attention` is SE.
    pub se_reduction: usize,
}

impl NetworkSpec {
    /// 28x28 single-channel network: stages N=[2,2,2], C=[16,32,64],
    /// strides [1,2,2].
    pub fn mini(num_classes: usize) -> Self {
        NetworkSpec {
            input: [1, 28, 28],
            stem: StemSpec { channels: 16, kernel: 3, stride: 1, max_pool: false },
            stages: vec![
                StageSpec { blocks: 2, channels: 16, stride: 1 },
                StageSpec { blocks: 2, channels: 32, stride: 2 },
                StageSpec { blocks: 2, channels: 64, stride: 2 },
            ],
            attention: AttentionKind::Ppca,
            placement: Placement::PreAddition,
            num_classes,
            ppca: PpcaConfig::default(),
            se_reduction: 16,
        }
    }

    /// ResNet18 layout (7x7/2 stem, max pool, N=[2,2,2,2],
    /// C=[64,128,256,512]) on a square RGB input of side `input`.
    pub fn resnet18(input: usize, num_classes: usize) -> Self {
        NetworkSpec {
            input: [3, input, input],
            stem: StemSpec { channels: 64, kernel: 7, stride: 2, max_pool: true },
            stages: [(64, 1), (128, 2), (256, 2), (512, 2)]
                .into_iter()
                .map(|(channels, stride)| StageSpec { blocks: 2, channels, stride })
                .collect(),
            attention: AttentionKind::Ppca,
            placement: Placement::PreAddition,
            num_classes,
            ppca: PpcaConfig::default(),
            se_reduction: 16,
        }
    }

    /// Two single-block 64-channel stages on 28x28, wide enough for every
    /// scale count up to 7 (64 groups).
    pub fn ablation(num_classes: usize) -> Self {
        NetworkSpec {
            stages: vec![
                StageSpec { blocks: 1, channels: 64, stride: 2 },
                StageSpec { blocks: 1, channels: 64, stride: 2 },
            ],
            ..Self::mini(num_classes)
        }
    }

    pub fn preset(name: &str, input: Option<usize>, num_classes: usize) -> Result<Self> {
        let spec = match name {
            "mini" => Self::mini(num_classes),
            "ablation" => Self::ablation(num_classes),
            "resnet18" => Self::resnet18(input.unwrap_or(224), num_classes),
            other => return Err(Error::invalid(format!("unknown spec preset '{other}' (mini, ablation, resnet18)"))),
        };
        match (name, input) {
            ("resnet18", _) | (_, None) => Ok(spec),
            (_, Some(side)) => Ok(NetworkSpec { input: [spec.input[0], side, side], ..spec }),
        }
    }

    pub fn with_attention(&self, attention: AttentionKind) -> Self {
        NetworkSpec { attention, ..self.clone() }
    }

    /// Spatial size after the stem.
    pub fn stem_output(&self) -> Result<(usize, usize)> {
        let [_, h, w] = self.input;
        let k = self.stem.kernel;
        let conv = |n: usize| kernels::out_extent(n, k, self.stem.stride, k / 2);
        let (Some(mut h), Some(mut w)) = (conv(h), conv(w)) else {
            return Err(Error::invalid(format!("stem {k}x{k}/{} has no output on {h}x{w}", self.stem.stride)));
        };
        if self.stem.max_pool {
            let pool = |n: usize| kernels::out_extent(n, 3, 2, 1);
            let (Some(ph), Some(pw)) = (pool(h), pool(w)) else {
                return Err(Error::invalid(format!("stem max pool has no output on {h}x{w}")));
            };
            (h, w) = (ph, pw);
        }
        Ok((h, w))
    }

    /// Per-stage extents from stride arithmetic (floor division, 3x3 convs
    /// padded by one).
    pub fn resolve(&self) -> Result<Vec<ResolvedStage>> {
        let (mut h, mut w) = self.stem_output()?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let step = |n: usize| kernels::out_extent(n, 3, st.stride, 1);
            let (Some(nh), Some(nw)) = (step(h), step(w)) else {
                return Err(Error::invalid(format!("stage {i} stride {} has no output on {h}x{w}", st.stride)));
            };
            (h, w) = (nh, nw);
            out.push(ResolvedStage { blocks: st.blocks, channels: st.channels, height: h, width: w });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.input.iter().all(|&v| v > 0)
            && self.stem.channels > 0
            && self.stem.kernel % 2 == 1
            && self.stem.stride > 0
            && self.num_classes > 0
            && self.stages.iter().all(|s| s.blocks > 0 && s.channels > 0 && s.stride > 0);
        if !positive {
            return Err(Error::invalid("network spec needs positive sizes and an odd stem kernel"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("network spec needs at least one stage"));
        }
        self.resolve()?;
        match self.attention {
            AttentionKind::Ppca => self.stages.iter().try_for_each(|s| self.ppca.validate(s.channels)),
            AttentionKind::Se if self.se_reduction == 0 => Err(Error::invalid("SE reduction ratio must be positive")),
            _ => Ok(()),
        }
    }

    /// `key = value` lines, the inverse of [`NetworkSpec::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize], sep: &str| v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep);
        let stages: Vec<String> =
            self.stages.iter().map(|s| format!("{}x{}x{}", s.blocks, s.channels, s.stride)).collect();
        let pairs = [
            ("input", join(&self.input, "x")),
            ("stem.channels", self.stem.channels.to_string()),
            ("stem.kernel", self.stem.kernel.to_string()),
            ("stem.stride", self.stem.stride.to_string()),
            ("stem.max_pool", self.stem.max_pool.to_string()),
            ("stages", stages.join(",")),
            ("attention", self.attention.to_string()),
            ("placement", self.placement.to_string()),
            ("classes", self.num_classes.to_string()),
            ("se_reduction", self.se_reduction.to_string()),
            ("ppca.scales", join(&self.ppca.scales, ",")),
            ("ppca.norm", self.ppca.norm.to_string()),
            ("ppca.adaption", self.ppca.adaption.to_string()),
            ("ppca.init", self.ppca.init.to_string()),
            ("ppca.epsilon", self.ppca.epsilon.to_string()),
            ("ppca.bn_momentum", self.ppca.bn_momentum.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs(pairs: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs.get(k).map(String::as_str).ok_or_else(|| Error::Format { what: "network spec", detail: format!("missing key '{k}'") })
        };
        let bad = |k: &str, v: &str| Error::Format { what: "network spec", detail: format!("bad value '{v}' for '{k}'") };
        let num = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.parse().map_err(|_| bad(k, v))
        };
        let list = |k: &str, sep: char| -> Result<Vec<usize>> {
            let v = get(k)?;
            v.split(sep).map(|p| p.trim().parse().map_err(|_| bad(k, v))).collect()
        };
        let input: [usize; 3] = list("input", 'x')?.try_into().map_err(|_| bad("input", get("input").unwrap_or("")))?;
        let stages_raw = get("stages")?;
        let stages = stages_raw
            .split(',')
            .map(|s| match s.split('x').map(str::parse).collect::<std::result::Result<Vec<usize>, _>>() {
                Ok(v) if v.len() == 3 => Ok(StageSpec { blocks: v[0], channels: v[1], stride: v[2] }),
                _ => Err(bad("stages", stages_raw)),
            })
            .collect::<Result<Vec<_>>>()?;
        let float = |k: &str| -> Result<f64> {
            let v = get(k)?;
            v.parse().map_err(|_| bad(k, v))
        };
        let spec = NetworkSpec {
            input,
            stem: StemSpec {
                channels: num("stem.channels")?,
                kernel: num("stem.kernel")?,
                stride: num("stem.stride")?,
                max_pool: get("stem.max_pool")?.parse().map_err(|_| bad("stem.max_pool", get("stem.max_pool").unwrap_or("")))?,
            },
            stages,
            attention: get("attention")?.parse()?,
            placement: get("placement")?.parse()?,
            num_classes: num("classes")?,
            se_reduction: num("se_reduction")?,
            ppca: PpcaConfig {
                scales: list("ppca.scales", ',')?,
                norm: get("ppca.norm")?.parse()?,
                adaption: get("ppca.adaption")?.parse()?,
                init: get("ppca.init")?.parse()?,
                epsilon: float("ppca.epsilon")?,
                bn_momentum: float("ppca.bn_momentum")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Affine batch norm with running statistics (initialised to mean 0,
/// variance 1 so a fresh network can be evaluated).
#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    channels: usize,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), ParamRole::BatchNorm, Tensor::ones(&[channels])),
            beta: store.add(format!("{prefix}.beta"), ParamRole::BatchNorm, Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Some(Tensor::zeros(&[channels]))),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Some(Tensor::ones(&[channels]))),
            channels,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (gamma, beta) = (s.var(self.gamma), s.var(self.beta));
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, gamma, beta, BN_EPS)?;
                for (id, fresh) in [(self.running_mean, stats.mean), (self.running_var, stats.var)] {
                    let old = s.store.buffer(id).ok_or(Error::MissingRunningStats)?;
                    let blended = old.data().iter().zip(&fresh).map(|(o, f)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * f);
                    let blended = Tensor::from_vec(blended.collect());
                    s.store.set_buffer(id, blended);
                }
                Ok(y)
            }
            Mode::Eval => {
                let c = self.channels;
                let (Some(rm), Some(rv)) = (s.store.buffer(self.running_mean), s.store.buffer(self.running_var)) else {
                    return Err(Error::MissingRunningStats);
                };
                let mut shape = vec![1; s.graph.shape(x).len()];
                shape[1] = c;
                let mean = s.graph.constant(rm.clone().reshape(&shape)?);
                let inv = s.graph.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()).reshape(&shape)?);
                let centered = s.graph.sub(x, mean)?;
                let xhat = s.graph.mul(centered, inv)?;
                let gamma = s.graph.reshape(gamma, &shape)?;
                let beta = s.graph.reshape(beta, &shape)?;
                let scaled = s.graph.mul(xhat, gamma)?;
                s.graph.add(scaled, beta)
            }
        }
    }
}

/// Squeeze-and-excitation: GAP → FC C→C/r → ReLU → FC C/r→C → sigmoid,
/// bias-free so a block allocates exactly `2·C·⌈C/r⌉` weights.
#[derive(Clone, Debug)]
pub struct SeModule {
    fc1: ParamId,
    fc2: ParamId,
    channels: usize,
}

impl SeModule {
    pub fn new(channels: usize, reduction: usize, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let hidden = channels.div_ceil(reduction).max(1);
        let fc1 = store.add(format!("{prefix}.fc1"), ParamRole::Attention, fan_in_uniform(&[channels, hidden], channels, rng));
        let fc2 = store.add(format!("{prefix}.fc2"), ParamRole::Attention, fan_in_uniform(&[hidden, channels], hidden, rng));
        SeModule { fc1, fc2, channels }
    }

    pub fn weights(&self) -> [ParamId; 2] {
        [self.fc1, self.fc2]
    }

    /// Returns `(gate [B, C, 1, 1], y)`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let b = s.graph.shape(x)[0];
        let squeezed = s.graph.mean(x, &[2, 3], false)?;
        let h = s.graph.matmul(squeezed, s.var(self.fc1))?;
        let h = s.graph.relu(h);
        let z = s.graph.matmul(h, s.var(self.fc2))?;
        let gate = s.graph.sigmoid(z);
        let gate = s.graph.reshape(gate, &[b, self.channels, 1, 1])?;
        let y = s.graph.mul(x, gate)?;
        Ok((gate, y))
    }
}

#[derive(Clone, Debug)]
pub enum Attention {
    Ppca(PpcaModule),
    Se(SeModule),
    None,
}

/// Tape handles recorded at one attention site.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub stage: usize,
    pub block: usize,
    /// Feature map entering the attention module.
    pub input: Var,
    /// Gate: `[B, 1, H, W]` for PPCA, `[B, C, 1, 1]` for SE.
    pub gate: Var,
    pub output: Var,
    pub ppca: Option<PpcaOutput>,
    /// Tape range covered by the attention ops, for flop accounting.
    pub tape: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: ParamId,
    bn1: BatchNorm,
    conv2: ParamId,
    bn2: BatchNorm,
    projection: Option<(ParamId, BatchNorm)>,
    stride: usize,
    pub attention: Attention,
}

impl ResidualBlock {
    fn forward(&self, s: &mut Session, x: Var, placement: Placement, site: (usize, usize)) -> Result<(Var, Option<AttentionRecord>)> {
        let h = s.graph.conv2d(x, s.var(self.conv1), self.stride, 1)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = s.graph.conv2d(h, s.var(self.conv2), 1, 1)?;
        let branch = self.bn2.forward(s, h)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let p = s.graph.conv2d(x, s.var(*conv), self.stride, 0)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let (out, record) = match placement {
            Placement::PreAddition => {
                let (att, rec) = self.attend(s, branch, site)?;
                (s.graph.add(att, skip)?, rec)
            }
            Placement::PostAddition => {
                let sum = s.graph.add(branch, skip)?;
                self.attend(s, sum, site)?
            }
        };
        Ok((s.graph.relu(out), record))
    }

    fn attend(&self, s: &mut Session, x: Var, (stage, block): (usize, usize)) -> Result<(Var, Option<AttentionRecord>)> {
        let start = s.graph.len();
        let (gate, y, ppca) = match &self.attention {
            Attention::None => return Ok((x, None)),
            Attention::Ppca(m) => {
                let out = m.forward(s, x)?;
                (out.gate, out.y, Some(out))
            }
            Attention::Se(m) => {
                let (gate, y) = m.forward(s, x)?;
                (gate, y, None)
            }
        };
        let tape = (start, s.graph.len());
        Ok((y, Some(AttentionRecord { stage, block, input: x, gate, output: y, ppca, tape })))
    }
}

/// Handles returned by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-softmax scores `[B, K]`.
    pub logits: Var,
    /// Globally pooled final-stage features `[B, C_last]`.
    pub features: Var,
    pub attention: Vec<AttentionRecord>,
    /// Tape range of each stage, for flop accounting.
    pub stage_tape: Vec<(usize, usize)>,
}

/// Values at one attention site.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub stage: usize,
    pub block: usize,
    /// `[B, 1, H, W]` for PPCA, `[B, C, 1, 1]` for SE.
    pub gate: Tensor,
    /// PPCA context `T: [B, D, H, W]`.
    pub context: Option<Tensor>,
    /// PPCA normalised context.
    pub normalized: Option<Tensor>,
}

/// Layer structure: parameter handles only, values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: NetworkSpec,
    stem_conv: ParamId,
    stem_bn: BatchNorm,
    stages: Vec<Vec<ResidualBlock>>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

impl Model {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> impl Iterator<Item = ((usize, usize), &ResidualBlock)> {
        self.stages.iter().enumerate().flat_map(|(i, st)| st.iter().enumerate().map(move |(j, b)| ((i, j), b)))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ForwardOutput> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1..] != self.spec.input[..] {
            return Err(Error::ShapeMismatch {
                left: [&[0][..], &self.spec.input[..]].concat(),
                right: shape.to_vec(),
            });
        }
        let stem = &self.spec.stem;
        let h = s.graph.conv2d(x, s.var(self.stem_conv), stem.stride, stem.kernel / 2)?;
        let h = self.stem_bn.forward(s, h)?;
        let mut h = s.graph.relu(h);
        if stem.max_pool {
            h = s.graph.max_pool2d(h, 3, 2, 1)?;
        }
        let mut attention = Vec::new();
        let mut stage_tape = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let start = s.graph.len();
            for (j, block) in stage.iter().enumerate() {
                let (out, rec) = block.forward(s, h, self.spec.placement, (i, j))?;
                attention.extend(rec);
                h = out;
            }
            stage_tape.push((start, s.graph.len()));
        }
        let features = s.graph.mean(h, &[2, 3], false)?;
        let scores = s.graph.matmul(features, s.var(self.fc_weight))?;
        let logits = s.graph.add(scores, s.var(self.fc_bias))?;
        Ok(ForwardOutput { logits, features, attention, stage_tape })
    }
}

/// A model together with its parameter values.
#[derive(Clone, Debug)]
pub struct Network {
    pub model: Model,
    pub store: ParamStore,
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl Network {
    /// Allocate every layer; conv and classifier weights are drawn
    /// fan-in-scaled uniform from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let resolved = spec.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, c_out: usize, c_in: usize, k: usize| {
            store.add(name, ParamRole::Conv, fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, rng))
        };
        let stem = spec.stem;
        let stem_conv = conv(&mut store, &mut rng, "stem.conv".into(), stem.channels, spec.input[0], stem.kernel);
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", stem.channels);
        let mut c_in = stem.channels;
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (i, (st, dims)) in spec.stages.iter().zip(&resolved).enumerate() {
            let mut blocks = Vec::with_capacity(st.blocks);
            for j in 0..st.blocks {
                let p = format!("stage{i}.block{j}");
                let stride = if j == 0 { st.stride } else { 1 };
                let c = st.channels;
                let conv1 = conv(&mut store, &mut rng, format!("{p}.conv1"), c, c_in, 3);
                let bn1 = BatchNorm::new(&mut store, &format!("{p}.bn1"), c);
                let conv2 = conv(&mut store, &mut rng, format!("{p}.conv2"), c, c, 3);
                let bn2 = BatchNorm::new(&mut store, &format!("{p}.bn2"), c);
                let projection = (stride != 1 || c_in != c).then(|| {
                    let w = conv(&mut store, &mut rng, format!("{p}.proj.conv"), c, c_in, 1);
                    (w, BatchNorm::new(&mut store, &format!("{p}.proj.bn"), c))
                });
                let attention = match spec.attention {
                    AttentionKind::Ppca => Attention::Ppca(PpcaModule::new(
                        spec.ppca.clone(),
                        c,
                        dims.height,
                        dims.width,
                        &mut store,
                        &format!("{p}.ppca"),
                    )?),
                    AttentionKind::Se => Attention::Se(SeModule::new(c, spec.se_reduction, &mut store, &format!("{p}.se"), &mut rng)),
                    AttentionKind::None => Attention::None,
                };
                blocks.push(ResidualBlock { conv1, bn1, conv2, bn2, projection, stride, attention });
                c_in = c;
            }
            stages.push(blocks);
        }
        let fc_weight =
            store.add("fc.weight", ParamRole::Classifier, {
                let bound = 1.0 / (c_in as f64).sqrt();
                Tensor::uniform(&[c_in, spec.num_classes], -bound, bound, &mut rng)
            });
        let fc_bias = store.add("fc.bias", ParamRole::Classifier, Tensor::zeros(&[spec.num_classes]));
        let model = Model { spec: spec.clone(), stem_conv, stem_bn, stages, fc_weight, fc_bias };
        Ok(Network { model, store })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.model.spec
    }

    /// A fresh tape bound to this network's parameters.
    pub fn session(&mut self, mode: Mode, trainable: bool) -> (&Model, Session<'_>) {
        (&self.model, Session::new(&mut self.store, mode, trainable))
    }

    /// Forward without gradients; returns `(logits, features)` values.
    pub fn predict(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (model, mut s) = self.session(mode, false);
        let xv = s.graph.constant(x.clone());
        let out = model.forward(&mut s, xv)?;
        Ok((s.graph.value(out.logits).clone(), s.graph.value(out.features).clone()))
    }

    /// Attention values at every site for the batch `x`, in eval mode.
    pub fn attention_maps(&mut self, x: &Tensor) -> Result<Vec<AttentionMaps>> {
        let (model, mut s) = self.session(Mode::Eval, false);
        let xv = s.graph.constant(x.clone());
        let out = model.forward(&mut s, xv)?;
        let value = |v: Var| s.graph.value(v).clone();
        Ok(out
            .attention
            .iter()
            .map(|r| AttentionMaps {
                stage: r.stage,
                block: r.block,
                gate: value(r.gate),
                context: r.ppca.map(|p| value(p.context)),
                normalized: r.ppca.map(|p| value(p.normalized)),
            })
            .collect())
    }

    /// Write a checkpoint directory: one PXT1 file per parameter and
    /// buffer plus `manifest.txt` holding the spec and a
    /// `name file shape role` line per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (k, v) in self.spec().to_pairs() {
            manifest.push_str(&format!("spec.{k} = {v}\n"));
        }
        let shape_str = |t: &Tensor| t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        for (i, p) in self.store.params().iter().enumerate() {
            let file = format!("param{i:04}.pxt");
            p.value.save(dir.join(&file))?;
            manifest.push_str(&format!("param {} {file} {} {}\n", p.name, shape_str(&p.value), p.role));
        }
        for (i, b) in self.store.buffers().iter().enumerate() {
            match &b.value {
                Some(t) => {
                    let file = format!("buffer{i:04}.pxt");
                    t.save(dir.join(&file))?;
                    manifest.push_str(&format!("buffer {} {file} {} -\n", b.name, shape_str(t)));
                }
                None => manifest.push_str(&format!("buffer {} - - -\n", b.name)),
            }
        }
        let mut f = fs::File::create(dir.join("manifest.txt"))?;
        f.write_all(manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let fmt = |detail: String| Error::Format { what: "checkpoint manifest", detail };
        let mut pairs = HashMap::new();
        let mut params = HashMap::new();
        let mut buffers = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("spec.") {
                let (k, v) = rest.split_once('=').ok_or_else(|| fmt(format!("bad line '{line}'")))?;
                pairs.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["param", name, file, _, _] => params.insert(name.to_string(), file.to_string()),
                ["buffer", name, file, _, _] => buffers.insert(name.to_string(), file.to_string()),
                _ => return Err(fmt(format!("bad line '{line}'"))),
            };
        }
        let spec = NetworkSpec::from_pairs(&pairs)?;
        let mut net = Network::build(&spec, 0)?;
        for p in net.store.params_mut() {
            let file = params.get(&p.name).ok_or_else(|| fmt(format!("missing parameter '{}'", p.name)))?;
            let t = Tensor::load(dir.join(file))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch { left: p.value.shape().to_vec(), right: t.shape().to_vec() });
            }
            p.value = t;
        }
        for b in net.store.buffers_mut() {
            let file = buffers.get(&b.name).ok_or_else(|| fmt(format!("missing buffer '{}'", b.name)))?;
            b.value = if file == "-" { None } else { Some(Tensor::load(dir.join(file))?) };
        }
        Ok(net)
    }
}
