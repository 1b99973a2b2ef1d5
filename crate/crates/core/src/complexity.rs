//! Parameter and flop accounting, closed-form attention cost expressions
//! and their audit against what a built network actually allocates.
//!
//! With `N_s` blocks of width `C_s` on `H_s x W_s` maps in stage `s`, `D`
//! context maps and SE reduction ratio `r`:
//!
//! ```text
//! PPCA params  = D · Σ N_s·H_s·W_s          (D = 7 by default)
//! PPCA flops   = (D + 1) · Σ N_s·H_s·W_s    (D multiplies + 1 gating multiply per pixel)
//! SE params    = (2/r) · Σ N_s·C_s²
//! NL params    = ((2+r)/r) · Σ N_s·C_s²
//! ```

use std::fmt::Write as _;

use crate::backbone::{Attention, AttentionKind, Network, NetworkSpec};
use crate::params::{Mode, ParamRole, ParamStore};
use crate::tensor::Tensor;
use crate::Result;

/// Closed-form values computed from the spec alone.
#[derive(Clone, Debug, PartialEq)]
pub struct FormulaValues {
    /// `Σ N_s·H_s·W_s`.
    pub pixel_sum: usize,
    /// `Σ N_s·C_s²`.
    pub channel_sum: usize,
    pub context_dim: usize,
    pub se_reduction: usize,
    pub ppca_params: usize,
    pub ppca_flops: usize,
    pub se_params: f64,
    pub nl_params: f64,
}

pub fn eval_formulas(spec: &NetworkSpec) -> Result<FormulaValues> {
    let stages = spec.resolve()?;
    let pixel_sum: usize = stages.iter().map(|s| s.blocks * s.height * s.width).sum();
    let channel_sum: usize = stages.iter().map(|s| s.blocks * s.channels * s.channels).sum();
    let d = spec.ppca.context_dim();
    let r = spec.se_reduction as f64;
    Ok(FormulaValues {
        pixel_sum,
        channel_sum,
        context_dim: d,
        se_reduction: spec.se_reduction,
        ppca_params: d * pixel_sum,
        ppca_flops: (d + 1) * pixel_sum,
        se_params: 2.0 / r * channel_sum as f64,
        nl_params: (2.0 + r) / r * channel_sum as f64,
    })
}

/// Scalar parameter counts grouped by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub by_role: Vec<(ParamRole, usize)>,
}

impl ParamCounts {
    pub fn role(&self, role: ParamRole) -> usize {
        self.by_role.iter().find(|(r, _)| *r == role).map_or(0, |(_, n)| *n)
    }
}

pub fn count_params(store: &ParamStore) -> ParamCounts {
    ParamCounts {
        total: store.count(),
        by_role: ParamRole::ALL.iter().map(|&r| (r, store.count_role(r))).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: usize,
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub attention_params: usize,
    pub flops: u64,
    pub attention_flops: u64,
}

/// Forward flops of one image, measured on the tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCounts {
    pub total: u64,
    /// Every op executed inside attention modules.
    pub attention: u64,
    /// `(D + 1)·H·W` per PPCA module: the context-weighting multiplies and
    /// the gating multiply only.
    pub ppca_reconciled: u64,
    pub per_stage: Vec<(u64, u64)>,
}

/// Run one zero image through `net` in eval mode and read the flop
/// estimates off the tape.
pub fn count_flops(net: &mut Network) -> Result<FlopCounts> {
    let [c, h, w] = net.spec().input;
    let (model, mut s) = net.session(Mode::Eval, false);
    let x = s.graph.constant(Tensor::zeros(&[1, c, h, w]));
    let out = model.forward(&mut s, x)?;
    let g = &s.graph;
    let attention_in = |range: (usize, usize)| -> u64 {
        out.attention.iter().filter(|r| r.tape.0 >= range.0 && r.tape.1 <= range.1).map(|r| g.flops(r.tape.0..r.tape.1)).sum()
    };
    let per_stage = out.stage_tape.iter().map(|&(a, b)| (g.flops(a..b), attention_in((a, b)))).collect();
    let ppca_reconciled = model
        .blocks()
        .filter_map(|(_, b)| match &b.attention {
            Attention::Ppca(m) => {
                let (mh, mw) = m.spatial();
                Some(((m.config().context_dim() + 1) * mh * mw) as u64)
            }
            _ => None,
        })
        .sum();
    Ok(FlopCounts {
        total: g.flops(0..g.len()),
        attention: attention_in((0, g.len())),
        ppca_reconciled,
        per_stage,
    })
}

/// Everything the `count` command reports for one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub spec: NetworkSpec,
    pub params: ParamCounts,
    /// Parameters of the same network without attention.
    pub baseline_params: usize,
    pub flops: FlopCounts,
    pub stages: Vec<StageCost>,
    pub formulas: FormulaValues,
}

impl CostReport {
    /// Build the network (and its attention-free twin) and account for it.
    pub fn measure(spec: &NetworkSpec) -> Result<Self> {
        let mut net = Network::build(spec, 0)?;
        let baseline_params = if spec.attention == AttentionKind::None {
            net.store.count()
        } else {
            Network::build(&spec.with_attention(AttentionKind::None), 0)?.store.count()
        };
        let flops = count_flops(&mut net)?;
        let resolved = spec.resolve()?;
        let stages = resolved
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let prefix = format!("stage{i}.");
                let in_stage = |p: &&crate::params::Parameter| p.name.starts_with(&prefix);
                let params = net.store.params().iter().filter(in_stage).map(|p| p.value.len()).sum();
                let attention_params = net
                    .store
                    .params()
                    .iter()
                    .filter(in_stage)
                    .filter(|p| p.role == ParamRole::Attention)
                    .map(|p| p.value.len())
                    .sum();
                let (f, af) = flops.per_stage[i];
                StageCost {
                    stage: i,
                    blocks: st.blocks,
                    channels: st.channels,
                    height: st.height,
                    width: st.width,
                    params,
                    attention_params,
                    flops: f,
                    attention_flops: af,
                }
            })
            .collect();
        Ok(CostReport {
            spec: spec.clone(),
            params: count_params(&net.store),
            baseline_params,
            flops,
            stages,
            formulas: eval_formulas(spec)?,
        })
    }

    pub fn attention_params(&self) -> usize {
        self.params.role(ParamRole::Attention)
    }

    pub fn attention_flop_fraction(&self) -> f64 {
        self.flops.attention as f64 / self.flops.total as f64
    }

    /// `(metric, value)` rows shared by the CSV and text forms.
    pub fn rows(&self) -> Vec<(String, String)> {
        let f = &self.formulas;
        let mut rows = vec![
            ("attention".to_string(), self.spec.attention.to_string()),
            ("input".to_string(), self.spec.input.map(|v| v.to_string()).join("x")),
            ("params_total".to_string(), self.params.total.to_string()),
        ];
        for (role, n) in &self.params.by_role {
            rows.push((format!("params_{role}"), n.to_string()));
        }
        rows.extend([
            ("params_baseline".to_string(), self.baseline_params.to_string()),
            ("params_attention_delta".to_string(), (self.params.total - self.baseline_params).to_string()),
            ("flops_total".to_string(), self.flops.total.to_string()),
            ("flops_attention".to_string(), self.flops.attention.to_string()),
            ("flops_attention_fraction".to_string(), format!("{:.6}", self.attention_flop_fraction())),
            ("flops_ppca_reconciled".to_string(), self.flops.ppca_reconciled.to_string()),
            ("formula_pixel_sum".to_string(), f.pixel_sum.to_string()),
            ("formula_channel_sum".to_string(), f.channel_sum.to_string()),
            ("formula_ppca_params".to_string(), f.ppca_params.to_string()),
            ("formula_ppca_flops".to_string(), f.ppca_flops.to_string()),
            ("formula_se_params".to_string(), f.se_params.to_string()),
            ("formula_nl_params".to_string(), f.nl_params.to_string()),
        ]);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn stages_csv(&self) -> String {
        let mut s = String::from("stage,blocks,channels,height,width,params,attention_params,flops,attention_flops\n");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                st.stage, st.blocks, st.channels, st.height, st.width, st.params, st.attention_params, st.flops, st.attention_flops
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v:>16}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>8} {:>9} {:>12} {:>10} {:>14} {:>14}",
            "stage", "blocks", "channels", "size", "params", "attn", "flops", "attn flops"
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>8} {:>9} {:>12} {:>10} {:>14} {:>14}",
                st.stage,
                st.blocks,
                st.channels,
                format!("{}x{}", st.height, st.width),
                st.params,
                st.attention_params,
                st.flops,
                st.attention_flops
            );
        }
        s
    }
}
