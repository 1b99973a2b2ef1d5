//! Cross-entropy, supervised contrastive (SCL) and hybrid objectives.
//!
//! For L2-normalised embeddings `z_i`, similarities `s_ik = z_i·z_k / τ`,
//! positives `P(i) = { j : y_j = y_i }` (without `i` unless
//! `include_self`) and `N_i = |P(i)|`, the per-anchor SCL is
//!
//! ```text
//! as typeset:  L_i = -(1/N_i) · log( Σ_{j∈P(i)} exp(s_ij) / Σ_{k≠i} exp(s_ik) )
//! log inside:  L_i = -(1/N_i) · Σ_{j∈P(i)} log( exp(s_ij) / Σ_{k≠i} exp(s_ik) )
//! ```
//!
//! and the batch loss is the mean over anchors. The hybrid objective is
//! `λ·CE + (1-λ)·SCL`.

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Added under the square root of the embedding norm so an all-zero
/// embedding normalises to zero instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SclForm {
    AsTypeset,
    LogInside,
}

string_enum!(SclForm {
    SclForm::AsTypeset => "as_typeset",
    SclForm::LogInside => "log_inside",
});

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of cross-entropy in the hybrid loss.
    pub lambda: f64,
    /// Temperature τ.
    pub tau: f64,
    /// Count the anchor itself among its positives.
    pub include_self: bool,
    /// L2-normalise embeddings inside the graph.
    pub normalize: bool,
    pub form: SclForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5, tau: 0.07, include_self: false, normalize: true, form: SclForm::AsTypeset }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[b, k] = g.shape(logits) else {
        return Err(Error::invalid(format!("cross_entropy needs [B, K] logits, got {:?}", g.shape(logits))));
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch { left: vec![b], right: vec![labels.len()] });
    }
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        onehot.data_mut()[i * k + y] = 1.0;
    }
    let logp = g.log_softmax(logits)?;
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked);
    Ok(g.mul_scalar(total, -1.0 / b as f64))
}

/// `z / sqrt(Σ z² + NORM_EPS)` row-wise.
pub fn l2_normalize(g: &mut Graph, z: Var) -> Result<Var> {
    let sq = g.square(z);
    let norm2 = g.sum(sq, &[1], true)?;
    let norm2 = g.add_scalar(norm2, NORM_EPS);
    let norm = g.sqrt(norm2);
    g.div(z, norm)
}

fn positives(labels: &[usize], i: usize, include_self: bool) -> impl Iterator<Item = usize> + '_ {
    (0..labels.len()).filter(move |&j| labels[j] == labels[i] && (include_self || j != i))
}

/// Supervised contrastive loss of embeddings `z: [B, F]`. Errors with
/// [`Error::NoPositives`] when some anchor has no positive.
pub fn scl(g: &mut Graph, z: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let b = labels.len();
    if let Some(i) = (0..b).find(|&i| positives(labels, i, cfg.include_self).next().is_none()) {
        return Err(Error::NoPositives { sample: i });
    }
    scl_over_anchors(g, z, labels, cfg, &(0..b).collect::<Vec<_>>())
}

/// As [`scl`], but anchors without positives are left out of the mean.
/// Returns `None` when no anchor qualifies.
pub fn scl_skipping_lonely(g: &mut Graph, z: Var, labels: &[usize], cfg: &LossConfig) -> Result<Option<Var>> {
    let anchors: Vec<usize> =
        (0..labels.len()).filter(|&i| positives(labels, i, cfg.include_self).next().is_some()).collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    scl_over_anchors(g, z, labels, cfg, &anchors).map(Some)
}

fn scl_over_anchors(g: &mut Graph, z: Var, labels: &[usize], cfg: &LossConfig, anchors: &[usize]) -> Result<Var> {
    cfg.validate()?;
    let b = labels.len();
    let &[zb, _] = g.shape(z) else {
        return Err(Error::invalid(format!("scl needs [B, F] embeddings, got {:?}", g.shape(z))));
    };
    if zb != b {
        return Err(Error::ShapeMismatch { left: vec![zb], right: vec![b] });
    }
    if b < 2 {
        return Err(Error::invalid("scl needs a batch of at least two samples"));
    }
    let z = if cfg.normalize { l2_normalize(g, z)? } else { z };
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.mul_scalar(sim, 1.0 / cfg.tau);
    let rows = if anchors.len() == b {
        sim
    } else {
        let picked: Vec<Var> = anchors.iter().map(|&i| g.slice(sim, 0, i, 1)).collect::<Result<_>>()?;
        g.concat(&picked, 0)?
    };
    let a = anchors.len();
    let mut pos_mask = vec![false; a * b];
    let mut den_mask = vec![false; a * b];
    let mut inv_n = Vec::with_capacity(a);
    for (r, &i) in anchors.iter().enumerate() {
        let mut n = 0;
        for j in positives(labels, i, cfg.include_self) {
            pos_mask[r * b + j] = true;
            n += 1;
        }
        for k in (0..b).filter(|&k| k != i) {
            den_mask[r * b + k] = true;
        }
        inv_n.push(1.0 / n as f64);
    }
    let log_den = g.masked_logsumexp(rows, &den_mask)?;
    let inv_n = g.constant(Tensor::from_vec(inv_n));
    let per_anchor = match cfg.form {
        SclForm::AsTypeset => {
            let log_num = g.masked_logsumexp(rows, &pos_mask)?;
            let diff = g.sub(log_den, log_num)?;
            g.mul(diff, inv_n)?
        }
        SclForm::LogInside => {
            let mask = g.constant(Tensor::new(vec![a, b], pos_mask.iter().map(|&m| f64::from(u8::from(m))).collect())?);
            let pos = g.mul(rows, mask)?;
            let pos_sum = g.sum(pos, &[1], false)?;
            let pos_mean = g.mul(pos_sum, inv_n)?;
            g.sub(log_den, pos_mean)?
        }
    };
    Ok(g.mean_all(per_anchor))
}

/// `λ·ce + (1-λ)·scl`.
pub fn hybrid(g: &mut Graph, ce: Var, scl: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let a = g.mul_scalar(ce, lambda);
    let b = g.mul_scalar(scl, 1.0 - lambda);
    g.add(a, b)
}
