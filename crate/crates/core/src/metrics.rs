//! Classification metrics: accuracy, macro one-vs-rest AUC, macro F1 and
//! the confusion matrix, all reported as percentages.

use std::fmt::Write as _;

use crate::tensor::Tensor;
use crate::{Error, Result};

fn check_lengths(pred: &[usize], y: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::invalid("metric of an empty prediction set"));
    }
    if pred.len() != y.len() {
        return Err(Error::ShapeMismatch { left: vec![pred.len()], right: vec![y.len()] });
    }
    Ok(())
}

/// `100 · correct / N`.
pub fn accuracy(pred: &[usize], y: &[usize]) -> Result<f64> {
    check_lengths(pred, y)?;
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / y.len() as f64)
}

/// `K x K` counts, rows are true classes, columns predictions.
pub fn confusion(pred: &[usize], y: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(pred, y)?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &t) in pred.iter().zip(y) {
        if p >= k || t >= k {
            return Err(Error::LabelOutOfRange { label: p.max(t), classes: k });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class `(precision, recall, f1)` as fractions, zero where undefined.
pub fn per_class_prf(confusion: &[Vec<usize>]) -> Vec<(f64, f64, f64)> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let ratio = |n: usize| if n == 0 { 0.0 } else { tp / n as f64 };
            let (p, r) = (ratio(predicted), ratio(actual));
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f1)
        })
        .collect()
}

/// Macro F1 over all `k` classes; a class that is never predicted and
/// never true contributes 0.
pub fn f1_macro(pred: &[usize], y: &[usize], k: usize) -> Result<f64> {
    let m = confusion(pred, y, k)?;
    Ok(100.0 * per_class_prf(&m).iter().map(|t| t.2).sum::<f64>() / k as f64)
}

/// Binary AUC by the rank statistic: mid-ranks for ties, then
/// `(R⁺ − n⁺(n⁺+1)/2) / (n⁺·n⁻)`. `None` when a side is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Macro one-vs-rest AUC of `scores: [N, K]`. Classes absent from `y` (or
/// covering all of it) are skipped and listed in the second value.
pub fn auc_macro_ovr(scores: &Tensor, y: &[usize]) -> Result<(f64, Vec<usize>)> {
    let &[n, k] = scores.shape() else {
        return Err(Error::invalid(format!("AUC scores must be [N, K], got {:?}", scores.shape())));
    };
    if n != y.len() {
        return Err(Error::ShapeMismatch { left: vec![n], right: vec![y.len()] });
    }
    if !scores.all_finite() {
        return Err(Error::invalid("AUC scores must be finite"));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| scores.data()[i * k + c]).collect();
        let pos: Vec<bool> = y.iter().map(|&t| t == c).collect();
        match auc_binary(&col, &pos) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => skipped.push(c),
        }
    }
    if used == 0 {
        return Err(Error::invalid("AUC undefined: no class has both positives and negatives"));
    }
    Ok((100.0 * total / used as f64, skipped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Per-class precision in percent.
    pub precision: Vec<f64>,
    /// Per-class recall in percent.
    pub recall: Vec<f64>,
    /// Classes left out of the AUC mean.
    pub auc_skipped: Vec<usize>,
}

impl EvalResult {
    /// Every metric from class scores (probabilities or logits) and labels;
    /// the prediction is the arg-max score.
    pub fn from_scores(scores: &Tensor, y: &[usize]) -> Result<Self> {
        let &[_, k] = scores.shape() else {
            return Err(Error::invalid(format!("scores must be [N, K], got {:?}", scores.shape())));
        };
        let pred = argmax_rows(scores);
        let confusion = confusion(&pred, y, k)?;
        let prf = per_class_prf(&confusion);
        let (auc, auc_skipped) = match auc_macro_ovr(scores, y) {
            Ok(v) => v,
            Err(_) => (f64::NAN, (0..k).collect()),
        };
        Ok(EvalResult {
            acc: accuracy(&pred, y)?,
            auc,
            f1: f1_macro(&pred, y, k)?,
            precision: prf.iter().map(|t| 100.0 * t.0).collect(),
            recall: prf.iter().map(|t| 100.0 * t.1).collect(),
            confusion,
            auc_skipped,
        })
    }

    pub fn csv_header() -> &'static str {
        "acc,auc,f1"
    }

    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4}", self.acc, self.auc, self.f1)
    }

    /// Aligned text summary with the confusion matrix.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ACC {:>8.2}   AUC {:>8.2}   F1 {:>8.2}", self.acc, self.auc, self.f1);
        let width = class_names.iter().map(String::len).max().unwrap_or(0).max(6);
        let _ = write!(s, "{:>width$}", "true\\pred");
        for name in class_names {
            let _ = write!(s, " {name:>width$}");
        }
        let _ = writeln!(s, " {:>9} {:>9}", "precision", "recall");
        for (c, row) in self.confusion.iter().enumerate() {
            let name = class_names.get(c).map_or("?", String::as_str);
            let _ = write!(s, "{name:>width$}");
            for v in row {
                let _ = write!(s, " {v:>width$}");
            }
            let _ = writeln!(s, " {:>9.2} {:>9.2}", self.precision[c], self.recall[c]);
        }
        s
    }
}

/// Means of `values` inside and outside `mask`; `None` when either side is
/// empty.
pub fn inside_outside_means(values: &[f64], mask: &[bool]) -> Option<(f64, f64)> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
