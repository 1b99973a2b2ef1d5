//! SGD training with a step-decay schedule, validation logging, best
//! checkpoint retention, run manifests and the ablation driver.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::backbone::{ForwardOutput, Network};
use crate::config::Config;
use crate::data::{for_each_batch, BatchPlan, Dataset};
use crate::losses::{cross_entropy, hybrid, scl_skipping_lonely, LossConfig};
use crate::metrics::EvalResult;
use crate::params::{Mode, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

mod ablate;

pub use ablate::{ablate, AblationAxis, AblationPlan, AblationRow, AblationTable, CellStatus};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    /// Divisor applied at each decay.
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Validate every this many epochs; the final epoch always is.
    pub eval_every: usize,
    /// Pad-and-crop augmentation padding; 0 disables.
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.025,
            decay_every: 10,
            decay_factor: 5.0,
            epochs: 30,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 1,
            augment_pad: 0,
        }
    }
}

impl TrainConfig {
    /// 150 epochs with a decay every 25.
    pub fn paper_schedule(self) -> Self {
        TrainConfig { epochs: 150, decay_every: 25, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 || self.eval_every == 0 {
            return Err(Error::invalid("epochs, batch_size, decay_every and eval_every must be positive"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::invalid("decay_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        self.loss.validate()
    }
}

/// `lr0 / factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// SGD with momentum `v ← μv + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        for ((p, v), g) in store.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            let (pd, vd) = (p.value.data_mut(), v.data_mut());
            for ((pi, vi), gi) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// The configured objective on one forward pass. At `λ = 1` only
/// cross-entropy is built and at `λ = 0` only SCL, so the endpoints equal
/// the pure losses exactly. Anchors without a positive are left out of SCL;
/// a batch with none contributes only its CE share.
pub fn batch_loss(g: &mut Graph, out: &ForwardOutput, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let lambda = cfg.lambda;
    let ce = if lambda > 0.0 { Some(cross_entropy(g, out.logits, labels)?) } else { None };
    let scl = if lambda < 1.0 { scl_skipping_lonely(g, out.features, labels, cfg)? } else { None };
    match (ce, scl) {
        (Some(ce), None) if lambda == 1.0 => Ok(ce),
        (None, Some(scl)) => Ok(scl),
        (Some(ce), Some(scl)) => hybrid(g, ce, scl, lambda),
        (Some(ce), None) => Ok(g.mul_scalar(ce, lambda)),
        (None, None) => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// One metric-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub eval: EvalResult,
    pub loss: f64,
    pub lr: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "epoch,split,acc,auc,f1,loss,lr";

    pub fn csv(&self) -> String {
        format!("{},{},{},{:.10e},{:e}", self.epoch, self.split, self.eval.csv_row(), self.loss, self.lr)
    }
}

/// Metrics and mean loss of `net` over `ds` in eval mode.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize, loss: &LossConfig) -> Result<(EvalResult, f64)> {
    let k = net.spec().num_classes;
    let mut scores = Vec::with_capacity(ds.len() * k);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    let plan = BatchPlan { batch_size, shuffle: false, pad: 0, seed: 0, epoch: 0 };
    for_each_batch(ds, plan, |_, batch| -> Result<()> {
        let (model, mut s) = net.session(Mode::Eval, false);
        let x = s.graph.constant(batch.images);
        let out = model.forward(&mut s, x)?;
        let l = batch_loss(&mut s.graph, &out, &batch.labels, loss)?;
        loss_sum += s.graph.value(l).item();
        batches += 1;
        scores.extend_from_slice(s.graph.value(out.logits).data());
        Ok(())
    })?;
    let scores = Tensor::new(vec![ds.len(), k], scores)?;
    Ok((EvalResult::from_scores(&scores, &ds.labels)?, loss_sum / batches as f64))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv` and the `best/` and `final/`
    /// checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Per-epoch progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<MetricRow>,
    pub best_epoch: usize,
    pub best: EvalResult,
    /// Parameters and buffers at the best validation epoch.
    pub best_store: ParamStore,
}

impl TrainReport {
    pub fn metric_csv(&self) -> String {
        let mut s = format!("{}\n", MetricRow::HEADER);
        for row in &self.log {
            let _ = writeln!(s, "{}", row.csv());
        }
        s
    }
}

fn param_norms(store: &ParamStore) -> String {
    store
        .params()
        .iter()
        .map(|p| format!("{}={:.4e}", p.name, p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Train `net` in place. Batches are visited strictly in order, so a run is
/// a pure function of the network, the datasets and `cfg`. The best
/// validation accuracy (ties to the later epoch) selects the retained
/// checkpoint; `net` is left at the final epoch.
pub fn train(net: &mut Network, train: &Dataset, val: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    for ds in [train, val] {
        if ds.image_shape() != net.spec().input {
            return Err(Error::ShapeMismatch { left: net.spec().input.to_vec(), right: ds.image_shape().to_vec() });
        }
        if let Some(&bad) = ds.labels.iter().find(|&&l| l >= net.spec().num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: net.spec().num_classes });
        }
    }
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(f, "{}", MetricRow::HEADER)?;
            f.flush()?;
            Some(f)
        }
        None => None,
    };
    let k = net.spec().num_classes;
    let mut sgd = Sgd::new(&net.store, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(usize, EvalResult, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let plan = BatchPlan { batch_size: cfg.batch_size, shuffle: true, pad: cfg.augment_pad, seed: cfg.seed, epoch };
        let mut scores = Vec::with_capacity(train.len() * k);
        let mut labels = Vec::with_capacity(train.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for_each_batch(train, plan, |b, batch| -> Result<()> {
            let (model, mut s) = net.session(Mode::Train, true);
            let x = s.graph.constant(batch.images);
            let out = model.forward(&mut s, x)?;
            let loss = batch_loss(&mut s.graph, &out, &batch.labels, &cfg.loss)?;
            let value = s.graph.value(loss).item();
            if !value.is_finite() {
                drop(s);
                return Err(Error::NonFiniteLoss { epoch, batch: b, norms: param_norms(&net.store) });
            }
            s.graph.backward(loss)?;
            let grads = s.param_grads();
            scores.extend_from_slice(s.graph.value(out.logits).data());
            drop(s);
            sgd.step(&mut net.store, &grads, lr);
            labels.extend_from_slice(&batch.labels);
            loss_sum += value;
            batches += 1;
            Ok(())
        })?;
        let train_eval = EvalResult::from_scores(&Tensor::new(vec![labels.len(), k], scores)?, &labels)?;
        let mut rows = vec![MetricRow { epoch, split: "train".into(), eval: train_eval, loss: loss_sum / batches as f64, lr }];
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last {
            let (eval, loss) = evaluate(net, val, cfg.batch_size, &cfg.loss)?;
            if best.as_ref().is_none_or(|b| eval.acc >= b.1.acc) {
                if let Some(dir) = &opts.out_dir {
                    net.save(dir.join("best"))?;
                }
                best = Some((epoch, eval.clone(), net.store.clone()));
            }
            rows.push(MetricRow { epoch, split: "val".into(), eval, loss, lr });
        }
        for row in rows {
            if opts.verbose {
                eprintln!(
                    "epoch {:>3} {:<5} loss {:.5} acc {:6.2} auc {:6.2} f1 {:6.2} lr {:.2e}",
                    row.epoch, row.split, row.loss, row.eval.acc, row.eval.auc, row.eval.f1, row.lr
                );
            }
            if let Some(f) = &mut log_file {
                writeln!(f, "{}", row.csv())?;
                f.flush()?;
            }
            log.push(row);
        }
    }
    if let Some(dir) = &opts.out_dir {
        net.save(dir.join("final"))?;
    }
    let (best_epoch, best, best_store) = best.expect("the final epoch is always validated");
    Ok(TrainReport { log, best_epoch, best, best_store })
}

/// Hex SHA-256 of a git-style blob header plus the crate version string.
pub fn code_version() -> String {
    let content = format!("pyrpix {}", env!("CARGO_PKG_VERSION"));
    crate::sha256_hex(&[format!("blob {}\0", content.len()).as_bytes(), content.as_bytes()])
}

/// Everything needed to repeat a run: the fully resolved configuration,
/// the dataset it read, the code version and where outputs went. Written
/// in the config format so it can be passed back as `--config`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub dataset: String,
    pub code_version: String,
    pub out_dir: PathBuf,
    pub metric_log: Option<PathBuf>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn new(command: &str, config: Config, dataset: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            dataset: dataset.into(),
            code_version: code_version(),
            out_dir: out_dir.into(),
            metric_log: None,
        }
    }

    pub fn to_config(&self) -> Config {
        let mut c = self.config.clone();
        c.set("manifest", "command", &self.command);
        c.set("manifest", "dataset", &self.dataset);
        c.set("manifest", "code_version", &self.code_version);
        c.set("manifest", "out_dir", self.out_dir.display().to_string());
        if let Some(p) = &self.metric_log {
            c.set("manifest", "metric_log", p.display().to_string());
        }
        c
    }

    pub fn write(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(Self::FILE);
        self.to_config().write(&path)?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut all = Config::read(path)?;
        let field = |c: &Config, k: &str| c.get("manifest", k).map(str::to_string);
        let missing = |k: &str| Error::Format { what: "manifest", detail: format!("missing manifest.{k}") };
        let manifest = RunManifest {
            command: field(&all, "command").ok_or_else(|| missing("command"))?,
            dataset: field(&all, "dataset").unwrap_or_default(),
            code_version: field(&all, "code_version").ok_or_else(|| missing("code_version"))?,
            out_dir: field(&all, "out_dir").ok_or_else(|| missing("out_dir"))?.into(),
            metric_log: field(&all, "metric_log").map(PathBuf::from),
            config: Config::new(),
        };
        all.remove_section("manifest");
        Ok(RunManifest { config: all, ..manifest })
    }
}

#[cfg(test)]
mod tests;
