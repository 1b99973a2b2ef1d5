use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{train, TrainConfig, TrainOptions};
use crate::backbone::{AttentionKind, Network, NetworkSpec};
use crate::data::Dataset;
use crate::metrics::EvalResult;
use crate::ppca::{scales_for_count, AdaptionKind, InitKind, NormKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    Scales,
    Norm,
    Init,
    Adaption,
    Lambda,
}

string_enum!(AblationAxis {
    AblationAxis::Scales => "scales",
    AblationAxis::Norm => "norm",
    AblationAxis::Init => "init",
    AblationAxis::Adaption => "adaption",
    AblationAxis::Lambda => "lambda",
});

impl AblationAxis {
    pub fn title(self) -> &'static str {
        match self {
            AblationAxis::Scales => "cross-channel scales",
            AblationAxis::Norm => "context normalisation",
            AblationAxis::Init => "adaption weight initialisation",
            AblationAxis::Adaption => "pixel context adaption",
            AblationAxis::Lambda => "hybrid loss weight",
        }
    }

    /// Row labels in table order.
    pub fn rows(self) -> Vec<String> {
        match self {
            AblationAxis::Scales => (1..=7).map(|n| n.to_string()).collect(),
            AblationAxis::Norm => NormKind::ALL.iter().map(|n| n.to_string()).collect(),
            AblationAxis::Init => InitKind::ALL.iter().map(|n| n.to_string()).collect(),
            AblationAxis::Adaption => AdaptionKind::ALL.iter().map(|n| n.to_string()).collect(),
            AblationAxis::Lambda => ["1", "0", "0.9", "0.8", "0.7", "0.6", "0.5"].map(String::from).to_vec(),
        }
    }

    /// Set this axis of `spec`/`cfg` to row `label`, returning a readable
    /// description of the cell.
    pub fn apply(self, label: &str, spec: &mut NetworkSpec, cfg: &mut TrainConfig) -> Result<String> {
        if self != AblationAxis::Lambda {
            spec.attention = AttentionKind::Ppca;
        }
        let desc = match self {
            AblationAxis::Scales => {
                let n: usize = label.parse().map_err(|_| Error::invalid(format!("bad scale count '{label}'")))?;
                spec.ppca.scales = scales_for_count(n);
                format!("scales={}", spec.ppca.scales.iter().map(usize::to_string).collect::<Vec<_>>().join("/"))
            }
            AblationAxis::Norm => {
                spec.ppca.norm = label.parse()?;
                format!("norm={}", spec.ppca.norm)
            }
            AblationAxis::Init => {
                spec.ppca.init = label.parse()?;
                format!("init={}", spec.ppca.init)
            }
            AblationAxis::Adaption => {
                spec.ppca.adaption = label.parse()?;
                format!("adaption={}", spec.ppca.adaption)
            }
            AblationAxis::Lambda => {
                cfg.loss.lambda = label.parse().map_err(|_| Error::invalid(format!("bad lambda '{label}'")))?;
                format!("lambda={}", cfg.loss.lambda)
            }
        };
        spec.validate()?;
        cfg.validate()?;
        Ok(desc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Done,
    Masked,
    Skipped(String),
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub config: String,
    pub status: CellStatus,
    /// Best-epoch validation metrics.
    pub result: Option<EvalResult>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "axis,row,config,acc,auc,f1,status";

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let (acc, auc, f1) = r.result.as_ref().map_or((String::new(), String::new(), String::new()), |e| {
                (format!("{:.4}", e.acc), format!("{:.4}", e.auc), format!("{:.4}", e.f1))
            });
            let status = match &r.status {
                CellStatus::Done => "done".to_string(),
                CellStatus::Masked => "masked".to_string(),
                CellStatus::Skipped(why) => format!("skipped: {}", why.replace(',', ";")),
            };
            let _ = writeln!(s, "{},{},{},{acc},{auc},{f1},{status}", self.axis, r.label, r.config);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} ({})\n", self.axis.title(), self.axis);
        let _ = writeln!(s, "{:<8} {:<28} {:>8} {:>8} {:>8}  status", "row", "config", "ACC", "AUC", "F1");
        for r in &self.rows {
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let status = match &r.status {
                CellStatus::Done => "done".to_string(),
                CellStatus::Masked => "masked".to_string(),
                CellStatus::Skipped(why) => format!("skipped: {why}"),
            };
            let e = r.result.as_ref();
            let _ = writeln!(
                s,
                "{:<8} {:<28} {:>8} {:>8} {:>8}  {status}",
                r.label,
                r.config,
                cell(e.map(|e| e.acc)),
                cell(e.map(|e| e.auc)),
                cell(e.map(|e| e.f1)),
            );
        }
        s
    }
}

/// Which cells to run, plus where to keep each cell's outputs.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub axes: Vec<AblationAxis>,
    /// Row labels to run; `None` runs every row.
    pub cells: Option<Vec<String>>,
    pub threads: usize,
    /// Per-cell output root (`<root>/<axis>/<row>`).
    pub out_dir: Option<PathBuf>,
}

struct Cell {
    table: usize,
    row: usize,
    spec: NetworkSpec,
    cfg: TrainConfig,
}

/// Train one seeded network per unmasked cell of each axis, every other
/// setting taken from `base`/`cfg`. Cells run on `plan.threads` workers
/// and are merged by position, so the tables do not depend on scheduling.
pub fn ablate(
    base: &NetworkSpec,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    plan: &AblationPlan,
) -> Result<Vec<AblationTable>> {
    let mut tables = Vec::new();
    let mut cells = Vec::new();
    for (t, &axis) in plan.axes.iter().enumerate() {
        let mut rows = Vec::new();
        for (r, label) in axis.rows().into_iter().enumerate() {
            let (mut spec, mut cell_cfg) = (base.clone(), cfg.clone());
            let (config, status) = match axis.apply(&label, &mut spec, &mut cell_cfg) {
                Err(e) => (format!("{axis}={label}"), CellStatus::Skipped(e.to_string())),
                Ok(desc) if plan.cells.as_ref().is_some_and(|c| !c.contains(&label)) => (desc, CellStatus::Masked),
                Ok(desc) => {
                    cells.push(Cell { table: t, row: r, spec, cfg: cell_cfg });
                    (desc, CellStatus::Done)
                }
            };
            rows.push(AblationRow { label, config, status, result: None });
        }
        tables.push(AblationTable { axis, rows });
    }

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(cells.len()));
    let run = |cell: &Cell| -> Result<EvalResult> {
        let mut net = Network::build(&cell.spec, cell.cfg.seed)?;
        let out_dir = plan.out_dir.as_ref().map(|d| {
            let t = &tables[cell.table];
            d.join(t.axis.as_str()).join(&t.rows[cell.row].label)
        });
        Ok(train(&mut net, train_ds, val_ds, &cell.cfg, &TrainOptions { out_dir, verbose: false })?.best)
    };
    thread::scope(|scope| {
        for _ in 0..plan.threads.max(1).min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run(cell);
                results.lock().expect("no worker panics while holding the lock").push((i, r));
            });
        }
    });
    for (i, r) in results.into_inner().expect("workers have finished") {
        let row = &mut tables[cells[i].table].rows[cells[i].row];
        match r {
            Ok(e) => row.result = Some(e),
            Err(e) => row.status = CellStatus::Skipped(e.to_string()),
        }
    }
    Ok(tables)
}
