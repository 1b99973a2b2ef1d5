use std::fs;
use std::path::{Path, PathBuf};

use pyrpix::backbone::{AttentionKind, Network};
use pyrpix::complexity::CostReport;
use pyrpix::config::{loss_config, network_spec, parse_list, synth_spec, train_config, Config};
use pyrpix::data::{synth_generate, DatasetDir, SynthData};
use pyrpix::metrics::EvalResult;
use pyrpix::trainer::{ablate, evaluate, train, AblationAxis, AblationPlan, CellStatus, RunManifest, TrainOptions};
use pyrpix::{Error, Result};

use crate::{export, gradcheck};

pub fn run(name: &str, c: &Config) -> Result<()> {
    match name {
        "train" => train_cmd(c),
        "eval" => eval_cmd(c),
        "ablate" => ablate_cmd(c),
        "gradcheck" => gradcheck::run(c),
        "count" => count_cmd(c),
        "synth" => synth_cmd(c),
        "export-attn" => export::run(c),
        other => Err(Error::InvalidArgument(format!("unknown command '{other}'"))),
    }
}

pub fn out_dir(c: &Config) -> Result<PathBuf> {
    Ok(PathBuf::from(c.require("run", "out")?))
}

/// Write the manifest before any work so a crashed run leaves a
/// diagnosable directory.
pub fn start(command: &str, c: &Config, dataset: &str) -> Result<RunManifest> {
    let manifest = RunManifest::new(command, c.clone(), dataset, out_dir(c)?);
    manifest.write()?;
    Ok(manifest)
}

pub fn write(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub struct Splits {
    pub dir: DatasetDir,
    pub train: SynthData,
    pub val: SynthData,
}

/// Open `data.data`, load the configured splits and record the dataset
/// digest in the manifest.
pub fn load_data(c: &Config, manifest: &mut RunManifest, need_train: bool) -> Result<Splits> {
    let dir = DatasetDir::open(c.require("data", "data")?)?;
    let val = dir.load(c.require("data", "val_split")?)?;
    let train = if need_train { dir.load(c.require("data", "train_split")?)? } else { val.clone() };
    manifest.dataset = format!("{} sha256:{}", dir.root().display(), dir.digest()?);
    manifest.write()?;
    Ok(Splits { dir, train, val })
}

fn class_names(s: &Splits) -> Vec<String> {
    let names = s.dir.class_names();
    if names.is_empty() {
        (0..s.val.dataset.num_classes()).map(|k| k.to_string()).collect()
    } else {
        names
    }
}

fn train_cmd(c: &Config) -> Result<()> {
    let mut manifest = start("train", c, c.require("data", "data")?)?;
    let data = load_data(c, &mut manifest, true)?;
    let cfg = train_config(c)?;
    let k = data.train.dataset.num_classes().max(data.val.dataset.num_classes());
    let spec = network_spec(c, k)?;
    let mut net = Network::build(&spec, cfg.seed)?;
    let out = out_dir(c)?;
    let report = train(&mut net, &data.train.dataset, &data.val.dataset, &cfg, &TrainOptions { out_dir: Some(out.clone()), verbose: true })?;
    manifest.metric_log = Some(out.join("metrics.csv"));
    manifest.write()?;
    println!("best epoch {} of {} (validation split '{}')", report.best_epoch, cfg.epochs, data.val.dataset.split);
    print!("{}", report.best.to_table(&class_names(&data)));
    println!("checkpoints: {} and {}", out.join("best").display(), out.join("final").display());
    Ok(())
}

fn eval_cmd(c: &Config) -> Result<()> {
    let checkpoint = c.require("export", "checkpoint")?;
    if checkpoint.is_empty() {
        return Err(Error::InvalidArgument("eval needs --checkpoint".into()));
    }
    let mut manifest = start("eval", c, c.require("data", "data")?)?;
    let mut net = Network::load(checkpoint)?;
    let data = load_data(c, &mut manifest, false)?;
    let (result, loss) = evaluate(&mut net, &data.val.dataset, c.parsed("train", "batch_size")?, &loss_config(c)?)?;
    let csv = format!("split,{},loss\n{},{},{loss:.6}\n", EvalResult::csv_header(), data.val.dataset.split, result.csv_row());
    write(out_dir(c)?.join("eval.csv"), &csv)?;
    println!("split '{}', {} samples, loss {loss:.5}", data.val.dataset.split, data.val.dataset.len());
    print!("{}", result.to_table(&class_names(&data)));
    Ok(())
}

fn ablate_cmd(c: &Config) -> Result<()> {
    let mut manifest = start("ablate", c, c.require("data", "data")?)?;
    let data = load_data(c, &mut manifest, true)?;
    let cfg = train_config(c)?;
    let k = data.train.dataset.num_classes().max(data.val.dataset.num_classes());
    let base = network_spec(c, k)?;
    let cells = c.require("ablate", "cells")?;
    let out = out_dir(c)?;
    let plan = AblationPlan {
        axes: parse_list::<AblationAxis>(c.require("ablate", "axes")?, "ablation axis")?,
        cells: (!cells.trim().eq_ignore_ascii_case("all")).then(|| parse_list(cells, "cell")).transpose()?,
        threads: c.parsed("train", "threads")?,
        out_dir: Some(out.join("cells")),
    };
    if plan.axes.is_empty() {
        return Err(Error::InvalidArgument("ablate needs at least one axis".into()));
    }
    let tables = ablate(&base, &cfg, &data.train.dataset, &data.val.dataset, &plan)?;
    for t in &tables {
        write(out.join(format!("ablation_{}.csv", t.axis)), &t.csv())?;
        println!("{}", t.to_text());
        for r in &t.rows {
            if let CellStatus::Skipped(why) = &r.status {
                eprintln!("skipped {}={}: {why}", t.axis, r.label);
            }
        }
    }
    Ok(())
}

fn count_cmd(c: &Config) -> Result<()> {
    start("count", c, "")?;
    let out = out_dir(c)?;
    let base = network_spec(c, c.parsed("count", "classes")?)?;
    let kinds = parse_list::<AttentionKind>(c.require("count", "with")?, "attention kind")?;
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("count needs at least one attention kind".into()));
    }
    let mut formulas = None;
    for kind in kinds {
        let report = CostReport::measure(&base.with_attention(kind))?;
        write(out.join(format!("count_{kind}.csv")), &report.to_csv())?;
        write(out.join(format!("count_{kind}_stages.csv")), &report.stages_csv())?;
        println!("{}", report.to_table());
        formulas = Some(report.formulas);
    }
    let f = formulas.expect("at least one kind was measured");
    println!("PPCA extra parameters (7 x sum of N*H*W): {}", f.ppca_params);
    println!("SE extra parameters (2/r x sum of N*C^2, r = {}): {}", f.se_reduction, f.se_params);
    let relation = if (f.ppca_params as f64) < f.se_params { "<" } else { ">=" };
    println!("PPCA {relation} SE: {} {relation} {}", f.ppca_params, f.se_params);
    Ok(())
}

fn synth_cmd(c: &Config) -> Result<()> {
    start("synth", c, "")?;
    let spec = synth_spec(c)?;
    let fraction: f64 = c.parsed("data", "val_fraction")?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("data.val_fraction must be in [0, 1), got {fraction}")));
    }
    let data = synth_generate(&spec)?;
    let n_val = (spec.count as f64 * fraction).round() as usize;
    let (train, val) = data.split(spec.count - n_val, c.require("data", "train_split")?, c.require("data", "val_split")?);
    let extra = vec![
        ("generator.preset".to_string(), c.require("data", "preset")?.to_string()),
        ("generator.seed".to_string(), spec.seed.to_string()),
        ("generator.size".to_string(), spec.size.to_string()),
        ("generator.patch".to_string(), spec.patch.to_string()),
        ("generator.contrast".to_string(), spec.contrast.to_string()),
        ("generator.noise".to_string(), spec.noise.to_string()),
        ("generator.count".to_string(), spec.count.to_string()),
    ];
    let out = out_dir(c)?;
    let splits: Vec<&SynthData> = [&train, &val].into_iter().filter(|s| !s.dataset.is_empty()).collect();
    DatasetDir::write(&out, &splits, &extra)?;
    for s in splits {
        let counts = s.dataset.class_counts();
        println!("{}: {} samples, class counts {counts:?}", s.dataset.split, s.dataset.len());
    }
    println!("dataset written to {}", out.display());
    Ok(())
}
