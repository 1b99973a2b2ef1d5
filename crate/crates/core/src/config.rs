//! Flat `[section]` / `key = value` configuration files, the registry of
//! every recognised key, and conversion into the typed configs.
//!
//! Layering is defaults, then file, then command-line overrides; each
//! layer is a [`Config`] and later layers win in [`Config::merge`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{AttentionKind, NetworkSpec, Placement};
use crate::data::SynthSpec;
use crate::losses::{LossConfig, SclForm};
use crate::ppca::{AdaptionKind, InitKind, NormKind};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub help: &'static str,
}

impl KeySpec {
    pub fn path(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }

    /// Command-line flag: the key with `_` replaced by `-`.
    pub fn flag(&self) -> String {
        self.key.replace('_', "-")
    }
}

macro_rules! keys {
    ($($section:literal . $key:literal : $help:literal),+ $(,)?) => {
        &[$(KeySpec { section: $section, key: $key, help: $help }),+]
    };
}

/// Every key a config file or flag may set. Keys are unique across
/// sections so each maps to a single flag.
pub const KEYS: &[KeySpec] = keys![
    "run"."seed": "master seed for initialisation, shuffling, augmentation and data synthesis",
    "run"."out": "output directory",
    "model"."spec": "network preset: mini, ablation or resnet18",
    "model"."input": "square input side; 0 keeps the preset's size",
    "model"."attention": "attention module: ppca, se or none",
    "model"."placement": "where attention sits in a residual block: pre or post (the addition)",
    "model"."se_reduction": "SE reduction ratio r",
    "model"."scales": "PPCA channel pyramid group counts, comma separated",
    "model"."norm": "PPCA context normalisation: pn, bn, in, ln or none",
    "model"."adaption": "PPCA context adaption: pfc, conv1x1, conv5x5 or sum",
    "model"."init": "PPCA adaption weight init: zero or one",
    "model"."xi": "PPCA normalisation epsilon",
    "model"."bn_momentum": "running-statistics momentum of the PPCA BN variant",
    "train"."epochs": "training epochs",
    "train"."lr": "initial learning rate",
    "train"."decay_every": "epochs between learning-rate decays",
    "train"."decay_factor": "learning-rate divisor applied at each decay",
    "train"."paper_schedule": "use 150 epochs with decay every 25 (overrides epochs and decay_every)",
    "train"."batch_size": "mini-batch size",
    "train"."momentum": "SGD momentum",
    "train"."weight_decay": "L2 weight decay added to gradients",
    "train"."eval_every": "validate every this many epochs (the last epoch is always validated)",
    "train"."augment_pad": "pad-and-random-crop augmentation padding in pixels; 0 disables",
    "train"."threads": "worker threads for ablation cells",
    "loss"."lambda": "hybrid weight: lambda * CE + (1 - lambda) * SCL",
    "loss"."tau": "SCL temperature",
    "loss"."include_self": "count the anchor among its own positives",
    "loss"."normalize": "L2-normalise embeddings before SCL",
    "loss"."form": "SCL form: as_typeset (log of summed positives) or log_inside",
    "data"."data": "dataset directory written by `synth` (dataset.txt)",
    "data"."train_split": "split used for training",
    "data"."val_split": "split used for validation and evaluation",
    "data"."preset": "synthetic preset: lesion28 or quadrant28",
    "data"."count": "synthetic sample count; 0 keeps the preset's",
    "data"."contrast": "synthetic lesion contrast; negative keeps the preset's",
    "data"."val_fraction": "fraction of synthetic samples placed in the validation split",
    "ablate"."axes": "ablation axes to tabulate: scales, norm, init, adaption, lambda",
    "ablate"."cells": "row labels to run (e.g. 3,pn,zero,pfc,1), or all",
    "gradcheck"."module": "gradient check target: ops, ppca, se, backbone, losses or all",
    "gradcheck"."trials": "random trials per gradient check",
    "count"."with": "attention kinds to compare in `count`, comma separated",
    "count"."classes": "classifier width of the counted networks",
    "export"."checkpoint": "checkpoint directory to export attention from",
    "export"."indices": "sample indices to export, comma separated",
];

pub fn key_spec(path: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.path() == path)
}

/// Sectioned string map; ordering is sorted so the written form is
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `[section]` headers and `key = value` lines; `#` starts a
    /// comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format { what: "config", detail: format!("line {}: expected `key = value`", n + 1) });
            };
            let Some(sec) = &section else {
                return Err(Error::Format { what: "config", detail: format!("line {}: key outside a [section]", n + 1) });
            };
            cfg.set(sec, k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (name, keys)) in self.sections.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{name}]");
            for (k, v) in keys {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn remove_section(&mut self, section: &str) {
        self.sections.remove(section);
    }

    /// Every `(section, key, value)` in sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.sections.iter().flat_map(|(s, keys)| keys.iter().map(move |(k, v)| (s.as_str(), k.as_str(), v.as_str())))
    }

    /// Overlay `other` on `self`.
    pub fn merge(&mut self, other: &Config) {
        for (s, k, v) in other.entries() {
            self.set(s, k, v);
        }
    }

    /// Reject keys missing from [`KEYS`]; sections in `informational` are
    /// exempt.
    pub fn check_known(&self, informational: &[&str]) -> Result<()> {
        for (s, k, _) in self.entries() {
            if !informational.contains(&s) && key_spec(&format!("{s}.{k}")).is_none() {
                return Err(Error::invalid(format!("unknown config key '{s}.{k}'")));
            }
        }
        Ok(())
    }

    /// Value of a key that must be present (defaults guarantee it).
    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| Error::invalid(format!("missing config key '{section}.{key}'")))
    }

    pub fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(section, key)?;
        raw.parse().map_err(|e| Error::invalid(format!("bad value '{raw}' for '{section}.{key}': {e}")))
    }
}

/// Built-in defaults for every key in [`KEYS`].
pub fn defaults() -> Config {
    let spec = NetworkSpec::mini(2);
    let train = TrainConfig::default();
    let loss = LossConfig::default();
    let mut c = Config::new();
    let pairs: [(&str, &str, String); 44] = [
        ("run", "seed", "0".into()),
        ("run", "out", "out".into()),
        ("model", "spec", "mini".into()),
        ("model", "input", "0".into()),
        ("model", "attention", spec.attention.to_string()),
        ("model", "placement", spec.placement.to_string()),
        ("model", "se_reduction", spec.se_reduction.to_string()),
        ("model", "scales", join(&spec.ppca.scales)),
        ("model", "norm", spec.ppca.norm.to_string()),
        ("model", "adaption", spec.ppca.adaption.to_string()),
        ("model", "init", spec.ppca.init.to_string()),
        ("model", "xi", spec.ppca.epsilon.to_string()),
        ("model", "bn_momentum", spec.ppca.bn_momentum.to_string()),
        ("train", "epochs", train.epochs.to_string()),
        ("train", "lr", train.lr0.to_string()),
        ("train", "decay_every", train.decay_every.to_string()),
        ("train", "decay_factor", train.decay_factor.to_string()),
        ("train", "paper_schedule", "false".into()),
        ("train", "batch_size", train.batch_size.to_string()),
        ("train", "momentum", train.momentum.to_string()),
        ("train", "weight_decay", train.weight_decay.to_string()),
        ("train", "eval_every", train.eval_every.to_string()),
        ("train", "augment_pad", train.augment_pad.to_string()),
        ("train", "threads", "1".into()),
        ("loss", "lambda", loss.lambda.to_string()),
        ("loss", "tau", loss.tau.to_string()),
        ("loss", "include_self", loss.include_self.to_string()),
        ("loss", "normalize", loss.normalize.to_string()),
        ("loss", "form", loss.form.to_string()),
        ("data", "data", "data".into()),
        ("data", "train_split", "train".into()),
        ("data", "val_split", "val".into()),
        ("data", "preset", "lesion28".into()),
        ("data", "count", "0".into()),
        ("data", "contrast", "-1".into()),
        ("data", "val_fraction", "0.2".into()),
        ("ablate", "axes", "scales,norm,init,adaption,lambda".into()),
        ("ablate", "cells", "all".into()),
        ("gradcheck", "module", "all".into()),
        ("gradcheck", "trials", "20".into()),
        ("count", "with", "ppca,se,none".into()),
        ("count", "classes", "1000".into()),
        ("export", "checkpoint", "".into()),
        ("export", "indices", "0".into()),
    ];
    for (s, k, v) in pairs {
        c.set(s, k, v);
    }
    c
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::invalid(format!("bad {what} entry '{s}': {e}"))))
        .collect()
}

pub fn network_spec(c: &Config, num_classes: usize) -> Result<NetworkSpec> {
    let input: usize = c.parsed("model", "input")?;
    let mut spec = NetworkSpec::preset(c.require("model", "spec")?, (input > 0).then_some(input), num_classes)?;
    spec.attention = c.parsed::<AttentionKind>("model", "attention")?;
    spec.placement = c.parsed::<Placement>("model", "placement")?;
    spec.se_reduction = c.parsed("model", "se_reduction")?;
    spec.ppca.scales = parse_list(c.require("model", "scales")?, "scale")?;
    spec.ppca.norm = c.parsed::<NormKind>("model", "norm")?;
    spec.ppca.adaption = c.parsed::<AdaptionKind>("model", "adaption")?;
    spec.ppca.init = c.parsed::<InitKind>("model", "init")?;
    spec.ppca.epsilon = c.parsed("model", "xi")?;
    spec.ppca.bn_momentum = c.parsed("model", "bn_momentum")?;
    spec.validate()?;
    Ok(spec)
}

pub fn loss_config(c: &Config) -> Result<LossConfig> {
    let cfg = LossConfig {
        lambda: c.parsed("loss", "lambda")?,
        tau: c.parsed("loss", "tau")?,
        include_self: c.parsed("loss", "include_self")?,
        normalize: c.parsed("loss", "normalize")?,
        form: c.parsed::<SclForm>("loss", "form")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(c: &Config) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        lr0: c.parsed("train", "lr")?,
        decay_every: c.parsed("train", "decay_every")?,
        decay_factor: c.parsed("train", "decay_factor")?,
        epochs: c.parsed("train", "epochs")?,
        batch_size: c.parsed("train", "batch_size")?,
        momentum: c.parsed("train", "momentum")?,
        weight_decay: c.parsed("train", "weight_decay")?,
        seed: c.parsed("run", "seed")?,
        loss: loss_config(c)?,
        eval_every: c.parsed("train", "eval_every")?,
        augment_pad: c.parsed("train", "augment_pad")?,
    };
    if c.parsed::<bool>("train", "paper_schedule")? {
        cfg = cfg.paper_schedule();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth_spec(c: &Config) -> Result<SynthSpec> {
    let mut spec = SynthSpec::preset(c.require("data", "preset")?, c.parsed("run", "seed")?)?;
    let count: usize = c.parsed("data", "count")?;
    if count > 0 {
        spec.count = count;
    }
    let contrast: f64 = c.parsed("data", "contrast")?;
    if contrast >= 0.0 {
        spec.contrast = contrast;
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests;
