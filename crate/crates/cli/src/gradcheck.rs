//! `gradcheck`: central finite differences against reverse-mode gradients
//! for every graph operation, the attention modules, the losses and a
//! whole network under the hybrid objective.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyrpix::backbone::{AttentionKind, Network, NetworkSpec, SeModule};
use pyrpix::config::Config;
use pyrpix::losses::{cross_entropy, hybrid, scl, LossConfig, SclForm};
use pyrpix::params::{Mode, ParamRole, ParamStore, Session};
use pyrpix::ppca::{AdaptionKind, NormKind, PpcaConfig, PpcaModule};
use pyrpix::tensor::gradcheck::{check_gradients, check_op, check_params, op_suite, GradCheckOptions, InputReport};
use pyrpix::trainer::batch_loss;
use pyrpix::{Error, Graph, Result, Tensor, Var};

use crate::commands::{out_dir, start, write};

pub const THRESHOLD: f64 = 1e-4;
pub const MODULES: &[&str] = &["ops", "ppca", "se", "backbone", "losses"];

/// Worst error seen for one parameter group across trials.
#[derive(Clone, Debug, Default)]
pub struct Group {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub straddled: usize,
    pub max_rel_error: f64,
}

#[derive(Default)]
struct Groups(Vec<Group>);

impl Groups {
    fn record(&mut self, name: &str, rep: &InputReport) {
        self.record_error(name, rep.checked, rep.max_rel_error);
        if let Some(g) = self.0.iter_mut().find(|g| g.name == name) {
            g.straddled += rep.straddled;
        }
    }

    fn record_error(&mut self, name: &str, checked: usize, err: f64) {
        let g = match self.0.iter().position(|g| g.name == name) {
            Some(i) => &mut self.0[i],
            None => {
                self.0.push(Group { name: name.to_string(), ..Group::default() });
                self.0.last_mut().expect("just pushed")
            }
        };
        g.checked += checked;
        g.max_rel_error = g.max_rel_error.max(err);
    }

    fn end_trial(&mut self, prefix: &str) {
        for g in self.0.iter_mut().filter(|g| g.name.starts_with(prefix)) {
            g.trials += 1;
        }
    }
}

fn rng(module: &str, trial: usize) -> ChaCha8Rng {
    let tag = module.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    ChaCha8Rng::seed_from_u64(tag ^ (trial as u64) << 32)
}

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| scale * v)
}

fn weighted_mean(s: &mut Session, y: Var, probe: &Tensor) -> Result<Var> {
    let p = s.graph.constant(probe.clone());
    let z = s.graph.mul(y, p)?;
    Ok(s.graph.mean_all(z))
}

fn ops(trials: usize, groups: &mut Groups) -> Result<()> {
    for case in op_suite() {
        let name = format!("op.{}", case.name);
        for t in 0..trials {
            let err = check_op(&case, t as u64, GradCheckOptions::default())?;
            let checked = case.inputs.iter().map(|(s, _)| s.iter().product::<usize>()).sum();
            groups.record_error(&name, checked, err);
            groups.end_trial(&name);
        }
    }
    Ok(())
}

/// Trial `t` visits normalisation `t mod 5` and adaption `(t / 5) mod 4`,
/// so twenty trials cover every combination.
fn ppca(trials: usize, groups: &mut Groups) -> Result<()> {
    for t in 0..trials {
        let mut r = rng("ppca", t);
        let norm = NormKind::ALL[t % NormKind::ALL.len()];
        let adaption = AdaptionKind::ALL[(t / NormKind::ALL.len()) % AdaptionKind::ALL.len()];
        let cfg = PpcaConfig { norm, adaption, ..PpcaConfig::default() };
        let (b, c, h, w) = (2, 8, 4, 4);
        let mut store = ParamStore::new();
        let input = store.add("input", ParamRole::Conv, randn(&[b, c, h, w], 1.0, &mut r));
        let m = PpcaModule::new(cfg, c, h, w, &mut store, "ppca")?;
        if let Some(wid) = m.weight() {
            let shape = store.get(wid).value.shape().to_vec();
            store.get_mut(wid).value = randn(&shape, 0.5, &mut r);
        }
        let probe = randn(&[b, c, h, w], 1.0, &mut r);
        let reports = check_params(
            &store,
            Mode::Train,
            |s| {
                let x = s.var(input);
                let y = m.forward(s, x)?.y;
                weighted_mean(s, y, &probe)
            },
            GradCheckOptions::default(),
            |_, _| None,
        )?;
        for (p, rep) in store.params().iter().zip(&reports) {
            groups.record(&format!("ppca.{}", p.name.trim_start_matches("ppca.")), rep);
        }
        groups.end_trial("ppca.");
    }
    Ok(())
}

fn se(trials: usize, groups: &mut Groups) -> Result<()> {
    for t in 0..trials {
        let mut r = rng("se", t);
        let (b, c) = (2, 8);
        let mut store = ParamStore::new();
        let input = store.add("input", ParamRole::Conv, randn(&[b, c, 3, 3], 1.0, &mut r));
        let m = SeModule::new(c, 4, &mut store, "se", &mut r);
        let probe = randn(&[b, c, 3, 3], 1.0, &mut r);
        let reports = check_params(
            &store,
            Mode::Train,
            |s| {
                let x = s.var(input);
                let (_, y) = m.forward(s, x)?;
                weighted_mean(s, y, &probe)
            },
            GradCheckOptions::default(),
            |_, _| None,
        )?;
        for (p, rep) in store.params().iter().zip(&reports) {
            groups.record(&format!("se.{}", p.name.trim_start_matches("se.")), rep);
        }
        groups.end_trial("se.");
    }
    Ok(())
}

/// Balanced labels with at least two samples per class, shuffled.
fn paired_labels(b: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..b).map(|i| (i / 2) % k).collect();
    labels.shuffle(r);
    labels
}

fn losses(trials: usize, groups: &mut Groups) -> Result<()> {
    let opts = GradCheckOptions::default();
    for t in 0..trials {
        let mut r = rng("losses", t);
        let (b, k, f) = (6, 3, 4);
        let labels = paired_labels(b, k, &mut r);
        let cfg = LossConfig {
            include_self: t % 2 == 1,
            form: if (t / 2) % 2 == 0 { SclForm::AsTypeset } else { SclForm::LogInside },
            normalize: (t / 4) % 2 == 0,
            tau: r.random_range(0.1..1.0),
            lambda: r.random_range(0.05..0.95),
        };
        let logits = randn(&[b, k], 1.0, &mut r);
        let z = randn(&[b, f], 1.0, &mut r);
        let ce = check_gradients(&|g: &mut Graph, v: &[Var]| cross_entropy(g, v[0], &labels), &[logits.clone()], opts, |_, _| None)?;
        groups.record("losses.ce.logits", &ce[0]);
        let s = check_gradients(&|g: &mut Graph, v: &[Var]| scl(g, v[0], &labels, &cfg), &[z.clone()], opts, |_, _| None)?;
        groups.record("losses.scl.embedding", &s[0]);
        let h = check_gradients(
            &|g: &mut Graph, v: &[Var]| {
                let ce = cross_entropy(g, v[0], &labels)?;
                let s = scl(g, v[1], &labels, &cfg)?;
                hybrid(g, ce, s, cfg.lambda)
            },
            &[logits, z],
            opts,
            |_, _| None,
        )?;
        groups.record("losses.hybrid.logits", &h[0]);
        groups.record("losses.hybrid.embedding", &h[1]);
        groups.end_trial("losses.");
    }
    Ok(())
}

/// The mini PPCANet with random adaption weights under the hybrid loss in
/// training mode. Each trial probes two random entries of one tensor per
/// parameter role and of four further random tensors; probes whose stencil
/// crosses a ReLU kink are counted apart.
fn backbone(trials: usize, groups: &mut Groups) -> Result<()> {
    let spec = NetworkSpec::mini(2).with_attention(AttentionKind::Ppca);
    let [c, h, w] = spec.input;
    let loss_cfg = LossConfig::default();
    for t in 0..trials {
        let mut r = rng("backbone", t);
        let mut net = Network::build(&spec, t as u64)?;
        for p in net.store.params_mut().iter_mut().filter(|p| p.role == ParamRole::Attention) {
            p.value = randn(p.value.shape(), 0.3, &mut r);
        }
        let x = Tensor::uniform(&[4, c, h, w], 0.0, 1.0, &mut r);
        let labels = paired_labels(4, 2, &mut r);
        let params = net.store.params();
        let mut probed: Vec<usize> = ParamRole::ALL
            .iter()
            .filter_map(|&role| {
                let of_role: Vec<usize> = (0..params.len()).filter(|&i| params[i].role == role).collect();
                of_role.choose(&mut r).copied()
            })
            .collect();
        for _ in 0..4 {
            probed.push(r.random_range(0..params.len()));
        }
        let model = net.model.clone();
        let reports = check_params(
            &net.store,
            Mode::Train,
            |s| {
                let xv = s.graph.constant(x.clone());
                let out = model.forward(s, xv)?;
                batch_loss(&mut s.graph, &out, &labels, &loss_cfg)
            },
            GradCheckOptions::default(),
            |i, len| Some(if probed.contains(&i) { (0..2).map(|_| r.random_range(0..len)).collect() } else { Vec::new() }),
        )?;
        for (p, rep) in net.store.params().iter().zip(&reports) {
            groups.record(&format!("backbone.{}", p.role), rep);
        }
        groups.end_trial("backbone.");
    }
    Ok(())
}

pub fn check(module: &str, trials: usize) -> Result<Vec<Group>> {
    let mut groups = Groups::default();
    match module {
        "ops" => ops(trials, &mut groups)?,
        "ppca" => ppca(trials, &mut groups)?,
        "se" => se(trials, &mut groups)?,
        "losses" => losses(trials, &mut groups)?,
        "backbone" => backbone(trials, &mut groups)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck module '{other}' (expected one of: {}, all)",
                MODULES.join(", ")
            )))
        }
    }
    Ok(groups.0)
}

pub fn run(c: &Config) -> Result<()> {
    start("gradcheck", c, "")?;
    let module = c.require("gradcheck", "module")?.trim().to_ascii_lowercase();
    let trials: usize = c.parsed("gradcheck", "trials")?;
    if trials == 0 {
        return Err(Error::InvalidArgument("gradcheck.trials must be positive".into()));
    }
    let modules: Vec<&str> = if module == "all" { MODULES.to_vec() } else { vec![module.as_str()] };
    let mut all = Vec::new();
    for m in modules {
        all.extend(check(m, trials)?);
    }
    let mut csv = String::from("group,trials,checked,straddled,max_rel_error,pass\n");
    println!("{:<28} {:>6} {:>8} {:>9} {:>14}  result", "group", "trials", "entries", "straddled", "max rel error");
    for g in &all {
        let pass = g.max_rel_error < THRESHOLD;
        let _ = writeln!(csv, "{},{},{},{},{:e},{pass}", g.name, g.trials, g.checked, g.straddled, g.max_rel_error);
        println!(
            "{:<28} {:>6} {:>8} {:>9} {:>14.3e}  {}",
            g.name,
            g.trials,
            g.checked,
            g.straddled,
            g.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    write(out_dir(c)?.join("gradcheck.csv"), &csv)?;
    let failed: Vec<&str> = all.iter().filter(|g| g.max_rel_error >= THRESHOLD).map(|g| g.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} groups below {THRESHOLD:e}", all.len());
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gradient check above {THRESHOLD:e} for: {}", failed.join(", "))))
    }
}
