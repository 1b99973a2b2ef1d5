use super::*;
use crate::backbone::{AttentionKind, NetworkSpec};
use crate::data::{synth_generate, SynthData, SynthSpec};
use crate::losses::{cross_entropy, scl_skipping_lonely};

fn tiny_data(count: usize, seed: u64) -> (SynthData, SynthData) {
    let spec = SynthSpec { size: 12, patch: 4, contrast: 0.3, count, ..SynthSpec::lesion28(seed) };
    let data = synth_generate(&spec).unwrap();
    data.split(count * 3 / 4, "train", "val")
}

fn tiny_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::mini(2);
    spec.input = [1, 12, 12];
    spec.stages.truncate(2);
    spec
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, decay_every: 2, ..TrainConfig::default() }
}

#[test]
fn schedule_examples() {
    let paper = TrainConfig::default().paper_schedule();
    assert_eq!(lr_at(0, &paper), 0.025);
    assert!((lr_at(25, &paper) - 0.005).abs() < 1e-17);
    assert!((lr_at(149, &paper) - 8e-6).abs() < 1e-18);
    assert_eq!(lr_at(24, &paper), 0.025);
    let desk = TrainConfig::default();
    assert_eq!(lr_at(9, &desk), 0.025);
    assert!((lr_at(10, &desk) - 0.005).abs() < 1e-17);
    for cfg in [&paper, &desk] {
        assert!((1..cfg.epochs).all(|e| lr_at(e, cfg) <= lr_at(e - 1, cfg)));
    }
}

#[test]
fn invalid_configs() {
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lr0: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ] {
        assert!(cfg.validate().unwrap_err().is_validation());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (tr, va) = tiny_data(32, 1);
    let mut net = Network::build(&tiny_spec(), 3).unwrap();
    let before = net.store.clone();
    let cfg = TrainConfig { lr0: 0.0, ..tiny_cfg(2) };
    train(&mut net, &tr.dataset, &va.dataset, &cfg, &TrainOptions::default()).unwrap();
    for (a, b) in before.params().iter().zip(net.store.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn runs_are_deterministic() {
    let (tr, va) = tiny_data(48, 2);
    let run = || {
        let mut net = Network::build(&tiny_spec(), 5).unwrap();
        let cfg = TrainConfig { augment_pad: 2, ..tiny_cfg(3) };
        let r = train(&mut net, &tr.dataset, &va.dataset, &cfg, &TrainOptions::default()).unwrap();
        (r.metric_csv(), net.store)
    };
    let (log_a, store_a) = run();
    let (log_b, store_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 1 + 2 * 3);
    for (a, b) in store_a.params().iter().zip(store_b.params()) {
        assert_eq!(a.value, b.value);
    }
    for (a, b) in store_a.buffers().iter().zip(store_b.buffers()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn one_small_step_does_not_increase_batch_loss() {
    let (tr, _) = tiny_data(16, 4);
    let batch = tr.dataset.gather(&(0..8).collect::<Vec<_>>());
    let mut net = Network::build(&tiny_spec(), 6).unwrap();
    let cfg = LossConfig::default();
    let loss_and_grads = |net: &mut Network| {
        let (model, mut s) = net.session(Mode::Train, true);
        let x = s.graph.constant(batch.images.clone());
        let out = model.forward(&mut s, x).unwrap();
        let l = batch_loss(&mut s.graph, &out, &batch.labels, &cfg).unwrap();
        s.graph.backward(l).unwrap();
        (s.graph.value(l).item(), s.param_grads())
    };
    let (before, grads) = loss_and_grads(&mut net);
    let mut sgd = Sgd::new(&net.store, 0.0, 0.0);
    sgd.step(&mut net.store, &grads, 1e-4);
    let (after, _) = loss_and_grads(&mut net);
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn sgd_momentum_update() {
    let mut store = ParamStore::new();
    store.add("w", crate::params::ParamRole::Conv, Tensor::from_vec(vec![1.0, 2.0]));
    let mut sgd = Sgd::new(&store, 0.5, 0.1);
    let g = vec![Some(Tensor::from_vec(vec![1.0, -1.0]))];
    sgd.step(&mut store, &g, 0.1);
    // v = g + 0.1·p = [1.1, -0.8]; p = p - 0.1·v
    assert_eq!(store.params()[0].value.data(), &[1.0 - 0.1 * 1.1, 2.0 + 0.1 * 0.8]);
    sgd.step(&mut store, &g, 0.1);
    let p0 = 1.0 - 0.1 * 1.1;
    let v0 = 0.5 * 1.1 + 1.0 + 0.1 * p0;
    assert_eq!(store.params()[0].value.data()[0], p0 - 0.1 * v0);
}

#[test]
fn loss_endpoints_are_the_pure_losses() {
    let (tr, _) = tiny_data(16, 7);
    let batch = tr.dataset.gather(&(0..12).collect::<Vec<_>>());
    let mut net = Network::build(&tiny_spec(), 8).unwrap();
    let eval = |net: &mut Network, lambda: f64| {
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let (model, mut s) = net.session(Mode::Eval, false);
        let x = s.graph.constant(batch.images.clone());
        let out = model.forward(&mut s, x).unwrap();
        let hybrid = batch_loss(&mut s.graph, &out, &batch.labels, &cfg).unwrap();
        let ce = cross_entropy(&mut s.graph, out.logits, &batch.labels).unwrap();
        let scl = scl_skipping_lonely(&mut s.graph, out.features, &batch.labels, &cfg).unwrap().unwrap();
        let v = |x| s.graph.value(x).item();
        (v(hybrid), v(ce), v(scl))
    };
    let (h1, ce, _) = eval(&mut net, 1.0);
    assert_eq!(h1.to_bits(), ce.to_bits());
    let (h0, _, scl) = eval(&mut net, 0.0);
    assert_eq!(h0.to_bits(), scl.to_bits());
    let (h, ce, scl) = eval(&mut net, 0.7);
    assert!((h - (0.7 * ce + 0.3 * scl)).abs() < 1e-12);
}

#[test]
fn checkpoint_reproduces_validation_metrics() {
    let (tr, va) = tiny_data(48, 9);
    let dir = tempfile::tempdir().unwrap();
    let mut net = Network::build(&tiny_spec(), 10).unwrap();
    let cfg = tiny_cfg(3);
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), verbose: false };
    let report = train(&mut net, &tr.dataset, &va.dataset, &cfg, &opts).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, report.metric_csv());
    let mut best = Network::load(dir.path().join("best")).unwrap();
    let (eval, _) = evaluate(&mut best, &va.dataset, cfg.batch_size, &cfg.loss).unwrap();
    assert_eq!(eval, report.best);
    let best_acc = report.log.iter().filter(|r| r.split == "val").map(|r| r.eval.acc).fold(f64::MIN, f64::max);
    assert_eq!(report.best.acc, best_acc);
    let last_best = report.log.iter().filter(|r| r.split == "val" && r.eval.acc == best_acc).last().unwrap();
    assert_eq!(report.best_epoch, last_best.epoch);
    let mut fin = Network::load(dir.path().join("final")).unwrap();
    let (a, _) = evaluate(&mut fin, &va.dataset, 8, &cfg.loss).unwrap();
    let (b, _) = evaluate(&mut net, &va.dataset, 8, &cfg.loss).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (tr, va) = tiny_data(16, 11);
    let mut net = Network::build(&tiny_spec(), 12).unwrap();
    net.store.params_mut()[0].value.data_mut()[0] = f64::NAN;
    let err = train(&mut net, &tr.dataset, &va.dataset, &tiny_cfg(1), &TrainOptions::default()).unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, batch, norms } => {
            assert_eq!((epoch, batch), (0, 0));
            assert!(norms.contains("stem") && norms.contains("NaN"), "{norms}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let (tr, va) = tiny_data(16, 13);
    let mut net = Network::build(&NetworkSpec::mini(2), 0).unwrap();
    assert!(train(&mut net, &tr.dataset, &va.dataset, &tiny_cfg(1), &TrainOptions::default()).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = crate::config::defaults();
    cfg.set("train", "epochs", "4");
    let mut m = RunManifest::new("train", cfg, "data/lesion", dir.path().join("run"));
    m.metric_log = Some(dir.path().join("run/metrics.csv"));
    let path = m.write().unwrap();
    assert_eq!(RunManifest::read(&path).unwrap(), m);
    assert_eq!(m.code_version.len(), 64);
    assert_eq!(m.code_version, code_version());
}

#[test]
fn single_cell_grid_equals_plain_training() {
    let (tr, va) = tiny_data(32, 14);
    let spec = tiny_spec();
    let cfg = tiny_cfg(2);
    let plan = AblationPlan { axes: vec![AblationAxis::Init], cells: Some(vec!["zero".into()]), threads: 1, out_dir: None };
    let tables = ablate(&spec, &cfg, &tr.dataset, &va.dataset, &plan).unwrap();
    assert_eq!(tables.len(), 1);
    let rows = &tables[0].rows;
    assert_eq!(rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["zero", "one"]);
    assert_eq!(rows[1].status, CellStatus::Masked);
    let mut net = Network::build(&spec, cfg.seed).unwrap();
    let plain = train(&mut net, &tr.dataset, &va.dataset, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(rows[0].result.as_ref().unwrap(), &plain.best);
}

#[test]
fn ablation_rows_and_invalid_cells() {
    assert_eq!(AblationAxis::Lambda.rows(), ["1", "0", "0.9", "0.8", "0.7", "0.6", "0.5"]);
    assert_eq!(AblationAxis::Scales.rows().len(), 7);
    assert_eq!(AblationAxis::Norm.rows(), ["pn", "bn", "in", "ln", "none"]);
    assert_eq!(AblationAxis::Adaption.rows(), ["pfc", "conv1x1", "conv5x5", "sum"]);
    let (tr, va) = tiny_data(16, 15);
    let spec = tiny_spec().with_attention(AttentionKind::None);
    let plan = AblationPlan { axes: vec![AblationAxis::Scales], cells: Some(vec!["6".into()]), threads: 2, out_dir: None };
    let tables = ablate(&spec, &tiny_cfg(1), &tr.dataset, &va.dataset, &plan).unwrap();
    let rows = &tables[0].rows;
    // 16 channels admit group counts up to 16: five or fewer levels
    for r in &rows[..5] {
        assert_eq!(r.status, CellStatus::Masked, "{}", r.label);
    }
    for r in &rows[5..] {
        assert!(matches!(r.status, CellStatus::Skipped(_)), "{}", r.label);
        assert!(r.result.is_none());
    }
    let csv = tables[0].csv();
    assert_eq!(csv.lines().count(), 8);
    assert!(tables[0].to_text().contains("skipped"));
}

#[test]
fn parallel_cells_match_sequential() {
    let (tr, va) = tiny_data(16, 16);
    let run = |threads| {
        let plan = AblationPlan { axes: vec![AblationAxis::Lambda], cells: Some(vec!["1".into(), "0".into(), "0.5".into()]), threads, out_dir: None };
        ablate(&tiny_spec(), &tiny_cfg(1), &tr.dataset, &va.dataset, &plan).unwrap()
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a[0].csv(), b[0].csv());
    assert_eq!(a[0].rows.iter().filter(|r| r.status == CellStatus::Done).count(), 3);
}
