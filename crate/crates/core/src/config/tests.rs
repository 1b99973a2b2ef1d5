use super::*;

#[test]
fn parse_and_write_round_trip() {
    let text = "# comment\n[train]\nepochs = 3\nlr= 0.1\n\n[model]\nattention =se\n";
    let c = Config::parse(text).unwrap();
    assert_eq!(c.get("train", "epochs"), Some("3"));
    assert_eq!(c.get("train", "lr"), Some("0.1"));
    assert_eq!(c.get("model", "attention"), Some("se"));
    assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    assert!(Config::parse("epochs = 3").is_err());
    assert!(Config::parse("[train]\nepochs").is_err());
}

#[test]
fn later_layers_win() {
    let mut c = defaults();
    let file = Config::parse("[train]\nepochs = 7\nlr = 0.5\n").unwrap();
    let flags = Config::parse("[train]\nepochs = 2\n").unwrap();
    c.merge(&file);
    c.merge(&flags);
    let t = train_config(&c).unwrap();
    assert_eq!(t.epochs, 2);
    assert_eq!(t.lr0, 0.5);
    assert_eq!(t.batch_size, TrainConfig::default().batch_size);
}

#[test]
fn defaults_cover_exactly_the_registry() {
    let d = defaults();
    let mut from_defaults: Vec<String> = d.entries().map(|(s, k, _)| format!("{s}.{k}")).collect();
    let mut registered: Vec<String> = KEYS.iter().map(KeySpec::path).collect();
    from_defaults.sort();
    registered.sort();
    assert_eq!(from_defaults, registered);
    let mut flags: Vec<String> = KEYS.iter().map(KeySpec::flag).collect();
    flags.sort();
    flags.dedup();
    assert_eq!(flags.len(), KEYS.len(), "flags must be unique");
    d.check_known(&[]).unwrap();
}

#[test]
fn defaults_reproduce_typed_defaults() {
    let d = defaults();
    assert_eq!(network_spec(&d, 2).unwrap(), NetworkSpec::mini(2));
    assert_eq!(train_config(&d).unwrap(), TrainConfig::default());
    assert_eq!(loss_config(&d).unwrap(), LossConfig::default());
    assert_eq!(synth_spec(&d).unwrap(), SynthSpec::lesion28(0));
}

#[test]
fn paper_schedule_flag() {
    let mut c = defaults();
    c.set("train", "paper_schedule", "true");
    let t = train_config(&c).unwrap();
    assert_eq!((t.epochs, t.decay_every), (150, 25));
}

#[test]
fn bad_values_and_keys_are_rejected() {
    let mut c = defaults();
    c.set("train", "epochs", "many");
    assert!(train_config(&c).unwrap_err().is_validation());
    let mut c = defaults();
    c.set("loss", "lambda", "1.5");
    assert!(loss_config(&c).is_err());
    let mut c = defaults();
    c.set("model", "norm", "group");
    assert!(network_spec(&c, 2).is_err());
    let mut c = defaults();
    c.set("train", "epoch", "3");
    assert!(c.check_known(&[]).is_err());
    c.remove_section("train");
    c.set("manifest", "anything", "x");
    c.check_known(&["manifest"]).unwrap();
}

#[test]
fn model_keys_reach_the_spec() {
    let mut c = defaults();
    c.set("model", "spec", "resnet18");
    c.set("model", "input", "28");
    c.set("model", "scales", "1, 2,4,8");
    c.set("model", "norm", "LN");
    let spec = network_spec(&c, 5).unwrap();
    assert_eq!(spec.input, [3, 28, 28]);
    assert_eq!(spec.ppca.scales, vec![1, 2, 4, 8]);
    assert_eq!(spec.ppca.norm, NormKind::Layer);
    assert_eq!(spec.num_classes, 5);
}
