//! Subcommand grammar and configuration layering: built-in defaults, then
//! `PYRPIX_SEED`, then `--config`, then flags.

use clap::{Arg, ArgAction, ArgMatches, Command};
use pyrpix::config::{defaults, Config, KeySpec, KEYS};
use pyrpix::{Error, Result};

pub const SEED_ENV: &str = "PYRPIX_SEED";

const BOOLEAN_KEYS: &[&str] = &["train.paper_schedule", "loss.include_self", "loss.normalize"];

pub struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub accepts: fn(&KeySpec) -> bool,
}

pub const SUBCOMMANDS: &[Subcommand] = &[
    Subcommand {
        name: "train",
        about: "Train a network on a dataset directory and keep the best and final checkpoints",
        accepts: |k| matches!(k.section, "run" | "model" | "train" | "loss" | "data"),
    },
    Subcommand {
        name: "eval",
        about: "Evaluate a checkpoint on the validation split",
        accepts: |k| {
            matches!(k.section, "run" | "data" | "loss") || k.path() == "train.batch_size" || k.path() == "export.checkpoint"
        },
    },
    Subcommand {
        name: "ablate",
        about: "Run one seeded training per ablation cell and tabulate the results",
        accepts: |k| matches!(k.section, "run" | "model" | "train" | "loss" | "data" | "ablate"),
    },
    Subcommand {
        name: "gradcheck",
        about: "Compare analytic gradients with central finite differences",
        accepts: |k| matches!(k.section, "run" | "gradcheck"),
    },
    Subcommand {
        name: "count",
        about: "Audit parameter and flop counts against the closed-form formulas",
        accepts: |k| matches!(k.section, "run" | "model" | "count"),
    },
    Subcommand {
        name: "synth",
        about: "Generate a synthetic lesion dataset directory",
        accepts: |k| matches!(k.section, "run" | "data"),
    },
    Subcommand {
        name: "export-attn",
        about: "Export attention maps, pixel contexts and adaption weights of a checkpoint",
        accepts: |k| matches!(k.section, "run" | "data" | "export"),
    },
];

fn key_listing() -> String {
    let d = defaults();
    let mut s = String::from("Configuration keys (section.key = default; flag --key-name):\n");
    for k in KEYS {
        let default = d.get(k.section, k.key).unwrap_or_default();
        s.push_str(&format!("  {} = {}\n      {}\n", k.path(), default, k.help));
    }
    s.push_str(&format!(
        "\nConfig files hold [section] headers and key = value lines. Layers apply in the order\n\
         defaults, {SEED_ENV} (run.seed only), --config file, flags; later layers win.\n\
         Exit codes: 0 success, 1 usage or validation error, 2 internal failure.\n"
    ));
    s
}

fn key_arg(k: &KeySpec, default: &str) -> Arg {
    let arg = Arg::new(k.path())
        .long(k.flag())
        .value_name("VALUE")
        .help(format!("{} [{} = {default}]", k.help, k.path()))
        .action(ArgAction::Set);
    if BOOLEAN_KEYS.contains(&k.path().as_str()) {
        arg.num_args(0..=1).default_missing_value("true")
    } else {
        arg
    }
}

pub fn command() -> Command {
    let d = defaults();
    let mut cmd = Command::new("pyrpix")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Pyramid pixel context adaption networks at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(key_listing());
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub.name).about(sub.about).args_override_self(true).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("configuration file; a run's manifest.txt reproduces that run")
                .action(ArgAction::Set),
        );
        for k in KEYS.iter().filter(|k| (sub.accepts)(k)) {
            c = c.arg(key_arg(k, d.get(k.section, k.key).unwrap_or_default()));
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

/// The layered configuration for subcommand `name`.
pub fn resolve(name: &str, m: &ArgMatches) -> Result<Config> {
    let sub = SUBCOMMANDS.iter().find(|s| s.name == name).expect("parsed subcommands are registered");
    let mut c = defaults();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        c.set("run", "seed", seed.trim());
    }
    if let Some(path) = m.get_one::<String>("config") {
        let file = Config::read(path)?;
        file.check_known(&["manifest"])?;
        c.merge(&file);
    }
    for k in KEYS.iter().filter(|k| (sub.accepts)(k)) {
        if let Some(v) = m.get_one::<String>(&k.path()) {
            c.set(k.section, k.key, v.as_str());
        }
    }
    c.parsed::<u64>("run", "seed")
        .map_err(|_| Error::InvalidArgument(format!("run.seed must be an unsigned integer, got '{}'", c.get("run", "seed").unwrap_or_default())))?;
    Ok(c)
}
