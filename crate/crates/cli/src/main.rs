//! `saat`: run the hashing pipeline stages from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use saat_core::harness::{parse_alpha, parse_mode, run_pipeline, DatasetFile, ExperimentConfig, RunReport, Stage};

#[derive(Parser)]
#[command(name = "saat", version, about = "Adversarial attacks and training for deep hashing retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML). Without it the defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "saat-out")]
    out_dir: PathBuf,
    /// Re-run stages whose artifacts already exist.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the dataset (synthetic unless `dataset_path` is set).
    Synth {
        /// Also export the dataset as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the hashing network on clean data.
    Pretrain,
    /// Attack the query split of the pretrained model.
    Attack(AttackArgs),
    /// Adversarially train a robust model.
    Defend,
    /// Evaluate every available model and attack. Attack flags select
    /// which attack artifacts to evaluate.
    Eval(AttackArgs),
    /// Check mainstay optimality and gradients against brute force.
    OracleCheck,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// `nontargeted` or `targeted`.
    #[arg(long)]
    mode: Option<String>,
    /// `scheduled` or a constant.
    #[arg(long)]
    alpha: Option<String>,
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default().with_env(std::env::vars())?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_attack(cfg: &mut ExperimentConfig, a: &AttackArgs) -> anyhow::Result<()> {
    if let Some(v) = a.eps {
        cfg.attack_epsilon = v;
    }
    if let Some(v) = a.step {
        cfg.attack_step_size = v;
    }
    if let Some(v) = a.iters {
        cfg.attack_iterations = v;
    }
    if let Some(m) = &a.mode {
        parse_mode(m)?;
        cfg.attack_mode = m.clone();
    }
    if let Some(al) = &a.alpha {
        parse_alpha(al)?;
        cfg.attack_alpha = al.clone();
    }
    Ok(())
}

fn print_stages(r: &RunReport) {
    for s in &r.stages {
        let status = if s.ran { "ran" } else { "up to date" };
        match &s.dir {
            Some(d) => println!("{:<12} {status:<10} {}", s.stage.name(), d.display()),
            None => println!("{:<12} {status}", s.stage.name()),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let stage = match &cli.command {
        Command::Synth { .. } => Stage::Synth,
        Command::Pretrain => Stage::Pretrain,
        Command::Attack(a) => {
            apply_attack(&mut cfg, a)?;
            Stage::Attack
        }
        Command::Defend => Stage::Defend,
        Command::Eval(a) => {
            apply_attack(&mut cfg, a)?;
            Stage::Eval
        }
        Command::OracleCheck => Stage::OracleCheck,
    };
    cfg.validate()?;
    let out: &Path = &cli.common.out_dir;
    let report = run_pipeline(&cfg, &[stage], out, cli.common.force)?;
    print_stages(&report);
    match &cli.command {
        Command::Synth { csv: Some(path) } => {
            let dir = report.stage_dir(Stage::Synth).expect("synth stage reports its directory");
            DatasetFile::load(dir.join("dataset.bin"))?.export_csv(path)?;
            println!("exported {}", path.display());
        }
        Command::Eval(_) => {
            for (c, r) in &report.conditions {
                println!("[{}]", c.name());
                print!("{}", r.to_text());
            }
            for (k, v) in &report.summary {
                println!("{k} = {v}");
            }
        }
        Command::OracleCheck => {
            for (k, v) in &report.summary {
                println!("{k} = {v}");
            }
            println!("oracle checks passed");
        }
        _ => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
