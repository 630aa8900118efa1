//! `uniq`: command-line driver for gridworld generation, training,
//! evaluation, proposition checks and multi-seed experiments.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 when a
//! verification fails, 1 on anything else.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use uniq_core::baselines::{train_bc, train_dwbc, train_iq, BaselineKind, BcMode, IqRole};
use uniq_core::dataset::TrajectoryDataset;
use uniq_core::eval::evaluate;
use uniq_core::experiment::{
    build_datasets, generate_pools, prepare_environment, run_experiment, sweep_undesired_sizes, BaselinesConfig,
    ExperimentConfig, ABLATION_SIZES,
};
use uniq_core::mdp::{FiniteMdp, TabularPolicy};
use uniq_core::oracles::run_trials;
use uniq_core::ratio::{fit_ratio, RatioConfig};
use uniq_core::uniq::{train_uniq, UniqConfig};
use uniq_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "uniq",
    version,
    about = "Learning to avoid undesired demonstrations on tabular MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the gridworld and its two experts from an experiment config.
    GenEnv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, label and mix the datasets of one seed.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the two-head discriminator and write its logits.
    TrainRatio {
        #[arg(long)]
        un: PathBuf,
        #[arg(long)]
        mix: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the main method; writes q.json, policy.json and loss_trace.csv.
    TrainUniq {
        #[arg(long)]
        un: PathBuf,
        #[arg(long)]
        mix: PathBuf,
        /// TOML trainer settings; experiment defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a comparison method; writes policy.json (and q.json for IQ).
    TrainBaseline {
        #[arg(long)]
        kind: BaselineKind,
        #[arg(long)]
        un: Option<PathBuf>,
        #[arg(long)]
        mix: Option<PathBuf>,
        /// TOML baseline settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a policy and print its report as JSON.
    Eval {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1_000)]
        episodes: usize,
        #[arg(long, default_value_t = 60)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a proposition on random instances.
    Verify {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        prop: u8,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full multi-seed experiment.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat an experiment over undesired-dataset sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A proposition check that ran but did not pass.
#[derive(Debug, thiserror::Error)]
#[error("verification failed: {0}")]
struct VerificationFailed(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    Ok(TrajectoryDataset::from_text(&read(path)?)?)
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenEnv { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env = prepare_environment(&cfg)?;
            write(&out.join("mdp.json"), &env.mdp.to_json()?)?;
            write(&out.join("constrained.json"), &env.experts.constrained.to_json()?)?;
            write(&out.join("unconstrained.json"), &env.experts.unconstrained.to_json()?)?;
            info!("environment written to {}", out.display());
        }
        Command::GenData { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let env = prepare_environment(&cfg)?;
            let pools = generate_pools(&cfg, &env, seed);
            let data = build_datasets(&cfg, &env, &pools, seed, cfg.data.n_un)?;
            write(&out.join("un.txt"), &data.un.to_text()?)?;
            write(&out.join("mix.txt"), &data.mix.to_text()?)?;
            write(&out.join("safe.txt"), &data.safe.to_text()?)?;
            println!(
                "un {} trajectories, mix {} ({} safe / {} undesired), safe {}",
                data.un.len(),
                data.mix.len(),
                data.mix.source_counts().0,
                data.mix.source_counts().1,
                data.safe.len()
            );
        }
        Command::TrainRatio {
            un,
            mix,
            steps,
            lr,
            seed,
            out,
        } => {
            let defaults = RatioConfig::default();
            let cfg = RatioConfig {
                steps: steps.unwrap_or(defaults.steps),
                lr: lr.unwrap_or(defaults.lr),
                ..defaults
            };
            if !(cfg.lr > 0.0) {
                return Err(Error::Config("--lr must be positive".into()).into());
            }
            let fit = fit_ratio(&load_dataset(&un)?, &load_dataset(&mix)?, &cfg, seed)?;
            write(&out, &fit.table.to_json()?)?;
            if let Some((step, g)) = fit.trace.last() {
                println!("g = {g:.12} after {step} steps");
            }
        }
        Command::TrainUniq {
            un,
            mix,
            config,
            seed,
            out,
        } => {
            let cfg: UniqConfig = match config {
                Some(path) => load_toml(&path)?,
                None => uniq_core::experiment::default_uniq(),
            };
            cfg.validate()?;
            let trained = train_uniq(&load_dataset(&un)?, &load_dataset(&mix)?, &cfg, seed)?;
            write(&out.join("q.json"), &trained.q.to_json()?)?;
            write(&out.join("policy.json"), &trained.policy.to_json()?)?;
            write(&out.join("loss_trace.csv"), &trained.loss_trace_csv())?;
        }
        Command::TrainBaseline {
            kind,
            un,
            mix,
            config,
            seed,
            out,
        } => {
            let cfg: BaselinesConfig = match config {
                Some(path) => load_toml(&path)?,
                None => BaselinesConfig::default(),
            };
            let need = |p: &Option<PathBuf>, flag: &str| -> Result<TrajectoryDataset> {
                let path = p
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} needs --{flag}", kind.name())))?;
                load_dataset(path)
            };
            let policy = match kind {
                BaselineKind::BcMix => train_bc(&need(&mix, "mix")?, BcMode::Maximize, 0.0, 0)?,
                BaselineKind::BcUn => train_bc(&need(&un, "un")?, BcMode::Minimize, cfg.bc_un_lr, cfg.bc_un_steps)?,
                BaselineKind::IqMix | BaselineKind::IqUn => {
                    let (data, role, iq) = if kind == BaselineKind::IqMix {
                        (need(&mix, "mix")?, IqRole::Imitate, cfg.iq_mix)
                    } else {
                        (need(&un, "un")?, IqRole::Avoid, cfg.iq_un)
                    };
                    iq.validate()?;
                    let trained = train_iq(&data, role, &iq, seed)?;
                    write(&out.join("q.json"), &trained.q.to_json()?)?;
                    write(&out.join("loss_trace.csv"), &trained.loss_trace_csv())?;
                    trained.policy
                }
                BaselineKind::Dwbc => train_dwbc(&need(&un, "un")?, &need(&mix, "mix")?, &cfg.dwbc)?.policy,
            };
            write(&out.join("policy.json"), &policy.to_json()?)?;
        }
        Command::Eval {
            mdp,
            policy,
            episodes,
            horizon,
            seed,
            out,
        } => {
            let mdp = FiniteMdp::from_json(&read(&mdp)?)?;
            let policy = TabularPolicy::from_json(&read(&policy)?)?;
            let report = evaluate(&mdp, &policy, episodes, horizon, seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(out) = out {
                write(&out, &json)?;
            }
        }
        Command::Verify { prop, trials, seed } => {
            let summary = run_trials(prop, trials, seed)?;
            println!(
                "prop {}: {} trials, max residual {:.3e} (threshold {:.0e}), {} violations: {}",
                summary.prop,
                summary.trials,
                summary.max_residual,
                summary.threshold,
                summary.violations,
                if summary.passed { "PASS" } else { "FAIL" }
            );
            if !summary.passed {
                return Err(VerificationFailed(format!("proposition {prop}")).into());
            }
        }
        Command::RunExperiment { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg, &out)?;
            print!("{}", outcome.comparison.to_text());
            for (method, seed, err) in outcome.results.failures() {
                eprintln!("{} failed on seed {seed}: {err}", method.name());
            }
        }
        Command::Sweep { config, sizes, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sizes = sizes.unwrap_or_else(|| ABLATION_SIZES.to_vec());
            let table = sweep_undesired_sizes(&cfg, &sizes)?;
            let csv = table.to_csv();
            match out {
                Some(out) => write(&out, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
