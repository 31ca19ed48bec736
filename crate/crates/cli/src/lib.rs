//! `wmevade`: reproducible experiments on evading black-box watermark
//! verification with ensemble and detector gateways.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
//! error, 3 an experiment missed a bar it asserts (e.g. an owner model
//! below the accuracy floor).

pub mod config;
pub mod pipeline;
pub mod report;

use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use wmevade::analytics::{Method, CSV_HEADER};
use wmevade::data::TriggerSet;
use wmevade::nn::format;
use wmevade::watermark::{self, Epsilon};

use config::{ConfigError, ExperimentConfig};
use pipeline::{Layout, PipelineError};

#[derive(Debug, Parser)]
#[command(
    name = "wmevade",
    version,
    about = "Watermark verification evasion experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding models and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GatewayKind {
    Model,
    Ensemble,
    Detector,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the owners' watermarked models and write their trigger sets.
    TrainOwners {
        #[command(flatten)]
        common: Common,
    },
    /// Verify owners against ensemble gateways of growing size.
    AttackEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        epsilon: Vec<Epsilon>,
        #[arg(long, num_args = 1..)]
        sizes: Vec<usize>,
    },
    /// Train a trigger detector on a stolen model and measure its gateway.
    AttackDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        epsilon: Vec<Epsilon>,
    },
    /// Die-model probability that an owner's trigger survives an n-model vote.
    Simulate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        l: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exact enumeration instead of Monte Carlo.
        #[arg(long)]
        exact: bool,
        /// Also write the result to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a trigger set against a model file or recorded answers.
    Verify {
        /// Trigger directory (with manifest.json).
        #[arg(long)]
        triggers: PathBuf,
        #[arg(long, conflicts_with = "answers", required_unless_present = "answers")]
        model: Option<PathBuf>,
        /// One label per line, in trigger order; `-` reads standard input.
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long, default_value = "0.5")]
        epsilon: Epsilon,
        /// Write the full report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Answer image paths from standard input through a gateway, one label per line.
    ServeStdin {
        #[arg(long, value_enum)]
        gateway: GatewayKind,
        #[arg(long, required_unless_present = "model")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "model")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ensemble size (first N owners).
        #[arg(long)]
        size: Option<usize>,
        /// Model file for `--gateway model`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarise every report found in a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn epsilons_or(cfg: &ExperimentConfig, given: &[Epsilon]) -> Result<Vec<Epsilon>, PipelineError> {
    if given.is_empty() {
        Ok(cfg.epsilon_grid()?)
    } else {
        Ok(given.to_vec())
    }
}

fn exit_code(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Assertion(_) => 3,
        _ => 1,
    }
}

/// Runs one command with explicit streams; returns the process exit code.
pub fn run<I, T>(
    args: I,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command, stdin, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "wmevade: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(
    command: Command,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), PipelineError> {
    match command {
        Command::TrainOwners { common } => {
            let cfg = load_config(&common)?;
            let outcome = pipeline::train_owners(&cfg, &Layout::new(&common.out), stderr)?;
            for o in &outcome.owners {
                writeln!(
                    stdout,
                    "{} test={:.4} triggers={:.2}",
                    o.owner_id, o.test_accuracy, o.trigger_accuracy
                )?;
            }
            if let Some(acc) = outcome.baseline_accuracy {
                writeln!(stdout, "baseline test={acc:.4}")?;
            }
        }
        Command::AttackEnsemble {
            common,
            epsilon,
            sizes,
        } => {
            let cfg = load_config(&common)?;
            let eps = epsilons_or(&cfg, &epsilon)?;
            let sizes = if sizes.is_empty() {
                cfg.sizes.clone()
            } else {
                sizes
            };
            let rep = pipeline::attack_ensemble(&cfg, &Layout::new(&common.out), &eps, &sizes)?;
            for s in &rep.summary {
                writeln!(
                    stdout,
                    "n={} mean verified {:.3} (die model {:.3}), ensemble accuracy {:.4}",
                    s.n, s.mean_fraction, s.die_model, s.ensemble_accuracy
                )?;
            }
        }
        Command::AttackDetector { common, epsilon } => {
            let cfg = load_config(&common)?;
            let eps = epsilons_or(&cfg, &epsilon)?;
            let rep = pipeline::attack_detector(&cfg, &Layout::new(&common.out), &eps)?;
            let e = &rep.evaluation;
            writeln!(
                stdout,
                "detector accuracy {:.4} tpr {:.4} fpr {:.4}",
                e.accuracy, e.tpr, e.fpr
            )?;
            writeln!(
                stdout,
                "gateway clean accuracy {:.4} (stolen {:.4}); owner verified {:.2} (formula {:.3})",
                rep.gateway_accuracy, rep.stolen_accuracy, rep.owner_fraction, rep.owner_prediction
            )?;
        }
        Command::Simulate {
            n,
            l,
            trials,
            seed,
            exact,
            out,
        } => {
            let method = if exact {
                Method::Exact
            } else {
                Method::MonteCarlo
            };
            let result = pipeline::simulate(n, l, trials, seed, method)?;
            let params = format!("simulate n={n} l={l} trials={trials} method={method}");
            let hash = hex::encode(&Sha256::digest(params.as_bytes())[..8]);
            let text = format!(
                "# config-hash={hash} seed={seed}\n{CSV_HEADER}\n{}\n",
                result.csv_row(n, l, seed)
            );
            stdout.write_all(text.as_bytes())?;
            if let Some(path) = out {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(path, text)?;
            }
        }
        Command::Verify {
            triggers,
            model,
            answers,
            epsilon,
            json,
        } => {
            let set = TriggerSet::load_dir(&triggers, None)?;
            let report = match (model, answers) {
                (Some(path), _) => {
                    let model = format::load(path)?;
                    watermark::verify(&mut &model, &set, epsilon)?
                }
                (None, Some(path)) => {
                    let text = if path.as_os_str() == "-" {
                        let mut s = String::new();
                        stdin.read_to_string(&mut s)?;
                        s
                    } else {
                        fs::read_to_string(path)?
                    };
                    pipeline::verify_answers(&set, &pipeline::parse_answers(&text)?, epsilon)?
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            writeln!(stdout, "{}", report.verdict_line())?;
            if let Some(path) = json {
                fs::write(path, report.to_json())?;
            }
        }
        Command::ServeStdin {
            gateway,
            config,
            out,
            seed,
            size,
            model,
        } => {
            let cfg = || -> Result<(ExperimentConfig, Layout), PipelineError> {
                let path = config
                    .clone()
                    .ok_or_else(|| ConfigError("--config is required".into()))?;
                let out = out
                    .clone()
                    .ok_or_else(|| ConfigError("--out is required".into()))?;
                Ok((ExperimentConfig::load(path)?, Layout::new(out)))
            };
            let mut gw = match gateway {
                GatewayKind::Model => {
                    let path = model.ok_or_else(|| {
                        ConfigError("--model is required for the model gateway".into())
                    })?;
                    pipeline::Gateway::Model(format::load(path)?)
                }
                GatewayKind::Ensemble => {
                    let (cfg, layout) = cfg()?;
                    let size = size.unwrap_or(cfg.owners);
                    pipeline::ensemble_gateway(&cfg, &layout, size, seed)?
                }
                GatewayKind::Detector => {
                    let (cfg, layout) = cfg()?;
                    pipeline::detector_gateway(&cfg, &layout, seed)?
                }
            };
            pipeline::serve(&mut gw, stdin, stdout)?;
        }
        Command::Report { out } => {
            let text = report::summarize(&Layout::new(out))?;
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}
