//! Command-line driver for the downscaling pipeline.
//!
//! `qds gen-data | train | evaluate | compare-backends | diagnostics | rerun`.
//! Each command resolves a [`config::RunConfig`] from defaults, an optional
//! `--config` JSON file, explicit flags and `--section.key value` overrides,
//! and records it as `resolved_config.json` next to its outputs.

pub mod commands;
pub mod config;
pub mod runio;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use qds_core::Error;

use crate::config::{extract_overrides, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(
    name = "qds",
    version,
    about = "Hybrid quantum-classical residual diffusion downscaling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file; explicit flags and dotted overrides take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: runs/<command>-<timestamp>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/ood synthetic wind-field splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_ood: Option<usize>,
        #[arg(long)]
        ood_gamma: Option<f64>,
        #[arg(long)]
        ood_mean_shift: Option<f64>,
    },
    /// Train the regression UNet or the residual diffusion model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<Stage>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Regression run directory (diffusion stage).
        #[arg(long)]
        regression: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score trained runs on a split; two or more runs add a win-count table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<qds_core::data::Split>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        /// Run directories; the first is the baseline.
        runs: Vec<PathBuf>,
    },
    /// Compare exact and noisy quantum backends on a hybrid run.
    CompareBackends {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated depolarizing probabilities.
        #[arg(long, value_delimiter = ',')]
        p_dep: Option<Vec<f64>>,
        #[arg(long)]
        p_ro: Option<f64>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        times: Option<usize>,
        #[arg(long)]
        members: Option<usize>,
    },
    /// Spectra, speed PDFs, joint densities and FSS of evaluated ensembles.
    Diagnostics {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (used when no evaluation directory is given).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<qds_core::data::Split>,
        /// Evaluation output directories.
        inputs: Vec<PathBuf>,
    },
    /// Replay a command from its resolved_config.json.
    Rerun {
        resolved: PathBuf,
        /// Output directory for the replay (default: a new timestamped one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let (args, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => return report(e),
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn base_config(
    common: &Common,
    command: &str,
    overrides: &[(String, String)],
) -> qds_core::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), overrides)?;
    cfg.command = command.into();
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

pub fn dispatch(command: Command, overrides: &[(String, String)]) -> qds_core::Result<()> {
    match command {
        Command::GenData {
            common,
            n_train,
            n_val,
            n_ood,
            ood_gamma,
            ood_mean_shift,
        } => {
            let mut cfg = base_config(&common, "gen-data", overrides)?;
            if cfg.out.is_none() {
                return Err(Error::Config("gen-data needs --out DIR".into()));
            }
            set(&mut cfg.data.n_train, n_train);
            set(&mut cfg.data.n_val, n_val);
            set(&mut cfg.data.n_ood, n_ood);
            set(&mut cfg.data.ood_gamma, ood_gamma);
            set(&mut cfg.data.ood_mean_shift, ood_mean_shift);
            commands::gen_data(cfg)
        }
        Command::Train {
            common,
            stage,
            data,
            regression,
            steps,
            batch,
            resume,
        } => {
            let mut common = common;
            if resume && common.config.is_none() {
                if let Some(out) = &common.out {
                    let stored = out.join(config::RESOLVED_CONFIG);
                    if stored.exists() {
                        common.config = Some(stored);
                    }
                }
            }
            let mut cfg = base_config(&common, "train", overrides)?;
            set(&mut cfg.train.stage, stage);
            if data.is_some() {
                cfg.data.dir = data;
            }
            if regression.is_some() {
                cfg.train.regression_run = regression;
            }
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.batch, batch);
            commands::train(cfg, resume)
        }
        Command::Evaluate {
            common,
            data,
            split,
            members,
            limit,
            runs,
        } => {
            let mut cfg = base_config(&common, "evaluate", overrides)?;
            if data.is_some() {
                cfg.data.dir = data;
            }
            set(&mut cfg.eval.split, split);
            set(&mut cfg.eval.members, members);
            if limit.is_some() {
                cfg.eval.limit = limit;
            }
            if !runs.is_empty() {
                cfg.eval.runs = runs;
            }
            commands::evaluate(cfg)
        }
        Command::CompareBackends {
            common,
            run,
            data,
            p_dep,
            p_ro,
            shots,
            times,
            members,
        } => {
            let mut cfg = base_config(&common, "compare-backends", overrides)?;
            if run.is_some() {
                cfg.compare.run = run;
            }
            if data.is_some() {
                cfg.data.dir = data;
            }
            set(&mut cfg.compare.p_dep, p_dep);
            set(&mut cfg.compare.p_ro, p_ro);
            set(&mut cfg.compare.shots, shots);
            set(&mut cfg.compare.times, times);
            set(&mut cfg.compare.members, members);
            commands::compare_backends(cfg)
        }
        Command::Diagnostics {
            common,
            data,
            split,
            inputs,
        } => {
            let mut cfg = base_config(&common, "diagnostics", overrides)?;
            if data.is_some() {
                cfg.data.dir = data;
            }
            set(&mut cfg.eval.split, split);
            if !inputs.is_empty() {
                cfg.diagnostics.inputs = inputs;
            }
            commands::diagnostics(cfg)
        }
        Command::Rerun { resolved, out } => {
            let mut cfg = RunConfig::resolve(Some(&resolved), overrides)?;
            cfg.out = out;
            match cfg.command.as_str() {
                "gen-data" => {
                    if cfg.out.is_none() {
                        return Err(Error::Config("rerun of gen-data needs --out DIR".into()));
                    }
                    commands::gen_data(cfg)
                }
                "train" => commands::train(cfg, false),
                "evaluate" => commands::evaluate(cfg),
                "compare-backends" => commands::compare_backends(cfg),
                "diagnostics" => commands::diagnostics(cfg),
                other => Err(Error::Config(format!("cannot replay command {other:?}"))),
            }
        }
    }
}

/// Caps rayon's worker count from `QDS_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("QDS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
