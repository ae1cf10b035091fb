//! Command-line front end: pretrain a backbone, schedule compensation sets,
//! sweep accuracy over elapsed time, report hardware cost, validate invariants.
//!
//! Exit codes: 0 success, 1 validation or contract failure, 2 bad
//! configuration or file format.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftcomp::Error;

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod validate;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "driftcomp", version, about = "Drift simulation and compensation for RRAM in-memory computing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides the config).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy network, quantize it and write the backbone checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Full-precision epochs; 0 also skips quantization-aware epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the drift-aware scheduler and write the schedule and set archive.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Absolute accuracy floor.
        #[arg(long, conflicts_with = "a_thr_drop")]
        a_thr: Option<f64>,
        /// Floor as percentage points below the drift-free accuracy.
        #[arg(long)]
        a_thr_drop: Option<f64>,
    },
    /// Evaluate accuracy with and without compensation over elapsed times.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated elapsed times in seconds.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
    },
    /// Emit parameter, operation, storage, energy and area reports.
    Cost {
        #[command(flatten)]
        common: Common,
        /// `toy`, `resnet20` or a model-spec JSON file.
        #[arg(long)]
        topology: Option<String>,
    },
    /// Run the fast invariant suite and check any artifacts present.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common, .. }
            | Command::Schedule { common, .. }
            | Command::Sweep { common, .. }
            | Command::Cost { common, .. }
            | Command::Validate { common } => common,
        }
    }
}

/// Loads the config and applies flag overrides; flags win.
pub fn resolve_config(command: &Command) -> driftcomp::Result<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    match command {
        Command::Pretrain { epochs: Some(e), .. } => {
            cfg.pretrain.epochs = *e;
            if *e == 0 {
                cfg.pretrain.qat_epochs = 0;
            }
        }
        Command::Schedule { a_thr, a_thr_drop, .. } => {
            if let Some(a) = a_thr {
                cfg.scheduler.a_thr = *a;
                cfg.schedule.a_thr_drop_pts = None;
            }
            if let Some(d) = a_thr_drop {
                cfg.schedule.a_thr_drop_pts = Some(*d);
            }
        }
        Command::Sweep { times: Some(t), .. } => cfg.sweep.times = t.clone(),
        Command::Cost { topology: Some(t), .. } => cfg.cost.topology = t.clone(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    if e.is_input_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

pub fn run(cli: Cli) -> ExitCode {
    let cfg = match resolve_config(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_for(&e);
        }
    };
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Pretrain { .. } => commands::cmd_pretrain(&cfg),
        Command::Schedule { .. } => commands::cmd_schedule(&cfg),
        Command::Sweep { .. } => commands::cmd_sweep(&cfg),
        Command::Cost { .. } => commands::cmd_cost(&cfg),
        Command::Validate { .. } => commands::cmd_validate(&cfg),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
