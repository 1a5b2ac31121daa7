//! Command line front end for the reconstruction toolkit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrf::error::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "mrf", version, about = "Fingerprinting reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; derives the per-stage seeds in order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 keeps the default pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Acquisition schedule tools.
    Seq {
        #[command(subcommand)]
        action: SeqAction,
    },
    /// Dictionary tools.
    Dict {
        #[command(subcommand)]
        action: DictAction,
    },
    /// Train the parameter regression network on a dictionary.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding a previously built dictionary.
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Run a trained network on signatures from a tensor file.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Network checkpoint produced by `train`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input signature tensor, N x L or h x w x L.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Measure a contrast stack through per-frame Gaussian masks.
    Subsample {
        #[command(flatten)]
        common: CommonArgs,
        /// Input stack tensor h x w x L; defaults to the built-in phantom.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Restore a contrast stack from subsampled measurements.
    Restore {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory written by `subsample`.
        #[arg(long)]
        kspace: Option<PathBuf>,
        /// Directory holding the dictionary for the subspace projector.
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Full pipeline: restore, map parameters, score against a reference.
    Reconstruct {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory written by `subsample`.
        #[arg(long)]
        kspace: Option<PathBuf>,
        /// Directory holding a previously built dictionary.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Network checkpoint; when set, mapping uses the network.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with reference t1_map.hyt and t2_map.hyt.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Matching normalization: sq or unit.
        #[arg(long)]
        match_norm: Option<String>,
    },
    /// Score parameter maps against a reference.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Estimated T1 map tensor.
        #[arg(long)]
        t1: Option<PathBuf>,
        /// Estimated T2 map tensor.
        #[arg(long)]
        t2: Option<PathBuf>,
        /// Directory with reference t1_map.hyt and t2_map.hyt.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Ratio convention for the reported SNR: paper or standard.
        #[arg(long)]
        snr_convention: Option<String>,
    },
    /// Time matching and network inference against dictionary size.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Subcommand)]
enum SeqAction {
    /// Write the acquisition schedule as CSV.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Subcommand)]
enum DictAction {
    /// Simulate the dictionary for the configured grid and sequence.
    Build {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Match signatures from a tensor file against a dictionary.
    Match {
        #[command(flatten)]
        common: CommonArgs,
        /// Input signature tensor, N x L or h x w x L.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory holding a previously built dictionary.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Matching normalization: sq or unit.
        #[arg(long)]
        match_norm: Option<String>,
    },
}

fn opt_path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

/// Loads the config, merges flags over it, and prepares the output directory.
fn prepare(common: &CommonArgs) -> Result<(RunConfig, PathBuf), Error> {
    let config_path = common.config.as_ref().ok_or_else(|| {
        Error::parameter("cli: --config is required".to_string())
    })?;
    let out = common.out.clone().ok_or_else(|| {
        Error::parameter("cli: --out is required".to_string())
    })?;
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::parameter(format!("cli: thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::io("cli: creating the output directory", e))?;
    Ok((cfg, out))
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Seq { action } => match action {
            SeqAction::Gen { common } => {
                let (cfg, out) = prepare(&common)?;
                commands::write_used_config(&cfg, &out)?;
                commands::seq_gen(&cfg, &out)
            }
        },
        Command::Dict { action } => match action {
            DictAction::Build { common } => {
                let (cfg, out) = prepare(&common)?;
                commands::write_used_config(&cfg, &out)?;
                commands::dict_build(&cfg, &out)
            }
            DictAction::Match {
                common,
                input,
                dict,
                match_norm,
            } => {
                let (mut cfg, out) = prepare(&common)?;
                if let Some(v) = opt_path_string(&input) {
                    cfg.input_path = Some(v);
                }
                if let Some(v) = opt_path_string(&dict) {
                    cfg.dict_dir = Some(v);
                }
                if let Some(v) = match_norm {
                    cfg.match_norm = v;
                }
                commands::write_used_config(&cfg, &out)?;
                commands::dict_match(&cfg, &out)
            }
        },
        Command::Train { common, dict } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&dict) {
                cfg.dict_dir = Some(v);
            }
            commands::write_used_config(&cfg, &out)?;
            commands::train(&cfg, &out)
        }
        Command::Predict {
            common,
            model,
            input,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&model) {
                cfg.model_path = Some(v);
            }
            if let Some(v) = opt_path_string(&input) {
                cfg.input_path = Some(v);
            }
            commands::write_used_config(&cfg, &out)?;
            commands::predict(&cfg, &out)
        }
        Command::Subsample { common, input } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&input) {
                cfg.input_path = Some(v);
            }
            commands::write_used_config(&cfg, &out)?;
            commands::subsample(&cfg, &out)
        }
        Command::Restore {
            common,
            kspace,
            dict,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&kspace) {
                cfg.kspace_dir = Some(v);
            }
            if let Some(v) = opt_path_string(&dict) {
                cfg.dict_dir = Some(v);
            }
            commands::write_used_config(&cfg, &out)?;
            commands::restore_cmd(&cfg, &out)
        }
        Command::Reconstruct {
            common,
            kspace,
            dict,
            model,
            reference,
            match_norm,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&kspace) {
                cfg.kspace_dir = Some(v);
            }
            if let Some(v) = opt_path_string(&dict) {
                cfg.dict_dir = Some(v);
            }
            if let Some(v) = opt_path_string(&model) {
                cfg.model_path = Some(v);
            }
            if let Some(v) = opt_path_string(&reference) {
                cfg.reference_dir = Some(v);
            }
            if let Some(v) = match_norm {
                cfg.match_norm = v;
            }
            commands::write_used_config(&cfg, &out)?;
            commands::reconstruct(&cfg, &out)
        }
        Command::Eval {
            common,
            t1,
            t2,
            reference,
            snr_convention,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            if let Some(v) = opt_path_string(&t1) {
                cfg.eval_t1_path = Some(v);
            }
            if let Some(v) = opt_path_string(&t2) {
                cfg.eval_t2_path = Some(v);
            }
            if let Some(v) = opt_path_string(&reference) {
                cfg.reference_dir = Some(v);
            }
            if let Some(v) = snr_convention {
                cfg.snr_convention = v;
            }
            commands::write_used_config(&cfg, &out)?;
            commands::eval(&cfg, &out)
        }
        Command::Bench { common } => {
            let (cfg, out) = prepare(&common)?;
            commands::write_used_config(&cfg, &out)?;
            commands::bench(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Parameter(_) | Error::Shape(_) => 2,
                Error::Numerical(_) => 3,
                Error::Integrity(_) | Error::Io { .. } => 4,
            };
            ExitCode::from(code)
        }
    }
}
