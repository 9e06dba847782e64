mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irl_core::losses::SchemeKind;
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("refusing to overwrite non-empty directory {0} (pass --force)")]
    RefusedOverwrite(PathBuf),
    #[error("path error: {0}")]
    Path(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    /// Some units of a multi-unit command failed; the rest completed.
    #[error("{} of {total} units failed: {}", failed.len(), failed.join(", "))]
    Partial { failed: Vec<String>, total: usize },
}

#[derive(Debug, Parser)]
#[command(name = "irl", version, about = "Invariant-representation learning experiments on a synthetic corpus")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for run directories.
    #[arg(long, global = true, env = "IRL_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for synthesis, feature extraction and decoding.
    #[arg(long, global = true, env = "IRL_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Synthesise the corpus and noise bank and write them to disk.
    Synth {
        /// Output directory; its parent must exist.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train one scheme, once per seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after this many epochs in total; rerun to resume.
        #[arg(long)]
        epoch_limit: Option<usize>,
    },
    /// Decode with a checkpoint and print CER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Suite::Clean)]
        suite: Suite,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Per-layer clean/noisy distances of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Grid search over the scheme's weights.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        full_cross: bool,
    },
    /// Train every scheme and emit the joint CER table and distance profiles.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Schemes to compare (default: all).
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<SchemeKind>,
        /// Training runs in flight at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Clean,
    Ood,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
}

impl RunArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(p) = &self.corpus {
            c.corpus_dir = Some(p.clone());
        }
        if let Some(k) = self.scheme {
            c.scheme.kind = k;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(h) = self.hidden {
            c.model.hidden = h;
        }
        if let Some(e) = self.max_epochs {
            c.train.max_epochs = e;
        }
        let s = &mut c.scheme;
        s.alpha = self.alpha.or(s.alpha);
        s.gamma = self.gamma.or(s.gamma);
        s.lambda = self.lambda.or(s.lambda);
        s.aux_weight = self.aux_weight.or(s.aux_weight);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.out_dir.is_some() {
        cfg.out_dir = cli.out_dir.clone();
    }
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Synth { out, seed, force } => {
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            cfg.validate()?;
            commands::synth(&cfg, &out, force)
        }
        Command::Train { run, epoch_limit } => {
            run.apply(&mut cfg);
            cfg.validate()?;
            commands::train(&cfg, epoch_limit)
        }
        Command::Eval {
            checkpoint,
            corpus,
            suite,
            beam,
        } => {
            if corpus.is_some() {
                cfg.corpus_dir = corpus;
            }
            if let Some(b) = beam {
                cfg.eval.beam = b;
            }
            cfg.validate()?;
            commands::eval(&cfg, &checkpoint, suite)
        }
        Command::Analyze {
            checkpoint,
            corpus,
            pairs,
        } => {
            if corpus.is_some() {
                cfg.corpus_dir = corpus;
            }
            if let Some(n) = pairs {
                cfg.eval.analysis_pairs = n;
            }
            cfg.validate()?;
            commands::analyze(&cfg, &checkpoint)
        }
        Command::Search { run, full_cross } => {
            run.apply(&mut cfg);
            cfg.search.full_cross |= full_cross;
            cfg.validate()?;
            commands::search(&cfg)
        }
        Command::Compare {
            run,
            schemes,
            parallel,
        } => {
            run.apply(&mut cfg);
            cfg.validate()?;
            let schemes = if schemes.is_empty() {
                SchemeKind::ALL.to_vec()
            } else {
                schemes
            };
            commands::compare(&cfg, &schemes, parallel)
        }
    }
}

/// 0 on success, 3 when some units failed, 1 for any other error.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<CliError>() {
                Some(CliError::Partial { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
