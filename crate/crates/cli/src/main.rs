use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use droughtcast_core::experiment::{self, RunConfig, CONFIG_REFERENCE};
use droughtcast_core::synthetic::{self, SyntheticSpec, SYNTHETIC_CATEGORICAL};
use droughtcast_core::{Error, Result};

/// Drought-score forecasting experiments with the hybrid LSTM model.
#[derive(Debug, Parser)]
#[command(name = "droughtcast", version, after_help = CONFIG_REFERENCE)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialisation, shuffling, dropout and t-SNE.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation and t-SNE.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory name (overrides `run_name`).
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build samples from the CSVs and write the cache, statistics and dictionary.
    Ingest,
    /// Train one model and evaluate it on the held-out split.
    Train,
    /// Evaluate a checkpoint, optionally against a baseline checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train and evaluate the five ablation settings.
    Ablate,
    /// k-fold cross-validation with paired t-tests against a second setting.
    Cv {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        compare: Option<String>,
    },
    /// Location-specific versus location-agnostic training.
    Locexp {
        #[arg(long, value_delimiter = ',')]
        states: Option<Vec<String>>,
    },
    /// Attention profile and t-SNE of categorical embeddings.
    Introspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
    /// Write a small generated dataset and a matching configuration.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        counties_per_state: usize,
        #[arg(long, default_value_t = 14)]
        window: usize,
        #[arg(long, default_value_t = 6)]
        weeks: usize,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = &cli.run_name {
        cfg.run_name = Some(n.clone());
    }
    match &cli.command {
        Command::Eval {
            checkpoint,
            baseline,
        } => {
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint.clone();
            }
            if baseline.is_some() {
                cfg.eval.baseline_checkpoint = baseline.clone();
            }
        }
        Command::Cv { k, compare } => {
            if let Some(k) = k {
                cfg.cv.k = *k;
            }
            if let Some(c) = compare {
                cfg.cv.compare = c.clone();
            }
        }
        Command::Locexp { states: Some(s) } => cfg.locexp.states = s.clone(),
        Command::Introspect {
            checkpoint: Some(c),
        } => cfg.introspect.checkpoint = Some(c.clone()),
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    let cfg = resolve(cli)?;
    let out = match &cli.command {
        Command::DefaultConfig => return cfg.to_toml(),
        Command::Synth {
            dir,
            counties_per_state,
            window,
            weeks,
        } => return synth(cfg, dir, *counties_per_state, *window, *weeks),
        Command::Ingest => experiment::cmd_ingest(&cfg)?,
        Command::Train => experiment::cmd_train(&cfg)?,
        Command::Eval { .. } => experiment::cmd_eval(&cfg)?,
        Command::Ablate => experiment::cmd_ablate(&cfg)?,
        Command::Cv { .. } => experiment::cmd_cv(&cfg)?,
        Command::Locexp { .. } => experiment::cmd_locexp(&cfg)?,
        Command::Introspect { .. } => experiment::cmd_introspect(&cfg)?,
    };
    Ok(format!(
        "{}outputs written to {}\n",
        out.text,
        out.dir.display()
    ))
}

fn synth(
    mut cfg: RunConfig,
    dir: &Path,
    counties_per_state: usize,
    window: usize,
    weeks: usize,
) -> Result<String> {
    let spec = SyntheticSpec {
        counties_per_state,
        window,
        weeks_per_split: weeks,
        ..SyntheticSpec::default()
    };
    let paths = synthetic::write_dataset(dir, &spec, cfg.seed()?)?;
    cfg.data.train = Some(std::fs::canonicalize(paths.train)?);
    cfg.data.validation = Some(std::fs::canonicalize(paths.validation)?);
    cfg.data.test = Some(std::fs::canonicalize(paths.test)?);
    cfg.data.statics = Some(std::fs::canonicalize(paths.statics)?);
    cfg.data.categorical_columns = SYNTHETIC_CATEGORICAL
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg.data.window = window;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?)?;
    Ok(format!(
        "dataset and configuration written to {}\n",
        config_path.display()
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
