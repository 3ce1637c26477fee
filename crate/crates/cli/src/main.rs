mod commands;
mod config;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{parse_assignment, OracleKind, RunConfig};

/// Process outcome, mapped to the exit-code taxonomy.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or configuration (exit 1).
    Config(String),
    /// Failure while running (exit 2).
    Runtime(String),
    /// An acceptance assertion did not hold (exit 3).
    Assertion(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Assertion(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::Assertion(m) => write!(f, "acceptance check failed: {m}"),
        }
    }
}

impl From<seqsel::Error> for CliError {
    fn from(e: seqsel::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

/// Learned construction of in-context example sequences.
///
/// Settings resolve as: built-in defaults, then `--config` (a JSON object with flat dotted
/// keys such as "train.learning_rate"), then `--set key=value` pairs, then the
/// subcommand's flags. Secrets are read from the environment variable named by
/// "oracle.remote.api_key_env". Exit codes: 0 success, 1 usage or configuration error,
/// 2 runtime error, 3 acceptance-check failure.
#[derive(Parser, Debug)]
#[command(name = "seqsel", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat dotted-key JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment, global = true)]
    set: Vec<(String, Value)>,
    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Oracle rating the sequences.
    #[arg(long, value_enum, global = true)]
    oracle: Option<OracleKind>,
    /// Print the resolved configuration as flat-key JSON and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (JSONL) and its task sidecar `<out>.task.json`.
    Gen {
        /// Output dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool size.
        #[arg(long)]
        n_candidates: Option<usize>,
        /// Training plus evaluation queries.
        #[arg(long)]
        n_queries: Option<usize>,
        /// Number of skills K.
        #[arg(long)]
        skill_count: Option<usize>,
        /// Most skills per record.
        #[arg(long)]
        skills_per_item: Option<usize>,
    },
    /// Train the scorer; writes the best checkpoint, training log and config.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Longest sampled training sequence.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Build (or load) the suffix index for a checkpoint and pool.
    Index {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Index cache file.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Construct sequences for the evaluation queries and rate them.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        branch: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Build exactly k elements.
        #[arg(long)]
        fixed_length: Option<usize>,
        /// Write per-step beams as JSONL.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the trained search with its ablations and baselines over several seeds.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Train on other task families and evaluate zero-shot on a target family.
    Transfer {
        /// Training family dataset; repeatable.
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        /// Held-out family dataset.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run gen, train, index, infer and ablate, then check the acceptance directions.
    Pipeline {
        /// Directory for every artifact; overrides the individual paths.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn set(overrides: &mut Vec<(String, Value)>, key: &str, value: Option<impl serde::Serialize>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = match &cli.global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut o: Vec<(String, Value)> = cli.global.set.clone();
    set(&mut o, "seed", cli.global.seed);
    set(&mut o, "oracle.kind", cli.global.oracle);
    match &cli.command {
        Command::Gen {
            out,
            n_candidates,
            n_queries,
            skill_count,
            skills_per_item,
        } => {
            set(&mut o, "paths.dataset", out.as_ref());
            set(&mut o, "data.n_candidates", *n_candidates);
            set(&mut o, "data.n_queries", *n_queries);
            set(&mut o, "task.skill_count", *skill_count);
            set(&mut o, "task.skills_per_item", *skills_per_item);
        }
        Command::Train {
            dataset,
            checkpoint,
            epochs,
            lr,
            batch_size,
            max_len,
        } => {
            set(&mut o, "paths.dataset", dataset.as_ref());
            set(&mut o, "paths.checkpoint", checkpoint.as_ref());
            set(&mut o, "train.epochs", *epochs);
            set(&mut o, "train.learning_rate", *lr);
            set(&mut o, "train.batch_size", *batch_size);
            set(&mut o, "train.max_len", *max_len);
            set(&mut o, "train.model.max_len", *max_len);
        }
        Command::Index {
            checkpoint,
            dataset,
            index,
        } => {
            set(&mut o, "paths.checkpoint", checkpoint.as_ref());
            set(&mut o, "paths.dataset", dataset.as_ref());
            set(&mut o, "paths.index", index.as_ref());
        }
        Command::Infer {
            checkpoint,
            dataset,
            beam_width,
            branch,
            max_len,
            fixed_length,
            trace,
        } => {
            set(&mut o, "paths.checkpoint", checkpoint.as_ref());
            set(&mut o, "paths.dataset", dataset.as_ref());
            set(&mut o, "search.beam_width", *beam_width);
            set(&mut o, "search.branch", *branch);
            set(&mut o, "search.max_len", *max_len);
            set(&mut o, "search.fixed_length", *fixed_length);
            set(&mut o, "paths.trace", trace.as_ref());
        }
        Command::Ablate { dataset, seeds } => {
            set(&mut o, "paths.dataset", dataset.as_ref());
            set(&mut o, "ablate.seeds", seeds.as_ref());
        }
        Command::Transfer {
            sources,
            target,
            seeds,
        } => {
            if !sources.is_empty() {
                set(&mut o, "transfer.sources", Some(sources));
            }
            set(&mut o, "transfer.target", target.as_ref());
            set(&mut o, "ablate.seeds", seeds.as_ref());
        }
        Command::Pipeline { out_dir } => {
            if let Some(dir) = out_dir {
                set(&mut o, "paths.dataset", Some(dir.join("task.jsonl")));
                set(&mut o, "paths.checkpoint", Some(dir.join("checkpoint")));
                set(&mut o, "paths.index", Some(dir.join("index.bin")));
                set(&mut o, "paths.reports", Some(dir.join("reports")));
            }
        }
    }
    let mut config = base.with_overrides(o.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    commands::derive_seeds(&mut config);
    commands::validate(&config)?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve(cli)?;
    if cli.global.dry_run {
        let text = serde_json::to_string_pretty(&config.to_flat_json()).expect("config serializes");
        let _ = writeln!(std::io::stdout(), "{text}");
        return Ok(());
    }
    match &cli.command {
        Command::Gen { .. } => commands::gen(&config),
        Command::Train { .. } => commands::train(&config),
        Command::Index { .. } => commands::index(&config),
        Command::Infer { .. } => commands::infer(&config),
        Command::Ablate { .. } => commands::ablate(&config),
        Command::Transfer { .. } => commands::transfer(&config),
        Command::Pipeline { .. } => commands::pipeline(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqsel: {e}");
            ExitCode::from(e.code())
        }
    }
}
