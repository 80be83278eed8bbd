//! Command-line driver: matrix building, embeddings, evaluation and sweeps.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltaknn::Strategy;

pub use config::RunConfig;

/// A configuration or invocation problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl UsageError {
    pub fn error(msg: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(UsageError(msg.into()))
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Process exit status for an error: 2 for usage/config, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "deltaknn",
    version,
    about = "Gain-KNN demonstration selection for few-shot classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe the backend zero-shot and one-shot over the training set and write the gain matrix.
    BuildMatrix {
        #[command(flatten)]
        common: Common,
        /// Grid row (1-7) used while probing instead of the inference template.
        #[arg(long)]
        probe_template: Option<usize>,
        /// Store the creation time in the matrix metadata (makes output time-dependent).
        #[arg(long)]
        record_time: bool,
    },
    /// Compute document embeddings remotely, or import precomputed ones.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Import vectors from this JSONL file instead of calling the endpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Select demonstrations, classify the targets and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run a family of evaluations.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
        /// Neighbor counts for the k sweep, e.g. `1..20` or `1,5,13`.
        #[arg(long, default_value = "1..20")]
        k_range: String,
        /// Shot counts for the n-shot sweep.
        #[arg(long, default_value = "0,2,4,6,8,10,12")]
        n_values: String,
    },
    /// Summarize a gain matrix.
    InspectMatrix {
        /// Matrix file; defaults to the configured one.
        path: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Number of best and worst demonstrations to list.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Write a synthetic corpus, embeddings, mock rules and config for trying the pipeline.
    Synth {
        /// Output directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        train_per_label: usize,
        #[arg(long, default_value_t = 10)]
        test_per_label: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    K,
    Nshot,
    PromptGrid,
    Ordering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    ZeroShot,
    Random,
    TopK,
    DeltaKnn,
    Cone,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::ZeroShot => Strategy::ZeroShot,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::TopK => Strategy::TopK,
            StrategyArg::DeltaKnn => Strategy::DeltaKnn,
            StrategyArg::Cone => Strategy::Cone,
        }
    }
}

/// Flags shared by the config-driven commands; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum concurrent backend requests.
    #[arg(long)]
    pub max_inflight: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub n_shot: Option<usize>,
    #[arg(long = "k")]
    pub k_neighbors: Option<usize>,
    /// Pick the top candidates regardless of label.
    #[arg(long)]
    pub no_balance: bool,
    /// Prompt grid row, 1-7.
    #[arg(long)]
    pub prompt_row: Option<usize>,
    /// Score ConE by summed rather than mean target log-probability.
    #[arg(long)]
    pub cone_unnormalized: bool,
    /// Cross-validate over the training split with this many folds.
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Print the number of backend calls and exit.
    #[arg(long)]
    pub dry_run: bool,
}

impl Common {
    /// Loads the config file and applies flag overrides.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.matrix {
            c.matrix.path = Some(v.clone());
        }
        if let Some(v) = &self.embeddings {
            c.embeddings.path = Some(v.clone());
        }
        if let Some(v) = self.runs {
            c.runs = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.max_inflight {
            c.backend.max_inflight = v;
        }
        if let Some(v) = self.strategy {
            c.selection.strategy = v.into();
        }
        if let Some(v) = self.n_shot {
            c.selection.n_shot = v;
        }
        if let Some(v) = self.k_neighbors {
            c.selection.k_neighbors = v;
        }
        if self.no_balance {
            c.selection.balance = false;
        }
        if let Some(v) = self.prompt_row {
            c.prompt.row = v;
        }
        if self.cone_unnormalized {
            c.selection.cone_normalize = false;
        }
        if let Some(n) = self.cv_folds {
            c.eval.mode = config::EvalMode::CrossValidation;
            c.eval.n_folds = n;
        }
        // The top-level seed drives selection too.
        c.selection.seed = c.seed;
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildMatrix {
            common,
            probe_template,
            record_time,
        } => commands::build_matrix(&common, probe_template, record_time),
        Command::Embed { common, from } => commands::embed(&common, from.as_deref()),
        Command::Eval { common } => commands::eval(&common),
        Command::Sweep {
            kind,
            common,
            k_range,
            n_values,
        } => commands::sweep(&common, kind, &k_range, &n_values),
        Command::InspectMatrix { path, config, top } => {
            commands::inspect_matrix(path.as_deref(), config.as_deref(), top)
        }
        Command::Synth {
            dir,
            train_per_label,
            test_per_label,
            seed,
        } => commands::synth(&dir, train_per_label, test_per_label, seed),
    }
}
