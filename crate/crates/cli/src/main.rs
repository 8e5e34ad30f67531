mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

use bugpilot::config::{BackendKind, ConfigError, RuntimeKind};
use bugpilot::dataset::StrategyKind;
use bugpilot::solver::ShortBy;

/// Set by the interrupt handler; long-running commands finish their
/// in-flight items and seal what they wrote.
pub static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Parser)]
#[command(name = "bugpilot", version, about = "Synthetic bug generation with tool-calling agents")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file layered over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the merged configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Replay script (JSONL) for the replay backend.
    #[arg(long, global = true, value_name = "FILE")]
    pub script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub runtime: Option<RuntimeArg>,
    /// Docker engine socket.
    #[arg(long, global = true, value_name = "PATH")]
    pub socket: Option<PathBuf>,
    /// Image directory of the local runtime.
    #[arg(long, global = true, value_name = "DIR")]
    pub images_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pin every timestamp to 2024-01-01T00:00:00Z.
    #[arg(long, global = true)]
    pub freeze_time: bool,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Live,
    Replay,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Live => BackendKind::Live,
            BackendArg::Replay => BackendKind::Replay,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuntimeArg {
    Docker,
    Local,
}

impl From<RuntimeArg> for RuntimeKind {
    fn from(r: RuntimeArg) -> Self {
        match r {
            RuntimeArg::Docker => RuntimeKind::Docker,
            RuntimeArg::Local => RuntimeKind::Local,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Featadd,
    Buginstruct,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Featadd => StrategyKind::FeatAdd,
            StrategyArg::Buginstruct => StrategyKind::BugInstruct,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShortByArg {
    Steps,
    Tokens,
}

impl From<ShortByArg> for ShortBy {
    fn from(s: ShortByArg) -> Self {
        match s {
            ShortByArg::Steps => ShortBy::Steps,
            ShortByArg::Tokens => ShortBy::Tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Markdown,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SftFormat {
    ChatJsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a bug-generation campaign and append accepted bugs to a dataset.
    Generate(GenerateArgs),
    /// Evaluate a solver k times per bug and report metrics.
    Solve(SolveArgs),
    /// Re-check every record: patch applies, F2P tests fail, P2P tests pass.
    Validate(DatasetArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Label every bug with a category from a guide.
    Categorize(CategorizeArgs),
    /// Derive a category guide from the dataset.
    Taxonomy(TaxonomyArgs),
    /// Export resolved solve trajectories as fine-tuning data.
    ExportSft(ExportSftArgs),
    /// Write a fresh problem statement for one stored bug.
    Describe(DescribeArgs),
    /// Write the bundled fixture repositories, replay scripts and a repos file.
    Fixtures(FixturesArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Solve(_) => "solve",
            Command::Validate(_) => "validate",
            Command::Stats(_) => "stats",
            Command::Categorize(_) => "categorize",
            Command::Taxonomy(_) => "taxonomy",
            Command::ExportSft(_) => "export-sft",
            Command::Describe(_) => "describe",
            Command::Fixtures(_) => "fixtures",
        }
    }
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset directory (default: paths.dataset from the config).
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// TOML file with `[[repo]]` tables, or a comma-separated list of
    /// bundled fixture names.
    #[arg(long, value_name = "FILE|NAMES")]
    pub repos: String,
    /// Attempts per repository.
    #[arg(long)]
    pub attempts: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Dataset directory to append to.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated attempt seeds, one per attempt.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    pub short_by: Option<ShortByArg>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Metrics file (default: <dataset>/metrics.json).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, value_enum, default_value = "markdown")]
    pub table: TableFormat,
}

#[derive(Debug, Args)]
pub struct CategorizeArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// `default` for the built-in guide, or a guide file.
    #[arg(long, default_value = "default", value_name = "default|FILE")]
    pub guide: String,
    /// Labels file (default: <dataset>/labels.jsonl).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TaxonomyArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub fanout: Option<usize>,
    /// Guide file (default: <dataset>/guide.txt).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportSftArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Token budget per exported trajectory.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum, default_value = "chat-jsonl")]
    pub format: SftFormat,
    /// Output file (default: <dataset>/sft.jsonl).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, value_name = "ID")]
    pub instance: String,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    /// Target directory; receives images/, scripts/ and repos.toml.
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    /// Also build the docker images through the engine socket.
    #[arg(long)]
    pub docker: bool,
}

/// Bad input from the user: exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() || err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    if let Err(e) = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupted: finishing in-flight work (press again to abort)");
    }) {
        tracing::warn!(error = %e, "no interrupt handler");
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
