//! `trialmatch`: trial preparation, patient ingestion, matching runs,
//! evaluation reports and the review service.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Summaries go to
//! standard output as JSON unless a command documents another format; logs
//! go to standard error.

mod commands;
mod live;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use trialmatch_core::model::RetrievalStrategy;

#[derive(Parser)]
#[command(name = "trialmatch", version, about = "Patient-trial eligibility matching over medical record page images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trial preparation.
    #[command(subcommand)]
    Trial(TrialCommand),
    /// Patient record ingestion.
    #[command(subcommand)]
    Patient(PatientCommand),
    /// Patient-trial matching.
    #[command(subcommand, name = "match")]
    Match(MatchCommand),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the review service.
    Serve(ServeArgs),
    /// Vector store inspection.
    #[command(subcommand)]
    Store(StoreCommand),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Data directory.
    #[arg(long, env = "TRIALMATCH_DATA")]
    pub data: PathBuf,
}

#[derive(Args, Clone)]
pub struct GatewayArgs {
    /// Gateway configuration file (TOML).
    #[arg(long, env = "TRIALMATCH_CONFIG")]
    pub config: PathBuf,
    /// Overrides the mock seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand)]
enum TrialCommand {
    /// Split criteria and generate the relevance criterion, retrieval
    /// guidelines and classification facets; resumes partial preparation.
    Prep(TrialPrepArgs),
}

#[derive(Args)]
pub struct TrialPrepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    /// Trial record (JSON). Without it, `--trial` names a stored trial.
    #[arg(long, conflicts_with = "trial")]
    pub input: Option<PathBuf>,
    /// Id of a trial already in the data directory.
    #[arg(long, required_unless_present = "input")]
    pub trial: Option<String>,
}

#[derive(Subcommand)]
enum PatientCommand {
    /// Split, redact, embed and store a patient's documents.
    Ingest(IngestArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    #[arg(long)]
    pub patient: String,
    /// Redaction plugin: an `http(s)://` endpoint or a command line. Pages
    /// are passed through unchanged when omitted.
    #[arg(long)]
    pub redactor: Option<String>,
    #[arg(long, default_value_t = trialmatch_core::ingest::DEFAULT_PDF_DPI)]
    pub pdf_dpi: u32,
    #[arg(long, default_value_t = trialmatch_core::ingest::DEFAULT_TEXT_DPI)]
    pub text_dpi: u32,
    /// PDF, PNG, JPEG or plain-text files.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum MatchCommand {
    /// Relevance check, then every criterion of the trial, per patient.
    Run(MatchRunArgs),
}

#[derive(Args)]
pub struct MatchRunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    #[arg(long)]
    pub trial: String,
    /// Patients to match; every stored patient when omitted.
    #[arg(long)]
    pub patient: Vec<String>,
    /// `all`, `topk:<k>` or `topk-guideline:<k>`.
    #[arg(long, default_value = "topk-guideline:3")]
    pub strategy: RetrievalStrategy,
    /// Date the criteria are evaluated at (YYYY-MM-DD).
    #[arg(long)]
    pub as_of: NaiveDate,
    /// Directory for assessments and run records; defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Classification report of predictions against labels.
    Report(ReportArgs),
    /// Precision and recall of the `met` class per retrieval strategy.
    Ablation(AblationArgs),
    /// Reviewer time per patient-trial pair.
    ReviewTimes(ReviewTimesArgs),
    /// Record-type and visual-element profile of a page sample.
    ProfileCorpus(ProfileArgs),
    /// Criterion labels inferred from reviewer feedback (JSON lines).
    GroundTruth(GroundTruthArgs),
    /// Token, cost and latency totals from the usage log.
    Usage(UsageArgs),
    /// End-to-end run over a local copy of the n2c2 2018 cohort-selection corpus.
    N2c2(live::N2c2Args),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GroupBy {
    Kind,
    Domain,
    DataFormat,
    Temporal,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Ground-truth labels (JSON lines). Inferred from the data directory's
    /// feedback when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Assessments (JSON lines). Read from the data directory when omitted.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Data directory; supplies trials for facets and any omitted input.
    #[arg(long, env = "TRIALMATCH_DATA")]
    pub data: Option<PathBuf>,
    /// `inclusion`, `exclusion`, `domain=<D>`, `data_format=<F>` or `temporal=<T>`.
    #[arg(long)]
    pub subset: Option<String>,
    /// Classes reported, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "met,unmet")]
    pub classes: Vec<String>,
    /// Adds per-group accuracy.
    #[arg(long)]
    pub group_by: Option<GroupBy>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Ground-truth labels (JSON lines); inferred from feedback when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Args)]
pub struct ReviewTimesArgs {
    /// Feedback events (JSON lines); the data directory's log when omitted.
    #[arg(long, required_unless_present = "data")]
    pub feedback: Option<PathBuf>,
    #[arg(long, env = "TRIALMATCH_DATA")]
    pub data: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub gateway: GatewayArgs,
    /// Number of records (documents) to sample.
    #[arg(long, default_value_t = 100)]
    pub sample: usize,
    /// Sampling seed; defaults to the gateway seed, then 0.
    #[arg(long)]
    pub sample_seed: Option<u64>,
}

#[derive(Args)]
pub struct GroundTruthArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args)]
pub struct UsageArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Restrict to one model role.
    #[arg(long)]
    pub role: Option<String>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "TRIALMATCH_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Bearer token required on every request.
    #[arg(long, env = "TRIALMATCH_TOKEN", hide_env_values = true)]
    pub token: String,
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Vector count, dimension and pages per patient.
    Stats(DataArgs),
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult = Result<(), CliError>;

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Trial(TrialCommand::Prep(a)) => commands::trial_prep(a),
        Command::Patient(PatientCommand::Ingest(a)) => commands::patient_ingest(a),
        Command::Match(MatchCommand::Run(a)) => commands::match_run(a),
        Command::Eval(EvalCommand::Report(a)) => commands::eval_report(a),
        Command::Eval(EvalCommand::Ablation(a)) => commands::eval_ablation(a),
        Command::Eval(EvalCommand::ReviewTimes(a)) => commands::eval_review_times(a),
        Command::Eval(EvalCommand::ProfileCorpus(a)) => commands::eval_profile(a),
        Command::Eval(EvalCommand::GroundTruth(a)) => commands::eval_ground_truth(a),
        Command::Eval(EvalCommand::Usage(a)) => commands::eval_usage(a),
        Command::Eval(EvalCommand::N2c2(a)) => live::run(a),
        Command::Serve(a) => commands::serve(a),
        Command::Store(StoreCommand::Stats(a)) => commands::store_stats(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
