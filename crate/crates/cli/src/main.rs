use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};
use taskbench_core::suite::TaskKind;

mod commands;
mod params;

#[derive(Debug, Parser)]
#[command(name = "taskbench", version, about = "Measure how fast LLM endpoints complete tasks, not just tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a question dataset into prompt cases for each task.
    SuiteBuild(SuiteBuildArgs),
    /// Stream every prompt case through one or more models and record traces.
    Run(RunArgs),
    /// Summarize a directory of trace files into a summary document.
    Analyze(AnalyzeArgs),
    /// Render a summary document as CSV, markdown or SVG.
    Report(ReportArgs),
    /// Serve deterministic mock models over the chat completions protocol.
    MockServe(MockServeArgs),
    /// Estimate the memory needed to hold a model's weights.
    Mem(MemArgs),
}

fn task_parser() -> impl TypedValueParser<Value = TaskKind> {
    PossibleValuesParser::new(TaskKind::ALL.map(TaskKind::as_str))
        .map(|s| s.parse::<TaskKind>().expect("restricted to known task names"))
}

#[derive(Debug, Args)]
struct SuiteBuildArgs {
    /// Question dataset, one JSON record per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Tasks to render (comma separated).
    #[arg(long, value_delimiter = ',', value_parser = task_parser(), default_value = "answer_choice,paraphrase,open_answer")]
    tasks: Vec<TaskKind>,
    /// Template document replacing the built-in templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Suite file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Wave,
    Window,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Suite file produced by suite-build.
    #[arg(long)]
    suite: PathBuf,
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long)]
    endpoint: String,
    /// Model id to benchmark (repeatable).
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Concurrent requests per batch (repeatable).
    #[arg(long = "batch", default_value = "1", value_parser = clap::value_parser!(u32).range(1..))]
    batches: Vec<u32>,
    /// wave: each batch finishes before the next starts; window: keep up to B in flight.
    #[arg(long, value_enum, default_value = "wave")]
    mode: ModeArg,
    /// Full passes over the case list.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    reps: u32,
    /// Untimed requests sent before each cell.
    #[arg(long, default_value_t = 1)]
    warmup: u32,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Do not send a seed.
    #[arg(long, conflicts_with = "seed")]
    no_seed: bool,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    auth_env: Option<String>,
    /// Merge table for client-side token counts when the server reports none.
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Restrict the run to these tasks (comma separated).
    #[arg(long, value_delimiter = ',', value_parser = task_parser())]
    tasks: Vec<TaskKind>,
    /// Connect timeout in seconds.
    #[arg(long, default_value_t = 10.0)]
    connect_timeout: f64,
    /// Maximum silence between stream chunks in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    /// Directory receiving one trace file per model, task and batch size.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Directory of trace files.
    #[arg(long)]
    runs: PathBuf,
    /// Summary document to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
    Svg,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Summary document produced by analyze.
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MockServeArgs {
    /// Profile document ("mockprofiles/v1").
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to listen on; 0 picks a free port.
    #[arg(long, default_value_t = 8000)]
    port: u16,
    /// Multiplier in (0, 1] applied to every profile delay.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
}

#[derive(Debug, Args)]
struct MemArgs {
    /// Parameter count, e.g. 7e9 or 70000000000.
    #[arg(long)]
    params: String,
    /// Bits per parameter.
    #[arg(long, default_value_t = 16.0)]
    bits: f64,
}

/// Process outcome mapped onto the documented exit codes.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .without_time()
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::SuiteBuild(args) => commands::suite_build(args),
        Command::Run(args) => commands::run(args),
        Command::Analyze(args) => commands::analyze(args),
        Command::Report(args) => commands::report(args),
        Command::MockServe(args) => commands::mock_serve(args),
        Command::Mem(args) => commands::mem(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
