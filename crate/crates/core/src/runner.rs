//! Executes a task's prompt cases against one model under a batch policy and
//! records the task wall clock.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::client::{
    execute_request, resolve_token_counts, Clock, CountingConfig, EndpointClient, ModelTarget, RequestSpec,
    RequestTrace, Timeouts,
};
use crate::suite::{ChatMessage, PromptCase, Role, TaskKind, TaskSuite};

pub const RUNMETA_SCHEMA: &str = "runmeta/v1";
pub const TRACE_SCHEMA: &str = "trace/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Consecutive groups of B; a group starts only after the previous one
    /// has fully completed.
    Wave,
    /// At most B requests in flight; each completion admits the next case.
    Window,
}

impl BatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::Wave => "wave",
            BatchMode::Window => "window",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch_size: u32,
    pub mode: BatchMode,
    pub repetitions: u32,
    pub warmup_count: u32,
    pub timeouts: Timeouts,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            mode: BatchMode::Wave,
            repetitions: 1,
            warmup_count: 0,
            timeouts: Timeouts::default(),
            output_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("nothing to run: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Persist(#[from] LoadError),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.batch_size == 0 {
            return Err(RunError::Config("batch size must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(RunError::Config("repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRunRecord {
    pub run_id: String,
    pub tool_version: String,
    pub model_id: String,
    pub task_kind: TaskKind,
    pub config: RunConfig,
    pub wall_start: u64,
    pub wall_end: u64,
    pub traces: Vec<RequestTrace>,
}

impl TaskRunRecord {
    pub fn wall_time_ns(&self) -> u64 {
        self.wall_end.saturating_sub(self.wall_start)
    }

    pub fn all_failed(&self) -> bool {
        !self.traces.is_empty() && self.traces.iter().all(RequestTrace::is_error)
    }
}

pub fn run_id(model_id: &str, task: TaskKind, config: &RunConfig) -> String {
    let model: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') { c } else { '_' })
        .collect();
    format!("{model}__{task}__b{}-{}", config.batch_size, config.mode.as_str())
}

const WARMUP_PROMPT: &str = "Reply with the single word OK.";

/// Issues `n` short throwaway requests. Failures are logged and counted but
/// never abort the run.
pub async fn warmup(client: &EndpointClient, target: &ModelTarget, n: u32, clock: &dyn Clock) -> u32 {
    let spec = RequestSpec {
        messages: vec![ChatMessage {
            role: Role::User,
            content: WARMUP_PROMPT.into(),
        }],
        max_output_tokens: 8,
        temperature: target.defaults.temperature,
        seed: target.defaults.seed,
    };
    let mut failures = 0;
    for i in 0..n {
        let trace = execute_request(client, target, &spec, &format!("warmup#{i}"), 0, clock).await;
        if let Some(err) = trace.error {
            failures += 1;
            tracing::warn!(model = %target.model_id, "warmup request {i} failed: {err:?}");
        }
    }
    failures
}

fn spawn_request(
    client: &EndpointClient,
    target: &Arc<ModelTarget>,
    case: &PromptCase,
    pass: u32,
    clock: &Arc<dyn Clock>,
) -> tokio::task::JoinHandle<RequestTrace> {
    let client = client.clone();
    let target = target.clone();
    let clock = clock.clone();
    let spec = RequestSpec::from_case(case, &target.defaults);
    let case_id = case.case_id.clone();
    tokio::spawn(async move { execute_request(&client, &target, &spec, &case_id, pass, clock.as_ref()).await })
}

/// Runs every case (times `repetitions`) and returns the raw traces in
/// dispatch order. Token counts are not resolved here so that the wall clock
/// covers request execution only.
pub async fn execute_task_run(
    client: &EndpointClient,
    cases: &[PromptCase],
    target: &ModelTarget,
    config: &RunConfig,
    clock: Arc<dyn Clock>,
) -> Result<TaskRunRecord, RunError> {
    config.validate()?;
    let Some(first) = cases.first() else {
        return Err(RunError::Empty("no prompt cases"));
    };
    let task_kind = first.task_kind;
    let target = Arc::new(target.clone());
    let batch = config.batch_size as usize;
    let mut traces = Vec::with_capacity(cases.len() * config.repetitions as usize);

    let wall_start = clock.now_ns();
    for pass in 0..config.repetitions {
        match config.mode {
            BatchMode::Wave => {
                for group in cases.chunks(batch) {
                    let handles: Vec<_> = group
                        .iter()
                        .map(|case| spawn_request(client, &target, case, pass, &clock))
                        .collect();
                    for h in handles {
                        traces.push(h.await.expect("request task panicked"));
                    }
                }
            }
            BatchMode::Window => {
                let slots = Arc::new(Semaphore::new(batch));
                let mut handles = Vec::with_capacity(cases.len());
                for case in cases {
                    let permit = slots.clone().acquire_owned().await.expect("semaphore is never closed");
                    let inner = spawn_request(client, &target, case, pass, &clock);
                    handles.push(tokio::spawn(async move {
                        let trace = inner.await;
                        drop(permit);
                        trace
                    }));
                }
                for h in handles {
                    traces.push(h.await.expect("window task panicked").expect("request task panicked"));
                }
            }
        }
    }
    let wall_end = clock.now_ns();

    Ok(TaskRunRecord {
        run_id: run_id(&target.model_id, task_kind, config),
        tool_version: crate::TOOL_VERSION.to_string(),
        model_id: target.model_id.clone(),
        task_kind,
        config: config.clone(),
        wall_start,
        wall_end,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    pub records: Vec<TaskRunRecord>,
    /// Models for which every request in every cell failed.
    pub flagged_models: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Runs every model × task × config cell strictly one after another, in
/// that nesting order, resolving token counts and persisting each record as
/// soon as its cell finishes.
pub async fn run_matrix(
    client: &EndpointClient,
    suite: &TaskSuite,
    targets: &[ModelTarget],
    configs: &[RunConfig],
    counting: &CountingConfig,
    clock: Arc<dyn Clock>,
) -> Result<RunSet, RunError> {
    if suite.total_cases() == 0 {
        return Err(RunError::Empty("suite has no cases"));
    }
    if targets.is_empty() {
        return Err(RunError::Empty("no model targets"));
    }
    if configs.is_empty() {
        return Err(RunError::Empty("no run configurations"));
    }
    configs.iter().try_for_each(RunConfig::validate)?;

    let mut records = Vec::new();
    let mut files = Vec::new();
    let mut failed_cells: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for target in targets {
        for (task, cases) in &suite.cases {
            if cases.is_empty() {
                continue;
            }
            let by_id: BTreeMap<&str, &PromptCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
            for config in configs {
                let failures = warmup(client, target, config.warmup_count, clock.as_ref()).await;
                if failures > 0 {
                    tracing::warn!("{failures} of {} warmup requests failed for {}", config.warmup_count, target.model_id);
                }
                tracing::info!(
                    "running {} / {task} / batch {} ({}, {} cases x {})",
                    target.model_id,
                    config.batch_size,
                    config.mode.as_str(),
                    cases.len(),
                    config.repetitions
                );
                let mut record = execute_task_run(client, cases, target, config, clock.clone()).await?;
                record.traces = record
                    .traces
                    .into_iter()
                    .map(|t| {
                        let case = by_id[t.case_id.as_str()];
                        resolve_token_counts(t, case, counting)
                    })
                    .collect();
                let failed = record.traces.iter().filter(|t| t.is_error()).count();
                let cell = failed_cells.entry(target.model_id.clone()).or_default();
                cell.0 += failed;
                cell.1 += record.traces.len();
                if failed > 0 {
                    tracing::warn!("{failed} of {} requests failed in {}", record.traces.len(), record.run_id);
                }
                if let Some(dir) = &config.output_dir {
                    let path = dir.join(format!("{}.jsonl", record.run_id));
                    persist_traces(&record, &path)?;
                    files.push(path);
                }
                records.push(record);
            }
        }
    }
    let flagged_models = failed_cells
        .into_iter()
        .filter(|(_, (failed, total))| *total > 0 && failed == total)
        .map(|(model, _)| model)
        .collect();
    Ok(RunSet {
        records,
        flagged_models,
        files,
    })
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: unsupported schema `{found}` (supported: {supported})")]
    SchemaMismatch {
        line: usize,
        found: String,
        supported: &'static str,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("file truncated at line {line} ({} traces recovered, last good line {last_good_line})", .recovered.traces.len())]
    Truncated {
        line: usize,
        last_good_line: usize,
        recovered: Box<TaskRunRecord>,
    },
    #[error("file is empty")]
    Empty,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    schema: String,
    run_id: String,
    tool_version: String,
    model_id: String,
    task_kind: TaskKind,
    config: RunConfig,
    wall_start: u64,
    wall_end: u64,
    trace_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    schema: String,
    #[serde(flatten)]
    trace: RequestTrace,
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema: String,
}

/// Writes the JSON-lines encoding: one `runmeta/v1` line, then one
/// `trace/v1` line per trace.
pub fn write_record(record: &TaskRunRecord, mut out: impl Write) -> std::io::Result<()> {
    let meta = MetaLine {
        schema: RUNMETA_SCHEMA.into(),
        run_id: record.run_id.clone(),
        tool_version: record.tool_version.clone(),
        model_id: record.model_id.clone(),
        task_kind: record.task_kind,
        config: record.config.clone(),
        wall_start: record.wall_start,
        wall_end: record.wall_end,
        trace_count: record.traces.len(),
    };
    serde_json::to_writer(&mut out, &meta)?;
    out.write_all(b"\n")?;
    for trace in &record.traces {
        let line = TraceLine {
            schema: TRACE_SCHEMA.into(),
            trace: trace.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn record_to_string(record: &TaskRunRecord) -> String {
    let mut buf = Vec::new();
    write_record(record, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("json is utf-8")
}

fn check_schema(line_no: usize, line: &str, expected: &'static str) -> Result<(), LoadError> {
    let probe: SchemaProbe = serde_json::from_str(line).map_err(|e| LoadError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    if probe.schema != expected {
        return Err(LoadError::SchemaMismatch {
            line: line_no,
            found: probe.schema,
            supported: expected,
        });
    }
    Ok(())
}

/// Parses a trace file. A final line without its newline that fails to parse
/// (or a trace count short of the one announced in the metadata) is reported
/// as truncation together with every trace read before it.
pub fn parse_record(text: &str) -> Result<TaskRunRecord, LoadError> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let Some(first) = lines.first() else {
        return Err(LoadError::Empty);
    };
    let last_index = lines.len() - 1;
    let meta: MetaLine = match serde_json::from_str(first) {
        Ok(m) => m,
        Err(e) => {
            check_schema(1, first, RUNMETA_SCHEMA)?;
            return Err(LoadError::Malformed {
                line: 1,
                message: e.to_string(),
            });
        }
    };
    if meta.schema != RUNMETA_SCHEMA {
        return Err(LoadError::SchemaMismatch {
            line: 1,
            found: meta.schema,
            supported: RUNMETA_SCHEMA,
        });
    }
    let mut record = TaskRunRecord {
        run_id: meta.run_id,
        tool_version: meta.tool_version,
        model_id: meta.model_id,
        task_kind: meta.task_kind,
        config: meta.config,
        wall_start: meta.wall_start,
        wall_end: meta.wall_end,
        traces: Vec::with_capacity(meta.trace_count),
    };
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        match serde_json::from_str::<TraceLine>(line) {
            Ok(t) if t.schema == TRACE_SCHEMA => record.traces.push(t.trace),
            Ok(t) => {
                return Err(LoadError::SchemaMismatch {
                    line: line_no,
                    found: t.schema,
                    supported: TRACE_SCHEMA,
                })
            }
            Err(e) => {
                if idx == last_index && !complete {
                    return Err(LoadError::Truncated {
                        line: line_no,
                        last_good_line: line_no - 1,
                        recovered: Box::new(record),
                    });
                }
                check_schema(line_no, line, TRACE_SCHEMA)?;
                return Err(LoadError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                });
            }
        }
    }
    if record.traces.len() < meta.trace_count {
        let last = lines.len();
        return Err(LoadError::Truncated {
            line: last + 1,
            last_good_line: last,
            recovered: Box::new(record),
        });
    }
    Ok(record)
}

pub fn persist_traces(record: &TaskRunRecord, path: &Path) -> Result<(), LoadError> {
    let io_err = |source| LoadError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = fs::File::create(path).map_err(io_err)?;
    write_record(record, BufWriter::new(file)).map_err(io_err)
}

pub fn load_traces(path: &Path) -> Result<TaskRunRecord, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_record(&text)
}

/// Every `*.jsonl` trace file in a directory, sorted by file name.
pub fn load_run_dir(dir: &Path) -> Result<Vec<TaskRunRecord>, LoadError> {
    let io_err = |source| LoadError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_traces(p)).collect()
}
