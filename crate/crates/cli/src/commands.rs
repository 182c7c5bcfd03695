use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use taskbench_core::client::{
    is_env_var_name, Clock, CountingConfig, EndpointClient, ModelTarget, MonotonicClock, RequestDefaults, Timeouts,
};
use taskbench_core::metrics::{estimate_model_memory, TaskSummary};
use taskbench_core::mockserver::{load_profiles, MockError, MockServer, TimeScale};
use taskbench_core::report::{emit_csv, emit_markdown, emit_panel_svg, emit_summary_document, ReportBundle, ReportError};
use taskbench_core::runner::{load_run_dir, run_matrix, BatchMode, LoadError, RunConfig, RunError};
use taskbench_core::suite::{
    build_suite, default_templates, load_questions, load_templates, SuiteError, TaskKind, TaskSuite,
};
use taskbench_core::tokenize::{load_merges, TokenizeError};

use crate::params::parse_param_count;
use crate::{AnalyzeArgs, Failure, FormatArg, MemArgs, MockServeArgs, ModeArg, ReportArgs, RunArgs, SuiteBuildArgs};

type Outcome = Result<(), Failure>;

fn suite_failure(e: SuiteError) -> Failure {
    match e {
        SuiteError::Io { .. } => Failure::runtime(e.to_string()),
        _ => Failure::validation(e.to_string()),
    }
}

fn load_failure(e: LoadError) -> Failure {
    match e {
        LoadError::Io { .. } => Failure::runtime(e.to_string()),
        _ => Failure::validation(e.to_string()),
    }
}

fn report_failure(e: ReportError) -> Failure {
    match e {
        ReportError::Io { .. } => Failure::runtime(e.to_string()),
        _ => Failure::validation(e.to_string()),
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn create_parent(path: &Path) -> Outcome {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => create_dir(parent),
        None => Ok(()),
    }
}

pub fn suite_build(args: SuiteBuildArgs) -> Outcome {
    let templates = match &args.templates {
        Some(path) => load_templates(path).map_err(suite_failure)?,
        None => default_templates(),
    };
    let questions = load_questions(&args.dataset).map_err(suite_failure)?;
    let kinds: BTreeSet<TaskKind> = args.tasks.iter().copied().collect();
    let mut suite = build_suite(&questions, &kinds, &templates).map_err(suite_failure)?;

    // Rebuilding an unchanged suite keeps the existing file as is.
    if let Ok(existing) = TaskSuite::load(&args.out) {
        if existing.suite_id == suite.suite_id && existing.tool_version == suite.tool_version && existing.cases == suite.cases {
            suite.created_at = existing.created_at;
        }
    }
    create_parent(&args.out)?;
    suite.save(&args.out).map_err(suite_failure)?;

    for (kind, cases) in &suite.cases {
        tracing::info!("{kind}: {} cases", cases.len());
    }
    println!("{} cases ({} per task)", suite.total_cases(), questions.len());
    Ok(())
}

/// `host:port` of an http(s) base url.
fn endpoint_authority(url: &str) -> Result<(String, u16), String> {
    let (scheme, rest) = url.split_once("://").ok_or_else(|| format!("`{url}` has no scheme"))?;
    let default_port = match scheme {
        "http" => 80,
        "https" => 443,
        _ => return Err(format!("`{url}`: only http and https endpoints are supported")),
    };
    let authority = rest.split(['/', '?', '#']).next().unwrap_or_default();
    let host_port = authority.rsplit_once('@').map_or(authority, |(_, hp)| hp);
    let (host, port) = if let Some(stripped) = host_port.strip_prefix('[') {
        let (host, after) = stripped.split_once(']').ok_or_else(|| format!("`{url}`: unterminated IPv6 host"))?;
        (host, after.strip_prefix(':'))
    } else {
        match host_port.rsplit_once(':') {
            Some((h, p)) => (h, Some(p)),
            None => (host_port, None),
        }
    };
    if host.is_empty() {
        return Err(format!("`{url}` has no host"));
    }
    let port = match port {
        Some(p) => p.parse().map_err(|_| format!("`{url}`: bad port `{p}`"))?,
        None => default_port,
    };
    Ok((host.to_string(), port))
}

fn preflight(url: &str, timeout: Duration) -> Outcome {
    let (host, port) = endpoint_authority(url).map_err(Failure::usage)?;
    let addrs: Vec<SocketAddr> = (host.as_str(), port)
        .to_socket_addrs()
        .map_err(|e| Failure::runtime(format!("cannot resolve {host}: {e}")))?
        .collect();
    for addr in &addrs {
        if TcpStream::connect_timeout(addr, timeout).is_ok() {
            return Ok(());
        }
    }
    Err(Failure::runtime(format!("endpoint {url} is unreachable ({host}:{port})")))
}

fn seconds_to_ms(flag: &str, secs: f64) -> Result<u64, Failure> {
    if secs.is_finite() && secs > 0.0 {
        Ok((secs * 1e3).ceil() as u64)
    } else {
        Err(Failure::usage(format!("--{flag} must be a positive number of seconds")))
    }
}

pub fn run(args: RunArgs) -> Outcome {
    if let Some(var) = &args.auth_env {
        if !is_env_var_name(var) {
            return Err(Failure::usage(
                "--auth-env takes the name of an environment variable holding the key, never the key itself",
            ));
        }
        if std::env::var_os(var).is_none() {
            return Err(Failure::usage(format!("environment variable {var} is not set")));
        }
    }
    let timeouts = Timeouts {
        connect_ms: seconds_to_ms("connect-timeout", args.connect_timeout)?,
        read_ms: seconds_to_ms("timeout", args.timeout)?,
    };
    let defaults = RequestDefaults {
        temperature: args.temperature,
        max_output_tokens: args.max_tokens,
        seed: (!args.no_seed).then_some(args.seed),
    };
    let targets = args
        .models
        .iter()
        .map(|model| {
            let target = ModelTarget::new(&args.endpoint, model).map_err(|e| Failure::usage(e.to_string()))?;
            let target = match &args.auth_env {
                Some(var) => target.with_auth_env(var).map_err(|e| Failure::usage(e.to_string()))?,
                None => target,
            };
            Ok(ModelTarget { defaults: defaults.clone(), ..target })
        })
        .collect::<Result<Vec<_>, Failure>>()?;

    let mut suite = TaskSuite::load(&args.suite).map_err(suite_failure)?;
    if !args.tasks.is_empty() {
        if let Some(missing) = args.tasks.iter().find(|k| !suite.cases.contains_key(k)) {
            return Err(Failure::usage(format!("the suite has no {missing} cases")));
        }
        suite.cases.retain(|k, _| args.tasks.contains(k));
    }
    let merge_table = match &args.merges {
        Some(path) => Some(Arc::new(load_merges(path).map_err(|e| match e {
            TokenizeError::Io { .. } => Failure::runtime(e.to_string()),
            _ => Failure::validation(e.to_string()),
        })?)),
        None => None,
    };
    let counting = CountingConfig {
        merge_table,
        ..CountingConfig::default()
    };

    preflight(&args.endpoint, Duration::from_millis(timeouts.connect_ms))?;
    create_dir(&args.out)?;

    let mode = match args.mode {
        ModeArg::Wave => BatchMode::Wave,
        ModeArg::Window => BatchMode::Window,
    };
    let configs: Vec<RunConfig> = args
        .batches
        .iter()
        .map(|&batch_size| RunConfig {
            batch_size,
            mode,
            repetitions: args.reps,
            warmup_count: args.warmup,
            timeouts,
            output_dir: Some(args.out.clone()),
        })
        .collect();

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    let client = EndpointClient::new(timeouts);
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let set = runtime
        .block_on(run_matrix(&client, &suite, &targets, &configs, &counting, clock))
        .map_err(|e| match e {
            RunError::Config(_) => Failure::usage(e.to_string()),
            RunError::Empty(_) => Failure::validation(e.to_string()),
            RunError::Persist(inner) => load_failure(inner),
        })?;

    for path in &set.files {
        println!("{}", path.display());
    }
    for model in &set.flagged_models {
        tracing::warn!("every request to {model} failed");
    }
    if set.flagged_models.len() == targets.len() {
        return Err(Failure::runtime("every request failed for every model"));
    }
    Ok(())
}

pub fn analyze(args: AnalyzeArgs) -> Outcome {
    let records = load_run_dir(&args.runs).map_err(load_failure)?;
    if records.is_empty() {
        return Err(Failure::validation(format!("no run records found in {}", args.runs.display())));
    }
    let bundle = ReportBundle::from_records(&records);
    create_parent(&args.out)?;
    emit_summary_document(&bundle, &args.out).map_err(report_failure)?;

    println!("{} runs summarized into {}", bundle.runs.len(), args.out.display());
    for c in &bundle.comparisons {
        let rho = c.spearman_rho.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
        println!(
            "{} (batch {}): spearman rho {} vs {} = {rho}, {} inversion(s)",
            c.task_kind,
            c.batch_size,
            c.metric_a.as_str(),
            c.metric_b.as_str(),
            c.discordant_pairs.len()
        );
        for (per_token, complete) in &c.discordant_pairs {
            println!("  {per_token} is faster per token but {complete} finishes the task sooner");
        }
    }
    Ok(())
}

fn svg_name(task: TaskKind, batch: u32) -> String {
    format!("panels_{task}_b{batch}.svg")
}

pub fn report(args: ReportArgs) -> Outcome {
    let bundle = ReportBundle::load(&args.summary).map_err(report_failure)?;
    create_dir(&args.out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    match args.format {
        FormatArg::Csv => {
            let path = args.out.join("summary.csv");
            emit_csv(&bundle.summaries, &path).map_err(report_failure)?;
            written.push(path);
        }
        FormatArg::Md => {
            let path = args.out.join("report.md");
            emit_markdown(&bundle, &path).map_err(report_failure)?;
            written.push(path);
        }
        FormatArg::Svg => {
            if bundle.summaries.is_empty() {
                return Err(Failure::validation("the summary document has no summaries to plot"));
            }
            let mut cells: std::collections::BTreeMap<(TaskKind, u32), Vec<TaskSummary>> = Default::default();
            for s in &bundle.summaries {
                cells.entry((s.task_kind, s.batch_size)).or_default().push(s.clone());
            }
            for ((task, batch), summaries) in cells {
                let path = args.out.join(svg_name(task, batch));
                emit_panel_svg(&summaries, &path).map_err(report_failure)?;
                written.push(path);
            }
        }
    }
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn mock_serve(args: MockServeArgs) -> Outcome {
    let scale = TimeScale::new(args.time_scale).map_err(|e| Failure::usage(e.to_string()))?;
    let profiles = load_profiles(&args.profiles).map_err(|e| match e {
        MockError::Read { .. } => Failure::runtime(e.to_string()),
        _ => Failure::validation(e.to_string()),
    })?;
    let addr = (args.host.as_str(), args.port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| Failure::usage(format!("cannot resolve host `{}`", args.host)))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    runtime.block_on(async {
        let models: Vec<String> = profiles.iter().map(|p| p.model_id.clone()).collect();
        let server = MockServer::start(profiles, addr, scale)
            .await
            .map_err(|e| Failure::runtime(e.to_string()))?;
        println!("listening on {}", server.base_url());
        let _ = std::io::stdout().flush();
        tracing::info!("serving {} at time scale {}", models.join(", "), scale.factor());
        tokio::signal::ctrl_c()
            .await
            .map_err(|e| Failure::runtime(format!("cannot wait for ctrl-c: {e}")))?;
        tracing::info!("shutting down");
        server.shutdown().await.map_err(|e| Failure::runtime(e.to_string()))
    })
}

pub fn mem(args: MemArgs) -> Outcome {
    let params = parse_param_count(&args.params).map_err(Failure::usage)?;
    let estimate = estimate_model_memory(params as f64, args.bits).map_err(|e| Failure::usage(e.to_string()))?;
    println!("{:.2} GB", estimate.gb);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn authority_forms() {
        assert_eq!(endpoint_authority("http://127.0.0.1:8000"), Ok(("127.0.0.1".into(), 8000)));
        assert_eq!(endpoint_authority("https://api.example.com/v1"), Ok(("api.example.com".into(), 443)));
        assert_eq!(endpoint_authority("http://user:pw@host"), Ok(("host".into(), 80)));
        assert_eq!(endpoint_authority("http://[::1]:9000/x"), Ok(("::1".into(), 9000)));
        assert!(endpoint_authority("ftp://host").is_err());
        assert!(endpoint_authority("http://host:port").is_err());
    }
}
