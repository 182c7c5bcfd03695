//! Per-request and per-task speed metrics, model rankings, Spearman rank
//! correlation, ranking discordance and the parameter-memory estimate.
//!
//! Aggregates over an empty set are `None`, never zero: zero is a legal
//! measurement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::RequestTrace;
use crate::runner::TaskRunRecord;
use crate::suite::TaskKind;
use crate::tokenize::{approx_token_count, TokenCountRecord, TokenSource};

const NS_PER_S: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric `{metric}` is null for: {}", .models.join(", "))]
    NullMetric { metric: String, models: Vec<String> },
    #[error("nothing to rank")]
    EmptyRanking,
    #[error("rank vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("need at least 2 comparable models, got {0}")]
    TooFewModels(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

fn secs(ns: u64) -> f64 {
    ns as f64 / NS_PER_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub case_id: String,
    pub ttft: Option<f64>,
    pub e2e: Option<f64>,
    pub decode_time: Option<f64>,
    pub n_in: TokenCountRecord,
    pub n_out: TokenCountRecord,
    pub per_token_e2e: Option<f64>,
    pub decode_tpot: Option<f64>,
    pub excluded: bool,
}

/// Token counts attached by `resolve_token_counts`; traces that were never
/// resolved fall back to reported usage, then to the byte estimate.
fn output_count(trace: &RequestTrace) -> TokenCountRecord {
    trace.output_tokens.unwrap_or_else(|| match &trace.usage {
        Some(u) => TokenCountRecord {
            count: u.completion_tokens,
            source: TokenSource::ServerUsage,
        },
        None => TokenCountRecord {
            count: approx_token_count(&trace.text),
            source: TokenSource::Approximate,
        },
    })
}

fn input_count(trace: &RequestTrace) -> TokenCountRecord {
    trace.input_tokens.unwrap_or(match &trace.usage {
        Some(u) => TokenCountRecord {
            count: u.prompt_tokens,
            source: TokenSource::ServerUsage,
        },
        None => TokenCountRecord {
            count: 0,
            source: TokenSource::Approximate,
        },
    })
}

pub fn request_metrics(trace: &RequestTrace) -> RequestMetrics {
    let n_in = input_count(trace);
    let n_out = output_count(trace);
    if trace.is_error() {
        return RequestMetrics {
            case_id: trace.case_id.clone(),
            ttft: None,
            e2e: None,
            decode_time: None,
            n_in,
            n_out,
            per_token_e2e: None,
            decode_tpot: None,
            excluded: true,
        };
    }
    let e2e = secs(trace.ts_done.saturating_sub(trace.ts_dispatch));
    let ttft = trace.ts_first_delta.map(|t| secs(t.saturating_sub(trace.ts_dispatch)));
    let decode_time = trace.ts_first_delta.map(|t| secs(trace.ts_done.saturating_sub(t)));
    let per_token_e2e = (n_out.count > 0).then(|| e2e / n_out.count as f64);
    let decode_tpot = match decode_time {
        Some(d) if n_out.count > 1 => Some(d / (n_out.count - 1) as f64),
        _ => None,
    };
    RequestMetrics {
        case_id: trace.case_id.clone(),
        ttft,
        e2e: Some(e2e),
        decode_time,
        n_in,
        n_out,
        per_token_e2e,
        decode_tpot,
        excluded: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub run_id: String,
    pub model_id: String,
    pub task_kind: TaskKind,
    pub batch_size: u32,
    pub wall_time: f64,
    pub total_in: Option<u64>,
    pub total_out: Option<u64>,
    pub mean_time_per_output_token: Option<f64>,
    pub decode_tpot_mean: Option<f64>,
    pub ttft_mean: Option<f64>,
    pub throughput: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

pub fn summarize_task(record: &TaskRunRecord, metrics: &[RequestMetrics]) -> TaskSummary {
    let included: Vec<&RequestMetrics> = metrics.iter().filter(|m| !m.excluded).collect();
    let completed = included.len();
    let failed = metrics.len() - completed;
    let wall_time = secs(record.wall_time_ns());

    let (total_in, total_out) = if included.is_empty() {
        (None, None)
    } else {
        (
            Some(included.iter().map(|m| m.n_in.count).sum()),
            Some(included.iter().map(|m| m.n_out.count).sum::<u64>()),
        )
    };
    let e2e_sum: f64 = included.iter().filter_map(|m| m.e2e).sum();
    let mean_time_per_output_token = match total_out {
        Some(n) if n > 0 => Some(e2e_sum / n as f64),
        _ => None,
    };
    let tpots: Vec<f64> = included.iter().filter_map(|m| m.decode_tpot).collect();
    let decode_tpot_mean = (!tpots.is_empty()).then(|| tpots.iter().sum::<f64>() / tpots.len() as f64);
    let ttfts: Vec<f64> = included.iter().filter_map(|m| m.ttft).collect();
    let ttft_mean = (!ttfts.is_empty()).then(|| ttfts.iter().sum::<f64>() / ttfts.len() as f64);
    let throughput = match total_out {
        Some(n) if wall_time > 0.0 => Some(n as f64 / wall_time),
        _ => None,
    };
    TaskSummary {
        run_id: record.run_id.clone(),
        model_id: record.model_id.clone(),
        task_kind: record.task_kind,
        batch_size: record.config.batch_size,
        wall_time,
        total_in,
        total_out,
        mean_time_per_output_token,
        decode_tpot_mean,
        ttft_mean,
        throughput,
        completed,
        failed,
    }
}

pub fn summarize_record(record: &TaskRunRecord) -> TaskSummary {
    let metrics: Vec<RequestMetrics> = record.traces.iter().map(request_metrics).collect();
    summarize_task(record, &metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    WallTime,
    MeanTimePerOutputToken,
    DecodeTpot,
    Ttft,
    Throughput,
    TotalIn,
    TotalOut,
}

impl MetricKey {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKey::WallTime => "wall_time",
            MetricKey::MeanTimePerOutputToken => "mean_time_per_output_token",
            MetricKey::DecodeTpot => "decode_tpot",
            MetricKey::Ttft => "ttft",
            MetricKey::Throughput => "throughput",
            MetricKey::TotalIn => "total_in",
            MetricKey::TotalOut => "total_out",
        }
    }

    pub fn value(self, s: &TaskSummary) -> Option<f64> {
        match self {
            MetricKey::WallTime => Some(s.wall_time),
            MetricKey::MeanTimePerOutputToken => s.mean_time_per_output_token,
            MetricKey::DecodeTpot => s.decode_tpot_mean,
            MetricKey::Ttft => s.ttft_mean,
            MetricKey::Throughput => s.throughput,
            MetricKey::TotalIn => s.total_in.map(|v| v as f64),
            MetricKey::TotalOut => s.total_out.map(|v| v as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

/// 1-based ascending ranks; tied values share the mean of the positions
/// they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank (i+1 + j+1) / 2
        let shared = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRank {
    pub model_id: String,
    pub value: f64,
    pub rank: f64,
}

/// Ranks summaries by one metric; rank 1 is best under `direction`.
pub fn rank_by(summaries: &[TaskSummary], key: MetricKey, direction: Direction) -> Result<Vec<ModelRank>, MetricsError> {
    if summaries.is_empty() {
        return Err(MetricsError::EmptyRanking);
    }
    let nulls: Vec<String> = summaries
        .iter()
        .filter(|s| key.value(s).is_none())
        .map(|s| s.model_id.clone())
        .collect();
    if !nulls.is_empty() {
        return Err(MetricsError::NullMetric {
            metric: key.as_str().to_string(),
            models: nulls,
        });
    }
    let values: Vec<f64> = summaries.iter().filter_map(|s| key.value(s)).collect();
    let oriented: Vec<f64> = match direction {
        Direction::LowerIsBetter => values.clone(),
        Direction::HigherIsBetter => values.iter().map(|v| -v).collect(),
    };
    Ok(summaries
        .iter()
        .zip(values)
        .zip(average_ranks(&oriented))
        .map(|((s, value), rank)| ModelRank {
            model_id: s.model_id.clone(),
            value,
            rank,
        })
        .collect())
}

/// Pearson correlation of two aligned rank vectors, which is Spearman's rho
/// (exact under ties).
pub fn spearman_rho(ranks_a: &[f64], ranks_b: &[f64]) -> Result<f64, MetricsError> {
    if ranks_a.len() != ranks_b.len() {
        return Err(MetricsError::LengthMismatch(ranks_a.len(), ranks_b.len()));
    }
    let n = ranks_a.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(ranks_a), mean(ranks_b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in ranks_a.iter().zip(ranks_b) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 {
        return Err(MetricsError::ZeroVariance("first ranking"));
    }
    if sbb == 0.0 {
        return Err(MetricsError::ZeroVariance("second ranking"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub model_id: String,
    pub value_a: f64,
    pub value_b: f64,
    pub rank_a: f64,
    pub rank_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingComparison {
    pub task_kind: TaskKind,
    pub batch_size: u32,
    pub metric_a: MetricKey,
    pub metric_b: MetricKey,
    pub entries: Vec<ComparisonEntry>,
    pub spearman_rho: Option<f64>,
    /// Why rho is null, when it is.
    pub rho_note: Option<String>,
    /// Unordered model pairs ranked oppositely by the two metrics; each pair
    /// is stored as (better under `metric_a`, better under `metric_b`).
    pub discordant_pairs: Vec<(String, String)>,
}

/// Compares two lower-is-better metrics across the models of one task ×
/// batch cell. Summaries with a null value for either metric are skipped.
pub fn discordance_report(
    summaries: &[TaskSummary],
    metric_a: MetricKey,
    metric_b: MetricKey,
) -> Result<RankingComparison, MetricsError> {
    let comparable: Vec<TaskSummary> = summaries
        .iter()
        .filter(|s| metric_a.value(s).is_some() && metric_b.value(s).is_some())
        .cloned()
        .collect();
    if comparable.len() < 2 {
        return Err(MetricsError::TooFewModels(comparable.len()));
    }
    let ra = rank_by(&comparable, metric_a, Direction::LowerIsBetter)?;
    let rb = rank_by(&comparable, metric_b, Direction::LowerIsBetter)?;
    let entries: Vec<ComparisonEntry> = ra
        .iter()
        .zip(&rb)
        .map(|(a, b)| ComparisonEntry {
            model_id: a.model_id.clone(),
            value_a: a.value,
            value_b: b.value,
            rank_a: a.rank,
            rank_b: b.rank,
        })
        .collect();
    let mut discordant_pairs = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (x, y) = (&entries[i], &entries[j]);
            let da = x.rank_a - y.rank_a;
            let db = x.rank_b - y.rank_b;
            if da * db < 0.0 {
                let (first, second) = if da < 0.0 { (x, y) } else { (y, x) };
                discordant_pairs.push((first.model_id.clone(), second.model_id.clone()));
            }
        }
    }
    let ranks_a: Vec<f64> = entries.iter().map(|e| e.rank_a).collect();
    let ranks_b: Vec<f64> = entries.iter().map(|e| e.rank_b).collect();
    let (spearman_rho, rho_note) = match spearman_rho(&ranks_a, &ranks_b) {
        Ok(rho) => (Some(rho), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(RankingComparison {
        task_kind: comparable[0].task_kind,
        batch_size: comparable[0].batch_size,
        metric_a,
        metric_b,
        entries,
        spearman_rho,
        rho_note,
        discordant_pairs,
    })
}

/// Per-token time against task wall time, for every task × batch cell with
/// at least two comparable models. Cells are visited in (task, batch) order
/// and models within a cell in model-id order.
pub fn compare_all(summaries: &[TaskSummary]) -> Vec<RankingComparison> {
    let mut cells: BTreeMap<(TaskKind, u32), Vec<TaskSummary>> = BTreeMap::new();
    for s in summaries {
        cells.entry((s.task_kind, s.batch_size)).or_default().push(s.clone());
    }
    cells
        .into_values()
        .filter_map(|mut group| {
            group.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            discordance_report(&group, MetricKey::MeanTimePerOutputToken, MetricKey::WallTime).ok()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub bytes: f64,
    /// Decimal gigabytes (10^9 bytes).
    pub gb: f64,
}

pub fn estimate_model_memory(n_params: f64, bits_per_param: f64) -> Result<MemoryEstimate, MetricsError> {
    if !(n_params.is_finite() && n_params > 0.0) {
        return Err(MetricsError::NonPositive("parameter count"));
    }
    if !(bits_per_param.is_finite() && bits_per_param > 0.0) {
        return Err(MetricsError::NonPositive("bits per parameter"));
    }
    let bytes = n_params * bits_per_param / 8.0;
    Ok(MemoryEstimate { bytes, gb: bytes / 1e9 })
}
