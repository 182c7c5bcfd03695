//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use taskbench_core::client::{RequestTrace, TimeoutPhase, Timeouts, TraceError, Usage};
use taskbench_core::runner::{BatchMode, RunConfig, TaskRunRecord};
use taskbench_core::suite::TaskKind;
use taskbench_core::tokenize::{TokenCountRecord, TokenSource};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Reference segmentation: rescan every adjacent pair each step, look each
/// one up in the merge list by linear search, merge the lowest rank
/// (leftmost on ties).
pub fn naive_bpe(text: &[u8], merges: &[(Vec<u8>, Vec<u8>)]) -> Vec<Vec<u8>> {
    let mut symbols: Vec<Vec<u8>> = text.iter().map(|&b| vec![b]).collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..symbols.len().saturating_sub(1) {
            let rank = merges
                .iter()
                .position(|(l, r)| *l == symbols[i] && *r == symbols[i + 1]);
            if let Some(rank) = rank {
                if best.is_none_or(|(br, _)| rank < br) {
                    best = Some((rank, i));
                }
            }
        }
        match best {
            Some((_, i)) => {
                let right = symbols.remove(i + 1);
                symbols[i].extend(right);
            }
            None => return symbols,
        }
    }
}

/// Random merge list over a small alphabet where every merge uses symbols
/// that already exist (single bytes or earlier merge results).
pub fn random_merges(rng: &mut impl Rng, alphabet: &[u8], count: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut symbols: Vec<Vec<u8>> = alphabet.iter().map(|&b| vec![b]).collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    let mut attempts = 0;
    while merges.len() < count && attempts < count * 50 {
        attempts += 1;
        let l = symbols[rng.random_range(0..symbols.len())].clone();
        let r = symbols[rng.random_range(0..symbols.len())].clone();
        if merges.iter().any(|(a, b)| *a == l && *b == r) {
            continue;
        }
        let joined = [l.as_slice(), r.as_slice()].concat();
        if !symbols.contains(&joined) {
            symbols.push(joined);
        }
        merges.push((l, r));
    }
    merges
}

/// Average ranks by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn counting_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let smaller = values.iter().filter(|w| *w < v).count() as f64;
            let equal = values.iter().filter(|w| *w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson correlation, computed from raw sums.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

pub fn rank_then_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&counting_ranks(a), &counting_ranks(b))
}

fn random_string(rng: &mut impl Rng, max: usize) -> String {
    const POOL: &[&str] = &["a", "Z", " ", "\"", "\\", "\n", "é", "日", "🙂", "{", "}", "#", "\t"];
    let len = rng.random_range(0..=max);
    (0..len).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
}

fn maybe<R: Rng, T>(rng: &mut R, f: impl FnOnce(&mut R) -> T) -> Option<T> {
    if rng.random_bool(0.5) {
        Some(f(rng))
    } else {
        None
    }
}

fn random_count(rng: &mut impl Rng) -> TokenCountRecord {
    let source = match rng.random_range(0..3) {
        0 => TokenSource::ServerUsage,
        1 => TokenSource::ClientBpe,
        _ => TokenSource::Approximate,
    };
    TokenCountRecord {
        count: rng.random(),
        source,
    }
}

fn random_error(rng: &mut impl Rng) -> TraceError {
    let message = random_string(rng, 12);
    match rng.random_range(0..5) {
        0 => TraceError::ConnectFailure { message },
        1 => TraceError::Timeout {
            phase: TimeoutPhase::Connect,
            message,
        },
        2 => TraceError::Timeout {
            phase: TimeoutPhase::Read,
            message,
        },
        3 => TraceError::HttpStatus {
            code: rng.random_range(100..600),
            message,
        },
        _ => TraceError::StreamTruncated { message },
    }
}

pub fn random_trace(rng: &mut impl Rng) -> RequestTrace {
    let ts_dispatch: u64 = rng.random_range(0..u64::MAX / 4);
    let deltas = rng.random_range(0..6);
    let mut t = ts_dispatch;
    let delta_timestamps: Vec<u64> = (0..deltas)
        .map(|_| {
            t += rng.random_range(0..1_000_000_000);
            t
        })
        .collect();
    RequestTrace {
        case_id: random_string(rng, 10),
        model_id: random_string(rng, 8),
        pass: rng.random_range(0..4),
        ts_dispatch,
        ts_first_delta: delta_timestamps.first().copied(),
        ts_done: t + rng.random_range(0..1_000),
        delta_timestamps,
        text: random_string(rng, 24),
        usage: maybe(rng, |r| Usage {
            prompt_tokens: r.random(),
            completion_tokens: r.random(),
        }),
        input_tokens: maybe(rng, |r| random_count(r)),
        output_tokens: maybe(rng, |r| random_count(r)),
        finish_reason: maybe(rng, |r| random_string(r, 6)),
        error: maybe(rng, |r| random_error(r)),
        frame_errors: (0..rng.random_range(0..3)).map(|_| random_string(rng, 8)).collect(),
    }
}

pub fn random_record(rng: &mut impl Rng) -> TaskRunRecord {
    let kind = TaskKind::ALL[rng.random_range(0..3)];
    let wall_start: u64 = rng.random_range(0..u64::MAX / 2);
    TaskRunRecord {
        run_id: random_string(rng, 16),
        tool_version: random_string(rng, 5),
        model_id: random_string(rng, 12),
        task_kind: kind,
        config: RunConfig {
            batch_size: rng.random_range(1..64),
            mode: if rng.random_bool(0.5) { BatchMode::Wave } else { BatchMode::Window },
            repetitions: rng.random_range(1..4),
            warmup_count: rng.random_range(0..4),
            timeouts: Timeouts {
                connect_ms: rng.random(),
                read_ms: rng.random(),
            },
            output_dir: maybe(rng, |r| PathBuf::from(random_string(r, 6).replace('\0', ""))),
        },
        wall_start,
        wall_end: wall_start + rng.random_range(0..u64::MAX / 4),
        traces: (0..rng.random_range(0..5)).map(|_| random_trace(rng)).collect(),
    }
}
