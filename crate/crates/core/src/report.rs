//! Summary document, CSV, markdown and three-panel SVG emitters.
//!
//! Every emitter is a pure function of its input: identical input gives
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compare_all, summarize_record, RankingComparison, TaskSummary};
use crate::runner::{BatchMode, TaskRunRecord};
use crate::suite::TaskKind;

pub const REPORT_SCHEMA: &str = "report/v1";

pub const CSV_HEADER: [&str; 11] = [
    "model",
    "task",
    "batch",
    "wall_time_s",
    "mean_time_per_output_token_s",
    "decode_tpot_s",
    "throughput_tok_s",
    "total_in",
    "total_out",
    "completed",
    "failed",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid report bundle: {0}")]
    Invalid(String),
    #[error("no summaries to plot")]
    EmptyInput,
    #[error("summaries span several tasks: {0}")]
    MixedTasks(String),
    #[error("malformed summary document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub model_id: String,
    pub task_kind: TaskKind,
    pub batch_size: u32,
    pub mode: BatchMode,
    pub repetitions: u32,
    pub tool_version: String,
    pub trace_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema: String,
    pub tool_version: String,
    pub runs: Vec<RunMeta>,
    pub summaries: Vec<TaskSummary>,
    pub comparisons: Vec<RankingComparison>,
}

impl Default for ReportBundle {
    fn default() -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            tool_version: crate::TOOL_VERSION.to_string(),
            runs: Vec::new(),
            summaries: Vec::new(),
            comparisons: Vec::new(),
        }
    }
}

fn summary_order(s: &TaskSummary) -> (TaskKind, u32, String, String) {
    (s.task_kind, s.batch_size, s.model_id.clone(), s.run_id.clone())
}

impl ReportBundle {
    /// Summarizes every record and compares per-token time with wall time in
    /// each task × batch cell.
    pub fn from_records(records: &[TaskRunRecord]) -> Self {
        let mut runs: Vec<RunMeta> = records
            .iter()
            .map(|r| RunMeta {
                run_id: r.run_id.clone(),
                model_id: r.model_id.clone(),
                task_kind: r.task_kind,
                batch_size: r.config.batch_size,
                mode: r.config.mode,
                repetitions: r.config.repetitions,
                tool_version: r.tool_version.clone(),
                trace_count: r.traces.len(),
            })
            .collect();
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        let mut summaries: Vec<TaskSummary> = records.iter().map(summarize_record).collect();
        summaries.sort_by_key(summary_order);
        let comparisons = compare_all(&summaries);
        Self {
            runs,
            summaries,
            comparisons,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.schema != REPORT_SCHEMA {
            return Err(ReportError::Invalid(format!(
                "schema `{}` (supported: {REPORT_SCHEMA})",
                self.schema
            )));
        }
        let ids: BTreeSet<&str> = self.runs.iter().map(|r| r.run_id.as_str()).collect();
        if let Some(orphan) = self.summaries.iter().find(|s| !ids.contains(s.run_id.as_str())) {
            return Err(ReportError::Invalid(format!(
                "summary for {} references missing run `{}`",
                orphan.model_id, orphan.run_id
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let bundle: Self = serde_json::from_str(text).map_err(|e| ReportError::Document(e.to_string()))?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn emit_summary_document(bundle: &ReportBundle, path: &Path) -> Result<(), ReportError> {
    bundle.validate()?;
    write_file(path, bundle.to_json().as_bytes())
}

/// Fixed-point seconds with at least six decimals and at least nine
/// significant digits.
pub fn format_seconds(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.6}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).clamp(6, 24) as usize;
    format!("{v:.decimals$}")
}

fn opt(v: Option<f64>) -> String {
    v.map(format_seconds).unwrap_or_default()
}

fn opt_int(v: Option<u64>) -> String {
    v.map(|n| n.to_string()).unwrap_or_default()
}

pub fn csv_string(summaries: &[TaskSummary]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for s in summaries {
        w.write_record([
            s.model_id.clone(),
            s.task_kind.to_string(),
            s.batch_size.to_string(),
            format_seconds(s.wall_time),
            opt(s.mean_time_per_output_token),
            opt(s.decode_tpot_mean),
            opt(s.throughput),
            opt_int(s.total_in),
            opt_int(s.total_out),
            s.completed.to_string(),
            s.failed.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn emit_csv(summaries: &[TaskSummary], path: &Path) -> Result<(), ReportError> {
    write_file(path, csv_string(summaries).as_bytes())
}

fn md_cell(text: &str) -> String {
    text.replace('|', "\\|")
}

fn md_num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn md_int(v: Option<u64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

/// The sentence used for one discordant pair.
pub fn inversion_sentence(faster_per_token: &str, faster_to_complete: &str) -> String {
    format!(
        "- **{}** is fastest per token but not fastest to complete the task (vs **{}**)",
        md_cell(faster_per_token),
        md_cell(faster_to_complete)
    )
}

pub fn markdown_string(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Task speed report\n");
    let _ = writeln!(out, "Generated by taskbench {} ({} runs).\n", bundle.tool_version, bundle.runs.len());

    let mut cells: BTreeMap<(TaskKind, u32), Vec<&TaskSummary>> = BTreeMap::new();
    for s in &bundle.summaries {
        cells.entry((s.task_kind, s.batch_size)).or_default().push(s);
    }
    for ((task, batch), rows) in &cells {
        let _ = writeln!(out, "## {task} (batch {batch})\n");
        let _ = writeln!(
            out,
            "| Model | Time per output token (s) | Decode TPOT (s) | TTFT (s) | Task wall time (s) | Tokens in | Tokens out | Throughput (tok/s) | Completed | Failed |"
        );
        let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
        for s in rows {
            let _ = writeln!(
                out,
                "| `{}` | {} | {} | {} | {:.6} | {} | {} | {} | {} | {} |",
                md_cell(&s.model_id),
                md_num(s.mean_time_per_output_token),
                md_num(s.decode_tpot_mean),
                md_num(s.ttft_mean),
                s.wall_time,
                md_int(s.total_in),
                md_int(s.total_out),
                md_num(s.throughput),
                s.completed,
                s.failed
            );
        }
        let _ = writeln!(out);
    }

    let _ = writeln!(out, "## Per-token speed vs. time to complete the task\n");
    if bundle.comparisons.is_empty() {
        let _ = writeln!(out, "No task had two or more comparable models.");
    }
    for c in &bundle.comparisons {
        let _ = writeln!(out, "### {} (batch {})\n", c.task_kind, c.batch_size);
        match c.spearman_rho {
            Some(rho) => {
                let _ = writeln!(out, "Spearman rho ({} vs {}): {rho:.6}\n", c.metric_a.as_str(), c.metric_b.as_str());
            }
            None => {
                let _ = writeln!(
                    out,
                    "Spearman rho ({} vs {}): n/a ({})\n",
                    c.metric_a.as_str(),
                    c.metric_b.as_str(),
                    c.rho_note.as_deref().unwrap_or("undefined")
                );
            }
        }
        if c.discordant_pairs.is_empty() {
            let _ = writeln!(out, "No inversions: both metrics order the models the same way.\n");
        } else {
            for (per_token, complete) in &c.discordant_pairs {
                let _ = writeln!(out, "{}", inversion_sentence(per_token, complete));
            }
            let _ = writeln!(out);
        }
    }
    out
}

pub fn emit_markdown(bundle: &ReportBundle, path: &Path) -> Result<(), ReportError> {
    write_file(path, markdown_string(bundle).as_bytes())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PANEL_W: f64 = 300.0;
const PANEL_GAP: f64 = 30.0;
const HEIGHT: f64 = 340.0;
const TOP: f64 = 50.0;
const PLOT_H: f64 = 220.0;
const LEFT_PAD: f64 = 50.0;

struct Panel<'a> {
    title: &'a str,
    axis: &'a str,
    /// One entry per bar group; each group holds (class, value) bars.
    groups: Vec<Vec<(&'static str, Option<f64>)>>,
}

fn draw_panel(out: &mut String, index: usize, panel: &Panel<'_>, labels: &[String]) {
    let x0 = PANEL_GAP + index as f64 * (PANEL_W + PANEL_GAP);
    let plot_x = x0 + LEFT_PAD;
    let plot_w = PANEL_W - LEFT_PAD;
    let base_y = TOP + PLOT_H;
    let max = panel
        .groups
        .iter()
        .flatten()
        .filter_map(|(_, v)| *v)
        .fold(0.0_f64, f64::max);
    let top = if max > 0.0 { max * 1.1 } else { 1.0 };

    let _ = writeln!(out, r#"<g class="panel" id="panel-{index}">"#);
    let _ = writeln!(
        out,
        r#"<text class="title" x="{:.2}" y="24" text-anchor="middle">{}</text>"#,
        x0 + PANEL_W / 2.0,
        xml_escape(panel.title)
    );
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{plot_x:.2}" y1="{TOP:.2}" x2="{plot_x:.2}" y2="{base_y:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{plot_x:.2}" y1="{base_y:.2}" x2="{:.2}" y2="{base_y:.2}" stroke="black"/>"#,
        plot_x + plot_w
    );
    let _ = writeln!(
        out,
        r#"<text class="tick" x="{:.2}" y="{:.2}" text-anchor="end">0</text>"#,
        plot_x - 4.0,
        base_y
    );
    let _ = writeln!(
        out,
        r#"<text class="tick" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
        plot_x - 4.0,
        TOP + 4.0,
        short_number(top)
    );
    let _ = writeln!(
        out,
        r#"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 + 12.0,
        TOP + PLOT_H / 2.0,
        x0 + 12.0,
        TOP + PLOT_H / 2.0,
        xml_escape(panel.axis)
    );

    let slot = plot_w / panel.groups.len() as f64;
    for (g, bars) in panel.groups.iter().enumerate() {
        let group_x = plot_x + g as f64 * slot;
        let bar_w = slot * 0.7 / bars.len() as f64;
        for (b, (class, value)) in bars.iter().enumerate() {
            let h = value.map_or(0.0, |v| v / top * PLOT_H);
            let x = group_x + slot * 0.15 + b as f64 * bar_w;
            let _ = writeln!(
                out,
                r#"<rect class="{class}" x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}"><title>{}: {}</title></rect>"#,
                base_y - h,
                xml_escape(&labels[g]),
                value.map_or_else(|| "n/a".to_string(), short_number)
            );
        }
        let _ = writeln!(
            out,
            r#"<text class="label" x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-40 {:.2} {:.2})">{}</text>"#,
            group_x + slot / 2.0,
            base_y + 14.0,
            group_x + slot / 2.0,
            base_y + 14.0,
            xml_escape(&labels[g])
        );
    }
    let _ = writeln!(out, "</g>");
}

fn short_number(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else if v >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

/// Three side-by-side bar panels for one task: time per output token, task
/// wall time, and input/output token totals.
pub fn panel_svg_string(summaries: &[TaskSummary]) -> Result<String, ReportError> {
    let first = summaries.first().ok_or(ReportError::EmptyInput)?;
    let tasks: BTreeSet<TaskKind> = summaries.iter().map(|s| s.task_kind).collect();
    if tasks.len() > 1 {
        let names: Vec<&str> = tasks.iter().map(|t| t.as_str()).collect();
        return Err(ReportError::MixedTasks(names.join(", ")));
    }
    let batches: BTreeSet<u32> = summaries.iter().map(|s| s.batch_size).collect();
    let labels: Vec<String> = summaries
        .iter()
        .map(|s| {
            if batches.len() > 1 {
                format!("{} (b{})", s.model_id, s.batch_size)
            } else {
                s.model_id.clone()
            }
        })
        .collect();
    let panels = [
        Panel {
            title: "Time per output token",
            axis: "seconds per token",
            groups: summaries.iter().map(|s| vec![("bar per-token", s.mean_time_per_output_token)]).collect(),
        },
        Panel {
            title: "Time to complete the task",
            axis: "seconds",
            groups: summaries.iter().map(|s| vec![("bar wall", Some(s.wall_time))]).collect(),
        },
        Panel {
            title: "Input and output tokens",
            axis: "tokens",
            groups: summaries
                .iter()
                .map(|s| {
                    vec![
                        ("bar tokens-in", s.total_in.map(|v| v as f64)),
                        ("bar tokens-out", s.total_out.map(|v| v as f64)),
                    ]
                })
                .collect(),
        },
    ];
    let width = PANEL_GAP + 3.0 * (PANEL_W + PANEL_GAP);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{HEIGHT:.0}" viewBox="0 0 {width:.0} {HEIGHT:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<desc>{} (batch {})</desc>", first.task_kind, short_batches(&batches));
    let _ = writeln!(
        out,
        "<style>.per-token{{fill:#4c72b0}}.wall{{fill:#dd8452}}.tokens-in{{fill:#55a868}}.tokens-out{{fill:#c44e52}}.title{{font-size:13px;font-weight:bold}}</style>"
    );
    for (i, panel) in panels.iter().enumerate() {
        draw_panel(&mut out, i, panel, &labels);
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

fn short_batches(batches: &BTreeSet<u32>) -> String {
    batches.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

pub fn emit_panel_svg(summaries: &[TaskSummary], path: &Path) -> Result<(), ReportError> {
    let svg = panel_svg_string(summaries)?;
    write_file(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKey;

    fn summary(model: &str, task: TaskKind, per_token: Option<f64>, wall: f64) -> TaskSummary {
        TaskSummary {
            run_id: format!("{model}__{task}__b1-wave"),
            model_id: model.into(),
            task_kind: task,
            batch_size: 1,
            wall_time: wall,
            total_in: Some(100),
            total_out: per_token.map(|_| 40),
            mean_time_per_output_token: per_token,
            decode_tpot_mean: per_token,
            ttft_mean: None,
            throughput: per_token.map(|_| 40.0 / wall),
            completed: 10,
            failed: 0,
        }
    }

    fn bundle(summaries: Vec<TaskSummary>) -> ReportBundle {
        let runs = summaries
            .iter()
            .map(|s| RunMeta {
                run_id: s.run_id.clone(),
                model_id: s.model_id.clone(),
                task_kind: s.task_kind,
                batch_size: s.batch_size,
                mode: BatchMode::Wave,
                repetitions: 1,
                tool_version: "0.1.0".into(),
                trace_count: 10,
            })
            .collect();
        let comparisons = compare_all(&summaries);
        ReportBundle {
            tool_version: "0.1.0".into(),
            runs,
            summaries,
            comparisons,
            ..ReportBundle::default()
        }
    }

    #[test]
    fn seconds_formatting() {
        assert_eq!(format_seconds(3.05), "3.05000000");
        assert_eq!(format_seconds(0.001023456789), "0.00102345679");
        assert_eq!(format_seconds(1234.5), "1234.500000");
        assert_eq!(format_seconds(0.0), "0.000000");
    }

    #[test]
    fn csv_layout() {
        assert_eq!(csv_string(&[]), CSV_HEADER.join(",") + "\n");
        let text = csv_string(&[summary("a", TaskKind::AnswerChoice, None, 2.0)]);
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row, "a,answer_choice,1,2.00000000,,,,100,,10,0");
    }

    #[test]
    fn csv_quotes_awkward_model_ids() {
        let text = csv_string(&[summary("org,\"x\"", TaskKind::AnswerChoice, Some(0.1), 2.0)]);
        assert!(text.lines().nth(1).unwrap().starts_with("\"org,\"\"x\"\"\","));
    }

    #[test]
    fn summary_document_validation() {
        let b = bundle(vec![summary("a", TaskKind::Paraphrase, Some(0.1), 1.0)]);
        assert!(b.validate().is_ok());
        assert_eq!(ReportBundle::from_json(&b.to_json()).unwrap(), b);
        let mut orphan = b.clone();
        orphan.runs.clear();
        assert!(matches!(orphan.validate(), Err(ReportError::Invalid(_))));
        let empty = ReportBundle::default();
        assert!(empty.validate().is_ok());
        let doc: serde_json::Value = serde_json::from_str(&empty.to_json()).unwrap();
        assert_eq!(doc["schema"], REPORT_SCHEMA);
        assert_eq!(doc["summaries"], serde_json::json!([]));
    }

    #[test]
    fn markdown_lists_inversions() {
        let b = bundle(vec![
            summary("FastVerbose", TaskKind::AnswerChoice, Some(0.001), 3.0),
            summary("SlowTerse", TaskKind::AnswerChoice, Some(0.0025), 1.0),
        ]);
        let md = markdown_string(&b);
        assert!(md.contains(&inversion_sentence("FastVerbose", "SlowTerse")));
        assert_eq!(md.matches("is fastest per token but not fastest").count(), 1);
        assert_eq!(md, markdown_string(&b));
    }

    #[test]
    fn markdown_without_inversions() {
        let b = bundle(vec![
            summary("a", TaskKind::AnswerChoice, Some(0.001), 1.0),
            summary("b", TaskKind::AnswerChoice, Some(0.002), 2.0),
        ]);
        assert_eq!(b.comparisons[0].spearman_rho, Some(1.0));
        assert_eq!(b.comparisons[0].metric_a, MetricKey::MeanTimePerOutputToken);
        let md = markdown_string(&b);
        assert!(md.contains("No inversions"));
        assert!(!md.contains("is fastest per token"));
    }

    #[test]
    fn svg_structure() {
        let s = vec![
            summary("a", TaskKind::OpenAnswer, Some(0.01), 5.0),
            summary("b<&>", TaskKind::OpenAnswer, Some(0.02), 4.0),
        ];
        let svg = panel_svg_string(&s).unwrap();
        let doc = roxmltree::Document::parse(&svg).expect("well-formed svg");
        let count = |class: &str| {
            doc.descendants()
                .filter(|n| n.has_tag_name("rect") && n.attribute("class") == Some(class))
                .count()
        };
        assert_eq!(count("bar per-token"), 2);
        assert_eq!(count("bar wall"), 2);
        assert_eq!(count("bar tokens-in") + count("bar tokens-out"), 4);
        assert_eq!(svg, panel_svg_string(&s).unwrap());
    }

    #[test]
    fn svg_errors() {
        assert!(matches!(panel_svg_string(&[]), Err(ReportError::EmptyInput)));
        let mixed = vec![
            summary("a", TaskKind::OpenAnswer, Some(0.01), 5.0),
            summary("a", TaskKind::Paraphrase, Some(0.01), 5.0),
        ];
        assert!(matches!(panel_svg_string(&mixed), Err(ReportError::MixedTasks(_))));
    }
}
