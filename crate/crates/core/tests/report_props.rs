use std::collections::BTreeSet;

use proptest::prelude::*;
use taskbench_core::metrics::TaskSummary;
use taskbench_core::report::{csv_string, markdown_string, panel_svg_string, ReportBundle, RunMeta, CSV_HEADER};
use taskbench_core::runner::BatchMode;
use taskbench_core::suite::TaskKind;

fn positive() -> impl Strategy<Value = f64> {
    (1.0f64..10.0, -7i32..5).prop_map(|(m, e)| m * 10f64.powi(e))
}

fn summary_strategy(i: usize) -> impl Strategy<Value = TaskSummary> {
    (
        0usize..3,
        prop::sample::select(vec![1u32, 4]),
        positive(),
        prop::option::of(positive()),
        prop::option::of(positive()),
        prop::option::of(positive()),
        prop::option::of(0u64..100_000),
        0usize..50,
        0usize..5,
    )
        .prop_map(move |(k, batch, wall, per_token, tpot, thr, tokens, completed, failed)| {
            let task = TaskKind::ALL[k];
            TaskSummary {
                run_id: format!("m{i}__{task}__b{batch}-wave"),
                model_id: format!("m{i}"),
                task_kind: task,
                batch_size: batch,
                wall_time: wall,
                total_in: tokens.map(|t| t * 3),
                total_out: tokens,
                mean_time_per_output_token: per_token,
                decode_tpot_mean: tpot,
                ttft_mean: per_token,
                throughput: thr,
                completed,
                failed,
            }
        })
}

fn summaries_strategy() -> impl Strategy<Value = Vec<TaskSummary>> {
    (1usize..8).prop_flat_map(|n| (0..n).map(summary_strategy).collect::<Vec<_>>())
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
            tool_version: "test".into(),
            trace_count: s.completed + s.failed,
        })
        .collect();
    let comparisons = taskbench_core::metrics::compare_all(&summaries);
    ReportBundle {
        runs,
        summaries,
        comparisons,
        ..ReportBundle::default()
    }
}

fn close_at_9_digits(parsed: f64, original: f64) -> bool {
    (parsed - original).abs() <= 5e-9 * original.abs()
}

proptest! {
    #[test]
    fn csv_rows_round_trip_at_nine_significant_digits(summaries in summaries_strategy()) {
        let text = csv_string(&summaries);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        prop_assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
        let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        prop_assert_eq!(rows.len(), summaries.len());
        for (row, s) in rows.iter().zip(&summaries) {
            prop_assert_eq!(&row[0], s.model_id.as_str());
            prop_assert_eq!(&row[1], s.task_kind.as_str());
            let cells = [
                (3, Some(s.wall_time)),
                (4, s.mean_time_per_output_token),
                (5, s.decode_tpot_mean),
                (6, s.throughput),
            ];
            for (idx, value) in cells {
                match value {
                    Some(v) => {
                        let parsed: f64 = row[idx].parse().unwrap();
                        prop_assert!(close_at_9_digits(parsed, v), "{} vs {}", &row[idx], v);
                        let decimals = row[idx].split('.').nth(1).map_or(0, str::len);
                        prop_assert!(decimals >= 6);
                    }
                    None => prop_assert_eq!(&row[idx], ""),
                }
            }
            prop_assert_eq!(row[8].parse::<u64>().ok(), s.total_out);
        }
    }

    #[test]
    fn markdown_inversions_equal_comparison_pairs(summaries in summaries_strategy()) {
        let b = bundle(summaries);
        let md = markdown_string(&b);
        let listed: BTreeSet<(String, String)> = md
            .lines()
            .filter(|l| l.starts_with("- **"))
            .map(|l| {
                let parts: Vec<&str> = l.split("**").collect();
                (parts[1].to_string(), parts[3].to_string())
            })
            .collect();
        let expected: BTreeSet<(String, String)> =
            b.comparisons.iter().flat_map(|c| c.discordant_pairs.iter().cloned()).collect();
        prop_assert_eq!(listed, expected);
    }

    #[test]
    fn emitters_are_pure(summaries in summaries_strategy()) {
        let b = bundle(summaries);
        prop_assert_eq!(markdown_string(&b), markdown_string(&b.clone()));
        prop_assert_eq!(csv_string(&b.summaries), csv_string(&b.summaries.clone()));
        prop_assert_eq!(b.to_json(), ReportBundle::from_json(&b.to_json()).unwrap().to_json());
        let first_task = b.summaries[0].task_kind;
        let same_task: Vec<TaskSummary> = b.summaries.iter().filter(|s| s.task_kind == first_task).cloned().collect();
        let svg = panel_svg_string(&same_task).unwrap();
        prop_assert_eq!(&svg, &panel_svg_string(&same_task).unwrap());
        prop_assert!(roxmltree::Document::parse(&svg).is_ok());
    }
}

#[test]
fn orphan_summary_is_rejected() {
    let mut b = bundle(vec![]);
    b.summaries.push(TaskSummary {
        run_id: "missing".into(),
        model_id: "m".into(),
        task_kind: TaskKind::Paraphrase,
        batch_size: 1,
        wall_time: 1.0,
        total_in: None,
        total_out: None,
        mean_time_per_output_token: None,
        decode_tpot_mean: None,
        ttft_mean: None,
        throughput: None,
        completed: 0,
        failed: 1,
    });
    assert!(b.validate().is_err());
    assert!(ReportBundle::from_json(&b.to_json()).is_err());
}
