mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskbench_core::runner::{load_traces, parse_record, persist_traces, record_to_string, LoadError};

proptest! {
    #[test]
    fn load_after_persist_is_identity(seed in any::<u64>()) {
        let record = common::random_record(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(parse_record(&record_to_string(&record)).unwrap(), record);
    }

    #[test]
    fn cutting_the_file_short_recovers_the_prefix(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut record = common::random_record(&mut rng);
        while record.traces.len() < 2 {
            record.traces.push(common::random_trace(&mut rng));
        }
        let text = record_to_string(&record);
        let first_newline = text.find('\n').unwrap() + 1;
        let at = first_newline + ((text.len() - first_newline - 2) as f64 * cut) as usize;
        let at = (at..text.len()).find(|&i| text.is_char_boundary(i)).unwrap();
        match parse_record(&text[..at]) {
            Err(LoadError::Truncated { recovered, .. }) => {
                prop_assert!(recovered.traces.len() < record.traces.len());
                prop_assert_eq!(&recovered.traces[..], &record.traces[..recovered.traces.len()]);
            }
            other => prop_assert!(false, "expected truncation, got {:?}", other.map(|r| r.traces.len())),
        }
    }
}

#[test]
fn persisted_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let record = common::random_record(&mut rng);
        let path = dir.path().join(format!("nested/{i}.jsonl"));
        persist_traces(&record, &path).unwrap();
        assert_eq!(load_traces(&path).unwrap(), record);
    }
}

#[test]
fn foreign_schema_is_rejected() {
    let record = common::random_record(&mut ChaCha8Rng::seed_from_u64(1));
    let text = record_to_string(&record).replacen("runmeta/v1", "runmeta/v9", 1);
    assert!(matches!(parse_record(&text), Err(LoadError::SchemaMismatch { line: 1, .. })));
    assert!(matches!(parse_record(""), Err(LoadError::Empty)));
}
