mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskbench_core::tokenize::{bpe_segment, load_merges, MergeTable};

fn table(merges: &[(Vec<u8>, Vec<u8>)]) -> MergeTable {
    MergeTable::from_pairs("random", merges.iter().map(|(l, r)| (l.clone(), r.clone()))).unwrap()
}

#[test]
fn toy_fixture_segments_as_expected() {
    let t = load_merges(&common::fixture("toy_merges.txt")).unwrap();
    assert_eq!(t.len(), 2);
    let segs = bpe_segment(b"abcab", &t);
    assert_eq!(segs, vec![&b"abc"[..], &b"ab"[..]]);
}

const ALPHABET: &[u8] = b"abcd";

fn merges_strategy() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    (any::<u64>(), 0usize..24).prop_map(|(seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_merges(&mut rng, ALPHABET, n)
    })
}

fn text_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::sample::select(ALPHABET.to_vec()), 0..64)
}

proptest! {
    #[test]
    fn agrees_with_naive_oracle(merges in merges_strategy(), text in text_strategy()) {
        let got: Vec<Vec<u8>> = bpe_segment(&text, &table(&merges)).into_iter().map(<[u8]>::to_vec).collect();
        prop_assert_eq!(got, common::naive_bpe(&text, &merges));
    }

    #[test]
    fn concatenation_reproduces_input(merges in merges_strategy(), text in prop::collection::vec(any::<u8>(), 0..64)) {
        let t = table(&merges);
        let segs = bpe_segment(&text, &t);
        prop_assert_eq!(segs.concat(), text.clone());
        prop_assert_eq!(bpe_segment(&text, &t), segs);
    }

    #[test]
    fn segment_count_bounds(merges in merges_strategy(), text in prop::collection::vec(prop::sample::select(ALPHABET.to_vec()), 1..64)) {
        let n = bpe_segment(&text, &table(&merges)).len();
        prop_assert!(1 <= n && n <= text.len());
    }

    #[test]
    fn merges_performed_equal_symbol_reduction(merges in merges_strategy(), text in text_strategy()) {
        // replay the oracle one merge at a time: every step shrinks the sequence by one
        let final_len = common::naive_bpe(&text, &merges).len();
        let mut steps = 0;
        let mut prefix_merges = Vec::new();
        let mut last = text.len();
        for m in &merges {
            prefix_merges.push(m.clone());
            let len = common::naive_bpe(&text, &prefix_merges).len();
            prop_assert!(len <= last);
            steps += last - len;
            last = len;
        }
        prop_assert_eq!(steps, text.len() - final_len);
        prop_assert_eq!(bpe_segment(&text, &table(&merges)).len(), final_len);
    }
}
