//! Edit-distance oracle equivalence and WER invariants.

use avsr::eval::{edit_distance, WerReport};
use proptest::prelude::*;
use rand::Rng;

/// Independent memoized-recursion Levenshtein distance (cost only).
fn oracle_distance(a: &[u32], b: &[u32]) -> usize {
    fn go(
        a: &[u32],
        b: &[u32],
        i: usize,
        j: usize,
        memo: &mut std::collections::HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let d = sub.min(del).min(ins);
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut std::collections::HashMap::new())
}

#[test]
fn matches_memoized_recursion_on_random_pairs() {
    let mut rng = avsr::rng::substream(42, "eval/oracle");
    for case in 0..100 {
        let la = rng.random_range(0..12);
        let lb = rng.random_range(0..12);
        let a: Vec<u32> = (0..la).map(|_| rng.random_range(0..5u32)).collect();
        let b: Vec<u32> = (0..lb).map(|_| rng.random_range(0..5u32)).collect();
        let (s, d, i) = edit_distance(&a, &b);
        assert_eq!(s + d + i, oracle_distance(&a, &b), "case {case}: {a:?} vs {b:?}");
    }
}

#[test]
fn corpus_wer_pools_counts() {
    // pooled counts over the corpus: 1 error over 5 words plus 4 errors over
    // 15 words gives 5/20, not the mean of the per-utterance rates
    let report = WerReport::from_counts(3, 1, 1, 20);
    assert!((report.wer - 0.25).abs() < 1e-12);
    let per_utt_mean = (1.0 / 5.0 + 4.0 / 15.0) / 2.0;
    assert!((report.wer - per_utt_mean).abs() > 0.01);
}

proptest! {
    #[test]
    fn wer_invariant_under_relabeling(
        a in proptest::collection::vec(0u32..6, 0..10),
        b in proptest::collection::vec(0u32..6, 0..10),
        offset in 1u32..100
    ) {
        let (s1, d1, i1) = edit_distance(&a, &b);
        let a2: Vec<u32> = a.iter().map(|&x| x + offset).collect();
        let b2: Vec<u32> = b.iter().map(|&x| x + offset).collect();
        let (s2, d2, i2) = edit_distance(&a2, &b2);
        prop_assert_eq!((s1, d1, i1), (s2, d2, i2));
    }

    #[test]
    fn swap_symmetry(
        a in proptest::collection::vec(0u32..4, 0..10),
        b in proptest::collection::vec(0u32..4, 0..10)
    ) {
        let (s1, d1, i1) = edit_distance(&a, &b);
        let (s2, d2, i2) = edit_distance(&b, &a);
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(d1, i2);
        prop_assert_eq!(i1, d2);
    }

    #[test]
    fn distance_bounds_hold(
        a in proptest::collection::vec(0u32..4, 0..12),
        b in proptest::collection::vec(0u32..4, 0..12)
    ) {
        let (s, d, i) = edit_distance(&a, &b);
        let cost = s + d + i;
        prop_assert!(cost <= a.len().max(b.len()));
        prop_assert!(cost >= a.len().abs_diff(b.len()));
        // exact counts are consistent with the sequence lengths
        prop_assert_eq!(a.len() as i64 - b.len() as i64, d as i64 - i as i64);
    }
}
