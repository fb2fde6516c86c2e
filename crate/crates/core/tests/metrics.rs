use std::collections::HashMap;

use dialogem::eval::{bleu_n, lcs_len, rouge_l, BleuStats, BLEU_SMOOTHING};
use proptest::prelude::*;

/// Exhaustive LCS: tries every subsequence of `a` (short inputs only).
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    fn is_subsequence(s: &[u8], b: &[u8]) -> bool {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

/// Sentence BLEU against one reference, computed with plain loops.
fn naive_bleu(c: &[u8], r: &[u8], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let grams = |s: &[u8]| -> Vec<Vec<u8>> {
            if s.len() < k {
                vec![]
            } else {
                (0..=s.len() - k).map(|i| s[i..i + k].to_vec()).collect()
            }
        };
        let cg = grams(c);
        let rg = grams(r);
        let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut matched = 0usize;
        for g in &cg {
            let used = seen.entry(g.clone()).or_insert(0);
            let available = rg.iter().filter(|x| *x == g).count();
            if *used < available {
                matched += 1;
                *used += 1;
            }
        }
        let m = if matched == 0 { BLEU_SMOOTHING } else { matched as f64 };
        log_sum += (m / cg.len().max(1) as f64).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / n as f64).exp()
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 1..10)
}

proptest! {
    #[test]
    fn lcs_matches_exhaustive_search(a in seq(), b in seq()) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn bleu_matches_loop_oracle(c in seq(), r in seq(), n in 1usize..=4) {
        let got = bleu_n(&c, &[r.clone()], n);
        let want = naive_bleu(&c, &r, n);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn rouge_l_bounded_and_symmetric(c in seq(), r in seq()) {
        let x = rouge_l(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - rouge_l(&r, &c).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identity_is_perfect(s in seq()) {
        for n in 1..=4 {
            let b = bleu_n(&s, &[s.clone()], n);
            if s.len() >= n {
                prop_assert_eq!(b, 1.0);
            }
        }
        prop_assert_eq!(rouge_l(&s, &s).unwrap(), 1.0);
    }
}

#[test]
fn pooled_bleu_differs_from_sentence_average() {
    let pairs: [(&[u8], &[u8]); 2] = [(&[1, 2, 3, 4], &[1, 2, 3, 4]), (&[5, 6], &[7, 8])];
    let mut pooled = BleuStats::default();
    let mut mean = 0.0;
    for (c, r) in pairs {
        pooled.add(c, &[r.to_vec()]);
        mean += bleu_n(c, &[r.to_vec()], 1) / 2.0;
    }
    // pooled unigram precision: (4 + 0) / (4 + 2)
    assert!((pooled.bleu(1) - 4.0 / 6.0).abs() < 1e-12);
    assert!((mean - 0.5).abs() < 1e-9);
}

#[test]
fn multiple_references_clip_to_max_count() {
    let c = [1u8, 1, 1];
    let refs = vec![vec![1u8, 2, 3], vec![1u8, 1, 4]];
    // at most two 1s in any single reference
    assert!((bleu_n(&c, &refs, 1) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn empty_candidate_and_reference() {
    let empty: [u8; 0] = [];
    assert_eq!(bleu_n(&empty, &[vec![1u8]], 1), 0.0);
    assert_eq!(rouge_l(&empty, &[1u8]).unwrap(), 0.0);
    assert!(rouge_l(&[1u8], &empty).is_err());
}

#[test]
fn bleu_order_trend_on_overlapping_pairs() {
    let pairs: [(&[u8], &[u8]); 3] = [
        (&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 9, 6]),
        (&[7, 1, 2, 3, 4], &[1, 2, 3, 4, 8]),
        (&[1, 2, 3, 4, 1, 2], &[1, 2, 3, 4, 5, 2]),
    ];
    for (c, r) in pairs {
        let s: Vec<f64> = (1..=4).map(|n| bleu_n(c, &[r.to_vec()], n)).collect();
        assert!(s.windows(2).all(|w| w[1] <= w[0]), "{s:?}");
    }
}

#[test]
fn bleu_order_can_rise_when_clipping_hits_unigrams() {
    // c = a b a b a, r = b a b a b
    // p1 = (min(3,2) + min(2,3)) / 5 = 0.8; p2 = (ab: 2 + ba: 2) / 4 = 1
    // so BLEU-2 = sqrt(0.8) > BLEU-1 even though 4-grams overlap
    let c = [0u8, 1, 0, 1, 0];
    let r = vec![1u8, 0, 1, 0, 1];
    assert!((bleu_n(&c, &[r.clone()], 1) - 0.8).abs() < 1e-12);
    assert!((bleu_n(&c, &[r.clone()], 2) - 0.8f64.sqrt()).abs() < 1e-12);
    assert!(bleu_n(&c, &[r], 4) > 0.0);
}

#[test]
fn rouge_l_swapped_middle() {
    let c: Vec<&str> = "a b c d".split(' ').collect();
    let r: Vec<&str> = "a c b d".split(' ').collect();
    assert_eq!(lcs_len(&c, &r), 3);
    assert!((rouge_l(&c, &r).unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(rouge_l(&["x"], &["y", "z"]).unwrap(), 0.0);
}
