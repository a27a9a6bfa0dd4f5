mod oracles;

use oracles::{jacobi_eigenvalues, naive_greedy, random_psd, SplitMix};
use proptest::prelude::*;
use thoughtlog_core::diversity::{build_kernel, dpp_select, Kernel, DEFAULT_JITTER};

#[test]
fn six_by_six_matches_naive_greedy() {
    let mut rng = SplitMix(6);
    let l = random_psd(&mut rng, 6, 8, 1e-3);
    let kernel = Kernel::from_matrix(6, l.clone()).unwrap();
    let fast = dpp_select(&kernel, 3).unwrap();
    let (idx, gains) = naive_greedy(&l, 6, 3);
    assert_eq!(fast.indices, idx);
    for (a, b) in fast.gains.iter().zip(&gains) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn kernel_of_random_vectors_is_psd() {
    let mut rng = SplitMix(5);
    let vecs: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.unit()).collect()).collect();
    let k = build_kernel(&vecs, DEFAULT_JITTER).unwrap();
    for ev in jacobi_eigenvalues(k.entries(), 5) {
        assert!(ev >= -1e-9, "eigenvalue {ev}");
    }
    for i in 0..5 {
        let d = k.get(i, i);
        assert!((DEFAULT_JITTER - 1e-12..=1.0 + DEFAULT_JITTER + 1e-12).contains(&d));
    }
}

#[test]
fn near_duplicate_kernel_prefers_first_then_any() {
    // three identical analyses: the first wins, the second pick adds only jitter
    let v = vec![vec![0.3, 0.4, 0.5]; 3];
    let k = build_kernel(&v, DEFAULT_JITTER).unwrap();
    let fast = dpp_select(&k, 2).unwrap();
    let (idx, _) = naive_greedy(k.entries(), 3, 2);
    assert_eq!(fast.indices[0], 0);
    assert_eq!(fast.indices, idx);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fast_greedy_equals_naive(seed in any::<u64>(), n in 2usize..=12, k_frac in 0.0f64..1.0, extra in 0usize..4) {
        let mut rng = SplitMix(seed);
        let k = 1 + ((n.min(6) - 1) as f64 * k_frac) as usize;
        let l = random_psd(&mut rng, n, n + extra, 1e-2);
        let kernel = Kernel::from_matrix(n, l.clone()).unwrap();
        let fast = dpp_select(&kernel, k).unwrap();
        let (idx, gains) = naive_greedy(&l, n, k);
        prop_assert_eq!(&fast.indices, &idx);
        for (a, b) in fast.gains.iter().zip(&gains) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
        for w in fast.gains.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let again = dpp_select(&kernel, k).unwrap();
        prop_assert_eq!(fast, again);
    }

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), n in 2usize..=10) {
        let mut rng = SplitMix(seed);
        let l = random_psd(&mut rng, n, n + 2, 1e-2);
        let kernel = Kernel::from_matrix(n, l).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let k = n.min(5);
        let base = dpp_select(&kernel, k).unwrap();
        let permuted = dpp_select(&kernel.permuted(&perm), k).unwrap();
        // new index a is old index perm[a]
        let mapped: Vec<usize> = permuted.indices.iter().map(|&a| perm[a]).collect();
        let distinct_gains = base.gains.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
        if distinct_gains {
            prop_assert_eq!(mapped, base.indices);
        }
    }
}
