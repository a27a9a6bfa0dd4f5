//! Reference implementations used only as test oracles. They favour
//! obviousness over speed and share no code with the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut d = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            d = -d;
        }
        let p = a[col * n + col];
        d *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
        }
    }
    d
}

fn principal_submatrix(l: &[f64], n: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * idx.len());
    for &i in idx {
        for &j in idx {
            out.push(l[i * n + j]);
        }
    }
    out
}

/// Greedy MAP that recomputes `log det(L_S)` from scratch for every
/// candidate. Ties go to the lowest index.
pub fn naive_greedy(l: &[f64], n: usize, k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut chosen: Vec<usize> = Vec::new();
    let mut gains = Vec::new();
    let mut base = 0.0; // log det of the empty matrix
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let mut s = chosen.clone();
            s.push(i);
            let ld = det(&principal_submatrix(l, n, &s), s.len()).ln();
            if best.is_none_or(|(_, b)| ld > b) {
                best = Some((i, ld));
            }
        }
        let (i, ld) = best.expect("candidate available");
        chosen.push(i);
        gains.push(ld - base);
        base = ld;
    }
    (chosen, gains)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Metrics straight from a confusion table. `None` predictions are
/// unparseable answers.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub positive: Option<(f64, f64, f64)>,
}

pub fn brute_metrics(items: &[(Option<&str>, &str)], positive: Option<&str>) -> BruteMetrics {
    let n = items.len() as f64;
    let mut confusion: BTreeMap<(Option<&str>, &str), usize> = BTreeMap::new();
    for &(p, g) in items {
        *confusion.entry((p, g)).or_default() += 1;
    }
    let count = |pred: Option<&str>, gold: Option<&str>| -> usize {
        confusion
            .iter()
            .filter(|((p, g), _)| pred.is_none_or(|x| *p == Some(x)) && gold.is_none_or(|x| *g == x))
            .map(|(_, c)| *c)
            .sum()
    };
    let f1_of = |c: &str| -> (f64, f64, f64) {
        let tp = count(Some(c), Some(c)) as f64;
        let predicted = count(Some(c), None) as f64;
        let actual = count(None, Some(c)) as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if predicted + actual > 0.0 { 2.0 * tp / (predicted + actual) } else { 0.0 };
        (p, r, f)
    };
    let correct = items.iter().filter(|(p, g)| *p == Some(*g)).count() as f64;
    let mut golds: Vec<&str> = items.iter().map(|(_, g)| *g).collect();
    golds.sort();
    golds.dedup();
    let weighted_f1 = golds.iter().map(|g| count(None, Some(g)) as f64 / n * f1_of(g).2).sum();
    BruteMetrics { accuracy: correct / n, weighted_f1, positive: positive.map(f1_of) }
}

/// Small deterministic generator (SplitMix64) so oracle inputs do not depend
/// on the library's RNG choice.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Random PSD matrix `B Bᵀ + ridge·I` with `B` n×d.
pub fn random_psd(rng: &mut SplitMix, n: usize, d: usize, ridge: f64) -> Vec<f64> {
    let b: Vec<f64> = (0..n * d).map(|_| rng.unit()).collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            l[i * n + j] = (0..d).map(|t| b[i * d + t] * b[j * d + t]).sum();
        }
        l[i * n + i] += ridge;
    }
    l
}
