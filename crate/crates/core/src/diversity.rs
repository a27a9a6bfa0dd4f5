//! Determinantal point process kernels and greedy MAP selection.
//!
//! The kernel is the cosine Gram matrix of the item embeddings plus a small
//! diagonal jitter. Selection is the incremental-Cholesky greedy: each round
//! picks the item with the largest conditional variance `d_i^2`, i.e. the
//! largest marginal gain `log det(L_{S+i}) - log det(L_S)`, then updates the
//! Cholesky rows of all remaining items in O(n * |S|).

use thiserror::Error;

pub const DEFAULT_JITTER: f64 = 1e-6;
/// Conditional variances below this stop the selection.
pub const PIVOT_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DiversityError {
    #[error("no vectors to build a kernel from")]
    Empty,
    #[error("vector {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("jitter must be finite and non-negative, got {0}")]
    BadJitter(f64),
    #[error("kernel must be square and symmetric")]
    NotSymmetric,
    #[error("budget {k} exceeds the {n} available items")]
    BudgetExceeded { k: usize, n: usize },
    #[error("pivot {pivot:e} fell below {PIVOT_FLOOR:e} after {selected} selections")]
    NumericalBreakdown { selected: usize, pivot: f64 },
}

/// Dense symmetric PSD kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n: usize,
    entries: Vec<f64>,
}

impl Kernel {
    /// Wraps an explicit matrix, checking shape and symmetry.
    pub fn from_matrix(n: usize, entries: Vec<f64>) -> Result<Kernel, DiversityError> {
        if n == 0 || entries.len() != n * n {
            return Err(DiversityError::NotSymmetric);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (entries[i * n + j] - entries[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(DiversityError::NotSymmetric);
                }
            }
        }
        Ok(Kernel { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Kernel with rows and columns reordered so that new item `a` is old item `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Kernel {
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                entries[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Kernel { n, entries }
    }
}

/// `L = V Vᵀ + jitter·I` over L2-normalized rows of `vectors`.
pub fn build_kernel(vectors: &[Vec<f64>], jitter: f64) -> Result<Kernel, DiversityError> {
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(DiversityError::BadJitter(jitter));
    }
    let first = vectors.first().ok_or(DiversityError::Empty)?;
    let dim = first.len();
    if dim == 0 {
        return Err(DiversityError::ZeroVector { index: 0 });
    }
    let mut unit = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(DiversityError::DimensionMismatch { index, expected: dim, got: v.len() });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DiversityError::ZeroVector { index });
        }
        unit.push(v.iter().map(|x| x / norm).collect::<Vec<_>>());
    }

    let n = unit.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            entries[i * n + j] = dot;
            entries[j * n + i] = dot;
        }
        entries[i * n + i] += jitter;
    }
    Ok(Kernel { n, entries })
}

/// Items picked by greedy MAP, in pick order, with their log-det gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub gains: Vec<f64>,
}

/// Greedy MAP selection of exactly `k` items. Ties go to the lowest index.
pub fn dpp_select(kernel: &Kernel, k: usize) -> Result<Selection, DiversityError> {
    let n = kernel.n;
    if k > n {
        return Err(DiversityError::BudgetExceeded { k, n });
    }
    let mut indices = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    if k == 0 {
        return Ok(Selection { indices, gains });
    }

    // cholesky[i] holds row i of the incremental factor restricted to the selected set
    let mut cholesky: Vec<Vec<f64>> = vec![Vec::with_capacity(k); n];
    let mut variance: Vec<f64> = (0..n).map(|i| kernel.get(i, i)).collect();
    let mut taken = vec![false; n];

    loop {
        let (best, pivot) = argmax_remaining(&variance, &taken);
        if pivot < PIVOT_FLOOR {
            return Err(DiversityError::NumericalBreakdown { selected: indices.len(), pivot });
        }
        taken[best] = true;
        indices.push(best);
        gains.push(pivot.ln());
        if indices.len() == k {
            break;
        }

        let scale = pivot.sqrt();
        let pivot_row = std::mem::take(&mut cholesky[best]);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let dot: f64 = pivot_row.iter().zip(&cholesky[i]).map(|(a, b)| a * b).sum();
            let e = (kernel.get(best, i) - dot) / scale;
            cholesky[i].push(e);
            variance[i] -= e * e;
        }
        cholesky[best] = pivot_row;
    }
    Ok(Selection { indices, gains })
}

fn argmax_remaining(variance: &[f64], taken: &[bool]) -> (usize, f64) {
    let mut best = usize::MAX;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in variance.iter().enumerate() {
        if !taken[i] && v > best_val {
            best = i;
            best_val = v;
        }
    }
    (best, best_val)
}
