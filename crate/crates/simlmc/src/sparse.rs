//! Minimal sparse symmetric storage and an up-looking sparse Cholesky
//! factorization (LL^T with elimination tree), sized for the small
//! structural systems this crate solves (tens of thousands of DOF).
//!
//! The symbolic step is computed once per mesh level and reused across
//! material samples; only the numeric factorization runs per sample.

use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix is not positive definite (breakdown at column {col})")]
    NotPositiveDefinite { col: usize },
    #[error("triplet index ({i}, {j}) out of bounds for dimension {n}")]
    IndexOutOfBounds { i: usize, j: usize, n: usize },
}

/// Symmetric matrix stored as full CSC with sorted row indices per column.
#[derive(Debug, Clone)]
pub struct SymmetricCsc<T> {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> SymmetricCsc<T> {
    /// Build from triplets, summing duplicates. Triplets must describe the
    /// full symmetric matrix (both triangles).
    pub fn from_triplets(
        n: usize,
        triplets: &[(usize, usize, T)],
    ) -> Result<Self, SparseError> {
        for &(i, j, _) in triplets {
            if i >= n || j >= n {
                return Err(SparseError::IndexOutOfBounds { i, j, n });
            }
        }
        let mut per_col: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            per_col[j].push((i, v));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in per_col.iter_mut() {
            col.sort_by_key(|&(i, _)| i);
            let mut last: Option<usize> = None;
            for &(i, v) in col.iter() {
                if last == Some(i) {
                    let k = values.len() - 1;
                    values[k] += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = Some(i);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Position of entry (i, j) in `values`, if structurally present.
    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        self.row_idx[lo..hi]
            .binary_search(&i)
            .ok()
            .map(|k| lo + k)
    }

    pub fn zero_values(&mut self) {
        for v in &mut self.values {
            *v = T::zero();
        }
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        for v in y.iter_mut() {
            *v = T::zero();
        }
        for j in 0..self.n {
            let xj = x[j];
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[k]] += self.values[k] * xj;
            }
        }
    }

    /// max |A - A^T| over structural entries; a symmetry diagnostic.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for j in 0..self.n {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[k];
                let mirrored = self
                    .index_of(j, i)
                    .map(|p| self.values[p])
                    .unwrap_or_else(T::zero);
                let d = (self.values[k] - mirrored).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }
}

/// Elimination tree and column pointers of the Cholesky factor; depends
/// only on the sparsity pattern.
#[derive(Debug, Clone)]
pub struct CholeskySymbolic {
    n: usize,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl CholeskySymbolic {
    pub fn new<T: Real>(a: &SymmetricCsc<T>) -> Self {
        let n = a.n;
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut i = a.row_idx[p];
                while i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                        break;
                    }
                    i = next;
                }
            }
        }
        // column counts via one ereach sweep
        let mut counts = vec![1usize; n]; // diagonal
        let mut mark = vec![NONE; n];
        for k in 0..n {
            mark[k] = k;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut j = a.row_idx[p];
                while j < k && mark[j] != k {
                    counts[j] += 1; // L(k, j) exists -> one more entry in column j
                    mark[j] = k;
                    j = parent[j];
                }
            }
        }
        let mut l_col_ptr = Vec::with_capacity(n + 1);
        let mut acc = 0usize;
        l_col_ptr.push(0);
        for &c in &counts {
            acc += c;
            l_col_ptr.push(acc);
        }
        Self {
            n,
            parent,
            l_col_ptr,
        }
    }

    pub fn factor_nnz(&self) -> usize {
        *self.l_col_ptr.last().unwrap_or(&0)
    }

    /// Flop count of the numeric factorization, sum over columns of
    /// nnz(col)^2; deterministic and useful as a cost model input.
    pub fn factor_flops(&self) -> u64 {
        (0..self.n)
            .map(|j| {
                let c = (self.l_col_ptr[j + 1] - self.l_col_ptr[j]) as u64;
                c * c
            })
            .sum()
    }
}

/// Numeric Cholesky factor L (lower triangular, CSC, diagonal first in
/// each column).
#[derive(Debug, Clone)]
pub struct CholeskyFactor<T> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CholeskyFactor<T> {
    /// Up-looking factorization of `a` using a precomputed symbolic
    /// analysis of the same pattern.
    pub fn factorize(
        a: &SymmetricCsc<T>,
        symbolic: &CholeskySymbolic,
    ) -> Result<Self, SparseError> {
        let n = a.n;
        assert_eq!(n, symbolic.n, "symbolic analysis is for a different pattern");
        let nnz = symbolic.factor_nnz();
        let col_ptr = symbolic.l_col_ptr.clone();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![T::zero(); nnz];
        let mut next_free: Vec<usize> = col_ptr[..n].to_vec();

        let mut x = vec![T::zero(); n];
        let mut mark = vec![NONE; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(64);

        for k in 0..n {
            // scatter upper part of column k (row indices <= k)
            pattern.clear();
            mark[k] = k;
            let mut diag = T::zero();
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.row_idx[p];
                if i > k {
                    continue;
                }
                if i == k {
                    diag = a.values[p];
                    continue;
                }
                x[i] = a.values[p];
                let mut j = i;
                while j < k && mark[j] != k {
                    pattern.push(j);
                    mark[j] = k;
                    j = symbolic.parent[j];
                }
            }
            // ascending row index is a topological order of the etree
            pattern.sort_unstable();

            let mut d = diag;
            for &j in &pattern {
                let lkj = x[j] / values[col_ptr[j]];
                x[j] = T::zero();
                for p in col_ptr[j] + 1..next_free[j] {
                    x[row_idx[p]] -= values[p] * lkj;
                }
                d -= lkj * lkj;
                let slot = next_free[j];
                next_free[j] += 1;
                row_idx[slot] = k;
                values[slot] = lkj;
            }
            if d <= T::zero() {
                return Err(SparseError::NotPositiveDefinite { col: k });
            }
            let slot = next_free[k];
            next_free[k] += 1;
            row_idx[slot] = k;
            values[slot] = d.sqrt();
        }
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Solve A x = b in place (forward then backward substitution).
    pub fn solve_in_place(&self, b: &mut [T]) {
        assert_eq!(b.len(), self.n);
        // L y = b
        for j in 0..self.n {
            let yj = b[j] / self.values[self.col_ptr[j]];
            b[j] = yj;
            for p in self.col_ptr[j] + 1..self.col_ptr[j + 1] {
                b[self.row_idx[p]] -= self.values[p] * yj;
            }
        }
        // L^T x = y
        for j in (0..self.n).rev() {
            let mut s = b[j];
            for p in self.col_ptr[j] + 1..self.col_ptr[j + 1] {
                s -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = s / self.values[self.col_ptr[j]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_spd(n: usize, density: f64, rng: &mut ChaCha12Rng) -> SymmetricCsc<f64> {
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut row_sums = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < density {
                    let v: f64 = rng.random::<f64>() - 0.5;
                    trips.push((i, j, v));
                    trips.push((j, i, v));
                    row_sums[i] += v.abs();
                    row_sums[j] += v.abs();
                }
            }
        }
        for (i, rs) in row_sums.iter().enumerate() {
            trips.push((i, i, rs + 1.0)); // strictly diagonally dominant
        }
        SymmetricCsc::from_triplets(n, &trips).unwrap()
    }

    #[test]
    fn solves_random_spd_systems() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for &n in &[1usize, 2, 5, 40, 120] {
            let a = random_spd(n, 0.3, &mut rng);
            let symb = CholeskySymbolic::new(&a);
            let f = CholeskyFactor::factorize(&a, &symb).unwrap();
            let xtrue: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 1.0).collect();
            let mut b = vec![0.0; n];
            a.mul_vec(&xtrue, &mut b);
            f.solve_in_place(&mut b);
            for (got, want) in b.iter().zip(&xtrue) {
                assert_relative_eq!(got, want, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a =
            SymmetricCsc::from_triplets(2, &[(0, 0, 1.0), (1, 1, -2.0)]).unwrap();
        let symb = CholeskySymbolic::new(&a);
        assert!(matches!(
            CholeskyFactor::factorize(&a, &symb),
            Err(SparseError::NotPositiveDefinite { col: 1 })
        ));
    }

    #[test]
    fn symbolic_reuse_across_values() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = random_spd(30, 0.2, &mut rng);
        let symb = CholeskySymbolic::new(&a);
        let mut a2 = a.clone();
        for v in &mut a2.values {
            *v *= 2.0;
        }
        let f = CholeskyFactor::factorize(&a2, &symb).unwrap();
        let xtrue: Vec<f64> = (0..30).map(|i| i as f64 + 1.0).collect();
        let mut b = vec![0.0; 30];
        a2.mul_vec(&xtrue, &mut b);
        f.solve_in_place(&mut b);
        for (got, want) in b.iter().zip(&xtrue) {
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let a = SymmetricCsc::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 0, 1.5), (1, 1, 2.0), (0, 1, 0.25), (1, 0, 0.25)],
        )
        .unwrap();
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.values[a.index_of(0, 0).unwrap()], 2.5);
        assert_eq!(a.max_asymmetry(), 0.0);
    }
}
