//! Sparse symmetric positive definite factorization for the reduced
//! susceptance matrix.
//!
//! The matrix is reordered with a minimum-degree heuristic, then factored as
//! `P A Pᵀ = L D Lᵀ` with an up-looking, elimination-tree driven algorithm.
//! Power networks are very sparse and nearly planar, so fill stays small.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Symmetric matrix in compressed sparse column form, both triangles stored.
#[derive(Debug, Clone)]
pub(crate) struct SymmetricCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricCsc {
    /// Assembles from `(i, j, v)` triplets, summing duplicates. Each
    /// off-diagonal triplet is mirrored, so pass it once.
    pub(crate) fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            cols[j].push((i, v));
            if i != j {
                cols[i].push((j, v));
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|e| e.0);
            let mut last = NONE;
            for &(i, v) in col.iter() {
                if i == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                    last = i;
                }
            }
            col_ptr.push(row_idx.len());
        }
        SymmetricCsc {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `y = A x`
    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (j, &xj) in x.iter().enumerate().take(self.n) {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        y
    }

    fn max_abs_diag(&self) -> f64 {
        let mut m: f64 = 0.0;
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                if self.row_idx[p] == j {
                    m = m.max(self.values[p].abs());
                }
            }
        }
        m
    }
}

/// Minimum-degree elimination order on the explicit elimination graph.
/// Ties go to the lowest index so the order is deterministic.
pub(crate) fn minimum_degree_order(a: &SymmetricCsc) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|j| {
            a.row_idx[a.col_ptr[j]..a.col_ptr[j + 1]]
                .iter()
                .copied()
                .filter(|&i| i != j)
                .collect()
        })
        .collect();
    let mut done = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if done[v] || deg != adj[v].len() {
            continue;
        }
        done[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}

/// `P A Pᵀ = L D Lᵀ` with unit lower-triangular `L` stored by columns.
#[derive(Debug, Clone)]
pub(crate) struct SparseLdl {
    n: usize,
    perm: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
}

impl SparseLdl {
    pub(crate) fn factor(a: &SymmetricCsc) -> Result<Self> {
        let n = a.n;
        let perm = minimum_degree_order(a);
        let mut pinv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }

        // symbolic: elimination tree and column counts
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            let kk = perm[k];
            for p in a.col_ptr[kk]..a.col_ptr[kk + 1] {
                let mut i = pinv[a.row_idx[p]];
                if i < k {
                    while flag[i] != k {
                        if parent[i] == NONE {
                            parent[i] = k;
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                }
            }
        }
        let mut l_ptr = vec![0; n + 1];
        for k in 0..n {
            l_ptr[k + 1] = l_ptr[k] + lnz[k];
        }
        let nnz = l_ptr[n];
        let mut l_idx = vec![0; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut d = vec![0.0; n];

        // numeric
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        flag.iter_mut().for_each(|f| *f = NONE);
        lnz.iter_mut().for_each(|c| *c = 0);
        let tiny = a.max_abs_diag() * 1e-13;
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            let kk = perm[k];
            for p in a.col_ptr[kk]..a.col_ptr[kk + 1] {
                let mut i = pinv[a.row_idx[p]];
                if i <= k {
                    y[i] += a.values[p];
                    let mut len = 0;
                    while flag[i] != k {
                        pattern[len] = i;
                        len += 1;
                        flag[i] = k;
                        i = parent[i];
                    }
                    while len > 0 {
                        top -= 1;
                        len -= 1;
                        pattern[top] = pattern[len];
                    }
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let end = l_ptr[i] + lnz[i];
                for p in l_ptr[i]..end {
                    y[l_idx[p]] -= l_val[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                l_idx[end] = k;
                l_val[end] = l_ki;
                lnz[i] += 1;
            }
            if !(d[k] > tiny) {
                return Err(Error::Singular(format!(
                    "pivot {} of {} is {:e} (matrix not positive definite)",
                    k + 1,
                    n,
                    d[k]
                )));
            }
        }
        Ok(SparseLdl {
            n,
            perm,
            l_ptr,
            l_idx,
            l_val,
            d,
        })
    }

    pub(crate) fn nnz_l(&self) -> usize {
        self.l_ptr[self.n]
    }

    /// Overwrites `b` with `A⁻¹ b`.
    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.solve_permuted(&mut x);
        for (k, &p) in self.perm.iter().enumerate() {
            b[p] = x[k];
        }
    }

    fn solve_permuted(&self, x: &mut [f64]) {
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_ptr[j]..self.l_ptr[j + 1] {
                    x[self.l_idx[p]] -= self.l_val[p] * xj;
                }
            }
        }
        for (xj, dj) in x.iter_mut().zip(&self.d) {
            *xj /= dj;
        }
        for j in (0..self.n).rev() {
            let mut s = x[j];
            for p in self.l_ptr[j]..self.l_ptr[j + 1] {
                s -= self.l_val[p] * x[self.l_idx[p]];
            }
            x[j] = s;
        }
    }
}
