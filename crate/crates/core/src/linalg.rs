//! Sparse complex matrices and the shifted solver used for resolvents.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// `max_{ij} |(M* M - I)_{ij}|`.
pub fn unitarity_residual(m: &DMatrix<Complex64>) -> f64 {
    let p = m.adjoint() * m;
    let mut r = 0.0f64;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            r = r.max((p[(i, j)] - target).norm());
        }
    }
    r
}

/// Largest singular value.
pub fn op_norm_dense(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)`; duplicates are summed, exact zeros kept
    /// out of the pattern.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut t: Vec<(usize, usize, Complex64)>) -> Self {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, Complex64)> = Vec::with_capacity(t.len());
        for (r, c, v) in t {
            assert!(r < n_rows && c < n_cols, "triplet ({r},{c}) out of bounds");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != ZERO);
        let mut row_ptr = vec![0; n_rows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            cols: merged.iter().map(|e| e.1).collect(),
            vals: merged.iter().map(|e| e.2).collect(),
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, Vec::new())
    }

    pub fn nrows(&self) -> usize {
        self.n_rows
    }

    pub fn ncols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[range.clone()].binary_search(&c) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => ZERO,
        }
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * x[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    pub fn adjoint_matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = vec![ZERO; self.n_cols];
        for (r, c, v) in self.triplets() {
            y[c] += v.conj() * x[r];
        }
        y
    }

    pub fn sub(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let t = self.triplets().chain(other.triplets().map(|(r, c, v)| (r, c, -v))).collect();
        SparseMatrix::from_triplets(self.n_rows, self.n_cols, t)
    }

    /// Submatrix on the given row and column index lists (in that order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut t = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = col_map[self.cols[k]];
                if c != usize::MAX {
                    t.push((i, c, self.vals[k]));
                }
            }
        }
        SparseMatrix::from_triplets(rows.len(), cols.len(), t)
    }

    pub fn adjoint(&self) -> SparseMatrix {
        let t = self.triplets().map(|(r, c, v)| (c, r, v.conj())).collect();
        SparseMatrix::from_triplets(self.n_cols, self.n_rows, t)
    }

    /// Sparse product `self * other`.
    pub fn mul(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.n_cols, other.n_rows);
        let mut t = Vec::new();
        let mut acc = vec![ZERO; other.n_cols];
        let mut touched = Vec::new();
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (m, a) = (self.cols[k], self.vals[k]);
                for q in other.row_ptr[m]..other.row_ptr[m + 1] {
                    let c = other.cols[q];
                    if acc[c] == ZERO {
                        touched.push(c);
                    }
                    acc[c] += a * other.vals[q];
                }
            }
            for c in touched.drain(..) {
                t.push((r, c, acc[c]));
                acc[c] = ZERO;
            }
        }
        SparseMatrix::from_triplets(self.n_rows, other.n_cols, t)
    }

    /// `max_{ij} |(A* A - I)_{ij}|`.
    pub fn unitarity_residual(&self) -> f64 {
        let p = self.adjoint().mul(self);
        let mut r = 0.0f64;
        let mut diag = vec![false; p.n_rows];
        for (i, j, v) in p.triplets() {
            if i == j {
                diag[i] = true;
                r = r.max((v - 1.0).norm());
            } else {
                r = r.max(v.norm());
            }
        }
        if diag.iter().any(|d| !d) {
            return r.max(1.0);
        }
        r
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |a, v| a.max(v.norm()))
    }

    /// Columns holding at least one nonzero entry.
    pub fn nonzero_columns(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_cols];
        for &c in &self.cols {
            seen[c] = true;
        }
        (0..self.n_cols).filter(|&c| seen[c]).collect()
    }

    pub fn nonzero_rows(&self) -> Vec<usize> {
        (0..self.n_rows).filter(|&r| self.row_ptr[r + 1] > self.row_ptr[r]).collect()
    }

    /// Operator norm, from a dense SVD of the submatrix on nonzero rows and columns.
    pub fn op_norm(&self) -> f64 {
        let rows = self.nonzero_rows();
        let cols = self.nonzero_columns();
        if rows.is_empty() {
            return 0.0;
        }
        op_norm_dense(&self.submatrix(&rows, &cols).to_dense())
    }

    /// CSV triplets `row,col,re,im` sorted by row then column.
    pub fn write_triplet_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,re,im")?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r},{c},{:e},{:e}", v.re, v.im)?;
        }
        Ok(())
    }
}

/// LU factorization of `A - zI` in banded storage with partial pivoting.
///
/// Rows and columns are first permuted by `order` (new position `k` holds old
/// index `order[k]`); a site-lexicographic order keeps the bandwidth of a
/// nearest-neighbour operator at about `2d (2R+1)^{d-1}`.
pub struct ShiftedSolver {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    ab: Vec<Complex64>,
    ipiv: Vec<usize>,
    /// `pos[old] = new`
    pos: Vec<usize>,
    order: Vec<usize>,
    a: SparseMatrix,
    z: Complex64,
}

impl ShiftedSolver {
    pub fn new(a: &SparseMatrix, z: Complex64, order: &[usize]) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::NonSquare { rows: n, cols: a.ncols() });
        }
        if order.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: order.len() });
        }
        let mut pos = vec![usize::MAX; n];
        for (k, &o) in order.iter().enumerate() {
            pos[o] = k;
        }
        if pos.contains(&usize::MAX) {
            return Err(Error::InvalidParameter("ordering is not a permutation".into()));
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for (r, c, _) in a.triplets() {
            let (pr, pc) = (pos[r], pos[c]);
            if pr > pc {
                kl = kl.max(pr - pc);
            } else {
                ku = ku.max(pc - pr);
            }
        }
        let ld = 2 * kl + ku + 1;
        let mut s = Self {
            n,
            kl,
            ku,
            ld,
            ab: vec![ZERO; ld * n],
            ipiv: vec![0; n],
            pos,
            order: order.to_vec(),
            a: a.clone(),
            z,
        };
        for (r, c, v) in a.triplets() {
            let i = s.idx(s.pos[r], s.pos[c]);
            s.ab[i] += v;
        }
        for k in 0..n {
            let i = s.idx(k, k);
            s.ab[i] -= z;
        }
        s.factor()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline(always)]
    fn idx(&self, r: usize, c: usize) -> usize {
        // band row kl + ku + r - c of column c
        c * self.ld + self.kl + self.ku + r - c
    }

    fn factor(&mut self) -> Result<()> {
        let (n, kl, ld) = (self.n, self.kl, self.ld);
        let kv = self.kl + self.ku;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ld + kv;
            let mut jp = 0;
            let mut best = -1.0;
            for i in 0..=km {
                let v = self.ab[col + i].norm_sqr();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            self.ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(Error::SolverFailure(format!("zero pivot in column {j}")));
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + jp, c);
                    self.ab.swap(a, b);
                }
            }
            let inv = self.ab[col].inv();
            for i in 1..=km {
                self.ab[col + i] *= inv;
            }
            for c in j + 1..=ju {
                let u = self.ab[self.idx(j, c)];
                if u == ZERO {
                    continue;
                }
                let dst = self.idx(j + 1, c);
                let (head, tail) = self.ab.split_at_mut(dst);
                let src = &head[col + 1..col + 1 + km];
                for (d, &l) in tail[..km].iter_mut().zip(src) {
                    *d -= l * u;
                }
            }
        }
        Ok(())
    }

    fn solve_permuted(&self, b: &mut [Complex64]) {
        let (n, kl, ld) = (self.n, self.kl, self.ld);
        let kv = self.kl + self.ku;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj == ZERO {
                continue;
            }
            let km = kl.min(n - 1 - j);
            let col = j * ld + kv;
            for i in 1..=km {
                b[j + i] -= self.ab[col + i] * bj;
            }
        }
        for j in (0..n).rev() {
            let col = j * ld + kv;
            b[j] /= self.ab[col];
            let bj = b[j];
            if bj == ZERO {
                continue;
            }
            let top = j.saturating_sub(kv);
            for r in top..j {
                b[r] -= self.ab[col - (j - r)] * bj;
            }
        }
    }

    /// `(A - z)^{-1} b` with one step of iterative refinement.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let mut x = self.raw_solve(b);
        let r = self.residual(&x, b);
        let dx = self.raw_solve(&r);
        for (xi, di) in x.iter_mut().zip(dx) {
            *xi += di;
        }
        x
    }

    fn raw_solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(b.len(), self.n);
        let mut w: Vec<Complex64> = self.order.iter().map(|&o| b[o]).collect();
        self.solve_permuted(&mut w);
        let mut x = vec![ZERO; self.n];
        for (old, &p) in self.pos.iter().enumerate() {
            x[old] = w[p];
        }
        x
    }

    /// `b - (A - z) x`.
    pub fn residual(&self, x: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
        let ax = self.a.matvec(x);
        b.iter().zip(ax).zip(x).map(|((&bi, axi), &xi)| bi - (axi - self.z * xi)).collect()
    }

    /// Solves and checks `‖(A - z)x - b‖ <= tol ‖x‖`.
    pub fn solve_checked(&self, b: &[Complex64], tol: f64) -> Result<Vec<Complex64>> {
        let x = self.solve(b);
        let r = norm(&self.residual(&x, b));
        let xn = norm(&x);
        if !r.is_finite() || r > tol * xn.max(f64::MIN_POSITIVE) {
            return Err(Error::SolverFailure(format!("residual {r:.3e} vs |x| = {xn:.3e}")));
        }
        Ok(x)
    }

    /// Column `j` of `(A - z)^{-1}`.
    pub fn column(&self, j: usize) -> Vec<Complex64> {
        let mut e = vec![ZERO; self.n];
        e[j] = Complex64::new(1.0, 0.0);
        self.solve(&e)
    }
}

pub fn norm(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, bw: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for r in 0..n {
            for c in r.saturating_sub(bw)..(r + bw + 1).min(n) {
                if rng.gen_bool(0.6) {
                    t.push((r, c, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, t)
    }

    #[test]
    fn banded_lu_matches_dense_inverse() {
        let a = random_banded(60, 5, 3);
        let z = Complex64::new(0.3, 2.5);
        let order: Vec<usize> = (0..60).collect();
        let s = ShiftedSolver::new(&a, z, &order).unwrap();
        let dense = a.to_dense() - DMatrix::identity(60, 60) * z;
        let inv = dense.try_inverse().unwrap();
        for j in [0, 17, 59] {
            let col = s.column(j);
            for i in 0..60 {
                assert!((col[i] - inv[(i, j)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn reordering_is_transparent() {
        let a = random_banded(40, 3, 9);
        let z = Complex64::new(-0.2, 3.0);
        let id: Vec<usize> = (0..40).collect();
        let mut rev = id.clone();
        rev.reverse();
        let s1 = ShiftedSolver::new(&a, z, &id).unwrap();
        let s2 = ShiftedSolver::new(&a, z, &rev).unwrap();
        let b: Vec<Complex64> = (0..40).map(|k| Complex64::new(k as f64, 1.0)).collect();
        assert!(max_abs_diff(&s1.solve(&b), &s2.solve(&b)) < 1e-12);
        assert!(s1.solve_checked(&b, 1e-12).is_ok());
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // cyclic shift: zero diagonal, needs row exchanges when z = 0
        let n = 8;
        let t = (0..n).map(|k| ((k + 1) % n, k, Complex64::new(1.0, 0.0))).collect();
        let a = SparseMatrix::from_triplets(n, n, t);
        let order: Vec<usize> = (0..n).collect();
        let s = ShiftedSolver::new(&a, Complex64::new(0.0, 0.0), &order).unwrap();
        let b: Vec<Complex64> = (0..n).map(|k| Complex64::new(k as f64 + 1.0, 0.0)).collect();
        let x = s.solve(&b);
        assert!(max_abs_diff(&a.matvec(&x), &b) < 1e-13);
    }

    #[test]
    fn sparse_product_and_residual() {
        let a = random_banded(30, 2, 4);
        let b = random_banded(30, 3, 5);
        let dense = a.to_dense() * b.to_dense();
        let prod = a.mul(&b).to_dense();
        assert!((dense - prod).norm() < 1e-12);
        let d = a.to_dense();
        assert!((a.unitarity_residual() - unitarity_residual(&d)).abs() < 1e-12);
        let n = 5;
        let t = (0..n).map(|k| ((k + 1) % n, k, Complex64::from_polar(1.0, k as f64))).collect();
        assert!(SparseMatrix::from_triplets(n, n, t).unitarity_residual() < 1e-15);
    }

    #[test]
    fn sparse_basics() {
        let a = SparseMatrix::from_triplets(
            3,
            3,
            vec![(0, 1, Complex64::new(2.0, 0.0)), (0, 1, Complex64::new(1.0, 0.0)), (2, 0, Complex64::new(0.0, 0.0))],
        );
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.get(0, 1), Complex64::new(3.0, 0.0));
        assert_eq!(a.nonzero_columns(), vec![1]);
        assert!((a.op_norm() - 3.0).abs() < 1e-14);
        let y = a.adjoint_matvec(&[Complex64::new(1.0, 0.0), ZERO, ZERO]);
        assert_eq!(y[1], Complex64::new(3.0, 0.0));
    }
}
