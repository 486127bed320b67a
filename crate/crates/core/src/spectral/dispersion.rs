use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use super::normal_eigen;
use crate::coin::{permutation_matrix, CoinIndex, CoinMatrix, Permutation};
use crate::error::{Error, Result};

/// Band variation at or below this is flat.
pub const FLAT_THRESHOLD: f64 = 1e-10;
/// Band variation at or above this is dispersive.
pub const DISPERSIVE_THRESHOLD: f64 = 1e-3;

/// `n^d` points `k_i = -π + 2π j / n`, first coordinate slowest.
pub fn k_grid(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..n).map(|j| -PI + TAU * j as f64 / n as f64).collect();
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

/// `Ĉ(k) = Φ(k) C` with `Φ(k)_{ττ} = e^{-i k·r(τ)}`.
pub fn symbol(c: &CoinMatrix, k: &[f64]) -> DMatrix<Complex64> {
    let mut m = c.matrix().clone();
    for tau in CoinIndex::all(c.dim()) {
        let phase = Complex64::from_polar(1.0, -(tau.sign() as f64) * k[tau.axis()]);
        for j in 0..m.ncols() {
            m[(tau.position(), j)] *= phase;
        }
    }
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct DispersionResult {
    pub grid: Vec<Vec<f64>>,
    /// `bands[k][b]`: eigenvalue `b` at grid point `k`, in branch-cut order.
    pub bands: Vec<Vec<Complex64>>,
    /// Diameter of each band over the grid.
    pub flatness: Vec<f64>,
    /// Argument at which bands are cut when sorting.
    pub branch_cut: f64,
}

impl DispersionResult {
    pub fn max_flatness(&self) -> f64 {
        self.flatness.iter().cloned().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.grid.first().map_or(0, |k| k.len());
        let head: Vec<String> = (1..=d).map(|i| format!("k{i}")).collect();
        writeln!(w, "{},band,re,im", head.join(","))?;
        for (k, vals) in self.grid.iter().zip(&self.bands) {
            let ks: Vec<String> = k.iter().map(|v| format!("{v:.17e}")).collect();
            for (b, z) in vals.iter().enumerate() {
                writeln!(w, "{},{b},{:.17e},{:.17e}", ks.join(","), z.re, z.im)?;
            }
        }
        Ok(())
    }
}

/// Middle of the widest gap between consecutive arguments.
fn widest_gap_cut(vals: &[Complex64]) -> f64 {
    let mut args: Vec<f64> = vals.iter().map(|z| z.arg()).collect();
    args.sort_by(f64::total_cmp);
    let n = args.len();
    let mut best = (TAU - (args[n - 1] - args[0]), args[n - 1]);
    for w in args.windows(2) {
        if w[1] - w[0] > best.0 {
            best = (w[1] - w[0], w[0]);
        }
    }
    best.1 + best.0 / 2.0
}

/// Eigenvalues of `Ĉ(k)` over the grid, matched across `k` by argument order
/// measured from a common branch cut.
pub fn dispersion(c: &CoinMatrix, grid: &[Vec<f64>]) -> Result<DispersionResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty k grid".into()));
    }
    let mut raw = Vec::with_capacity(grid.len());
    for k in grid {
        if k.len() != c.dim() {
            return Err(Error::DimensionMismatch { expected: c.dim(), found: k.len() });
        }
        raw.push(normal_eigen(&symbol(c, k))?.0);
    }
    let cut = widest_gap_cut(&raw[0]);
    let bands: Vec<Vec<Complex64>> = raw
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| (a.arg() - cut).rem_euclid(TAU).total_cmp(&(b.arg() - cut).rem_euclid(TAU)));
            v
        })
        .collect();
    let nb = bands[0].len();
    let flatness = (0..nb)
        .map(|b| {
            let mut d = 0.0f64;
            for i in 0..bands.len() {
                for j in i + 1..bands.len() {
                    d = d.max((bands[i][b] - bands[j][b]).norm());
                }
            }
            d
        })
        .collect();
    Ok(DispersionResult { grid: grid.to_vec(), bands, flatness, branch_cut: cut })
}

/// Flat-band classification of `C_π` on a `16^d` grid.
pub fn flat_band_test(perm: &Permutation) -> Result<bool> {
    let c = permutation_matrix(perm);
    let res = dispersion(&c, &k_grid(perm.dim(), 16))?;
    let f = res.max_flatness();
    if f <= FLAT_THRESHOLD {
        Ok(true)
    } else if f >= DISPERSIVE_THRESHOLD {
        Ok(false)
    } else {
        Err(Error::AmbiguousFlatness { flatness: f })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceCriterion {
    /// `max_k |∂_{k_j} Tr Ĉ(k)|` per axis, by central differences on the grid.
    pub derivative_max: Vec<f64>,
    /// `C_{jj} = C_{-j,-j} = 0` per axis.
    pub diagonal_vanishes: Vec<bool>,
    /// Vanishing derivative exactly on the axes with vanishing diagonal.
    pub consistent: bool,
}

/// `Tr Ĉ(k) = Σ_τ e^{-ik·r(τ)} C_{ττ}`.
pub fn trace(c: &CoinMatrix, k: &[f64]) -> Complex64 {
    CoinIndex::all(c.dim())
        .map(|t| Complex64::from_polar(1.0, -(t.sign() as f64) * k[t.axis()]) * c.entry(t, t))
        .sum()
}

/// Checks that `∂_{k_j} Tr Ĉ ≡ 0` iff `C_{jj} = C_{-j,-j} = 0`, with `tol`
/// separating zero from nonzero.
pub fn trace_criterion(c: &CoinMatrix, grid_n: usize, tol: f64) -> TraceCriterion {
    let d = c.dim();
    let h = 1e-5;
    let grid = k_grid(d, grid_n);
    let mut derivative_max = vec![0.0f64; d];
    for k in &grid {
        for (j, dm) in derivative_max.iter_mut().enumerate() {
            let mut kp = k.clone();
            let mut km = k.clone();
            kp[j] += h;
            km[j] -= h;
            let der = (trace(c, &kp) - trace(c, &km)) / (2.0 * h);
            *dm = dm.max(der.norm());
        }
    }
    let diagonal_vanishes: Vec<bool> = (0..d)
        .map(|j| {
            let p = CoinIndex::from_position(2 * j);
            let m = CoinIndex::from_position(2 * j + 1);
            c.entry(p, p).norm() <= tol && c.entry(m, m).norm() <= tol
        })
        .collect();
    let consistent = derivative_max.iter().zip(&diagonal_vanishes).all(|(&dm, &z)| (dm <= tol * 10.0) == z);
    TraceCriterion { derivative_max, diagonal_vanishes, consistent }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::check_localizing;

    #[test]
    fn grid_shape() {
        let g = k_grid(2, 4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[1], vec![-PI, -PI + TAU / 4.0]);
    }

    #[test]
    fn localizing_bands_flat() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let r = dispersion(&permutation_matrix(&p), &k_grid(2, 8)).unwrap();
        assert!(r.max_flatness() <= 1e-12, "{}", r.max_flatness());
        for k in &r.grid {
            let s = symbol(&permutation_matrix(&p), k);
            assert!(crate::linalg::unitarity_residual(&s) < 1e-12);
        }
    }

    #[test]
    fn non_localizing_band_disperses() {
        let p = Permutation::from_cycles(2, &[&[1, 2], &[-1, -2]]).unwrap();
        let r = dispersion(&permutation_matrix(&p), &k_grid(2, 32)).unwrap();
        assert!(r.max_flatness() >= 1e-3);
        // oracle: Ĉ(k)^2 on the cycle vector of +1 has eigenvalue e^{-ik·(e1+e2)}
        let k = [0.4, -1.1];
        let s = symbol(&permutation_matrix(&p), &k);
        let s2 = &s * &s;
        let e = CoinIndex::new(1, 2).unwrap().position();
        let want = Complex64::from_polar(1.0, -(k[0] + k[1]));
        assert!((s2[(e, e)] - want).norm() < 1e-14);
    }

    #[test]
    fn flat_band_examples() {
        assert!(flat_band_test(&Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap()).unwrap());
        assert!(!flat_band_test(&Permutation::from_cycles(2, &[&[1, 2], &[-1, -2]]).unwrap()).unwrap());
        assert!(flat_band_test(&Permutation::from_cycles(1, &[&[1, -1]]).unwrap()).unwrap());
    }

    #[test]
    fn dichotomy_exhaustive_d2() {
        for p in Permutation::all(2).unwrap().into_iter().filter(|p| p.is_fixed_point_free()) {
            assert_eq!(flat_band_test(&p).unwrap(), check_localizing(&p).localizing, "{p:?}");
        }
    }

    #[test]
    fn off_diagonal_trace_constant() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let c = permutation_matrix(&p);
        for k in k_grid(2, 5) {
            assert_eq!(trace(&c, &k), Complex64::new(0.0, 0.0));
        }
        let t = trace_criterion(&c, 8, 1e-12);
        assert!(t.consistent && t.diagonal_vanishes.iter().all(|&z| z));
        let f = CoinMatrix::fourier(2).unwrap();
        let t = trace_criterion(&f, 8, 1e-12);
        assert!(t.consistent && t.diagonal_vanishes.iter().all(|&z| !z));
    }
}
