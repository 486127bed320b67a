//! Exact and numerical spectra of the walk and of its Fourier symbol.

mod arcs;
mod dispersion;

pub use arcs::{
    arc_avoidance_probability, convolution_power, exact_avoidance_probability, spectral_distance_statistics,
    ArcStats, ArcTarget, DistanceStats,
};
pub use dispersion::{
    dispersion, flat_band_test, k_grid, symbol, trace_criterion, DispersionResult, TraceCriterion, DISPERSIVE_THRESHOLD,
    FLAT_THRESHOLD,
};

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::disorder::PhaseField;
use crate::error::{Error, Result};
use crate::linalg::unitarity_residual;
use crate::walk::InvariantBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    ExactFormula,
    Numerical,
}

/// Eigenvalues sorted by argument in `(-π, π]`.
#[derive(Clone, Debug, Serialize)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<Complex64>,
    /// `‖Uv - λv‖` per eigenpair; zeros for the exact formula.
    pub residuals: Vec<f64>,
    pub source: SpectrumSource,
}

impl SpectrumResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,re,im,residual")?;
        for (k, (z, r)) in self.eigenvalues.iter().zip(&self.residuals).enumerate() {
            writeln!(w, "{k},{:.17e},{:.17e},{:.3e}", z.re, z.im, r)?;
        }
        Ok(())
    }
}

fn sort_by_arg(pairs: &mut [(Complex64, f64)]) {
    pairs.sort_by(|a, b| a.0.arg().total_cmp(&b.0.arg()));
}

/// Eigenvalues and orthonormal eigenvectors (columns) of a normal matrix,
/// unsorted.
///
/// `U` commutes with its adjoint, so it shares eigenvectors with the Hermitian
/// matrix `Re U + α Im U`; the eigenvalues are recovered as Rayleigh quotients.
/// Several `α` are tried and the complex Schur form is the last resort.
pub fn normal_eigen(m: &DMatrix<Complex64>) -> Result<(Vec<Complex64>, DMatrix<Complex64>)> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare { rows: m.nrows(), cols: m.ncols() });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let scale = m.norm().max(1.0);
    let adj = m.adjoint();
    let re = (m + &adj) * Complex64::new(0.5, 0.0);
    let im = (m - &adj) * Complex64::new(0.0, -0.5);
    let mut best: Option<(f64, Vec<Complex64>, DMatrix<Complex64>)> = None;
    for alpha in [0.754_877_666_246_692_7, 1.324_717_957_244_746, 0.445_041_867_912_629, 2.236_067_977_499_79] {
        let h = &re + &im * Complex64::new(alpha, 0.0);
        let eig = nalgebra::SymmetricEigen::new(h);
        let v = eig.eigenvectors;
        let mv = m * &v;
        let mut vals = Vec::with_capacity(n);
        let mut worst = 0.0f64;
        for k in 0..n {
            let col = v.column(k);
            let l = col.dotc(&mv.column(k));
            worst = worst.max((mv.column(k) - col * l).norm());
            vals.push(l);
        }
        if worst <= 1e-12 * scale {
            return Ok((vals, v));
        }
        if best.as_ref().map_or(true, |b| worst < b.0) {
            best = Some((worst, vals, v));
        }
    }
    if let Some(schur) = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        let (q, t) = schur.unpack();
        let vals: Vec<Complex64> = (0..n).map(|k| t[(k, k)]).collect();
        let mq = m * &q;
        let worst = (0..n).map(|k| (mq.column(k) - q.column(k) * vals[k]).norm()).fold(0.0, f64::max);
        if best.as_ref().map_or(true, |b| worst < b.0) {
            best = Some((worst, vals, q));
        }
    }
    let (_, vals, v) = best.unwrap();
    Ok((vals, v))
}

/// Full eigendecomposition of a unitary matrix.
pub fn unitary_spectrum(m: &DMatrix<Complex64>) -> Result<SpectrumResult> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare { rows: m.nrows(), cols: m.ncols() });
    }
    let residual = unitarity_residual(m);
    if residual > 1e-8 {
        return Err(Error::NotUnitary { residual });
    }
    let (vals, q) = normal_eigen(m)?;
    let mut pairs: Vec<(Complex64, f64)> = vals
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let v = q.column(k);
            ((m * v - v * l).norm(), l)
        })
        .map(|(r, l)| (l, r))
        .collect();
    sort_by_arg(&mut pairs);
    Ok(SpectrumResult {
        eigenvalues: pairs.iter().map(|p| p.0).collect(),
        residuals: pairs.iter().map(|p| p.1).collect(),
        source: SpectrumSource::Numerical,
    })
}

/// `e^{i(θ + 2πk)/m}`, `k = 0..m-1`, sorted by argument.
pub fn roots_spectrum(theta: f64, m: usize) -> Vec<Complex64> {
    let mut v: Vec<Complex64> =
        (0..m).map(|k| Complex64::from_polar(1.0, (theta + TAU * k as f64) / m as f64)).collect();
    v.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    v
}

/// Spectrum of `U_ω(C_π)` on a block: the `m`-th roots of `e^{iθ}` with `θ`
/// the sum of the phases met along the block.
pub fn block_spectrum_exact(block: &InvariantBlock, field: &PhaseField) -> Result<SpectrumResult> {
    let theta = block.phase_sum(field)?;
    let eigenvalues = roots_spectrum(theta, block.len());
    Ok(SpectrumResult { residuals: vec![0.0; eigenvalues.len()], eigenvalues, source: SpectrumSource::ExactFormula })
}

/// Hausdorff distance between two finite point sets.
pub fn hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let one_way = |x: &[Complex64], y: &[Complex64]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { f64::INFINITY };
    }
    one_way(a, b).max(one_way(b, a))
}

/// Closed arc of the unit circle from angle `start` counterclockwise over `length`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arc {
    pub start: f64,
    pub length: f64,
}

impl Arc {
    pub fn new(start: f64, length: f64) -> Result<Self> {
        if !(0.0..TAU).contains(&length) || !start.is_finite() {
            return Err(Error::InvalidParameter(format!("arc length {length} not in [0, 2π)")));
        }
        Ok(Self { start, length })
    }

    pub fn centered(center: f64, length: f64) -> Result<Self> {
        Self::new(center - length / 2.0, length)
    }

    /// Membership of `e^{iφ}`, wrap-around handled in argument space.
    pub fn contains_angle(&self, phi: f64) -> bool {
        (phi - self.start).rem_euclid(TAU) <= self.length
    }

    pub fn contains(&self, z: Complex64) -> bool {
        self.contains_angle(z.arg())
    }

    /// Image under `z -> z^m` (an arc of length `m|A|`).
    pub fn power(&self, m: usize) -> Arc {
        Arc { start: (self.start * m as f64).rem_euclid(TAU), length: self.length * m as f64 }
    }

    pub fn midpoint(&self) -> f64 {
        (self.start + self.length / 2.0 + PI).rem_euclid(TAU) - PI
    }
}
