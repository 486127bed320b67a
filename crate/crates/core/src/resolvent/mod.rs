//! Resolvent matrix elements, the geometric resolvent identities and
//! fractional-moment estimates.

mod fm;
mod identities;
mod scan;

pub use fm::{
    decay_fit, distance_profile, fractional_moment_mc, pairs_at_distances, worst_case, DistanceProfile, FMEstimate,
    FMFitResult, FmEnsemble, FmRun,
};
pub use identities::{identity_columns, verify_geometric_identity, IdentityReport};
pub use scan::{finite_volume_bound_scan, ScanConfig, ScanReport, ScanRow};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ShiftedSolver, SparseMatrix};
use crate::walk::{Basis, BasisState, OuterSystem};

/// Relative residual accepted for `(U - z)w = e`.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Rejects `z` outside `1/2 < |z| < 2` or within `1e-12` of the unit circle.
pub fn check_z(z: Complex64) -> Result<()> {
    let r = z.norm();
    if !(r > 0.5 && r < 2.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("|z| = {r} outside (1/2, 2)")));
    }
    if (r - 1.0).abs() <= 1e-12 {
        return Err(Error::InvalidParameter(format!("|z| = {r} on the unit circle")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventQuery {
    pub z: Complex64,
    pub source: BasisState,
    pub targets: Vec<BasisState>,
}

impl ResolventQuery {
    pub fn validate(&self) -> Result<()> {
        check_z(self.z)
    }
}

/// `(U - z)^{-1}` on a materialized operator, one factorization shared by all columns.
pub struct Resolvent {
    solver: ShiftedSolver,
}

impl Resolvent {
    pub fn new(u: &SparseMatrix, basis: &Basis, z: Complex64) -> Result<Self> {
        check_z(z)?;
        Ok(Self { solver: ShiftedSolver::new(u, z, &basis.band_order())? })
    }

    pub fn dim(&self) -> usize {
        self.solver.dim()
    }

    /// `R b`, residual-checked.
    pub fn apply(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        self.solver.solve_checked(b, RESIDUAL_TOL)
    }

    /// `R e_j`.
    pub fn column(&self, j: usize) -> Result<Vec<Complex64>> {
        self.apply(&unit(self.dim(), j))
    }
}

fn unit(n: usize, j: usize) -> Vec<Complex64> {
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    e[j] = Complex64::new(1.0, 0.0);
    e
}

/// `⟨target|(U - z)^{-1}|source⟩`.
pub fn resolvent_element(
    u: &SparseMatrix,
    basis: &Basis,
    z: Complex64,
    source: &BasisState,
    target: &BasisState,
) -> Result<Complex64> {
    let j = basis.index_of(source).ok_or_else(|| missing(source))?;
    let i = basis.index_of(target).ok_or_else(|| missing(target))?;
    Ok(Resolvent::new(u, basis, z)?.column(j)?[i])
}

pub(crate) fn missing(s: &BasisState) -> Error {
    Error::InvalidParameter(format!("state ({}, {:?}) not in the basis", s.coin.value(), s.site))
}

/// `R^L = (U^{Λ_L} ⊕ U^{Λ_L^c} - z)^{-1}` on the outer space, as two
/// independent factorizations.
pub struct DecoupledResolvent {
    n: usize,
    parts: [(Vec<usize>, Option<ShiftedSolver>); 2],
}

impl DecoupledResolvent {
    pub fn new(system: &OuterSystem, l: u32, z: Complex64) -> Result<Self> {
        check_z(z)?;
        let ul = system.decoupled(l)?;
        let n = system.dimension();
        let build = |idx: Vec<usize>| -> Result<(Vec<usize>, Option<ShiftedSolver>)> {
            if idx.is_empty() {
                return Ok((idx, None));
            }
            let sub = ul.submatrix(&idx, &idx);
            let mut order: Vec<usize> = (0..idx.len()).collect();
            let basis = system.basis();
            order.sort_by_key(|&a| basis.state(idx[a]));
            let solver = ShiftedSolver::new(&sub, z, &order)?;
            Ok((idx, Some(solver)))
        };
        let inner = build(system.inner_indices(l))?;
        let outer = build(system.complement_indices(l))?;
        Ok(Self { n, parts: [inner, outer] })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn inner_dim(&self) -> usize {
        self.parts[0].0.len()
    }

    pub fn complement_dim(&self) -> usize {
        self.parts[1].0.len()
    }

    /// `R^L b`; each summand is solved on its own subspace, so no entry
    /// couples the two.
    pub fn apply(&self, b: &[Complex64]) -> Result<Vec<Complex64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: b.len() });
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (idx, solver) in &self.parts {
            let Some(solver) = solver else { continue };
            let local: Vec<Complex64> = idx.iter().map(|&i| b[i]).collect();
            if local.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
                continue;
            }
            let x = solver.solve_checked(&local, RESIDUAL_TOL)?;
            for (&i, v) in idx.iter().zip(x) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    pub fn column(&self, j: usize) -> Result<Vec<Complex64>> {
        self.apply(&unit(self.n, j))
    }
}
