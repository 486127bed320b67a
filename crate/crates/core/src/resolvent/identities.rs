use num_complex::Complex64;
use serde::Serialize;

use super::{check_z, DecoupledResolvent, Resolvent};
use crate::coin::CoinIndex;
use crate::error::{Error, Result};
use crate::linalg::max_abs_diff;
use crate::walk::{BasisState, OuterSystem};

/// Largest entrywise deviations over the tested columns.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub l: u32,
    pub z: Complex64,
    /// `R - (R^L - R^L T^L R)`.
    pub single: f64,
    /// `R - (R^L - R^L T^L R^{L+3} + R^L T^L R T^{L+3} R^{L+3})`.
    pub double: f64,
    /// `⟨τ,0|R|σ,y⟩ - ⟨τ,0|R^L T^L R T^{L+3} R^{L+3}|σ,y⟩` over `|y| >= L+5`.
    pub expansion: f64,
    pub columns: usize,
    pub expansion_columns: usize,
    pub max_entry: f64,
}

impl IdentityReport {
    pub fn max_deviation(&self) -> f64 {
        self.single.max(self.double).max(self.expansion)
    }
}

/// `count` columns spread over the basis, plus `count` columns with site at
/// distance at least `L+5` from the center.
pub fn identity_columns(system: &OuterSystem, l: u32, count: usize) -> Vec<usize> {
    let n = system.dimension();
    let step = (n / count.max(1)).max(1);
    let mut cols: Vec<usize> = (0..n).step_by(step).take(count).collect();
    let far: Vec<usize> = (0..n).filter(|&j| system.basis().state(j).site.dist(&system.center) >= l + 5).collect();
    if !far.is_empty() {
        let step = (far.len() / count.max(1)).max(1);
        cols.extend(far.iter().step_by(step).take(count));
    }
    cols.sort_unstable();
    cols.dedup();
    cols
}

/// Checks the single and double geometric resolvent identities and the
/// boundary expansion on the given columns of the outer system.
pub fn verify_geometric_identity(system: &OuterSystem, l: u32, z: Complex64, columns: &[usize]) -> Result<IdentityReport> {
    check_z(z)?;
    if system.radius < l + 6 {
        return Err(Error::Geometry(format!(
            "outer radius {} cannot host the shell L+5 = {} with a separate collar",
            system.radius,
            l + 5
        )));
    }
    let n = system.dimension();
    if let Some(&j) = columns.iter().find(|&&j| j >= n) {
        return Err(Error::InvalidParameter(format!("column {j} out of range {n}")));
    }
    let r = Resolvent::new(system.full(), system.basis(), z)?;
    let rl = DecoupledResolvent::new(system, l, z)?;
    let rl3 = DecoupledResolvent::new(system, l + 3, z)?;
    let tl = system.defect(l)?;
    let tl3 = system.defect(l + 3)?;

    let d = system.perm.dim();
    let origin_rows: Vec<usize> = CoinIndex::all(d)
        .filter_map(|t| system.basis().index_of(&BasisState::new(t, system.center)))
        .collect();

    let mut report = IdentityReport {
        l,
        z,
        single: 0.0,
        double: 0.0,
        expansion: 0.0,
        columns: columns.len(),
        expansion_columns: 0,
        max_entry: 0.0,
    };
    for &j in columns {
        let rj = r.column(j)?;
        let rlj = rl.column(j)?;
        report.max_entry = rj.iter().fold(report.max_entry, |m, v| m.max(v.norm()));

        let single: Vec<Complex64> = {
            let corr = rl.apply(&tl.matvec(&rj))?;
            rlj.iter().zip(corr).map(|(a, b)| a - b).collect()
        };
        report.single = report.single.max(max_abs_diff(&rj, &single));

        let a = rl3.column(j)?;
        let second = rl.apply(&tl.matvec(&a))?;
        let third = rl.apply(&tl.matvec(&r.apply(&tl3.matvec(&a))?))?;
        let double: Vec<Complex64> = (0..n).map(|i| rlj[i] - second[i] + third[i]).collect();
        report.double = report.double.max(max_abs_diff(&rj, &double));

        if system.basis().state(j).site.dist(&system.center) >= l + 5 {
            report.expansion_columns += 1;
            for &i in &origin_rows {
                report.expansion = report.expansion.max((rj[i] - third[i]).norm());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::{perturb_coin, permutation_matrix, Permutation};
    use crate::disorder::{sample_field, PhaseDistribution};
    use crate::lattice::{BoxRegion, Site};
    use crate::walk::DEFAULT_DIMENSION_CAP;

    fn system(delta: f64, seed: u64, r: u32) -> OuterSystem {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let c = perturb_coin(&permutation_matrix(&p), delta, 3).unwrap();
        let f = sample_field(&BoxRegion::centered(2, r + 2).unwrap(), &PhaseDistribution::Uniform {}, seed).unwrap();
        OuterSystem::new(&p, &c, &f, Site::ORIGIN, r, DEFAULT_DIMENSION_CAP).unwrap()
    }

    #[test]
    fn identities_hold_to_solver_precision() {
        let sys = system(0.1, 5, 10);
        let cols = identity_columns(&sys, 3, 6);
        for z in [Complex64::from_polar(0.9, 0.7), Complex64::from_polar(1.1, -2.2)] {
            let rep = verify_geometric_identity(&sys, 3, z, &cols).unwrap();
            assert!(rep.expansion_columns > 0);
            assert!(rep.max_deviation() <= 1e-8, "{rep:?}");
            assert!(rep.max_entry > 0.1);
        }
    }

    #[test]
    fn expansion_is_not_vacuous() {
        // the far column reaches the origin only through the coin defect
        let sys = system(0.3, 1, 10);
        let far = identity_columns(&sys, 3, 4)
            .into_iter()
            .filter(|&j| sys.basis().state(j).site.dist(&Site::ORIGIN) >= 8)
            .collect::<Vec<_>>();
        let r = Resolvent::new(sys.full(), sys.basis(), Complex64::from_polar(1.1, 0.1)).unwrap();
        let origin = sys.basis().index_of(&BasisState::new(CoinIndex::new(1, 2).unwrap(), Site::ORIGIN)).unwrap();
        assert!(far.iter().any(|&j| r.column(j).unwrap()[origin].norm() > 0.0));
    }

    #[test]
    fn small_outer_box_rejected() {
        let sys = system(0.1, 5, 8);
        assert!(matches!(
            verify_geometric_identity(&sys, 3, Complex64::new(1.1, 0.0), &[0]),
            Err(Error::Geometry(_))
        ));
    }
}
