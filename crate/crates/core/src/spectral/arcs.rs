use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{roots_spectrum, Arc};
use crate::coin::{check_localizing, decompose_cycles, CoinIndex, Permutation};
use crate::disorder::{sample_field, PhaseDistribution};
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};
use crate::mc::run_realizations;
use crate::stats::wilson_interval;
use crate::walk::{enumerate_blocks, InvariantBlock};

const CONVOLUTION_GRID: usize = 4096;

/// Which part of `H_0` an arc statistic looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArcTarget {
    /// The block `H_0^{τ_j}` of the `index`-th cycle (leader `τ_j`).
    Cycle { index: usize },
    /// All blocks anchored at the origin.
    Site,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArcStats {
    pub arc_length: f64,
    pub n: usize,
    pub avoided: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Value from the convolution density.
    pub exact: f64,
    /// `(1 - estimate) / |A|`.
    pub fitted_c: f64,
    pub seed: u64,
}

/// Density of the sum of `m` i.i.d. phases mod 2π, sampled at `2πk/G`.
pub fn convolution_power(dist: &PhaseDistribution, m: usize) -> Vec<f64> {
    let g = CONVOLUTION_GRID;
    let h = TAU / g as f64;
    let base: Vec<f64> = (0..g).map(|k| dist.density(k as f64 * h)).collect();
    let mut acc = base.clone();
    for _ in 1..m {
        let mut next = vec![0.0; g];
        for (k, out) in next.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..g {
                s += acc[j] * base[(k + g - j) % g];
            }
            *out = s * h;
        }
        acc = next;
    }
    acc
}

fn integrate_arc(density: &[f64], arc: &Arc) -> f64 {
    // trapezoid on a fine subdivision of the arc, linear interpolation on the grid
    let g = density.len();
    let h = TAU / g as f64;
    let steps = ((arc.length / h).ceil() as usize * 4).max(16);
    let dt = arc.length / steps as f64;
    let at = |t: f64| {
        let u = t.rem_euclid(TAU) / h;
        let k = u.floor() as usize % g;
        let f = u - u.floor();
        density[k] * (1.0 - f) + density[(k + 1) % g] * f
    };
    let mut s = 0.5 * (at(arc.start) + at(arc.start + arc.length));
    for i in 1..steps {
        s += at(arc.start + i as f64 * dt);
    }
    s * dt
}

/// `P(σ(U(C_π)|_block) ∩ A = ∅)` for a block of length `m`: one minus the mass
/// of the `m`-fold convolution density on the arc `A^m`.
pub fn exact_avoidance_probability(dist: &PhaseDistribution, m: usize, arc: &Arc) -> Result<f64> {
    if arc.length * m as f64 >= TAU {
        return Err(Error::ArcTooLong { length: arc.length, limit: TAU / m as f64 });
    }
    if let PhaseDistribution::Uniform {} = dist {
        return Ok(1.0 - m as f64 * arc.length / TAU);
    }
    Ok(1.0 - integrate_arc(&convolution_power(dist, m), &arc.power(m)))
}

fn target_blocks(perm: &Permutation, target: ArcTarget) -> Result<Vec<InvariantBlock>> {
    if !check_localizing(perm).localizing {
        return Err(Error::NonLocalizing);
    }
    match target {
        ArcTarget::Cycle { index } => {
            let dec = decompose_cycles(perm);
            let cycle = dec
                .cycles
                .get(index)
                .ok_or_else(|| Error::InvalidParameter(format!("no cycle with index {index}")))?;
            Ok(vec![InvariantBlock::new(perm, cycle.leader(), Site::ORIGIN)])
        }
        ArcTarget::Site => Ok(CoinIndex::all(perm.dim()).map(|t| InvariantBlock::new(perm, t, Site::ORIGIN)).collect()),
    }
}

/// Fraction of realizations whose block spectra miss `arc`, with a 95% Wilson
/// interval. Realization `i` uses seed `derive_seed(seed, i)`.
pub fn arc_avoidance_probability(
    perm: &Permutation,
    target: ArcTarget,
    dist: &PhaseDistribution,
    arc: &Arc,
    n: usize,
    seed: u64,
) -> Result<ArcStats> {
    if n < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 realizations, got {n}")));
    }
    dist.validate()?;
    let blocks = target_blocks(perm, target)?;
    let m_max = blocks.iter().map(|b| b.len()).max().unwrap_or(1);
    if arc.length >= TAU / m_max as f64 {
        return Err(Error::ArcTooLong { length: arc.length, limit: TAU / m_max as f64 });
    }
    let region = BoxRegion::centered(perm.dim(), 2)?;
    let outcomes = run_realizations(n, seed, |_, s| {
        let field = sample_field(&region, dist, s)?;
        for b in &blocks {
            let theta = b.phase_sum(&field)?;
            if roots_spectrum(theta, b.len()).iter().any(|z| arc.contains(*z)) {
                return Ok(false);
            }
        }
        Ok(true)
    });
    let mut avoided = 0;
    for o in outcomes {
        if o? {
            avoided += 1;
        }
    }
    let exact = blocks.iter().map(|b| exact_avoidance_probability(dist, b.len(), arc)).product::<Result<f64>>()?;
    let estimate = avoided as f64 / n as f64;
    let (ci_low, ci_high) = wilson_interval(avoided, n, 1.96);
    Ok(ArcStats {
        arc_length: arc.length,
        n,
        avoided,
        estimate,
        ci_low,
        ci_high,
        exact,
        fitted_c: if arc.length > 0.0 { (1.0 - estimate) / arc.length } else { 0.0 },
        seed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceStats {
    pub z: [f64; 2],
    pub eta: f64,
    pub radius: u32,
    pub n: usize,
    pub hits: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

/// `P(dist(z, σ(U^{Λ_L}(C_π))) ≤ η)` from the exact block spectra.
pub fn spectral_distance_statistics(
    z: Complex64,
    eta: f64,
    l: u32,
    perm: &Permutation,
    dist: &PhaseDistribution,
    n: usize,
    seed: u64,
) -> Result<DistanceStats> {
    let rho = z.norm();
    if !rho.is_finite() || rho == 0.0 || rho > 1e6 {
        return Err(Error::InvalidParameter(format!("z = {z} outside the supported range")));
    }
    if (rho - 1.0).abs() < 1e-12 {
        return Err(Error::InvalidParameter("z lies on the unit circle".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("η = {eta} must be positive")));
    }
    dist.validate()?;
    let blocks = enumerate_blocks(perm, &BoxRegion::centered(perm.dim(), l)?)?;
    let region = BoxRegion::centered(perm.dim(), l + 2)?;
    let outcomes = run_realizations(n, seed, |_, s| {
        let field = sample_field(&region, dist, s)?;
        for b in &blocks {
            let theta = b.phase_sum(&field)?;
            if roots_spectrum(theta, b.len()).iter().any(|w| (w - z).norm() <= eta) {
                return Ok(true);
            }
        }
        Ok(false)
    });
    let mut hits = 0;
    for o in outcomes {
        if o? {
            hits += 1;
        }
    }
    let (ci_low, ci_high) = wilson_interval(hits, n, 1.96);
    Ok(DistanceStats {
        z: [z.re, z.im],
        eta,
        radius: l,
        n,
        hits,
        estimate: hits as f64 / n as f64,
        ci_low,
        ci_high,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_swap() -> Permutation {
        Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap()
    }

    #[test]
    fn small_arc_always_avoided() {
        let a = Arc::new(0.3, 1e-9).unwrap();
        let s = arc_avoidance_probability(&pair_swap(), ArcTarget::Cycle { index: 0 }, &PhaseDistribution::Uniform {}, &a, 500, 1).unwrap();
        assert_eq!(s.avoided, 500);
    }

    #[test]
    fn uniform_m2_matches_exact() {
        let a = Arc::new(1.0, 0.1).unwrap();
        let s = arc_avoidance_probability(&pair_swap(), ArcTarget::Cycle { index: 0 }, &PhaseDistribution::Uniform {}, &a, 20_000, 2).unwrap();
        assert!((s.exact - (1.0 - 0.2 / TAU)).abs() < 1e-15);
        assert!(s.ci_low <= s.exact && s.exact <= s.ci_high, "{s:?}");
    }

    #[test]
    fn convolution_oracle_matches_uniform() {
        // uniform through the numerical convolution path
        let d = PhaseDistribution::Tabulated { density: vec![1.0 / TAU; 64] };
        let a = Arc::new(2.0, 0.3).unwrap();
        let p = exact_avoidance_probability(&d, 4, &a).unwrap();
        assert!((p - (1.0 - 4.0 * 0.3 / TAU)).abs() < 1e-9, "{p}");
    }

    #[test]
    fn nonuniform_density_matches_exact() {
        let d = PhaseDistribution::from_fn_normalized(|t| 1.0 + 0.9 * t.cos()).unwrap();
        let a = Arc::new(0.0, 0.4).unwrap();
        let s = arc_avoidance_probability(&pair_swap(), ArcTarget::Cycle { index: 1 }, &d, &a, 20_000, 3).unwrap();
        assert!(s.ci_low <= s.exact && s.exact <= s.ci_high, "{s:?}");
    }

    #[test]
    fn monotone_in_arc_length() {
        let mut prev = 1.0;
        for len in [0.01, 0.05, 0.1, 0.3, 0.6] {
            let a = Arc::new(0.5, len).unwrap();
            let s = arc_avoidance_probability(&pair_swap(), ArcTarget::Site, &PhaseDistribution::Uniform {}, &a, 2000, 4).unwrap();
            assert!(s.estimate <= prev);
            prev = s.estimate;
        }
    }

    #[test]
    fn arc_errors() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let long = Arc::new(0.0, 1.7).unwrap();
        assert!(matches!(
            arc_avoidance_probability(&p, ArcTarget::Cycle { index: 0 }, &PhaseDistribution::Uniform {}, &long, 100, 0),
            Err(Error::ArcTooLong { .. })
        ));
        let a = Arc::new(0.0, 0.1).unwrap();
        assert!(arc_avoidance_probability(&p, ArcTarget::Cycle { index: 0 }, &PhaseDistribution::Uniform {}, &a, 99, 0).is_err());
        assert!(arc_avoidance_probability(&p, ArcTarget::Cycle { index: 3 }, &PhaseDistribution::Uniform {}, &a, 100, 0).is_err());
    }

    #[test]
    fn distance_statistics_limits() {
        let p = pair_swap();
        let z = Complex64::new(1.05, 0.0);
        let u = PhaseDistribution::Uniform {};
        assert_eq!(spectral_distance_statistics(z, 2.2, 3, &p, &u, 200, 1).unwrap().estimate, 1.0);
        assert_eq!(spectral_distance_statistics(z, 0.04, 3, &p, &u, 200, 1).unwrap().estimate, 0.0);
        assert!(spectral_distance_statistics(Complex64::new(1.0, 0.0), 0.1, 3, &p, &u, 200, 1).is_err());
        assert!(spectral_distance_statistics(Complex64::new(0.0, 0.0), 0.1, 3, &p, &u, 200, 1).is_err());
    }

    #[test]
    fn distance_probability_linear_in_eta() {
        // z close to the circle so that η exceeds dist(z, U)
        let p = pair_swap();
        let z = Complex64::from_polar(1.0005, 0.7);
        let u = PhaseDistribution::Uniform {};
        let a = spectral_distance_statistics(z, 0.004, 2, &p, &u, 20_000, 5).unwrap();
        let b = spectral_distance_statistics(z, 0.002, 2, &p, &u, 20_000, 5).unwrap();
        let ratio = a.estimate / b.estimate;
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
    }
}
