use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_z, missing, Resolvent};
use crate::coin::{CoinMatrix, Permutation};
use crate::disorder::{sample_field, translate_field, PhaseDistribution, PhaseField};
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};
use crate::mc::{collect_successes, run_realizations};
use crate::stats::{linear_fit, mean_se, pairwise_sum, quantile_sorted};
use crate::walk::{build_finite_restriction, BasisState, FiniteRestriction, Restriction, DEFAULT_DIMENSION_CAP};

/// Largest fraction of realizations allowed to fail before an estimate is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Fixed coin, random phases, walk restricted to `H^{Λ_radius}` around `center`
/// (coin `C_π` on the collar at `radius`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmEnsemble {
    pub perm: Permutation,
    pub coin: CoinMatrix,
    pub distribution: PhaseDistribution,
    pub center: Site,
    pub radius: u32,
}

impl FmEnsemble {
    /// Phases of realization `seed`, sampled around the origin and moved to `center`,
    /// so that translated ensembles see the same disorder with matched seeds.
    pub fn field(&self, seed: u64) -> Result<PhaseField> {
        let region = BoxRegion::centered(self.perm.dim(), self.radius + 2)?;
        let f = sample_field(&region, &self.distribution, seed)?;
        Ok(translate_field(&f, -self.center))
    }

    pub fn restriction(&self, field: &PhaseField) -> Result<FiniteRestriction> {
        build_finite_restriction(
            &self.perm,
            &self.coin,
            field,
            Restriction::Box { center: self.center, radius: self.radius },
            DEFAULT_DIMENSION_CAP,
        )
    }

    pub fn translated(&self, a: Site) -> Self {
        Self { center: self.center + a, ..self.clone() }
    }
}

/// Per-pair means of `|⟨target|(U - z)^{-1}|source⟩|^s`.
#[derive(Clone, Debug, Serialize)]
pub struct FMEstimate {
    pub s: f64,
    pub z: Complex64,
    /// `(source, target)`.
    pub pairs: Vec<(BasisState, BasisState)>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    /// `samples[k][p]`: realization `k`, pair `p`.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl FMEstimate {
    pub fn write_raw_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "realization,pair,value")?;
        for (k, row) in self.samples.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                writeln!(w, "{k},{p},{v:.17e}")?;
            }
        }
        Ok(())
    }
}

/// Estimates for several `z` over one set of realizations.
#[derive(Clone, Debug, Serialize)]
pub struct FmRun {
    pub estimates: Vec<FMEstimate>,
    pub requested: usize,
    /// Discarded realizations with the reason.
    pub failures: Vec<(usize, String)>,
}

impl FmRun {
    pub fn failure_rate(&self) -> f64 {
        self.failures.len() as f64 / self.requested as f64
    }
}

/// All `(source, target)` with the target in the basis at sup distance `r`
/// from the source site, for each `r` in `distances`.
pub fn pairs_at_distances(
    ensemble: &FmEnsemble,
    source: BasisState,
    distances: &[u32],
) -> Result<Vec<(BasisState, BasisState)>> {
    let fr = ensemble.restriction(&PhaseField::zero(ensemble.perm.dim())?)?;
    if fr.basis.index_of(&source).is_none() {
        return Err(missing(&source));
    }
    let mut out = Vec::new();
    for &r in distances {
        out.extend(fr.basis.states().iter().filter(|t| t.site.dist(&source.site) == r).map(|t| (source, *t)));
    }
    out.sort_by_key(|&(_, t)| (t.site.dist(&source.site), t));
    Ok(out)
}

/// Monte Carlo over `n` realizations seeded from `seed`. A realization whose
/// solve fails for any `z` is discarded for all of them.
pub fn fractional_moment_mc(
    ensemble: &FmEnsemble,
    s: f64,
    zs: &[Complex64],
    pairs: &[(BasisState, BasisState)],
    n: usize,
    seed: u64,
) -> Result<FmRun> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("s = {s} outside (0, 1)")));
    }
    if n < 100 {
        return Err(Error::InvalidParameter(format!("N = {n} < 100 realizations")));
    }
    if zs.is_empty() || pairs.is_empty() {
        return Err(Error::InvalidParameter("empty z list or pair list".into()));
    }
    for &z in zs {
        check_z(z)?;
    }
    let template = ensemble.restriction(&PhaseField::zero(ensemble.perm.dim())?)?;
    let index = |st: &BasisState| template.basis.index_of(st).ok_or_else(|| missing(st));
    let mut sources: Vec<usize> = Vec::new();
    let mut idx = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let j = index(src)?;
        let slot = match sources.iter().position(|&x| x == j) {
            Some(k) => k,
            None => {
                sources.push(j);
                sources.len() - 1
            }
        };
        idx.push((slot, index(tgt)?));
    }

    let results = run_realizations(n, seed, |_, rs| {
        let fr = ensemble.restriction(&ensemble.field(rs)?)?;
        let mut per_z = Vec::with_capacity(zs.len());
        for &z in zs {
            let r = Resolvent::new(&fr.matrix, &fr.basis, z)?;
            let cols = sources.iter().map(|&j| r.column(j)).collect::<Result<Vec<_>>>()?;
            per_z.push(idx.iter().map(|&(k, i)| cols[k][i].norm().powf(s)).collect::<Vec<f64>>());
        }
        Ok(per_z)
    });
    let (ok, failed) = collect_successes(results, MAX_FAILURE_FRACTION)?;
    let estimates = zs
        .iter()
        .enumerate()
        .map(|(zi, &z)| {
            let samples: Vec<Vec<f64>> = ok.iter().map(|r| r[zi].clone()).collect();
            let (mean, se) = (0..pairs.len())
                .map(|p| mean_se(&samples.iter().map(|row| row[p]).collect::<Vec<_>>()))
                .unzip();
            FMEstimate { s, z, pairs: pairs.to_vec(), mean, se, n: samples.len(), seed, samples }
        })
        .collect();
    Ok(FmRun { estimates, requested: n, failures: failed.into_iter().map(|(i, e)| (i, e.to_string())).collect() })
}

/// Realization-level data averaged over the pairs at each distance.
#[derive(Clone, Debug, Serialize)]
pub struct DistanceProfile {
    pub distances: Vec<u32>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// `samples[k][i]`: realization `k`, distance `distances[i]`.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl DistanceProfile {
    pub fn from_samples(distances: Vec<u32>, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.iter().any(|r| r.len() != distances.len()) {
            return Err(Error::DimensionMismatch { expected: distances.len(), found: samples[0].len() });
        }
        let (mean, se) =
            (0..distances.len()).map(|i| mean_se(&samples.iter().map(|r| r[i]).collect::<Vec<_>>())).unzip();
        Ok(Self { distances, mean, se, samples })
    }
}

/// Groups an estimate's pairs by `|x - y|`.
pub fn distance_profile(est: &FMEstimate) -> Result<DistanceProfile> {
    let dist: Vec<u32> = est.pairs.iter().map(|(a, b)| a.site.dist(&b.site)).collect();
    let mut distances = dist.clone();
    distances.sort_unstable();
    distances.dedup();
    let groups: Vec<Vec<usize>> =
        distances.iter().map(|&r| (0..dist.len()).filter(|&p| dist[p] == r).collect()).collect();
    let samples = est
        .samples
        .iter()
        .map(|row| {
            groups
                .iter()
                .map(|g| pairwise_sum(&g.iter().map(|&p| row[p]).collect::<Vec<_>>()) / g.len() as f64)
                .collect()
        })
        .collect();
    DistanceProfile::from_samples(distances, samples)
}

#[derive(Clone, Debug, Serialize)]
pub struct FMFitResult {
    pub gamma: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub distance_min: u32,
    pub distance_max: u32,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap: usize,
    /// Distances dropped because their estimate is exactly zero.
    pub excluded_zero: usize,
    /// The 95% interval lies above zero.
    pub decaying: bool,
}

fn log_fit(distances: &[u32], means: &[f64]) -> Result<(crate::stats::LinearFit, usize, Vec<u32>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut used = Vec::new();
    for (&r, &m) in distances.iter().zip(means) {
        if m > 0.0 {
            xs.push(r as f64);
            ys.push(m.ln());
            used.push(r);
        }
    }
    let excluded = distances.len() - xs.len();
    if xs.len() < 2 {
        return Err(Error::DegenerateFit(format!("{excluded} of {} estimates are zero", distances.len())));
    }
    Ok((linear_fit(&xs, &ys)?, excluded, used))
}

/// Least squares of `ln(mean)` against distance; the interval for `γ`
/// resamples realizations `bootstrap` times.
pub fn decay_fit(profile: &DistanceProfile, bootstrap: usize, seed: u64) -> Result<FMFitResult> {
    if profile.distances.len() < 4 {
        return Err(Error::InvalidParameter(format!("{} distances, need at least 4", profile.distances.len())));
    }
    let (fit, excluded_zero, used) = log_fit(&profile.distances, &profile.mean)?;
    let gamma = -fit.slope;
    let k = profile.samples.len();
    let mut gammas = Vec::with_capacity(bootstrap);
    if k > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = vec![0usize; k];
        for _ in 0..bootstrap {
            for p in picks.iter_mut() {
                *p = rng.gen_range(0..k);
            }
            let means: Vec<f64> = (0..profile.distances.len())
                .map(|i| pairwise_sum(&picks.iter().map(|&p| profile.samples[p][i]).collect::<Vec<_>>()) / k as f64)
                .collect();
            if let Ok((f, _, _)) = log_fit(&profile.distances, &means) {
                gammas.push(-f.slope);
            }
        }
    }
    gammas.sort_by(f64::total_cmp);
    let (ci_low, ci_high) =
        if gammas.is_empty() { (gamma, gamma) } else { (quantile_sorted(&gammas, 0.025), quantile_sorted(&gammas, 0.975)) };
    Ok(FMFitResult {
        gamma,
        prefactor: fit.intercept.exp(),
        r_squared: fit.r_squared,
        distance_min: used[0],
        distance_max: *used.last().unwrap(),
        ci_low,
        ci_high,
        bootstrap: gammas.len(),
        excluded_zero,
        decaying: gamma > 0.0 && ci_low > 0.0,
    })
}

/// The least favourable fit: smallest lower confidence bound on `γ`.
pub fn worst_case(fits: &[FMFitResult]) -> Option<&FMFitResult> {
    fits.iter().min_by(|a, b| a.ci_low.total_cmp(&b.ci_low))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::{permutation_matrix, perturb_coin, CoinIndex};

    fn ensemble(delta: f64, radius: u32) -> FmEnsemble {
        let perm = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&perm), delta, 7).unwrap();
        FmEnsemble { perm, coin, distribution: PhaseDistribution::Uniform {}, center: Site::ORIGIN, radius }
    }

    fn source() -> BasisState {
        BasisState::new(CoinIndex::new(1, 2).unwrap(), Site::ORIGIN)
    }

    #[test]
    fn synthetic_exponential() {
        let d: Vec<u32> = (3..=8).collect();
        let row: Vec<f64> = d.iter().map(|&r| 2.5 * (-0.7 * r as f64).exp()).collect();
        let p = DistanceProfile::from_samples(d, vec![row; 3]).unwrap();
        let f = decay_fit(&p, 200, 1).unwrap();
        assert!((f.gamma - 0.7).abs() < 1e-6 && (f.prefactor - 2.5).abs() < 1e-6);
        assert!(f.decaying && (f.ci_low - 0.7).abs() < 1e-6);
    }

    #[test]
    fn flat_is_not_decaying() {
        let d: Vec<u32> = (3..=8).collect();
        let p = DistanceProfile::from_samples(d, vec![vec![0.3; 6]; 4]).unwrap();
        let f = decay_fit(&p, 100, 1).unwrap();
        assert!(f.gamma.abs() < 1e-12 && !f.decaying);
    }

    #[test]
    fn zeros_excluded_and_counted() {
        let p = DistanceProfile::from_samples(vec![1, 2, 3, 4, 5], vec![vec![1.0, 0.5, 0.0, 0.125, 0.0]]).unwrap();
        let f = decay_fit(&p, 10, 1).unwrap();
        assert_eq!(f.excluded_zero, 2);
        assert!((f.gamma - 2f64.ln()).abs() < 1e-12);
        let p = DistanceProfile::from_samples(vec![1, 2, 3, 4], vec![vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(decay_fit(&p, 10, 1), Err(Error::DegenerateFit(_))));
        let p = DistanceProfile::from_samples(vec![1, 2, 3], vec![vec![1.0; 3]]).unwrap();
        assert!(decay_fit(&p, 10, 1).is_err());
    }

    #[test]
    fn permutation_coin_cross_block_pairs_vanish() {
        let ens = ensemble(0.0, 4);
        let pairs = pairs_at_distances(&ens, source(), &[3, 4]).unwrap();
        let run = fractional_moment_mc(&ens, 0.2, &[Complex64::from_polar(1.1, 0.3)], &pairs, 100, 5).unwrap();
        assert!(run.estimates[0].mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn deterministic_and_translation_covariant() {
        let ens = ensemble(0.1, 3);
        let pairs = pairs_at_distances(&ens, source(), &[2, 3]).unwrap();
        let z = [Complex64::from_polar(0.9, 1.0)];
        let a = fractional_moment_mc(&ens, 0.3, &z, &pairs, 100, 9).unwrap();
        let b = fractional_moment_mc(&ens, 0.3, &z, &pairs, 100, 9).unwrap();
        assert_eq!(a.estimates[0].mean, b.estimates[0].mean);
        assert!(a.estimates[0].mean.iter().any(|&m| m > 0.0));
        let shift = Site::new(&[5, -3]);
        let moved = ens.translated(shift);
        let mp: Vec<_> = pairs
            .iter()
            .map(|(s, t)| (BasisState::new(s.coin, s.site + shift), BasisState::new(t.coin, t.site + shift)))
            .collect();
        let c = fractional_moment_mc(&moved, 0.3, &z, &mp, 100, 9).unwrap();
        assert_eq!(a.estimates[0].mean, c.estimates[0].mean);
    }

    #[test]
    fn standard_error_scales_with_n() {
        let ens = ensemble(0.2, 3);
        let pairs = pairs_at_distances(&ens, source(), &[2]).unwrap();
        let z = [Complex64::from_polar(1.1, 0.5)];
        let small = fractional_moment_mc(&ens, 0.2, &z, &pairs, 200, 3).unwrap();
        let large = fractional_moment_mc(&ens, 0.2, &z, &pairs, 400, 4).unwrap();
        let ps = distance_profile(&small.estimates[0]).unwrap();
        let pl = distance_profile(&large.estimates[0]).unwrap();
        let ratio = pl.se[0] / ps.se[0];
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.3 * 0.5f64.sqrt(), "{ratio}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let ens = ensemble(0.1, 3);
        let pairs = pairs_at_distances(&ens, source(), &[2]).unwrap();
        let z = [Complex64::new(1.1, 0.0)];
        assert!(fractional_moment_mc(&ens, 1.2, &z, &pairs, 100, 1).is_err());
        assert!(fractional_moment_mc(&ens, 0.2, &z, &pairs, 50, 1).is_err());
        assert!(fractional_moment_mc(&ens, 0.2, &[Complex64::new(1.0, 0.0)], &pairs, 100, 1).is_err());
        let far = BasisState::new(CoinIndex::new(1, 2).unwrap(), Site::new(&[30, 0]));
        assert!(fractional_moment_mc(&ens, 0.2, &z, &[(source(), far)], 100, 1).is_err());
    }
}
