use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fm::{fractional_moment_mc, pairs_at_distances, FmEnsemble};
use crate::coin::{coin_distance, permutation_matrix, perturb_coin, CoinIndex, Permutation};
use crate::disorder::PhaseDistribution;
use crate::error::{Error, Result};
use crate::lattice::Site;
use crate::stats::{mean_se, pairwise_sum};
use crate::walk::BasisState;

fn default_cap() -> f64 {
    0.1
}

fn default_distance() -> u32 {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeltaRule {
    /// `‖C - C_π‖ = L^{-(2(ap+d) + a/s)}`.
    ClosedForm {},
    Fixed { value: f64 },
}

/// Parameters of the finite-volume scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub s: f64,
    pub a: f64,
    pub p: f64,
    pub eta: f64,
    pub ls: Vec<u32>,
    pub z: Complex64,
    pub realizations: usize,
    /// Sup distance between source and target, must exceed 2.
    #[serde(default = "default_distance")]
    pub distance: u32,
    /// Upper bound on `η L^d`.
    #[serde(default = "default_cap")]
    pub eta_cap: f64,
    pub delta_rule: DeltaRule,
    /// Seed of the perturbation direction, shared by every `L`.
    pub coin_seed: u64,
}

impl ScanConfig {
    /// Hölder conjugate of `p`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn delta(&self, l: u32, dim: usize) -> f64 {
        match self.delta_rule {
            DeltaRule::ClosedForm {} => (l as f64).powf(-self.exponent(dim)),
            DeltaRule::Fixed { value } => value,
        }
    }

    pub fn exponent(&self, dim: usize) -> f64 {
        2.0 * (self.a * self.p + dim as f64) + self.a / self.s
    }

    /// `(η L^d)^{1/p} + δ^s / η^{2s}`, without the constant.
    pub fn envelope_shape(&self, l: u32, dim: usize) -> f64 {
        (self.eta * (l as f64).powi(dim as i32)).powf(1.0 / self.p)
            + self.delta(l, dim).powf(self.s) / self.eta.powf(2.0 * self.s)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.s > 0.0 && self.s < 1.0 / 3.0) {
            return bad(format!("s = {} violates 0 < s < 1/3, required by the decoupling argument", self.s));
        }
        if !(self.p > 1.0 / (1.0 - self.s)) {
            return bad(format!("p = {} must exceed 1/(1-s) = {}", self.p, 1.0 / (1.0 - self.s)));
        }
        if !(self.a > 0.0) || !(self.eta > 0.0) {
            return bad("a and eta must be positive".into());
        }
        if self.ls.is_empty() {
            return bad("empty L list".into());
        }
        if self.distance <= 2 {
            return bad(format!("distance {} must exceed 2", self.distance));
        }
        for &l in &self.ls {
            if l < 2 || self.distance > l {
                return bad(format!("L = {l} cannot host pairs at distance {}", self.distance));
            }
            let small = self.eta * (l as f64).powi(dim as i32);
            if small > self.eta_cap {
                return bad(format!("eta L^d = {small} above cap {}", self.eta_cap));
            }
        }
        if let DeltaRule::Fixed { value } = self.delta_rule {
            if !(0.0..2.0).contains(&value) {
                return bad(format!("fixed delta {value} outside [0, 2)"));
            }
        }
        if self.realizations < 100 {
            return bad(format!("{} realizations, need at least 100", self.realizations));
        }
        super::check_z(self.z).or_else(|e| bad(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanRow {
    pub l: u32,
    pub delta: f64,
    pub coin_distance: f64,
    pub pairs: usize,
    /// `E|⟨τ,x|R^{Λ_L}|σ,y⟩|^s` averaged over the pairs.
    pub estimate: f64,
    pub se: f64,
    pub envelope_shape: f64,
    pub envelope: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub q: f64,
    pub exponent: f64,
    /// Envelope constant, fixed on the first (smallest) `L`.
    pub c: f64,
    pub rows: Vec<ScanRow>,
    /// Each estimate at most the previous one plus two combined standard errors.
    pub nonincreasing: bool,
    pub below_envelope: bool,
}

/// For each `L`: `C` at distance `δ(L)` from `C_π`, the walk on `H^{Λ_L}`,
/// and the fractional moment for pairs from `(first coin, origin)` at the
/// configured distance.
pub fn finite_volume_bound_scan(
    cfg: &ScanConfig,
    perm: &Permutation,
    distribution: &PhaseDistribution,
    seed: u64,
) -> Result<ScanReport> {
    let dim = perm.dim();
    cfg.validate(dim)?;
    let mut ls = cfg.ls.clone();
    ls.sort_unstable();
    ls.dedup();
    let c_pi = permutation_matrix(perm);
    let source = BasisState::new(CoinIndex::from_position(0), Site::ORIGIN);
    let mut rows = Vec::with_capacity(ls.len());
    for &l in &ls {
        let delta = cfg.delta(l, dim);
        let coin = perturb_coin(&c_pi, delta, cfg.coin_seed)?;
        let ens = FmEnsemble {
            perm: perm.clone(),
            coin: coin.clone(),
            distribution: distribution.clone(),
            center: Site::ORIGIN,
            radius: l,
        };
        let pairs = pairs_at_distances(&ens, source, &[cfg.distance])?;
        let run = fractional_moment_mc(&ens, cfg.s, &[cfg.z], &pairs, cfg.realizations, seed)?;
        let est = &run.estimates[0];
        let per_real: Vec<f64> =
            est.samples.iter().map(|row| pairwise_sum(row) / row.len() as f64).collect();
        let (estimate, se) = mean_se(&per_real);
        rows.push(ScanRow {
            l,
            delta,
            coin_distance: coin_distance(&coin, &c_pi)?,
            pairs: pairs.len(),
            estimate,
            se,
            envelope_shape: cfg.envelope_shape(l, dim),
            envelope: 0.0,
            failures: run.failures.len(),
        });
    }
    let c = rows[0].estimate / rows[0].envelope_shape;
    for r in rows.iter_mut() {
        r.envelope = c * r.envelope_shape;
    }
    let nonincreasing =
        rows.windows(2).all(|w| w[1].estimate <= w[0].estimate + 2.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt());
    let below_envelope = rows.iter().all(|r| r.estimate <= r.envelope * (1.0 + 1e-12));
    Ok(ScanReport { q: cfg.q(), exponent: cfg.exponent(dim), c, rows, nonincreasing, below_envelope })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScanConfig {
        ScanConfig {
            s: 0.2,
            a: 1.0,
            p: 2.0,
            eta: 1e-4,
            ls: vec![4, 6],
            z: Complex64::new(1.1, 0.0),
            realizations: 100,
            distance: 3,
            eta_cap: 0.1,
            delta_rule: DeltaRule::ClosedForm {},
            coin_seed: 1,
        }
    }

    #[test]
    fn closed_form_delta() {
        let c = cfg();
        assert_eq!(c.exponent(2), 13.0);
        assert_eq!(c.delta(4, 2), 4f64.powf(-13.0));
        assert_eq!(c.q(), 2.0);
        let c3 = ScanConfig { a: 0.5, p: 3.0, s: 0.25, ..cfg() };
        assert_eq!(c3.exponent(3), 2.0 * (1.5 + 3.0) + 2.0);
        assert_eq!(c3.delta(5, 3), 5f64.powf(-11.0));
    }

    #[test]
    fn validation() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        assert!(cfg().validate(2).is_ok());
        let e = ScanConfig { s: 0.5, ..cfg() }.validate(2).unwrap_err().to_string();
        assert!(e.contains("1/3"), "{e}");
        assert!(ScanConfig { p: 1.1, ..cfg() }.validate(2).is_err());
        assert!(ScanConfig { eta: 0.01, ls: vec![4], ..cfg() }.validate(2).is_err());
        assert!(ScanConfig { distance: 2, ..cfg() }.validate(2).is_err());
        assert!(finite_volume_bound_scan(&ScanConfig { s: 0.4, ..cfg() }, &p, &PhaseDistribution::Uniform {}, 1).is_err());
    }

    #[test]
    fn zero_delta_gives_zero_estimates() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let c = ScanConfig { delta_rule: DeltaRule::Fixed { value: 0.0 }, ..cfg() };
        let rep = finite_volume_bound_scan(&c, &p, &PhaseDistribution::Uniform {}, 3).unwrap();
        assert!(rep.rows.iter().all(|r| r.estimate == 0.0 && r.coin_distance == 0.0));
    }
}
