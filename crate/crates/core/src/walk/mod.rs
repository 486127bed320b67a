//! The one-step operator `U_ω(C) = D(ω) S (C ⊗ I)` and its matrix-free action.

mod blocks;
mod restriction;

pub use blocks::{enumerate_blocks, orbit_anchor, Basis, InvariantBlock};
pub use restriction::{
    build_finite_restriction, defect_operator, materialize, DefectReport, FiniteRestriction, OuterSystem, Restriction,
    WalkOperatorSpec, DEFAULT_DIMENSION_CAP,
};

use std::cmp::Ordering;

use num_complex::Complex64;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::coin::{CoinIndex, CoinMatrix};
use crate::disorder::PhaseField;
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site, MAX_DIM};

/// `|τ, y⟩`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct BasisState {
    pub coin: CoinIndex,
    pub site: Site,
}

impl BasisState {
    pub fn new(coin: CoinIndex, site: Site) -> Self {
        Self { coin, site }
    }
}

/// Site first (lexicographic), then canonical coin order.
impl Ord for BasisState {
    fn cmp(&self, other: &Self) -> Ordering {
        self.site.cmp(&other.site).then(self.coin.position().cmp(&other.coin.position()))
    }
}

impl PartialOrd for BasisState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for BasisState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("BasisState", 2)?;
        st.serialize_field("coin", &self.coin.value())?;
        st.serialize_field("site", &self.site)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for BasisState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            coin: i32,
            site: Site,
        }
        let r = Raw::deserialize(d)?;
        let coin = CoinIndex::new(r.coin, MAX_DIM).map_err(serde::de::Error::custom)?;
        Ok(Self { coin, site: r.site })
    }
}

/// Which coin the walker meets at each site.
#[derive(Clone, Debug)]
pub enum CoinRule {
    Uniform(CoinMatrix),
    /// `collar` on every shell `|x - center| ∈ {s-1, s, s+1}` for `s` in
    /// `shells`, `inner` everywhere else.
    Collared { inner: CoinMatrix, collar: CoinMatrix, center: Site, shells: Vec<u32> },
}

impl CoinRule {
    pub fn dim(&self) -> usize {
        match self {
            CoinRule::Uniform(c) => c.dim(),
            CoinRule::Collared { inner, .. } => inner.dim(),
        }
    }

    pub fn coin_at(&self, x: Site) -> &CoinMatrix {
        match self {
            CoinRule::Uniform(c) => c,
            CoinRule::Collared { inner, collar, center, shells } => {
                let r = x.dist(center);
                if shells.iter().any(|&s| r + 1 >= s && r <= s + 1) {
                    collar
                } else {
                    inner
                }
            }
        }
    }
}

/// `U_ω(C)` with a site-dependent coin.
#[derive(Clone, Debug)]
pub struct WalkOperator {
    pub rule: CoinRule,
    pub field: PhaseField,
}

impl WalkOperator {
    pub fn new(rule: CoinRule, field: PhaseField) -> Result<Self> {
        if let CoinRule::Collared { inner, collar, .. } = &rule {
            if inner.dim() != collar.dim() {
                return Err(Error::DimensionMismatch { expected: inner.dim(), found: collar.dim() });
            }
        }
        if rule.dim() != field.dim() {
            return Err(Error::DimensionMismatch { expected: rule.dim(), found: field.dim() });
        }
        Ok(Self { rule, field })
    }

    pub fn uniform(coin: CoinMatrix, field: PhaseField) -> Result<Self> {
        Self::new(CoinRule::Uniform(coin), field)
    }

    pub fn dim(&self) -> usize {
        self.rule.dim()
    }

    /// `U|σ,x⟩ = Σ_τ e^{iω^τ_{x+r(τ)}} C(x)_{τσ} |τ, x+r(τ)⟩`, exact zeros skipped.
    pub fn column(&self, sigma: CoinIndex, x: Site) -> Result<Vec<(BasisState, Complex64)>> {
        let c = self.rule.coin_at(x);
        let mut out = Vec::with_capacity(2 * self.dim());
        for tau in CoinIndex::all(self.dim()) {
            let a = c.entry(tau, sigma);
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let y = x + tau.step();
            out.push((BasisState::new(tau, y), self.field.phase_factor(y, tau)? * a));
        }
        Ok(out)
    }
}

/// Amplitudes on `region × I_±`, index `site_index * 2d + coin position`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub region: BoxRegion,
    pub amps: Vec<Complex64>,
}

impl StateVector {
    pub fn zeros(region: BoxRegion) -> Self {
        Self { region, amps: vec![Complex64::new(0.0, 0.0); region.len() * 2 * region.dim] }
    }

    pub fn point(region: BoxRegion, state: BasisState) -> Result<Self> {
        let mut v = Self::zeros(region);
        v.set(state, Complex64::new(1.0, 0.0))?;
        Ok(v)
    }

    fn slot(&self, s: &BasisState) -> Option<usize> {
        self.region.index_of(&s.site).map(|i| i * 2 * self.region.dim + s.coin.position())
    }

    pub fn get(&self, s: &BasisState) -> Complex64 {
        self.slot(s).map_or(Complex64::new(0.0, 0.0), |i| self.amps[i])
    }

    pub fn set(&mut self, s: BasisState, v: Complex64) -> Result<()> {
        let i = self.slot(&s).ok_or_else(|| Error::BoundaryLeak {
            site: s.site.coords(self.region.dim).to_vec(),
            coin: s.coin.value(),
        })?;
        self.amps[i] = v;
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.amps)
    }

    /// Nonzero entries in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (BasisState, Complex64)> + '_ {
        let two_d = 2 * self.region.dim;
        self.amps.iter().enumerate().filter(|(_, a)| a.norm_sqr() > 0.0).map(move |(i, &a)| {
            (BasisState::new(CoinIndex::from_position(i % two_d), self.region.site_at(i / two_d)), a)
        })
    }
}

/// One step of the walk, matrix-free. Fails rather than dropping amplitude
/// that would leave `ψ.region`.
pub fn apply_walk(op: &WalkOperator, psi: &StateVector) -> Result<StateVector> {
    if psi.region.dim != op.dim() {
        return Err(Error::DimensionMismatch { expected: op.dim(), found: psi.region.dim });
    }
    let mut out = StateVector::zeros(psi.region);
    for (s, a) in psi.entries() {
        for (t, u) in op.column(s.coin, s.site)? {
            let i = out.slot(&t).ok_or_else(|| Error::BoundaryLeak {
                site: t.site.coords(psi.region.dim).to_vec(),
                coin: t.coin.value(),
            })?;
            out.amps[i] += u * a;
        }
    }
    Ok(out)
}
