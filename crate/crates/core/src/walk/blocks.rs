use std::collections::{HashMap, HashSet};

use num_complex::Complex64;
use serde::Serialize;

use super::BasisState;
use crate::coin::{check_localizing, CoinIndex, Permutation};
use crate::disorder::PhaseField;
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};

/// Closed path `|π^t(τ), x + Σ_{s≤t} r(π^s(τ))⟩`, `t = 0..m-1`, anchored at `(τ, x)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InvariantBlock {
    pub anchor: BasisState,
    pub members: Vec<BasisState>,
}

impl InvariantBlock {
    pub fn new(perm: &Permutation, tau: CoinIndex, x: Site) -> Self {
        let mut members = Vec::new();
        let mut coin = tau;
        let mut site = x + tau.step();
        loop {
            members.push(BasisState::new(coin, site));
            coin = perm.apply(coin);
            site = site + coin.step();
            if coin == tau {
                break;
            }
        }
        Self { anchor: BasisState::new(tau, x), members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Last member steps back onto the first under the permutation shift.
    pub fn is_closed(&self, perm: &Permutation) -> bool {
        let last = self.members[self.members.len() - 1];
        let c = perm.apply(last.coin);
        BasisState::new(c, last.site + c.step()) == self.members[0]
    }

    /// Smallest member; equal for two anchors iff they span the same block.
    pub fn key(&self) -> BasisState {
        *self.members.iter().min().unwrap()
    }

    /// Sum of `ω` over the members: `U(C_π)^m` acts on the block as `e^{iθ}`.
    pub fn phase_sum(&self, field: &PhaseField) -> Result<f64> {
        self.members.iter().map(|s| field.phase(s.site, s.coin)).sum()
    }

    /// Is any anchor of this orbit inside `b`?
    pub fn anchored_in(&self, b: &BoxRegion) -> bool {
        self.members.iter().any(|s| b.contains(&orbit_anchor(s).site))
    }
}

/// The anchor `(σ, y - r(σ))` whose block starts at `|σ, y⟩`.
pub fn orbit_anchor(s: &BasisState) -> BasisState {
    BasisState::new(s.coin, s.site - s.coin.step())
}

/// Blocks anchored at every site of `anchors` and every coin in the support of
/// `π`, deduplicated, in anchor order (site lexicographic, then coin).
pub fn enumerate_blocks(perm: &Permutation, anchors: &BoxRegion) -> Result<Vec<InvariantBlock>> {
    if perm.dim() != anchors.dim {
        return Err(Error::DimensionMismatch { expected: perm.dim(), found: anchors.dim });
    }
    if !check_localizing(perm).localizing {
        return Err(Error::NonLocalizing);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for x in anchors.sites() {
        for tau in CoinIndex::all(perm.dim()) {
            let b = InvariantBlock::new(perm, tau, x);
            if seen.insert(b.key()) {
                out.push(b);
            }
        }
    }
    Ok(out)
}

/// Ordered list of basis states with a reverse index.
#[derive(Clone, Debug)]
pub struct Basis {
    dim: usize,
    states: Vec<BasisState>,
    index: HashMap<BasisState, usize>,
}

impl Basis {
    pub fn new(dim: usize, states: Vec<BasisState>) -> Result<Self> {
        let mut index = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            if index.insert(*s, i).is_some() {
                return Err(Error::Geometry(format!("duplicate basis state {s:?}")));
            }
        }
        Ok(Self { dim, states, index })
    }

    /// Members of `blocks` in block order, then path order.
    pub fn from_blocks(dim: usize, blocks: &[InvariantBlock]) -> Result<Self> {
        Self::new(dim, blocks.iter().flat_map(|b| b.members.iter().copied()).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[BasisState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> BasisState {
        self.states[i]
    }

    pub fn index_of(&self, s: &BasisState) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Permutation listing indices by site then coin; keeps nearest-neighbour
    /// operators banded.
    pub fn band_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.states[i]);
        order
    }

    /// `e^{iω}` at every basis state.
    pub fn phase_factors(&self, field: &PhaseField) -> Result<Vec<Complex64>> {
        self.states.iter().map(|s| field.phase_factor(s.site, s.coin)).collect()
    }
}
