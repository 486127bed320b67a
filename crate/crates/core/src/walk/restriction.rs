use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{enumerate_blocks, Basis, BasisState, CoinRule, InvariantBlock, WalkOperator};
use crate::coin::{check_localizing, coin_distance, permutation_matrix, CoinIndex, CoinMatrix, Permutation};
use crate::disorder::PhaseField;
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};
use crate::linalg::{op_norm_dense, SparseMatrix};

pub const DEFAULT_DIMENSION_CAP: usize = 20_000;

/// Invariant subspace an operator is restricted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Restriction {
    None,
    /// Blocks with an anchor in `|x - center| <= radius`.
    Box { center: Site, radius: u32 },
    /// Blocks anchored in the `outer` box with no anchor in the `radius` box.
    Complement { center: Site, radius: u32, outer: u32 },
}

/// An operator together with the permutation that defines its blocks.
#[derive(Clone, Debug)]
pub struct WalkOperatorSpec {
    pub op: WalkOperator,
    pub perm: Permutation,
    pub restriction: Restriction,
}

#[derive(Clone, Debug)]
pub struct FiniteRestriction {
    pub spec: WalkOperatorSpec,
    pub blocks: Vec<InvariantBlock>,
    pub basis: Basis,
    pub matrix: SparseMatrix,
}

fn box_region(dim: usize, center: Site, radius: u32) -> Result<BoxRegion> {
    BoxRegion::new(dim, center, radius)
}

fn restricted_blocks(perm: &Permutation, restriction: &Restriction) -> Result<Vec<InvariantBlock>> {
    let d = perm.dim();
    match *restriction {
        Restriction::None => Err(Error::InvalidParameter("an unrestricted walk has no finite matrix".into())),
        Restriction::Box { center, radius } => enumerate_blocks(perm, &box_region(d, center, radius)?),
        Restriction::Complement { center, radius, outer } => {
            if outer <= radius {
                return Err(Error::Geometry(format!("outer radius {outer} must exceed {radius}")));
            }
            let inner = box_region(d, center, radius)?;
            let mut blocks = enumerate_blocks(perm, &box_region(d, center, outer)?)?;
            blocks.retain(|b| !b.anchored_in(&inner));
            Ok(blocks)
        }
    }
}

/// Matrix of the operator with coin `rule` on `basis`, given `e^{iω}` per basis state.
fn assemble(rule: &CoinRule, basis: &Basis, phases: &[Complex64]) -> Result<SparseMatrix> {
    let d = basis.dim();
    let mut t = Vec::with_capacity(basis.len() * 2 * d);
    for (j, s) in basis.states().iter().enumerate() {
        let c = rule.coin_at(s.site);
        for tau in CoinIndex::all(d) {
            let a = c.entry(tau, s.coin);
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let target = BasisState::new(tau, s.site + tau.step());
            let i = basis.index_of(&target).ok_or_else(|| Error::NotInvariant {
                site: target.site.coords(d).to_vec(),
                coin: tau.value(),
            })?;
            t.push((i, j, phases[i] * a));
        }
    }
    Ok(SparseMatrix::from_triplets(basis.len(), basis.len(), t))
}

/// Matrix of a restricted operator.
///
/// Basis order: blocks ascending by anchor (site lexicographic, first
/// coordinate slowest, then canonical coin order), members in path order.
pub fn materialize(spec: &WalkOperatorSpec, cap: usize) -> Result<FiniteRestriction> {
    if spec.perm.dim() != spec.op.dim() {
        return Err(Error::DimensionMismatch { expected: spec.op.dim(), found: spec.perm.dim() });
    }
    let blocks = restricted_blocks(&spec.perm, &spec.restriction)?;
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    if n > cap {
        return Err(Error::DimensionCap { dim: n, cap });
    }
    let basis = Basis::from_blocks(spec.op.dim(), &blocks)?;
    let phases = basis.phase_factors(&spec.op.field)?;
    let matrix = assemble(&spec.op.rule, &basis, &phases)?;
    Ok(FiniteRestriction { spec: spec.clone(), blocks, basis, matrix })
}

fn check_inputs(perm: &Permutation, coin: &CoinMatrix, l: u32) -> Result<()> {
    if !check_localizing(perm).localizing {
        return Err(Error::NonLocalizing);
    }
    if coin.dim() != perm.dim() {
        return Err(Error::DimensionMismatch { expected: perm.dim(), found: coin.dim() });
    }
    if l < 2 {
        return Err(Error::Geometry(format!("box radius {l} < 2")));
    }
    Ok(())
}

/// `U^{Λ_L}` (or the complement restriction) with coin `C` inside and `C_π` on
/// the collar `|x - center| ∈ {L-1, L, L+1}`. The complement version also
/// carries the outer collar so that it is closed.
pub fn build_finite_restriction(
    perm: &Permutation,
    coin: &CoinMatrix,
    field: &PhaseField,
    restriction: Restriction,
    cap: usize,
) -> Result<FiniteRestriction> {
    let (center, shells) = match restriction {
        Restriction::None => return Err(Error::InvalidParameter("restriction required".into())),
        Restriction::Box { center, radius } => {
            check_inputs(perm, coin, radius)?;
            (center, vec![radius])
        }
        Restriction::Complement { center, radius, outer } => {
            check_inputs(perm, coin, radius)?;
            (center, vec![radius, outer])
        }
    };
    let rule = CoinRule::Collared { inner: coin.clone(), collar: permutation_matrix(perm), center, shells };
    let op = WalkOperator::new(rule, field.clone())?;
    materialize(&WalkOperatorSpec { op, perm: perm.clone(), restriction }, cap)
}

/// The desk-scale stand-in for the infinite walk: `H^{Λ_R}` around `center`
/// with a `C_π` collar at `R`, on which `U`, every `U^L` and every `T^L` act.
#[derive(Clone, Debug)]
pub struct OuterSystem {
    pub perm: Permutation,
    pub coin: CoinMatrix,
    pub coin_pi: CoinMatrix,
    pub center: Site,
    pub radius: u32,
    blocks: Vec<InvariantBlock>,
    basis: Basis,
    phases: Vec<Complex64>,
    full: SparseMatrix,
}

impl OuterSystem {
    pub fn new(
        perm: &Permutation,
        coin: &CoinMatrix,
        field: &PhaseField,
        center: Site,
        radius: u32,
        cap: usize,
    ) -> Result<Self> {
        check_inputs(perm, coin, radius)?;
        let spec = WalkOperatorSpec {
            op: WalkOperator::new(
                CoinRule::Collared {
                    inner: coin.clone(),
                    collar: permutation_matrix(perm),
                    center,
                    shells: vec![radius],
                },
                field.clone(),
            )?,
            perm: perm.clone(),
            restriction: Restriction::Box { center, radius },
        };
        let fr = materialize(&spec, cap)?;
        let phases = fr.basis.phase_factors(field)?;
        Ok(Self {
            perm: perm.clone(),
            coin: coin.clone(),
            coin_pi: permutation_matrix(perm),
            center,
            radius,
            blocks: fr.blocks,
            basis: fr.basis,
            phases,
            full: fr.matrix,
        })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn blocks(&self) -> &[InvariantBlock] {
        &self.blocks
    }

    pub fn dimension(&self) -> usize {
        self.basis.len()
    }

    /// `U`.
    pub fn full(&self) -> &SparseMatrix {
        &self.full
    }

    fn check_inner(&self, l: u32) -> Result<()> {
        if l < 2 || l + 2 >= self.radius {
            return Err(Error::Geometry(format!(
                "inner radius {l} needs 2 <= L and a collar disjoint from the outer one (R = {})",
                self.radius
            )));
        }
        Ok(())
    }

    /// `U^L`: `C_π` on the collars at `L` and `R`.
    pub fn decoupled(&self, l: u32) -> Result<SparseMatrix> {
        self.check_inner(l)?;
        let rule = CoinRule::Collared {
            inner: self.coin.clone(),
            collar: self.coin_pi.clone(),
            center: self.center,
            shells: vec![l, self.radius],
        };
        assemble(&rule, &self.basis, &self.phases)
    }

    /// `T^L = U - U^L`.
    pub fn defect(&self, l: u32) -> Result<SparseMatrix> {
        Ok(self.full.sub(&self.decoupled(l)?))
    }

    /// Indices spanning `H^{Λ_L}`.
    pub fn inner_indices(&self, l: u32) -> Vec<usize> {
        self.split(l).0
    }

    /// Indices spanning the complement of `H^{Λ_L}` in `H^{Λ_R}`.
    pub fn complement_indices(&self, l: u32) -> Vec<usize> {
        self.split(l).1
    }

    fn split(&self, l: u32) -> (Vec<usize>, Vec<usize>) {
        let inner = BoxRegion { dim: self.perm.dim(), center: self.center, radius: l };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let mut k = 0;
        for blk in &self.blocks {
            let target = if blk.anchored_in(&inner) { &mut a } else { &mut b };
            target.extend(k..k + blk.len());
            k += blk.len();
        }
        (a, b)
    }
}

/// Operator norm of a matrix whose columns at distinct sites hit disjoint rows:
/// the maximum over sites of the norm of that site's column group.
fn sitewise_norm(t: &SparseMatrix, basis: &Basis) -> f64 {
    let mut groups: BTreeMap<Site, Vec<usize>> = BTreeMap::new();
    for j in t.nonzero_columns() {
        groups.entry(basis.state(j).site).or_default().push(j);
    }
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); t.ncols()];
    for (r, c, _) in t.triplets() {
        rows_of[c].push(r);
    }
    let mut owner: HashMap<usize, Site> = HashMap::new();
    let mut best = 0.0f64;
    for (site, cols) in &groups {
        let mut rows: Vec<usize> = cols.iter().flat_map(|&c| rows_of[c].iter().copied()).collect();
        rows.sort_unstable();
        rows.dedup();
        for &r in &rows {
            if owner.insert(r, *site).is_some_and(|o| o != *site) {
                return t.op_norm();
            }
        }
        best = best.max(op_norm_dense(&t.submatrix(&rows, cols).to_dense()));
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct DefectReport {
    pub radius: u32,
    pub norm: f64,
    pub coin_distance: f64,
    /// `‖T^L‖ / ‖C - C_π‖`, zero when the coins coincide.
    pub constant: f64,
    pub nnz: usize,
    /// Every nonzero column sits on `|y - center| ∈ {L-1, L, L+1}`.
    pub support_on_collar: bool,
}

/// `T^L` on the outer space together with its norm bound.
pub fn defect_operator(system: &OuterSystem, l: u32) -> Result<(SparseMatrix, DefectReport)> {
    let t = system.defect(l)?;
    let norm = sitewise_norm(&t, &system.basis);
    let dist = coin_distance(&system.coin, &system.coin_pi)?;
    let support_on_collar = t.nonzero_columns().iter().all(|&j| {
        let r = system.basis.state(j).site.dist(&system.center);
        r + 1 >= l && r <= l + 1
    });
    let report = DefectReport {
        radius: l,
        norm,
        coin_distance: dist,
        constant: if dist > 0.0 { norm / dist } else { 0.0 },
        nnz: t.nnz(),
        support_on_collar,
    };
    Ok((t, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::perturb_coin;
    use crate::disorder::{sample_field, PhaseDistribution};
    use crate::walk::{apply_walk, StateVector};

    fn pair_swap() -> Permutation {
        Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap()
    }

    fn field(r: u32, seed: u64) -> PhaseField {
        sample_field(&BoxRegion::centered(2, r).unwrap(), &PhaseDistribution::Uniform {}, seed).unwrap()
    }

    fn box_r(radius: u32) -> Restriction {
        Restriction::Box { center: Site::ORIGIN, radius }
    }

    #[test]
    fn permutation_coin_is_block_diagonal() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let fr = build_finite_restriction(&p, &permutation_matrix(&p), &field(6, 1), box_r(4), DEFAULT_DIMENSION_CAP).unwrap();
        let mut block_of = vec![0; fr.basis.len()];
        let mut k = 0;
        for (bi, b) in fr.blocks.iter().enumerate() {
            for _ in 0..b.len() {
                block_of[k] = bi;
                k += 1;
            }
        }
        for (r, c, _) in fr.matrix.triplets() {
            assert_eq!(block_of[r], block_of[c]);
        }
    }

    #[test]
    fn restriction_is_unitary_and_matches_matrix_free() {
        let p = pair_swap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.3, 5).unwrap();
        let f = field(6, 2);
        let fr = build_finite_restriction(&p, &coin, &f, box_r(3), DEFAULT_DIMENSION_CAP).unwrap();
        assert!(fr.matrix.unitarity_residual() < 1e-10);
        let region = BoxRegion::centered(2, 6).unwrap();
        for j in 0..fr.basis.len() {
            let psi = StateVector::point(region, fr.basis.state(j)).unwrap();
            let out = apply_walk(&fr.spec.op, &psi).unwrap();
            for i in 0..fr.basis.len() {
                assert!((out.get(&fr.basis.state(i)) - fr.matrix.get(i, j)).norm() <= 1e-13);
            }
            assert!((out.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_matches_independent_count() {
        // states |σ, y⟩ whose orbit has an anchor in Λ_3
        let p = pair_swap();
        let fr = build_finite_restriction(&p, &permutation_matrix(&p), &PhaseField::zero(2).unwrap(), box_r(3), DEFAULT_DIMENSION_CAP).unwrap();
        let inner = BoxRegion::centered(2, 3).unwrap();
        let mut count = 0;
        for y in BoxRegion::centered(2, 5).unwrap().sites() {
            for s in CoinIndex::all(2) {
                let b = InvariantBlock::new(&p, s, y - s.step());
                if b.anchored_in(&inner) {
                    count += 1;
                }
            }
        }
        assert_eq!(fr.basis.len(), count);
        // pair swap: orbits {|+j,y⟩, |-j,y-e_j⟩} with y or y-e_j in Λ_3, 7*8 per axis
        assert_eq!(count, 2 * 7 * 8 * 2);
    }

    #[test]
    fn d1_l2_dimension() {
        let swap = Permutation::from_cycles(1, &[&[1, -1]]).unwrap();
        let fr = build_finite_restriction(&swap, &permutation_matrix(&swap), &PhaseField::zero(1).unwrap(), Restriction::Box { center: Site::ORIGIN, radius: 2 }, 100).unwrap();
        assert_eq!(fr.basis.len(), 12);
        assert_eq!(fr.blocks.len(), 6);
    }

    #[test]
    fn invalid_inputs() {
        let bad = Permutation::from_cycles(2, &[&[1, 2], &[-1, -2]]).unwrap();
        let c = permutation_matrix(&bad);
        assert!(matches!(build_finite_restriction(&bad, &c, &field(5, 0), box_r(3), 100_000), Err(Error::NonLocalizing)));
        let p = pair_swap();
        assert!(matches!(build_finite_restriction(&p, &permutation_matrix(&p), &field(5, 0), box_r(1), 100_000), Err(Error::Geometry(_))));
        assert!(matches!(
            build_finite_restriction(&p, &permutation_matrix(&p), &field(9, 0), box_r(8), 100),
            Err(Error::DimensionCap { .. })
        ));
    }

    #[test]
    fn decoupled_operator_has_no_cross_coupling() {
        let p = Permutation::from_cycles(2, &[&[1, -2, -1, 2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.5, 3).unwrap();
        let sys = OuterSystem::new(&p, &coin, &field(10, 4), Site::ORIGIN, 8, DEFAULT_DIMENSION_CAP).unwrap();
        assert!(sys.full().unitarity_residual() < 1e-10);
        let ul = sys.decoupled(3).unwrap();
        assert!(ul.unitarity_residual() < 1e-10);
        let inner = sys.inner_indices(3);
        let outer = sys.complement_indices(3);
        assert_eq!(inner.len() + outer.len(), sys.dimension());
        let mut is_inner = vec![false; sys.dimension()];
        for &i in &inner {
            is_inner[i] = true;
        }
        for (r, c, _) in ul.triplets() {
            assert_eq!(is_inner[r], is_inner[c]);
        }
        // the standalone restrictions agree with the pieces of U^L
        let f = field(10, 4);
        let fr = build_finite_restriction(&p, &coin, &f, box_r(3), DEFAULT_DIMENSION_CAP).unwrap();
        assert_eq!(fr.basis.len(), inner.len());
        let map: Vec<usize> = fr.basis.states().iter().map(|s| sys.basis().index_of(s).unwrap()).collect();
        for &k in &map {
            assert!(is_inner[k]);
        }
        for (r, c, v) in fr.matrix.triplets() {
            assert_eq!(ul.get(map[r], map[c]), v);
        }
        let comp = build_finite_restriction(
            &p,
            &coin,
            &f,
            Restriction::Complement { center: Site::ORIGIN, radius: 3, outer: 8 },
            DEFAULT_DIMENSION_CAP,
        )
        .unwrap();
        assert_eq!(comp.basis.len(), outer.len());
        assert!(comp.matrix.unitarity_residual() < 1e-10);
    }

    #[test]
    fn defect_support_and_bound() {
        let p = pair_swap();
        let cpi = permutation_matrix(&p);
        let sys0 = OuterSystem::new(&p, &cpi, &field(12, 5), Site::ORIGIN, 10, DEFAULT_DIMENSION_CAP).unwrap();
        assert_eq!(sys0.defect(4).unwrap().nnz(), 0);
        let coin = perturb_coin(&cpi, 0.1, 6).unwrap();
        let sys = OuterSystem::new(&p, &coin, &field(12, 5), Site::ORIGIN, 11, DEFAULT_DIMENSION_CAP).unwrap();
        let (t3, rep3) = defect_operator(&sys, 3).unwrap();
        assert!((t3.op_norm() - rep3.norm).abs() < 1e-12);
        for l in 3..=8 {
            let (_, rep) = defect_operator(&sys, l).unwrap();
            assert!(rep.support_on_collar);
            assert!(rep.norm <= 3.0 * rep.coin_distance, "{rep:?}");
            assert!(rep.constant <= 1.0 + 1e-12);
        }
        assert!(sys.decoupled(9).is_err());
    }

    #[test]
    fn translated_box_gives_same_matrix() {
        let p = pair_swap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.2, 7).unwrap();
        let f = field(12, 9);
        let a = Site::new(&[2, -1]);
        let v = Site::new(&[3, 1]);
        let m1 = build_finite_restriction(&p, &coin, &f, Restriction::Box { center: v, radius: 3 }, 10_000).unwrap();
        let ft = crate::disorder::translate_field(&f, a);
        let m2 = build_finite_restriction(&p, &coin, &ft, Restriction::Box { center: v - a, radius: 3 }, 10_000).unwrap();
        assert_eq!(m1.matrix, m2.matrix);
    }
}
