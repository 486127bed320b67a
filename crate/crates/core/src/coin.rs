//! Coin space combinatorics.
//!
//! The coin basis is indexed by `I_± = {+1, -1, +2, -2, ..., +d, -d}` and
//! always laid out in that canonical order; position `2(|τ|-1)` holds `+|τ|`
//! and the following slot holds `-|τ|`. Coin matrices use the same order for
//! rows and columns.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{check_dim, Site};
use crate::linalg;

/// Unitarity tolerance enforced on every coin matrix.
pub const UNITARITY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoinIndex(i32);

impl CoinIndex {
    pub fn new(value: i32, dim: usize) -> Result<Self> {
        if value == 0 || value.unsigned_abs() as usize > dim {
            return Err(Error::InvalidCoinIndex { value, dim });
        }
        Ok(CoinIndex(value))
    }

    pub fn value(self) -> i32 {
        self.0
    }

    pub fn axis(self) -> usize {
        self.0.unsigned_abs() as usize - 1
    }

    pub fn sign(self) -> i32 {
        self.0.signum()
    }

    /// Slot in the canonical order `(+1, -1, +2, -2, ...)`.
    pub fn position(self) -> usize {
        2 * self.axis() + usize::from(self.0 < 0)
    }

    pub fn from_position(pos: usize) -> Self {
        let axis = (pos / 2) as i32 + 1;
        CoinIndex(if pos % 2 == 0 { axis } else { -axis })
    }

    /// All `2d` indices in canonical order.
    pub fn all(dim: usize) -> impl Iterator<Item = CoinIndex> {
        (0..2 * dim).map(CoinIndex::from_position)
    }

    /// `r(τ) = sign(τ) e_|τ|`.
    pub fn step(self) -> Site {
        Site::unit(self.axis(), self.sign())
    }
}

impl fmt::Debug for CoinIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.0)
    }
}

impl fmt::Display for CoinIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.0)
    }
}

/// Lattice displacement `r(τ)` of a coin index, validated against `dim`.
pub fn displacement(tau: i32, dim: usize) -> Result<Site> {
    Ok(CoinIndex::new(tau, dim)?.step())
}

/// A bijection of `I_±`, stored as the images of the canonical order.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct Permutation {
    dim: usize,
    images: Vec<CoinIndex>,
}

impl Permutation {
    pub fn from_images(images: &[i32]) -> Result<Self> {
        if images.is_empty() || images.len() % 2 != 0 {
            return Err(Error::InvalidPermutation(format!(
                "expected 2d images, got {}",
                images.len()
            )));
        }
        let dim = images.len() / 2;
        check_dim(dim)?;
        let mut seen = vec![false; 2 * dim];
        let mut out = Vec::with_capacity(2 * dim);
        for &v in images {
            let c = CoinIndex::new(v, dim)
                .map_err(|_| Error::InvalidPermutation(format!("image {v} not in I_± for d={dim}")))?;
            if std::mem::replace(&mut seen[c.position()], true) {
                return Err(Error::InvalidPermutation(format!("image {v} repeated")));
            }
            out.push(c);
        }
        Ok(Permutation { dim, images: out })
    }

    /// Builds a permutation from disjoint cycles; unlisted indices are fixed.
    pub fn from_cycles(dim: usize, cycles: &[&[i32]]) -> Result<Self> {
        check_dim(dim)?;
        let mut images: Vec<i32> = CoinIndex::all(dim).map(CoinIndex::value).collect();
        let mut touched = vec![false; 2 * dim];
        for cyc in cycles {
            for (k, &t) in cyc.iter().enumerate() {
                let c = CoinIndex::new(t, dim)?;
                if std::mem::replace(&mut touched[c.position()], true) {
                    return Err(Error::InvalidPermutation(format!("index {t} in two cycles")));
                }
                images[c.position()] = cyc[(k + 1) % cyc.len()];
            }
        }
        Self::from_images(&images)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_cycles(dim, &[])
    }

    /// The pairing `+j <-> -j` on every axis, the simplest localizing permutation.
    pub fn axis_swaps(dim: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(2 * dim);
        for a in 1..=dim as i32 {
            images.extend([-a, a]);
        }
        Self::from_images(&images)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, tau: CoinIndex) -> CoinIndex {
        self.images[tau.position()]
    }

    pub fn images(&self) -> &[CoinIndex] {
        &self.images
    }

    pub fn is_fixed_point_free(&self) -> bool {
        CoinIndex::all(self.dim).all(|t| self.apply(t) != t)
    }

    /// Every permutation of `I_±` (use for small `d` only: (2d)! entries).
    pub fn all(dim: usize) -> Result<Vec<Permutation>> {
        check_dim(dim)?;
        let n = 2 * dim;
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        permute_rec(&mut idx, 0, &mut |p| {
            let images: Vec<i32> = p.iter().map(|&k| CoinIndex::from_position(k).value()).collect();
            out.push(Permutation::from_images(&images).expect("valid by construction"));
        });
        Ok(out)
    }
}

fn permute_rec(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute_rec(v, k + 1, f);
        v.swap(k, i);
    }
}

impl TryFrom<Vec<i32>> for Permutation {
    type Error = Error;
    fn try_from(v: Vec<i32>) -> Result<Self> {
        Permutation::from_images(&v)
    }
}

impl From<Permutation> for Vec<i32> {
    fn from(p: Permutation) -> Vec<i32> {
        p.images.iter().map(|c| c.value()).collect()
    }
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", decompose_cycles(self))
    }
}

/// One cycle `(τ, π(τ), ..., π^{m-1}(τ))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cycle {
    pub elements: Vec<CoinIndex>,
}

impl Cycle {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn leader(&self) -> CoinIndex {
        self.elements[0]
    }

    /// `Σ_s r(π^s(τ))` over the cycle.
    pub fn displacement_sum(&self) -> Site {
        self.elements.iter().fold(Site::ORIGIN, |acc, t| acc + t.step())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleDecomposition {
    pub dim: usize,
    /// Nontrivial cycles, leaders ascending in canonical order.
    pub cycles: Vec<Cycle>,
    pub fixed_points: Vec<CoinIndex>,
}

impl CycleDecomposition {
    pub fn lengths(&self) -> Vec<usize> {
        self.cycles.iter().map(Cycle::len).collect()
    }

    /// Least common multiple of the cycle lengths (1 for the identity).
    pub fn period(&self) -> usize {
        self.cycles.iter().map(Cycle::len).fold(1, lcm)
    }

    pub fn recompose(&self) -> Permutation {
        let cycles: Vec<Vec<i32>> = self
            .cycles
            .iter()
            .map(|c| c.elements.iter().map(|t| t.value()).collect())
            .collect();
        let refs: Vec<&[i32]> = cycles.iter().map(Vec::as_slice).collect();
        Permutation::from_cycles(self.dim, &refs).expect("cycles of a valid permutation")
    }

    /// The cycle containing `tau`, if `tau` is not fixed.
    pub fn cycle_of(&self, tau: CoinIndex) -> Option<&Cycle> {
        self.cycles.iter().find(|c| c.elements.contains(&tau))
    }
}

impl fmt::Display for CycleDecomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.cycles.is_empty() {
            return write!(f, "()");
        }
        for c in &self.cycles {
            let parts: Vec<String> = c.elements.iter().map(|t| t.to_string()).collect();
            write!(f, "({})", parts.join(","))?;
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

pub fn decompose_cycles(perm: &Permutation) -> CycleDecomposition {
    let n = 2 * perm.dim;
    let mut visited = vec![false; n];
    let mut cycles = Vec::new();
    let mut fixed_points = Vec::new();
    for pos in 0..n {
        if visited[pos] {
            continue;
        }
        let start = CoinIndex::from_position(pos);
        let mut elements = vec![start];
        visited[pos] = true;
        let mut t = perm.apply(start);
        while t != start {
            visited[t.position()] = true;
            elements.push(t);
            t = perm.apply(t);
        }
        if elements.len() == 1 {
            fixed_points.push(start);
        } else {
            cycles.push(Cycle { elements });
        }
    }
    CycleDecomposition { dim: perm.dim, cycles, fixed_points }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LocalizationReport {
    pub localizing: bool,
    pub fixed_point_free: bool,
    pub cycles: Vec<Vec<i32>>,
    pub cycle_lengths: Vec<usize>,
    /// Net displacement of each cycle, as `d` integer coordinates.
    pub cycle_sums: Vec<Vec<i32>>,
}

/// The localization condition: no fixed points and every cycle returns to its
/// starting site.
pub fn check_localizing(perm: &Permutation) -> LocalizationReport {
    let dec = decompose_cycles(perm);
    let fixed_point_free = dec.fixed_points.is_empty();
    let sums: Vec<Site> = dec.cycles.iter().map(Cycle::displacement_sum).collect();
    let localizing = fixed_point_free && sums.iter().all(|s| *s == Site::ORIGIN);
    LocalizationReport {
        localizing,
        fixed_point_free,
        cycles: dec
            .cycles
            .iter()
            .map(|c| c.elements.iter().map(|t| t.value()).collect())
            .collect(),
        cycle_lengths: dec.lengths(),
        cycle_sums: sums.iter().map(|s| s.coords(perm.dim).to_vec()).collect(),
    }
}

/// A `2d x 2d` unitary coin matrix in canonical index order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoinMatrix {
    dim: usize,
    m: DMatrix<Complex64>,
}

impl CoinMatrix {
    pub fn new(dim: usize, m: DMatrix<Complex64>) -> Result<Self> {
        check_dim(dim)?;
        if m.nrows() != 2 * dim || m.ncols() != 2 * dim {
            return Err(Error::DimensionMismatch { expected: 2 * dim, found: m.nrows() });
        }
        let residual = linalg::unitarity_residual(&m);
        if residual > UNITARITY_TOL {
            return Err(Error::NotUnitary { residual });
        }
        Ok(Self { dim, m })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Self::new(dim, DMatrix::identity(2 * dim, 2 * dim))
    }

    /// `(F)_{jk} = e^{2πi jk/2d} / sqrt(2d)`, a coin far from every permutation matrix.
    pub fn fourier(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let n = 2 * dim;
        let norm = 1.0 / (n as f64).sqrt();
        let m = DMatrix::from_fn(n, n, |j, k| {
            Complex64::from_polar(norm, 2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64)
        });
        Self::new(dim, m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    /// `C_{τ,σ}`.
    pub fn entry(&self, tau: CoinIndex, sigma: CoinIndex) -> Complex64 {
        self.m[(tau.position(), sigma.position())]
    }

    /// Row-major `[re, im]` pairs.
    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        let n = 2 * self.dim;
        (0..n * n).map(|k| {
            let z = self.m[(k / n, k % n)];
            [z.re, z.im]
        })
        .collect()
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self> {
        let n = (pairs.len() as f64).sqrt().round() as usize;
        if n * n != pairs.len() || n % 2 != 0 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "coin needs (2d)^2 entries, got {}",
                pairs.len()
            )));
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            let [re, im] = pairs[i * n + j];
            Complex64::new(re, im)
        });
        Self::new(n / 2, m)
    }
}

impl Serialize for CoinMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CoinMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        CoinMatrix::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

/// `(C_π)_{σ,τ} = 1` iff `σ = π(τ)`.
pub fn permutation_matrix(perm: &Permutation) -> CoinMatrix {
    let n = 2 * perm.dim;
    let mut m = DMatrix::zeros(n, n);
    for tau in CoinIndex::all(perm.dim) {
        m[(perm.apply(tau).position(), tau.position())] = Complex64::new(1.0, 0.0);
    }
    CoinMatrix { dim: perm.dim, m }
}

/// Operator norm of `C - C'`.
pub fn coin_distance(a: &CoinMatrix, b: &CoinMatrix) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { expected: 2 * a.dim, found: 2 * b.dim });
    }
    Ok(linalg::op_norm_dense(&(&a.m - &b.m)))
}

/// `exp(tA)` for anti-Hermitian `A = iH`, through the eigendecomposition of `H`.
fn exp_anti_hermitian(h_eig: &nalgebra::SymmetricEigen<Complex64, nalgebra::Dyn>, t: f64) -> DMatrix<Complex64> {
    let v = &h_eig.eigenvectors;
    let phases = DMatrix::from_diagonal(
        &h_eig.eigenvalues.map(|l| Complex64::from_polar(1.0, t * l)),
    );
    v * phases * v.adjoint()
}

/// A random unitary `exp(tA) C` at operator-norm distance `δ` from `C`.
///
/// `A = iH` with `H` Hermitian Gaussian; `‖exp(tA) - I‖ = 2 sin(t λmax / 2)`
/// fixes `t`. Deterministic in `seed`.
pub fn perturb_coin(base: &CoinMatrix, delta: f64, seed: u64) -> Result<CoinMatrix> {
    if !(0.0..2.0).contains(&delta) || delta.is_nan() {
        return Err(Error::InvalidDelta(delta));
    }
    if delta == 0.0 {
        return Ok(base.clone());
    }
    let n = 2 * base.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = DMatrix::<Complex64>::zeros(n, n);
    for v in g.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v = Complex64::new(re, im);
    }
    // H Hermitian, A = iH anti-Hermitian.
    let h = (&g + g.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(h);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    if lmax == 0.0 {
        return Err(Error::InvalidParameter("degenerate random generator".into()));
    }
    let t = 2.0 * (delta / 2.0).asin() / lmax;
    let m = exp_anti_hermitian(&eig, t) * &base.m;
    CoinMatrix::new(base.dim, m)
}

/// Haar-distributed coin: QR of a complex Gaussian matrix with the phases of
/// `R`'s diagonal moved into `Q`.
pub fn haar_coin(dim: usize, seed: u64) -> Result<CoinMatrix> {
    check_dim(dim)?;
    let n = 2 * dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im)
    });
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
        for i in 0..n {
            q[(i, j)] *= ph;
        }
    }
    CoinMatrix::new(dim, q)
}

/// Uniformly random permutation of `I_±`.
pub fn random_permutation(dim: usize, seed: u64) -> Result<Permutation> {
    check_dim(dim)?;
    let mut images: Vec<i32> = CoinIndex::all(dim).map(CoinIndex::value).collect();
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Permutation::from_images(&images)
}
