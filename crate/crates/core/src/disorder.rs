//! I.i.d. random phases `ω_y^τ` addressed by a counter-based generator.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coin::{CoinIndex, Cycle};
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};

/// Grid used by [`PhaseDistribution::from_fn_normalized`].
pub const DENSITY_GRID: usize = 1 << 12;

// bits shared by the site coordinates in a stream key; 3 more hold the coin slot
const SITE_BITS: u32 = 56;

/// Law of a single phase on `[0, 2π)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseDistribution {
    Uniform {},
    /// Uniform on the arc `center ± width/2`, wrapped.
    Arc { center: f64, width: f64 },
    /// Piecewise constant density on equal bins of `[0, 2π)`.
    Tabulated { density: Vec<f64> },
}

impl Default for PhaseDistribution {
    fn default() -> Self {
        PhaseDistribution::Uniform {}
    }
}

impl PhaseDistribution {
    /// Tabulates `f` on [`DENSITY_GRID`] bin midpoints and normalizes.
    pub fn from_fn_normalized(f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = TAU / DENSITY_GRID as f64;
        let raw: Vec<f64> = (0..DENSITY_GRID).map(|k| f((k as f64 + 0.5) * h)).collect();
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDistribution("density must be finite and nonnegative".into()));
        }
        let mass: f64 = raw.iter().sum::<f64>() * h;
        if mass <= 0.0 {
            return Err(Error::InvalidDistribution("density has zero mass".into()));
        }
        let d = PhaseDistribution::Tabulated { density: raw.iter().map(|v| v / mass).collect() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PhaseDistribution::Uniform {} => Ok(()),
            PhaseDistribution::Arc { center, width } => {
                if !center.is_finite() || !(*width > 0.0 && *width <= TAU) {
                    return Err(Error::InvalidDistribution(format!("arc width {width} not in (0, 2π]")));
                }
                Ok(())
            }
            PhaseDistribution::Tabulated { density } => {
                if density.is_empty() {
                    return Err(Error::InvalidDistribution("empty density table".into()));
                }
                if density.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidDistribution("negative or non-finite density".into()));
                }
                let integral: f64 = density.iter().sum::<f64>() * TAU / density.len() as f64;
                if (integral - 1.0).abs() > 1e-8 {
                    return Err(Error::InvalidDistribution(format!("density integrates to {integral}")));
                }
                Ok(())
            }
        }
    }

    /// `‖l‖_∞`.
    pub fn density_sup(&self) -> f64 {
        match self {
            PhaseDistribution::Uniform {} => 1.0 / TAU,
            PhaseDistribution::Arc { width, .. } => 1.0 / width,
            PhaseDistribution::Tabulated { density } => density.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// `l(θ)` for `θ` taken mod 2π.
    pub fn density(&self, theta: f64) -> f64 {
        let t = theta.rem_euclid(TAU);
        match self {
            PhaseDistribution::Uniform {} => 1.0 / TAU,
            PhaseDistribution::Arc { center, width } => {
                let off = (t - center + width / 2.0).rem_euclid(TAU);
                if off < *width || *width >= TAU {
                    1.0 / width
                } else {
                    0.0
                }
            }
            PhaseDistribution::Tabulated { density } => {
                let k = ((t / TAU) * density.len() as f64) as usize;
                density[k.min(density.len() - 1)]
            }
        }
    }

    pub fn sampler(&self) -> Result<PhaseSampler> {
        self.validate()?;
        let cdf = match self {
            PhaseDistribution::Tabulated { density } => {
                let total: f64 = density.iter().sum();
                let mut acc = 0.0;
                let mut cdf: Vec<f64> = density
                    .iter()
                    .map(|v| {
                        acc += v / total;
                        acc
                    })
                    .collect();
                *cdf.last_mut().unwrap() = 1.0;
                cdf
            }
            _ => Vec::new(),
        };
        Ok(PhaseSampler { dist: self.clone(), cdf })
    }
}

/// Inverse-CDF map `u ∈ [0,1) -> θ ∈ [0, 2π)`.
#[derive(Clone, Debug)]
pub struct PhaseSampler {
    dist: PhaseDistribution,
    cdf: Vec<f64>,
}

impl PhaseSampler {
    pub fn distribution(&self) -> &PhaseDistribution {
        &self.dist
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let theta = match &self.dist {
            PhaseDistribution::Uniform {} => TAU * u,
            PhaseDistribution::Arc { center, width } => center - width / 2.0 + width * u,
            PhaseDistribution::Tabulated { .. } => {
                let n = self.cdf.len();
                let k = self.cdf.partition_point(|&c| c <= u).min(n - 1);
                let lo = if k == 0 { 0.0 } else { self.cdf[k - 1] };
                let frac = ((u - lo) / (self.cdf[k] - lo)).clamp(0.0, 1.0);
                (k as f64 + frac) * TAU / n as f64
            }
        };
        wrap(theta)
    }
}

/// Reduces to `[0, 2π)`.
pub fn wrap(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

fn stream_key(site: Site, coin: CoinIndex, dim: usize) -> u64 {
    let bits = SITE_BITS / dim as u32;
    let limit = (1i64 << (bits - 1)) - 1;
    let mut key = 0u64;
    for axis in 0..dim {
        let c = site.coord(axis) as i64;
        assert!(c.abs() <= limit, "site coordinate {c} outside the addressable range ±{limit}");
        key = (key << bits) | (c + limit + 1) as u64;
    }
    (key << 3) | coin.position() as u64
}

#[derive(Clone, Debug)]
enum Source {
    Sampled { seed: u64, base: ChaCha8Rng, sampler: PhaseSampler },
    Constant(f64),
    Explicit(HashMap<(Site, CoinIndex), f64>),
}

/// One disorder realization `ω`.
///
/// The phase at `(y, τ)` is a pure function of `(seed, y + shift, τ)`, so
/// overlapping regions and translated copies agree exactly.
#[derive(Clone, Debug)]
pub struct PhaseField {
    dim: usize,
    region: Option<BoxRegion>,
    shift: Site,
    source: Source,
}

/// Draws `ω` on `region` from `dist`.
pub fn sample_field(region: &BoxRegion, dist: &PhaseDistribution, seed: u64) -> Result<PhaseField> {
    crate::lattice::check_dim(region.dim)?;
    let sampler = dist.sampler()?;
    Ok(PhaseField {
        dim: region.dim,
        region: Some(*region),
        shift: Site::ORIGIN,
        source: Source::Sampled { seed, base: ChaCha8Rng::seed_from_u64(seed), sampler },
    })
}

/// `(T_a ω)_y = ω_{y+a}`.
pub fn translate_field(field: &PhaseField, a: Site) -> PhaseField {
    PhaseField {
        region: field.region.map(|r| r.translated(-a)),
        shift: field.shift + a,
        ..field.clone()
    }
}

impl PhaseField {
    /// The same phase everywhere on `Z^d`.
    pub fn constant(dim: usize, theta: f64) -> Result<Self> {
        crate::lattice::check_dim(dim)?;
        Ok(Self { dim, region: None, shift: Site::ORIGIN, source: Source::Constant(wrap(theta)) })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::constant(dim, 0.0)
    }

    /// Explicit phases; pairs missing from `phases` are a coverage error.
    pub fn explicit(dim: usize, phases: HashMap<(Site, CoinIndex), f64>) -> Result<Self> {
        crate::lattice::check_dim(dim)?;
        let phases = phases.into_iter().map(|(k, v)| (k, wrap(v))).collect();
        Ok(Self { dim, region: None, shift: Site::ORIGIN, source: Source::Explicit(phases) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn region(&self) -> Option<&BoxRegion> {
        self.region.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        match &self.source {
            Source::Sampled { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    pub fn distribution(&self) -> Option<&PhaseDistribution> {
        match &self.source {
            Source::Sampled { sampler, .. } => Some(sampler.distribution()),
            _ => None,
        }
    }

    /// Same realization on a different region.
    pub fn with_region(&self, region: BoxRegion) -> Self {
        Self { region: Some(region), ..self.clone() }
    }

    /// Does the field define phases on all of `b`?
    pub fn covers(&self, b: &BoxRegion) -> bool {
        match (&self.region, &self.source) {
            (_, Source::Explicit(_)) => b.sites().all(|y| {
                CoinIndex::all(self.dim).all(|t| self.phase(y, t).is_ok())
            }),
            (Some(r), _) => r.covers(b),
            (None, _) => true,
        }
    }

    /// `ω_y^τ`.
    pub fn phase(&self, y: Site, tau: CoinIndex) -> Result<f64> {
        let coverage = || Error::FieldCoverage { site: y.coords(self.dim).to_vec(), coin: tau.value() };
        if let Some(r) = &self.region {
            if !r.contains(&y) {
                return Err(coverage());
            }
        }
        let key = y + self.shift;
        match &self.source {
            Source::Constant(t) => Ok(*t),
            Source::Explicit(map) => map.get(&(key, tau)).copied().ok_or_else(coverage),
            Source::Sampled { base, sampler, .. } => {
                let mut rng = base.clone();
                rng.set_stream(stream_key(key, tau, self.dim));
                Ok(sampler.quantile(rng.gen::<f64>()))
            }
        }
    }

    /// `e^{iω_y^τ}`.
    pub fn phase_factor(&self, y: Site, tau: CoinIndex) -> Result<num_complex::Complex64> {
        Ok(num_complex::Complex64::from_polar(1.0, self.phase(y, tau)?))
    }

    /// Rows `y_1..y_d, τ, θ` over the field's region.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let region = self
            .region
            .ok_or_else(|| Error::InvalidParameter("field has no finite region to dump".into()))?;
        let head: Vec<String> = (1..=self.dim).map(|i| format!("y{i}")).collect();
        writeln!(w, "{},tau,theta", head.join(","))?;
        for y in region.sites() {
            for t in CoinIndex::all(self.dim) {
                let coords: Vec<String> = y.coords(self.dim).iter().map(|c| c.to_string()).collect();
                writeln!(w, "{},{},{:.17e}", coords.join(","), t.value(), self.phase(y, t)?)?;
            }
        }
        Ok(())
    }
}

/// `θ_x^{τ}` for the cycle led by `τ`: the phases collected along the orbit
/// `|τ,x⟩, |π(τ), x+r(π(τ))⟩, ...` of the permutation shift. Lies in `[0, 2π m)`.
pub fn cycle_phase(field: &PhaseField, x: Site, cycle: &Cycle) -> Result<f64> {
    let mut y = x;
    let mut total = 0.0;
    for (t, &tau) in cycle.elements.iter().enumerate() {
        if t > 0 {
            y = y + tau.step();
        }
        total += field.phase(y, tau)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::{decompose_cycles, Permutation};

    fn ks_uniform(mut xs: Vec<f64>) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = x / TAU;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn uniform_phases_have_zero_mean() {
        let region = BoxRegion::centered(2, 79).unwrap(); // 159^2 * 4 > 10^5
        let f = sample_field(&region, &PhaseDistribution::Uniform {}, 11).unwrap();
        let mut s = num_complex::Complex64::new(0.0, 0.0);
        let mut n = 0usize;
        'outer: for y in region.sites() {
            for t in CoinIndex::all(2) {
                s += f.phase_factor(y, t).unwrap();
                n += 1;
                if n == 100_000 {
                    break 'outer;
                }
            }
        }
        let mean = s / n as f64;
        // each component has variance 1/2
        assert!(mean.norm() < 3.0 * (0.5f64 / n as f64).sqrt() * 2f64.sqrt());
    }

    #[test]
    fn overlapping_regions_agree() {
        let a = BoxRegion::centered(2, 3).unwrap();
        let b = BoxRegion::new(2, Site::new(&[2, 1]), 3).unwrap();
        let fa = sample_field(&a, &PhaseDistribution::Uniform {}, 5).unwrap();
        let fb = sample_field(&b, &PhaseDistribution::Uniform {}, 5).unwrap();
        let mut overlap = 0;
        for y in a.sites().filter(|y| b.contains(y)) {
            for t in CoinIndex::all(2) {
                assert_eq!(fa.phase(y, t).unwrap().to_bits(), fb.phase(y, t).unwrap().to_bits());
                overlap += 1;
            }
        }
        assert!(overlap > 0);
        let other = sample_field(&a, &PhaseDistribution::Uniform {}, 6).unwrap();
        assert_ne!(fa.phase(Site::ORIGIN, CoinIndex::from_position(0)).unwrap(), other.phase(Site::ORIGIN, CoinIndex::from_position(0)).unwrap());
    }

    #[test]
    fn narrow_bump_stays_in_support() {
        let d = PhaseDistribution::from_fn_normalized(|t| if !(0.01..TAU - 0.01).contains(&t) { 1.0 } else { 0.0 }).unwrap();
        let region = BoxRegion::centered(1, 200).unwrap();
        let f = sample_field(&region, &d, 3).unwrap();
        for y in region.sites() {
            for t in CoinIndex::all(1) {
                let th = f.phase(y, t).unwrap();
                assert!(!(0.013..TAU - 0.013).contains(&th), "{th}");
            }
        }
        if let PhaseDistribution::Tabulated { density } = &d {
            let support = density.iter().filter(|&&v| v > 0.0).count() as f64 * TAU / DENSITY_GRID as f64;
            assert!((d.density_sup() * support - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn arc_distribution_samples_inside_arc() {
        let d = PhaseDistribution::Arc { center: 0.0, width: 0.4 };
        let f = sample_field(&BoxRegion::centered(1, 300).unwrap(), &d, 1).unwrap();
        for y in BoxRegion::centered(1, 300).unwrap().sites() {
            let th = f.phase(y, CoinIndex::from_position(1)).unwrap();
            assert!(th <= 0.2 || th >= TAU - 0.2);
        }
    }

    #[test]
    fn invalid_distributions_rejected() {
        let bad = PhaseDistribution::Tabulated { density: vec![1.0, -0.1] };
        assert!(matches!(bad.validate(), Err(Error::InvalidDistribution(_))));
        let unnormalized = PhaseDistribution::Tabulated { density: vec![1.0; 8] };
        assert!(sample_field(&BoxRegion::centered(1, 1).unwrap(), &unnormalized, 0).is_err());
        assert!(PhaseDistribution::Arc { center: 0.0, width: 0.0 }.validate().is_err());
        let json = r#"{"kind":"uniform","extra":1}"#;
        assert!(serde_json::from_str::<PhaseDistribution>(json).is_err());
    }

    #[test]
    fn translation_identities() {
        let region = BoxRegion::centered(2, 4).unwrap();
        let f = sample_field(&region, &PhaseDistribution::Uniform {}, 9).unwrap();
        let a = Site::new(&[2, -1]);
        let g = translate_field(&f, a);
        let back = translate_field(&g, -a);
        let zero = translate_field(&f, Site::ORIGIN);
        for y in region.sites() {
            for t in CoinIndex::all(2) {
                let p = f.phase(y, t).unwrap();
                assert_eq!(back.phase(y, t).unwrap(), p);
                assert_eq!(zero.phase(y, t).unwrap(), p);
                assert_eq!(g.phase(y - a, t).unwrap(), p);
            }
        }
        // translated sample over R equals sample over R+a read at shifted sites
        let shifted = sample_field(&region.translated(a), &PhaseDistribution::Uniform {}, 9).unwrap();
        for y in region.sites().filter(|y| g.region().unwrap().contains(y)) {
            let t = CoinIndex::from_position(2);
            assert_eq!(g.phase(y, t).unwrap(), shifted.phase(y + a, t).unwrap());
        }
    }

    #[test]
    fn coverage_errors() {
        let f = sample_field(&BoxRegion::centered(1, 2).unwrap(), &PhaseDistribution::Uniform {}, 0).unwrap();
        assert!(matches!(f.phase(Site::new(&[3]), CoinIndex::from_position(0)), Err(Error::FieldCoverage { .. })));
        let e = PhaseField::explicit(1, HashMap::new()).unwrap();
        assert!(e.phase(Site::ORIGIN, CoinIndex::from_position(0)).is_err());
    }

    #[test]
    fn cycle_phase_sums() {
        let swap = Permutation::from_cycles(1, &[&[1, -1]]).unwrap();
        let cycle = decompose_cycles(&swap).cycles[0].clone();
        assert_eq!(cycle_phase(&PhaseField::zero(1).unwrap(), Site::new(&[4]), &cycle).unwrap(), 0.0);
        let x = Site::new(&[0]);
        let plus = CoinIndex::new(1, 1).unwrap();
        let minus = CoinIndex::new(-1, 1).unwrap();
        let mut m = HashMap::new();
        m.insert((x, plus), 0.3);
        m.insert((x + minus.step(), minus), 1.1);
        let f = PhaseField::explicit(1, m).unwrap();
        assert!((cycle_phase(&f, x, &cycle).unwrap() - 1.4).abs() < 1e-15);
    }

    #[test]
    fn cycle_phase_mod_two_pi_is_uniform() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let cycle = decompose_cycles(&p).cycles[0].clone();
        let region = BoxRegion::centered(2, 60).unwrap();
        let f = sample_field(&region, &PhaseDistribution::Uniform {}, 21).unwrap();
        let inner = BoxRegion::centered(2, 49).unwrap(); // 99^2 = 9801 samples
        let xs: Vec<f64> = inner.sites().map(|x| cycle_phase(&f, x, &cycle).unwrap().rem_euclid(TAU)).collect();
        let d = ks_uniform(xs.clone());
        assert!(d < 1.628 / (xs.len() as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn distinct_pairs_uncorrelated() {
        let region = BoxRegion::centered(1, 50_000).unwrap();
        let f = sample_field(&region, &PhaseDistribution::Uniform {}, 2).unwrap();
        let (p, m) = (CoinIndex::from_position(0), CoinIndex::from_position(1));
        let n = 100_000;
        let mut acc = 0.0;
        for k in 0..n as i32 {
            let y = Site::new(&[k - 50_000]);
            let a = f.phase(y, p).unwrap().cos();
            let b = f.phase(y, m).unwrap().cos();
            acc += a * b;
        }
        // normalized by var(cos) = 1/2
        let corr = acc / n as f64 / 0.5;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "{corr}");
    }

    #[test]
    fn tabulated_quantile_inverts_cdf() {
        let d = PhaseDistribution::from_fn_normalized(|t| 1.0 + 0.5 * t.cos()).unwrap();
        let s = d.sampler().unwrap();
        let mut prev = -1.0;
        for k in 0..1000 {
            let th = s.quantile(k as f64 / 1000.0);
            assert!(th >= prev);
            prev = th;
        }
        let region = BoxRegion::centered(1, 20_000).unwrap();
        let f = sample_field(&region, &d, 4).unwrap();
        let m: f64 = region.sites().map(|y| f.phase(y, CoinIndex::from_position(0)).unwrap().cos()).sum::<f64>() / region.len() as f64;
        // E cos θ = 0.5 * π / (2π) * ... = 0.25 for l = (1 + 0.5 cos)/2π
        assert!((m - 0.25).abs() < 0.02, "{m}");
    }
}
