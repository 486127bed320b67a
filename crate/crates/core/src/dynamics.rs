//! Time evolution, position moments and the localization experiment.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coin::{check_localizing, CoinIndex, CoinMatrix, Permutation};
use crate::disorder::{sample_field, PhaseDistribution, PhaseField};
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site};
use crate::mc::{collect_successes, run_realizations};
use crate::stats::{linear_fit, median, pairwise_sum};
use crate::walk::{BasisState, CoinRule, StateVector};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// How `|x|` is measured in `⟨|X|^p⟩`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionNorm {
    /// `max_i |x_i|`.
    #[default]
    Sup,
    /// `Σ_i |x_i|`.
    Sum,
}

impl PositionNorm {
    pub fn of(self, x: Site) -> u32 {
        match self {
            PositionNorm::Sup => x.sup_norm(),
            PositionNorm::Sum => x.l1_norm(),
        }
    }
}

/// `Σ_{τ,x} |x - center|^p |ψ(τ,x)|²` for each `p`.
pub fn position_moments(psi: &StateVector, ps: &[f64], norm: PositionNorm, center: Site) -> Vec<f64> {
    let two_d = 2 * psi.region.dim;
    let mut acc = vec![Vec::new(); ps.len()];
    for (i, chunk) in psi.amps.chunks(two_d).enumerate() {
        let w: f64 = chunk.iter().map(|a| a.norm_sqr()).sum();
        if w == 0.0 {
            continue;
        }
        let r = norm.of(psi.region.site_at(i) - center) as f64;
        for (k, &p) in ps.iter().enumerate() {
            acc[k].push(if p == 0.0 { w } else { r.powf(p) * w });
        }
    }
    acc.iter().map(|v| pairwise_sum(v)).collect()
}

/// Light-cone handling of the evolution box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Window {
    /// The box never changes; amplitude on its outer shell is a light-cone violation.
    Fixed { radius: u32 },
    /// Grows when the outer shell carries an amplitude with `|a|² > truncation`;
    /// smaller amplitudes there are dropped and accounted for.
    Adaptive { radius: u32, max_radius: u32, truncation: f64 },
}

/// `ψ_k = U^k ψ_0` on a box around `center`.
pub struct Propagator {
    rule: CoinRule,
    field: PhaseField,
    window: Window,
    center: Site,
    region: BoxRegion,
    amps: Vec<Complex64>,
    next: Vec<Complex64>,
    phases: Vec<Complex64>,
    /// Per site: index into `coins`.
    kind: Vec<u8>,
    on_shell: Vec<bool>,
    /// `|x - origin|` per site for the cached `(origin, norm)`.
    radii: Option<(Site, PositionNorm, Vec<f64>)>,
    coins: Vec<Vec<Complex64>>,
    truncated: f64,
    steps: usize,
}

impl Propagator {
    /// `psi0` must be supported in the initial box.
    pub fn new(rule: CoinRule, field: PhaseField, window: Window, center: Site, psi0: &[(BasisState, Complex64)]) -> Result<Self> {
        let d = rule.dim();
        if field.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: field.dim() });
        }
        let radius = match window {
            Window::Fixed { radius } => radius,
            Window::Adaptive { radius, max_radius, truncation } => {
                if max_radius < radius || !(truncation >= 0.0 && truncation < 1e-12) {
                    return Err(Error::InvalidParameter(format!(
                        "adaptive window needs radius <= max_radius and truncation in [0, 1e-12), got {window:?}"
                    )));
                }
                radius
            }
        };
        let region = BoxRegion::new(d, center, radius)?;
        let mut p = Self {
            rule,
            field,
            window,
            center,
            region,
            amps: Vec::new(),
            next: Vec::new(),
            phases: Vec::new(),
            kind: Vec::new(),
            on_shell: Vec::new(),
            radii: None,
            coins: Vec::new(),
            truncated: 0.0,
            steps: 0,
        };
        p.rebuild(region, &[])?;
        for (s, a) in psi0 {
            let i = p.slot(s).ok_or_else(|| Error::LightCone(format!("initial state at {:?} outside the box", s.site)))?;
            p.amps[i] += a;
        }
        Ok(p)
    }

    fn slot(&self, s: &BasisState) -> Option<usize> {
        self.region.index_of(&s.site).map(|i| i * 2 * self.region.dim + s.coin.position())
    }

    /// Re-lays the state on `region` (a superset of the current box).
    fn rebuild(&mut self, region: BoxRegion, old: &[Complex64]) -> Result<()> {
        let d = region.dim;
        let two_d = 2 * d;
        let field = match self.field.region() {
            Some(r) if !r.covers(&region) && self.field.seed().is_some() => self.field.with_region(region),
            _ => self.field.clone(),
        };
        let mut phases = Vec::with_capacity(region.len() * two_d);
        let mut kind = Vec::with_capacity(region.len());
        let mut coins: Vec<(CoinMatrix, Vec<Complex64>)> = Vec::new();
        for x in region.sites() {
            for t in CoinIndex::all(d) {
                phases.push(field.phase_factor(x, t)?);
            }
            let c = self.rule.coin_at(x);
            let k = match coins.iter().position(|(m, _)| m == c) {
                Some(k) => k,
                None => {
                    let flat = (0..two_d)
                        .flat_map(|t| (0..two_d).map(move |s| (t, s)))
                        .map(|(t, s)| c.matrix()[(t, s)])
                        .collect();
                    coins.push((c.clone(), flat));
                    coins.len() - 1
                }
            };
            kind.push(k as u8);
        }
        let mut amps = vec![ZERO; region.len() * two_d];
        if !old.is_empty() {
            for (i, chunk) in old.chunks(two_d).enumerate() {
                if chunk.iter().all(|a| *a == ZERO) {
                    continue;
                }
                let j = region.index_of(&self.region.site_at(i)).expect("window only grows");
                amps[j * two_d..(j + 1) * two_d].copy_from_slice(chunk);
            }
        }
        self.field = field;
        self.region = region;
        self.next = vec![ZERO; amps.len()];
        self.amps = amps;
        self.phases = phases;
        self.kind = kind;
        self.radii = None;
        self.on_shell = region.sites().map(|x| x.dist(&region.center) == region.radius).collect();
        self.coins = coins.into_iter().map(|(_, f)| f).collect();
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.region.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn radius(&self) -> u32 {
        self.region.radius
    }

    /// Probability dropped by truncation so far.
    pub fn truncated(&self) -> f64 {
        self.truncated
    }

    pub fn state(&self) -> StateVector {
        StateVector { region: self.region, amps: self.amps.clone() }
    }

    pub fn norm_sqr(&self) -> f64 {
        pairwise_sum(&self.amps.iter().map(|a| a.norm_sqr()).collect::<Vec<_>>())
    }

    /// Largest `|a|²` and total mass on the outer shell of the box.
    fn shell(&self) -> (f64, f64) {
        let two_d = 2 * self.dim();
        let (mut top, mut mass) = (0.0f64, 0.0);
        for (i, chunk) in self.amps.chunks(two_d).enumerate() {
            if self.on_shell[i] {
                for a in chunk {
                    let w = a.norm_sqr();
                    top = top.max(w);
                    mass += w;
                }
            }
        }
        (top, mass)
    }

    fn clear_shell(&mut self) {
        let two_d = 2 * self.dim();
        for i in 0..self.region.len() {
            if self.on_shell[i] {
                self.amps[i * two_d..(i + 1) * two_d].fill(ZERO);
            }
        }
    }

    fn make_room(&mut self) -> Result<()> {
        let (top, mass) = self.shell();
        if top == 0.0 {
            return Ok(());
        }
        match self.window {
            Window::Fixed { radius } => Err(Error::LightCone(format!(
                "amplitude reached the edge of the radius-{radius} box after {} steps",
                self.steps
            ))),
            Window::Adaptive { max_radius, truncation, .. } => {
                if top <= truncation {
                    self.truncated += mass;
                    self.clear_shell();
                    return Ok(());
                }
                let r = self.region.radius;
                if r >= max_radius {
                    return Err(Error::LightCone(format!("window at its maximum radius {max_radius} after {} steps", self.steps)));
                }
                let new_r = (r + (r / 8).max(4)).min(max_radius);
                let old = std::mem::take(&mut self.amps);
                self.rebuild(BoxRegion::new(self.dim(), self.center, new_r)?, &old)?;
                self.make_room()
            }
        }
    }

    pub fn step(&mut self) -> Result<()> {
        self.make_room()?;
        let d = self.dim();
        let two_d = 2 * d;
        let strides: Vec<usize> = (0..d).map(|a| self.region.stride(a)).collect();
        self.next.fill(ZERO);
        let mut v = [ZERO; 8];
        for (i, chunk) in self.amps.chunks(two_d).enumerate() {
            if chunk.iter().all(|a| *a == ZERO) {
                continue;
            }
            let c = &self.coins[self.kind[i] as usize];
            for (t, vt) in v.iter_mut().enumerate().take(two_d) {
                let row = &c[t * two_d..(t + 1) * two_d];
                *vt = row.iter().zip(chunk).map(|(m, a)| m * a).sum();
            }
            for (t, &vt) in v.iter().enumerate().take(two_d) {
                if vt == ZERO {
                    continue;
                }
                let j = if t % 2 == 0 { i + strides[t / 2] } else { i - strides[t / 2] };
                let slot = j * two_d + t;
                self.next[slot] += self.phases[slot] * vt;
            }
        }
        std::mem::swap(&mut self.amps, &mut self.next);
        self.steps += 1;
        Ok(())
    }

    /// Same as [`position_moments`] on the current state.
    pub fn moments(&mut self, ps: &[f64], norm: PositionNorm, origin: Site) -> Vec<f64> {
        if !matches!(&self.radii, Some((o, n, _)) if *o == origin && *n == norm) {
            let r = self.region.sites().map(|x| norm.of(x - origin) as f64).collect();
            self.radii = Some((origin, norm, r));
        }
        let radii = &self.radii.as_ref().unwrap().2;
        let two_d = 2 * self.dim();
        let mut acc = vec![Vec::new(); ps.len()];
        for (i, chunk) in self.amps.chunks(two_d).enumerate() {
            let w: f64 = chunk.iter().map(|a| a.norm_sqr()).sum();
            if w == 0.0 {
                continue;
            }
            for (k, &p) in ps.iter().enumerate() {
                acc[k].push(if p == 0.0 { w } else { radii[i].powf(p) * w });
            }
        }
        acc.iter().map(|v| pairwise_sum(v)).collect()
    }
}

/// `ψ_0, ..., ψ_n` with every state stored.
pub fn evolve(rule: CoinRule, field: PhaseField, window: Window, psi0: &StateVector, n: usize) -> Result<Vec<StateVector>> {
    if let Window::Fixed { radius } = window {
        let reach = psi0.entries().map(|(s, _)| s.site.dist(&psi0.region.center)).max().unwrap_or(0);
        if (reach as usize) + n + 1 > radius as usize {
            return Err(Error::LightCone(format!("box radius {radius} < support {reach} + {n} steps + 1")));
        }
    }
    let init: Vec<_> = psi0.entries().collect();
    let mut p = Propagator::new(rule, field, window, psi0.region.center, &init)?;
    let mut out = vec![p.state()];
    for _ in 0..n {
        p.step()?;
        out.push(p.state());
    }
    Ok(out)
}

/// Moments of one trajectory at every time `0..=n`.
#[derive(Clone, Debug, Serialize)]
pub struct MomentTrace {
    pub ps: Vec<f64>,
    /// `moments[k][t]` for `ps[k]`.
    pub moments: Vec<Vec<f64>>,
    /// Running maximum of `moments`.
    pub sup: Vec<Vec<f64>>,
    pub initial: BasisState,
    pub seed: Option<u64>,
    /// `max_t |‖ψ_t‖² + dropped - 1|`.
    pub norm_drift: f64,
    pub truncated: f64,
    pub final_radius: u32,
}

impl MomentTrace {
    pub fn steps(&self) -> usize {
        self.moments.first().map_or(0, |m| m.len().saturating_sub(1))
    }
}

/// Runs `n` steps from `|start⟩`, recording moments about the origin.
pub fn moment_trace(
    rule: CoinRule,
    field: PhaseField,
    window: Window,
    start: BasisState,
    n: usize,
    ps: &[f64],
    norm: PositionNorm,
) -> Result<MomentTrace> {
    moment_trace_about(rule, field, window, start, n, ps, norm, Site::ORIGIN)
}

#[allow(clippy::too_many_arguments)]
pub fn moment_trace_about(
    rule: CoinRule,
    field: PhaseField,
    window: Window,
    start: BasisState,
    n: usize,
    ps: &[f64],
    norm: PositionNorm,
    origin: Site,
) -> Result<MomentTrace> {
    if let Window::Fixed { radius } = window {
        if n + 1 > radius as usize {
            return Err(Error::LightCone(format!("box radius {radius} cannot hold {n} steps")));
        }
    }
    let seed = field.seed();
    let mut p = Propagator::new(rule, field, window, start.site, &[(start, Complex64::new(1.0, 0.0))])?;
    let mut moments = vec![Vec::with_capacity(n + 1); ps.len()];
    let mut drift = 0.0f64;
    for t in 0..=n {
        if t > 0 {
            p.step()?;
        }
        for (k, m) in p.moments(ps, norm, origin).into_iter().enumerate() {
            moments[k].push(m);
        }
        drift = drift.max((p.norm_sqr() + p.truncated() - 1.0).abs());
    }
    let sup = moments
        .iter()
        .map(|m| {
            let mut best = f64::NEG_INFINITY;
            m.iter().map(|&v| {
                best = best.max(v);
                best
            })
            .collect()
        })
        .collect();
    Ok(MomentTrace {
        ps: ps.to_vec(),
        moments,
        sup,
        initial: start,
        seed,
        norm_drift: drift,
        truncated: p.truncated(),
        final_radius: p.radius(),
    })
}

/// Settings of the localization experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    /// When present the experiment requires it to be localizing.
    pub perm: Option<Permutation>,
    pub coin: CoinMatrix,
    pub distribution: PhaseDistribution,
    pub steps: usize,
    pub realizations: usize,
    pub ps: Vec<f64>,
    pub start: BasisState,
    pub window: Window,
    #[serde(default)]
    pub norm: PositionNorm,
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.perm {
            if p.dim() != self.coin.dim() {
                return Err(Error::DimensionMismatch { expected: self.coin.dim(), found: p.dim() });
            }
            if !check_localizing(p).localizing {
                return Err(Error::NonLocalizing);
            }
        }
        if self.steps < 10 || self.realizations == 0 || self.ps.is_empty() {
            return Err(Error::InvalidParameter("need at least 10 steps, one realization and one p".into()));
        }
        if self.ps.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter("moment orders must be finite and nonnegative".into()));
        }
        if self.start.coin.axis() >= self.coin.dim() {
            return Err(Error::InvalidCoinIndex { value: self.start.coin.value(), dim: self.coin.dim() });
        }
        self.distribution.validate()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalizationReport {
    pub ps: Vec<f64>,
    /// Per realization and `p`: `⟨|X|^p⟩_n / ⟨|X|^p⟩_{n/10}`.
    pub saturation: Vec<Vec<f64>>,
    pub median_saturation: Vec<f64>,
    /// Slope of `ln E⟨|X|^p⟩_t` against `ln t` for `t ∈ [n/10, n]`.
    pub growth_exponent: Vec<f64>,
    pub max_norm_drift: f64,
    pub max_truncated: f64,
    pub failures: Vec<(usize, String)>,
    #[serde(skip)]
    pub traces: Vec<MomentTrace>,
}

impl LocalizationReport {
    /// Rows `step,p,moment,realization`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "n,p,moment,realization")?;
        for (r, tr) in self.traces.iter().enumerate() {
            for (k, p) in tr.ps.iter().enumerate() {
                for (t, m) in tr.moments[k].iter().enumerate() {
                    writeln!(w, "{t},{p},{m:.17e},{r}")?;
                }
            }
        }
        Ok(())
    }
}

/// Log-spaced times in `[lo, hi]`, at most `count`, deduplicated.
fn log_times(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    let (a, b) = ((lo.max(1) as f64).ln(), (hi.max(1) as f64).ln());
    let mut t: Vec<usize> =
        (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp().round() as usize).collect();
    t.dedup();
    t
}

/// Ensemble of traces with phases drawn per realization.
pub fn localization_experiment(cfg: &LocalizationConfig, seed: u64) -> Result<LocalizationReport> {
    cfg.validate()?;
    let d = cfg.coin.dim();
    let n = cfg.steps;
    let results = run_realizations(cfg.realizations, seed, |_, rs| {
        let region = BoxRegion::new(d, cfg.start.site, 1)?;
        let field = sample_field(&region, &cfg.distribution, rs)?;
        moment_trace(CoinRule::Uniform(cfg.coin.clone()), field, cfg.window, cfg.start, n, &cfg.ps, cfg.norm)
    });
    let (traces, failed) = collect_successes(results, 0.0)?;
    let early = n / 10;
    let saturation: Vec<Vec<f64>> =
        traces.iter().map(|tr| tr.moments.iter().map(|m| m[n] / m[early]).collect()).collect();
    let median_saturation =
        (0..cfg.ps.len()).map(|k| median(&saturation.iter().map(|s| s[k]).collect::<Vec<_>>())).collect();
    let times = log_times(early, n, 24);
    let growth_exponent = (0..cfg.ps.len())
        .map(|k| {
            let xs: Vec<f64> = times.iter().map(|&t| (t as f64).ln()).collect();
            let ys: Vec<f64> = times
                .iter()
                .map(|&t| {
                    let v: Vec<f64> = traces.iter().map(|tr| tr.moments[k][t]).collect();
                    (pairwise_sum(&v) / v.len() as f64).ln()
                })
                .collect();
            linear_fit(&xs, &ys).map_or(f64::NAN, |f| f.slope)
        })
        .collect();
    Ok(LocalizationReport {
        ps: cfg.ps.clone(),
        max_norm_drift: traces.iter().map(|t| t.norm_drift).fold(0.0, f64::max),
        max_truncated: traces.iter().map(|t| t.truncated).fold(0.0, f64::max),
        saturation,
        median_saturation,
        growth_exponent,
        failures: failed.into_iter().map(|(i, e)| (i, e.to_string())).collect(),
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coin::{permutation_matrix, perturb_coin};
    use crate::disorder::translate_field;
    use crate::walk::{apply_walk, WalkOperator};

    fn ci(v: i32, d: usize) -> CoinIndex {
        CoinIndex::new(v, d).unwrap()
    }

    fn adaptive() -> Window {
        Window::Adaptive { radius: 4, max_radius: 200, truncation: 1e-30 }
    }

    #[test]
    fn moments_of_point_masses() {
        let region = BoxRegion::centered(2, 4).unwrap();
        let origin = StateVector::point(region, BasisState::new(ci(1, 2), Site::ORIGIN)).unwrap();
        assert_eq!(position_moments(&origin, &[1.0, 2.0], PositionNorm::Sup, Site::ORIGIN), vec![0.0, 0.0]);
        let far = StateVector::point(region, BasisState::new(ci(-2, 2), Site::new(&[3, -1]))).unwrap();
        assert_eq!(position_moments(&far, &[2.0], PositionNorm::Sup, Site::ORIGIN), vec![9.0]);
        assert_eq!(position_moments(&far, &[2.0], PositionNorm::Sum, Site::ORIGIN), vec![16.0]);
        let mut half = StateVector::zeros(region);
        let h = Complex64::new(0.5f64.sqrt(), 0.0);
        half.set(BasisState::new(ci(1, 2), Site::new(&[1, 0])), h).unwrap();
        half.set(BasisState::new(ci(2, 2), Site::new(&[0, -2])), h).unwrap();
        let m = position_moments(&half, &[1.0], PositionNorm::Sup, Site::ORIGIN)[0];
        assert!((m - 1.5).abs() < 1e-15);
    }

    #[test]
    fn matches_matrix_free_walk() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.4, 2).unwrap();
        let field = sample_field(&BoxRegion::centered(2, 12).unwrap(), &PhaseDistribution::Uniform {}, 6).unwrap();
        let region = BoxRegion::centered(2, 10).unwrap();
        let psi0 = StateVector::point(region, BasisState::new(ci(2, 2), Site::ORIGIN)).unwrap();
        let traj = evolve(CoinRule::Uniform(coin.clone()), field.clone(), Window::Fixed { radius: 10 }, &psi0, 6).unwrap();
        let op = WalkOperator::uniform(coin, field).unwrap();
        let mut psi = psi0;
        for t in 1..=6 {
            psi = apply_walk(&op, &psi).unwrap();
            let err = crate::linalg::max_abs_diff(&psi.amps, &traj[t].amps);
            assert!(err < 1e-14, "step {t}: {err}");
        }
    }

    #[test]
    fn fixed_window_light_cone() {
        let region = BoxRegion::centered(1, 5).unwrap();
        let psi0 = StateVector::point(region, BasisState::new(ci(1, 1), Site::ORIGIN)).unwrap();
        let f = CoinMatrix::fourier(1).unwrap();
        let r = evolve(CoinRule::Uniform(f), PhaseField::zero(1).unwrap(), Window::Fixed { radius: 5 }, &psi0, 8);
        assert!(matches!(r, Err(Error::LightCone(_))));
    }

    #[test]
    fn swap_two_steps_returns_with_phase() {
        // oracle: two explicit steps |+1,0⟩ -> |-1,-1⟩ -> |+1,0⟩
        let swap = Permutation::from_cycles(1, &[&[1, -1]]).unwrap();
        let field = sample_field(&BoxRegion::centered(1, 4).unwrap(), &PhaseDistribution::Uniform {}, 3).unwrap();
        let region = BoxRegion::centered(1, 3).unwrap();
        let start = BasisState::new(ci(1, 1), Site::ORIGIN);
        let psi0 = StateVector::point(region, start).unwrap();
        let traj = evolve(CoinRule::Uniform(permutation_matrix(&swap)), field.clone(), adaptive(), &psi0, 2).unwrap();
        let theta = field.phase(Site::new(&[-1]), ci(-1, 1)).unwrap() + field.phase(Site::ORIGIN, ci(1, 1)).unwrap();
        let e: Vec<_> = traj[2].entries().collect();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].0, start);
        assert!((e[0].1 - Complex64::from_polar(1.0, theta)).norm() < 1e-14);
    }

    #[test]
    fn permutation_coin_confines_and_is_periodic() {
        let p = Permutation::from_cycles(2, &[&[1, 2, -1, -2]]).unwrap();
        let field = sample_field(&BoxRegion::centered(2, 3).unwrap(), &PhaseDistribution::Uniform {}, 8).unwrap();
        let start = BasisState::new(ci(1, 2), Site::ORIGIN);
        let tr = moment_trace(CoinRule::Uniform(permutation_matrix(&p)), field, adaptive(), start, 40, &[2.0], PositionNorm::Sup)
            .unwrap();
        assert_eq!(tr.truncated, 0.0);
        assert_eq!(tr.final_radius, 4);
        for t in 4..=40 {
            assert!((tr.moments[0][t] - tr.moments[0][t - 4]).abs() < 1e-14);
        }
        let peak = tr.moments[0][..4].iter().cloned().fold(0.0, f64::max);
        assert_eq!(tr.sup[0][3], peak);
        assert!((tr.sup[0].last().unwrap() - peak).abs() < 1e-14);
    }

    #[test]
    fn norm_conserved_over_long_runs() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.05, 1).unwrap();
        let field = sample_field(&BoxRegion::centered(2, 1).unwrap(), &PhaseDistribution::Uniform {}, 2).unwrap();
        let start = BasisState::new(ci(1, 2), Site::ORIGIN);
        let tr = moment_trace(CoinRule::Uniform(coin), field, adaptive(), start, 10_000, &[0.0], PositionNorm::Sup).unwrap();
        assert!(tr.norm_drift <= 1e-10, "{}", tr.norm_drift);
        assert!(tr.truncated < 1e-20);
        assert!(tr.moments[0].iter().all(|m| (m - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn translation_covariance_exact() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.3, 4).unwrap();
        let base = sample_field(&BoxRegion::centered(2, 1).unwrap(), &PhaseDistribution::Uniform {}, 5).unwrap();
        let a = Site::new(&[4, -7]);
        let start = BasisState::new(ci(-1, 2), Site::ORIGIN);
        let moved = BasisState::new(ci(-1, 2), a);
        let ps = [1.0, 2.0];
        let t0 = moment_trace(CoinRule::Uniform(coin.clone()), base.clone(), adaptive(), start, 60, &ps, PositionNorm::Sup).unwrap();
        let shifted = translate_field(&base, -a);
        let t1 = moment_trace_about(CoinRule::Uniform(coin), shifted, adaptive(), moved, 60, &ps, PositionNorm::Sup, a).unwrap();
        assert_eq!(t0.moments, t1.moments);
    }

    #[test]
    fn moments_monotone_in_p_away_from_origin() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let coin = perturb_coin(&permutation_matrix(&p), 0.2, 4).unwrap();
        let field = sample_field(&BoxRegion::centered(2, 1).unwrap(), &PhaseDistribution::Uniform {}, 5).unwrap();
        let start = BasisState::new(ci(1, 2), Site::new(&[30, 5]));
        let ps = [0.5, 1.0, 2.0, 3.0];
        let tr = moment_trace(CoinRule::Uniform(coin), field, adaptive(), start, 50, &ps, PositionNorm::Sup).unwrap();
        for t in 0..=50 {
            for k in 1..ps.len() {
                assert!(tr.moments[k - 1][t] <= tr.moments[k][t]);
            }
        }
        assert_eq!(tr.moments[1][0], 30.0);
    }

    #[test]
    fn free_fourier_walk_is_ballistic() {
        // oracle: without disorder ⟨|X|²⟩ grows like n²
        let start = BasisState::new(ci(1, 2), Site::ORIGIN);
        let f = CoinMatrix::fourier(2).unwrap();
        let tr = moment_trace(CoinRule::Uniform(f), PhaseField::zero(2).unwrap(), adaptive(), start, 120, &[2.0], PositionNorm::Sup)
            .unwrap();
        let ratio = tr.moments[0][120] / tr.moments[0][60];
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn experiment_runs_and_validates() {
        let p = Permutation::from_cycles(2, &[&[1, -1], &[2, -2]]).unwrap();
        let cfg = LocalizationConfig {
            perm: Some(p.clone()),
            coin: perturb_coin(&permutation_matrix(&p), 0.05, 1).unwrap(),
            distribution: PhaseDistribution::Uniform {},
            steps: 100,
            realizations: 3,
            ps: vec![2.0],
            start: BasisState::new(ci(1, 2), Site::ORIGIN),
            window: adaptive(),
            norm: PositionNorm::Sup,
        };
        let rep = localization_experiment(&cfg, 1).unwrap();
        assert_eq!(rep.traces.len(), 3);
        assert!(rep.max_norm_drift < 1e-10);
        let again = localization_experiment(&cfg, 1).unwrap();
        assert_eq!(rep.saturation, again.saturation);
        let bad = LocalizationConfig { perm: Some(Permutation::from_cycles(2, &[&[1, 2], &[-1, -2]]).unwrap()), ..cfg };
        assert!(matches!(localization_experiment(&bad, 1), Err(Error::NonLocalizing)));
    }
}
