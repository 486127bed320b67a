//! Experiment configuration, the subcommand runners and run manifests.

mod output;
mod run;

pub use output::{read_manifest, replay, run_to_dir, Manifest, OutputSet, ReplayReport, CODE_VERSION, MANIFEST};
pub use run::run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coin::{haar_coin, permutation_matrix, perturb_coin, CoinMatrix, Permutation};
use crate::disorder::PhaseDistribution;
use crate::dynamics::{PositionNorm, Window};
use crate::error::{Error, Result};
use crate::resolvent::ScanConfig;
use crate::spectral::ArcTarget;
use crate::walk::BasisState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    CheckPerm,
    Dispersion,
    Spectrum,
    ArcStats,
    DistScaling,
    Dynamics,
    FmDecay,
    FvScan,
    VerifyIdentities,
}

impl Subcommand {
    pub const ALL: [Subcommand; 9] = [
        Subcommand::CheckPerm,
        Subcommand::Dispersion,
        Subcommand::Spectrum,
        Subcommand::ArcStats,
        Subcommand::DistScaling,
        Subcommand::Dynamics,
        Subcommand::FmDecay,
        Subcommand::FvScan,
        Subcommand::VerifyIdentities,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::CheckPerm => "check-perm",
            Subcommand::Dispersion => "dispersion",
            Subcommand::Spectrum => "spectrum",
            Subcommand::ArcStats => "arc-stats",
            Subcommand::DistScaling => "dist-scaling",
            Subcommand::Dynamics => "dynamics",
            Subcommand::FmDecay => "fm-decay",
            Subcommand::FvScan => "fv-scan",
            Subcommand::VerifyIdentities => "verify-identities",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subcommand::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand {s:?}")))
    }
}

/// The coin `C` of the experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoinSpec {
    /// `C_π` itself.
    #[default]
    Permutation,
    /// A random unitary at distance `δ` from `C_π`, direction fixed by `seed`.
    Perturbed { delta: f64, seed: u64 },
    /// The discrete Fourier matrix on `C^{2d}`.
    Fourier,
    Haar { seed: u64 },
    Explicit { matrix: CoinMatrix },
}

impl CoinSpec {
    pub fn build(&self, perm: &Permutation) -> Result<CoinMatrix> {
        let d = perm.dim();
        let c = match self {
            CoinSpec::Permutation => permutation_matrix(perm),
            CoinSpec::Perturbed { delta, seed } => perturb_coin(&permutation_matrix(perm), *delta, *seed)?,
            CoinSpec::Fourier => CoinMatrix::fourier(d)?,
            CoinSpec::Haar { seed } => haar_coin(d, *seed)?,
            CoinSpec::Explicit { matrix } => matrix.clone(),
        };
        if c.dim() != d {
            return Err(Error::Config(format!("coin acts on dimension {}, permutation on {d}", c.dim())));
        }
        Ok(c)
    }

    /// Coins for which the permutation's blocks are the reference structure.
    pub fn is_near_permutation(&self) -> bool {
        matches!(self, CoinSpec::Permutation | CoinSpec::Perturbed { .. })
    }
}

fn default_grid() -> usize {
    32
}
fn default_trace_tol() -> f64 {
    1e-12
}
fn default_dense_cap() -> usize {
    100
}
fn default_arguments() -> usize {
    8
}
fn default_offset() -> f64 {
    0.3
}
fn default_bootstrap() -> usize {
    1000
}
fn default_columns() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionSection {
    /// Points per axis of the `k` grid.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Classify every fixed-point-free permutation of the dimension.
    #[serde(default)]
    pub exhaustive: bool,
    /// Random permutation coins and random Haar coins (this many of each) for
    /// the trace criterion.
    #[serde(default)]
    pub random_coins: usize,
    #[serde(default = "default_trace_tol")]
    pub trace_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub radius: u32,
    pub realizations: usize,
    /// Largest restriction also diagonalized as one dense matrix.
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSection {
    pub lengths: Vec<f64>,
    #[serde(default)]
    pub center: f64,
    pub target: ArcTarget,
    pub realizations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistScalingSection {
    /// `[re, im]`.
    pub z: [f64; 2],
    pub etas: Vec<f64>,
    pub radii: Vec<u32>,
    pub realizations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub steps: usize,
    pub realizations: usize,
    pub ps: Vec<f64>,
    pub start: BasisState,
    pub window: Window,
    #[serde(default)]
    pub norm: PositionNorm,
}

/// Whether the fractional-moment run is meant to sit inside the regime of the
/// decoupling argument, which needs `s < 1/3`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmRegime {
    #[default]
    Decoupling,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmDecaySection {
    pub s: f64,
    /// `|z|` values; the first is the reference for the boundedness check.
    pub z_radii: Vec<f64>,
    /// `z = |z| e^{i(offset + 2πk/arguments)}`.
    #[serde(default = "default_arguments")]
    pub arguments: usize,
    #[serde(default = "default_offset")]
    pub argument_offset: f64,
    pub distances: Vec<u32>,
    pub source: BasisState,
    pub radius: u32,
    pub realizations: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub regime: FmRegime,
    /// Also write every `|G|^s` sample.
    #[serde(default)]
    pub raw_csv: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesSection {
    pub l: u32,
    pub outer_radius: u32,
    pub z_radii: Vec<f64>,
    #[serde(default = "default_arguments")]
    pub arguments: usize,
    #[serde(default = "default_offset")]
    pub argument_offset: f64,
    pub realizations: usize,
    /// Columns per realization, plus as many far from the center.
    #[serde(default = "default_columns")]
    pub columns: usize,
}

/// One experiment file. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dimension: usize,
    /// Disjoint cycles, e.g. `[[1, -1], [2, -2]]`.
    pub permutation: Vec<Vec<i32>>,
    #[serde(default)]
    pub coin: CoinSpec,
    #[serde(default)]
    pub distribution: PhaseDistribution,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<DispersionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_stats: Option<ArcSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_scaling: Option<DistScalingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fm_decay: Option<FmDecaySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fv_scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identities: Option<IdentitiesSection>,
}

fn need<'a, T>(section: &'a Option<T>, key: &str, cmd: Subcommand) -> Result<&'a T> {
    section.as_ref().ok_or_else(|| Error::Config(format!("{cmd} needs a \"{key}\" section")))
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_radii(radii: &[f64], what: &str) -> Result<()> {
    check(!radii.is_empty(), || format!("{what}: empty |z| list"))?;
    for &r in radii {
        check(r > 0.5 && r < 2.0 && (r - 1.0).abs() > 1e-12, || format!("{what}: |z| = {r} must lie in (1/2, 2) off the unit circle"))?;
    }
    Ok(())
}

fn check_start(start: &BasisState, dim: usize) -> Result<()> {
    check(start.coin.axis() < dim, || format!("start coin {} outside dimension {dim}", start.coin.value()))?;
    check(start.site.coords(crate::lattice::MAX_DIM)[dim..].iter().all(|&c| c == 0), || {
        format!("start site has more than {dim} coordinates")
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn permutation(&self) -> Result<Permutation> {
        let cycles: Vec<&[i32]> = self.permutation.iter().map(|c| c.as_slice()).collect();
        Permutation::from_cycles(self.dimension, &cycles).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn coin(&self) -> Result<CoinMatrix> {
        self.coin.build(&self.permutation()?).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every precondition `cmd` relies on, checked before any computation.
    pub fn validate(&self, cmd: Subcommand) -> Result<()> {
        let d = self.dimension;
        check((1..=3).contains(&d), || format!("dimension {d} not in 1..=3"))?;
        let perm = self.permutation()?;
        self.coin()?;
        self.distribution.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = self.threads {
            check(t > 0, || "threads must be positive".into())?;
        }
        let localizing = crate::coin::check_localizing(&perm).localizing;
        match cmd {
            Subcommand::CheckPerm => {}
            Subcommand::Dispersion => {
                let s = self.dispersion.clone().unwrap_or(DispersionSection {
                    grid: default_grid(),
                    exhaustive: false,
                    random_coins: 0,
                    trace_tol: default_trace_tol(),
                });
                check(s.grid >= 2 && s.grid.pow(d as u32) <= 1 << 20, || format!("grid {} out of range", s.grid))?;
                check(s.trace_tol > 0.0, || "trace_tol must be positive".into())?;
            }
            Subcommand::Spectrum => {
                let s = need(&self.spectrum, "spectrum", cmd)?;
                check(localizing, || "spectrum needs a localizing permutation".into())?;
                check(self.coin == CoinSpec::Permutation, || {
                    "spectrum compares with the exact block formula, which needs coin kind \"permutation\"".into()
                })?;
                check(s.radius >= 2 && s.realizations > 0, || "spectrum needs radius >= 2 and realizations > 0".into())?;
            }
            Subcommand::ArcStats => {
                let s = need(&self.arc_stats, "arc_stats", cmd)?;
                check(localizing, || "arc-stats needs a localizing permutation".into())?;
                check(s.realizations >= 100, || "arc-stats needs at least 100 realizations".into())?;
                check(!s.lengths.is_empty(), || "arc-stats needs arc lengths".into())?;
                for &l in &s.lengths {
                    check(l > 0.0 && l < std::f64::consts::TAU, || format!("arc length {l} outside (0, 2π)"))?;
                }
            }
            Subcommand::DistScaling => {
                let s = need(&self.dist_scaling, "dist_scaling", cmd)?;
                check(localizing, || "dist-scaling needs a localizing permutation".into())?;
                check(s.realizations > 0 && !s.etas.is_empty() && !s.radii.is_empty(), || {
                    "dist-scaling needs realizations, etas and radii".into()
                })?;
                check(s.etas.iter().all(|&e| e > 0.0), || "etas must be positive".into())?;
                check(s.radii.iter().all(|&r| r >= 2), || "radii must be at least 2".into())?;
                check(s.z.iter().all(|v| v.is_finite()), || "z must be finite".into())?;
            }
            Subcommand::Dynamics => {
                let s = need(&self.dynamics, "dynamics", cmd)?;
                if self.coin.is_near_permutation() {
                    check(localizing, || "dynamics near C_π needs a localizing permutation".into())?;
                }
                check_start(&s.start, d)?;
                check(s.steps >= 10 && s.realizations > 0 && !s.ps.is_empty(), || {
                    "dynamics needs at least 10 steps, one realization and one p".into()
                })?;
                if let Window::Fixed { radius } = s.window {
                    let reach = s.start.site.sup_norm() as usize;
                    check(radius as usize > reach + s.steps, || {
                        format!("fixed box radius {radius} violates the light cone of {} steps", s.steps)
                    })?;
                }
            }
            Subcommand::FmDecay => {
                let s = need(&self.fm_decay, "fm_decay", cmd)?;
                check(localizing, || "fm-decay needs a localizing permutation".into())?;
                check(s.s > 0.0 && s.s < 1.0, || format!("s = {} outside (0, 1)", s.s))?;
                if s.regime == FmRegime::Decoupling {
                    check(s.s < 1.0 / 3.0, || {
                        format!("s = {} violates s < 1/3, required in the decoupling regime", s.s)
                    })?;
                }
                check_radii(&s.z_radii, "fm_decay")?;
                check_start(&s.source, d)?;
                check(s.arguments > 0 && s.realizations >= 100, || "fm-decay needs arguments > 0 and N >= 100".into())?;
                let mut dist = s.distances.clone();
                dist.sort_unstable();
                dist.dedup();
                check(dist.len() >= 4, || "fm-decay needs at least 4 distinct distances".into())?;
                check(dist.iter().all(|&r| r > 2), || "decay distances must exceed 2".into())?;
                check(s.radius >= 2 && dist.iter().all(|&r| s.source.site.sup_norm() + r <= s.radius), || {
                    format!("radius {} cannot host the distances", s.radius)
                })?;
            }
            Subcommand::FvScan => {
                let s = need(&self.fv_scan, "fv_scan", cmd)?;
                check(localizing, || "fv-scan needs a localizing permutation".into())?;
                s.validate(d)?;
            }
            Subcommand::VerifyIdentities => {
                let s = need(&self.identities, "identities", cmd)?;
                check(localizing, || "verify-identities needs a localizing permutation".into())?;
                check_radii(&s.z_radii, "identities")?;
                check(s.l >= 2, || "L must be at least 2".into())?;
                check(s.outer_radius >= s.l + 6, || {
                    format!("outer radius {} cannot host L + 5 = {} with its own collar", s.outer_radius, s.l + 5)
                })?;
                check(s.realizations > 0 && s.arguments > 0 && s.columns > 0, || {
                    "verify-identities needs realizations, arguments and columns".into()
                })?;
            }
        }
        Ok(())
    }
}

/// `|z| e^{i(offset + 2πk/count)}` for each radius, radius-major.
pub fn z_grid(radii: &[f64], count: usize, offset: f64) -> Vec<num_complex::Complex64> {
    radii
        .iter()
        .flat_map(|&r| {
            (0..count).map(move |k| {
                num_complex::Complex64::from_polar(r, offset + std::f64::consts::TAU * k as f64 / count as f64)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"dimension": 2, "permutation": [[1, -1], [2, -2]]}"#;

    #[test]
    fn minimal_config_and_defaults() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.coin, CoinSpec::Permutation);
        assert_eq!(c.distribution, PhaseDistribution::Uniform {});
        c.validate(Subcommand::CheckPerm).unwrap();
        assert!(c.validate(Subcommand::Spectrum).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = ExperimentConfig::from_json(r#"{"dimension": 2, "permutation": [], "delat": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("delat"), "{e}");
        let nested = r#"{"dimension": 2, "permutation": [[1,-1],[2,-2]], "coin": {"kind": "perturbed", "delta": 0.1, "seed": 1, "sede": 2}}"#;
        assert!(ExperimentConfig::from_json(nested).is_err());
        let dist = r#"{"dimension": 2, "permutation": [[1,-1],[2,-2]], "distribution": {"kind": "uniform", "width": 1}}"#;
        assert!(ExperimentConfig::from_json(dist).is_err());
    }

    #[test]
    fn fm_decay_s_guard() {
        let text = r#"{"dimension": 2, "permutation": [[1,-1],[2,-2]],
            "coin": {"kind": "perturbed", "delta": 0.05, "seed": 1},
            "fm_decay": {"s": 0.5, "z_radii": [1.1], "distances": [3,4,5,6], "source": {"coin": 1, "site": [0,0]},
                         "radius": 10, "realizations": 100}}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        let e = c.validate(Subcommand::FmDecay).unwrap_err().to_string();
        assert!(e.contains("s < 1/3"), "{e}");
        let mut general = c.clone();
        general.fm_decay.as_mut().unwrap().regime = FmRegime::General;
        general.validate(Subcommand::FmDecay).unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"{"dimension": 2, "permutation": [[1,-1],[2,-2]], "seed": 9,
            "coin": {"kind": "perturbed", "delta": 0.05, "seed": 1},
            "distribution": {"kind": "arc", "center": 1.0, "width": 0.5},
            "dynamics": {"steps": 100, "realizations": 2, "ps": [2.0], "start": {"coin": 1, "site": [0,0]},
                         "window": {"kind": "adaptive", "radius": 4, "max_radius": 100, "truncation": 1e-20}},
            "fv_scan": {"s": 0.2, "a": 1.0, "p": 2.0, "eta": 1e-4, "ls": [4, 6], "z": [1.1, 0.0],
                        "realizations": 100, "delta_rule": {"kind": "closed_form"}, "coin_seed": 1}}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_json(), again.to_json());
    }

    #[test]
    fn subcommand_names() {
        for c in Subcommand::ALL {
            assert_eq!(c.name().parse::<Subcommand>().unwrap(), c);
        }
        assert!("replay-all".parse::<Subcommand>().is_err());
    }
}
