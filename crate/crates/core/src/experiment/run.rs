use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use super::{z_grid, ExperimentConfig, OutputSet, Subcommand};
use crate::coin::{check_localizing, decompose_cycles, haar_coin, permutation_matrix, random_permutation, CoinMatrix, Permutation};
use crate::disorder::sample_field;
use crate::dynamics::{localization_experiment, LocalizationConfig};
use crate::error::Result;
use crate::lattice::{BoxRegion, Site};
use crate::linalg::{max_abs_diff, unitarity_residual, SparseMatrix};
use crate::mc::{collect_successes, derive_seed, run_realizations, with_pool};
use crate::resolvent::{
    decay_fit, distance_profile, finite_volume_bound_scan, fractional_moment_mc, identity_columns, pairs_at_distances,
    verify_geometric_identity, worst_case, FmEnsemble, IdentityReport, Resolvent,
};
use crate::spectral::{
    arc_avoidance_probability, block_spectrum_exact, dispersion, flat_band_test, hausdorff, k_grid,
    spectral_distance_statistics, trace_criterion, unitary_spectrum, Arc, DISPERSIVE_THRESHOLD, FLAT_THRESHOLD,
};
use crate::stats::linear_fit;
use crate::walk::{build_finite_restriction, OuterSystem, Restriction, DEFAULT_DIMENSION_CAP};

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    f(&mut b)?;
    Ok(b)
}

/// Validates `cfg` for `cmd` and runs it with master seed `seed`, in memory.
pub fn run(cmd: Subcommand, cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    cfg.validate(cmd)?;
    let mut out = with_pool(cfg.threads, || match cmd {
        Subcommand::CheckPerm => check_perm(cfg),
        Subcommand::Dispersion => run_dispersion(cfg, seed),
        Subcommand::Spectrum => run_spectrum(cfg, seed),
        Subcommand::ArcStats => run_arcs(cfg, seed),
        Subcommand::DistScaling => run_dist_scaling(cfg, seed),
        Subcommand::Dynamics => run_dynamics(cfg, seed),
        Subcommand::FmDecay => run_fm_decay(cfg, seed),
        Subcommand::FvScan => run_fv_scan(cfg, seed),
        Subcommand::VerifyIdentities => run_identities(cfg, seed),
    })??;
    out.files.push(("report.json".into(), json_bytes(&out.report)?));
    Ok(out)
}

fn check_perm(cfg: &ExperimentConfig) -> Result<OutputSet> {
    let perm = cfg.permutation()?;
    let rep = check_localizing(&perm);
    let flat = if rep.fixed_point_free {
        match flat_band_test(&perm) {
            Ok(f) => json!(f),
            Err(e) => json!(e.to_string()),
        }
    } else {
        Value::Null
    };
    let lines = vec![
        format!("permutation: {}", decompose_cycles(&perm)),
        format!("localizing: {}", rep.localizing),
        format!("fixed-point free: {}", rep.fixed_point_free),
        format!("cycle lengths: {:?}", rep.cycle_lengths),
    ];
    Ok(OutputSet { files: vec![], report: json!({ "localization": rep, "flat_bands": flat }), lines })
}

#[derive(Serialize)]
struct PermRow {
    permutation: String,
    images: Vec<i32>,
    localizing: bool,
    flatness: f64,
    flat_band_test: Option<bool>,
    agree: bool,
}

fn run_dispersion(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let d = cfg.dimension;
    let sec = cfg.dispersion.clone().unwrap_or(super::DispersionSection {
        grid: super::default_grid(),
        exhaustive: false,
        random_coins: 0,
        trace_tol: super::default_trace_tol(),
    });
    let grid = k_grid(d, sec.grid);
    let perm = cfg.permutation()?;
    let coin = cfg.coin()?;
    let res = dispersion(&coin, &grid)?;
    let mut files = vec![("dispersion.csv".to_string(), csv_bytes(|w| res.write_csv(w))?)];
    let classify = |p: &Permutation| -> Result<PermRow> {
        let localizing = check_localizing(p).localizing;
        let flatness = dispersion(&permutation_matrix(p), &grid)?.max_flatness();
        let test = flat_band_test(p).ok();
        let separated = if localizing { flatness <= FLAT_THRESHOLD } else { flatness >= DISPERSIVE_THRESHOLD };
        Ok(PermRow {
            permutation: decompose_cycles(p).to_string(),
            images: p.clone().into(),
            localizing,
            flatness,
            flat_band_test: test,
            agree: test == Some(localizing) && separated,
        })
    };
    let configured = classify(&perm)?;
    let exhaustive: Vec<PermRow> = if sec.exhaustive {
        Permutation::all(d)?.iter().filter(|p| p.is_fixed_point_free()).map(classify).collect::<Result<_>>()?
    } else {
        vec![]
    };
    if !exhaustive.is_empty() {
        let mut b = Vec::new();
        writeln!(b, "permutation,localizing,flatness,flat_band_test,agree")?;
        for r in &exhaustive {
            let t = r.flat_band_test.map_or("ambiguous".to_string(), |v| v.to_string());
            writeln!(b, "\"{}\",{},{:.6e},{t},{}", r.permutation, r.localizing, r.flatness, r.agree)?;
        }
        files.push(("permutations.csv".into(), b));
    }
    let mut trace_rows = Vec::new();
    for i in 0..sec.random_coins {
        let p = random_permutation(d, derive_seed(seed, 2 * i as u64))?;
        let h = haar_coin(d, derive_seed(seed, 2 * i as u64 + 1))?;
        for (kind, c) in [("permutation", permutation_matrix(&p)), ("haar", h)] {
            let t = trace_criterion(&c, sec.grid, sec.trace_tol);
            trace_rows.push(json!({ "index": i, "kind": kind, "criterion": t }));
        }
    }
    let trace_consistent = trace_rows.iter().all(|r| r["criterion"]["consistent"] == json!(true));
    let all_agree = exhaustive.iter().all(|r| r.agree);
    let lines = vec![
        format!("max band flatness of the configured coin: {:.3e}", res.max_flatness()),
        format!("localizing: {}, flat: {:?}", configured.localizing, configured.flat_band_test),
        format!("exhaustive permutations: {} (all agree: {all_agree})", exhaustive.len()),
        format!("trace criterion on {} coins: consistent {trace_consistent}", trace_rows.len()),
    ];
    let report = json!({
        "grid": sec.grid,
        "coin_flatness": res.flatness,
        "branch_cut": res.branch_cut,
        "configured": configured,
        "exhaustive": exhaustive,
        "all_agree": all_agree,
        "trace": trace_rows,
        "trace_consistent": trace_consistent,
    });
    Ok(OutputSet { files, report, lines })
}

#[derive(Serialize)]
struct SpectrumRealization {
    seed: u64,
    blocks: usize,
    block_lengths: Vec<usize>,
    max_hausdorff: f64,
    max_residual: f64,
    /// Nonzero matrix entries joining two different blocks.
    off_block_entries: usize,
    dense_hausdorff: Option<f64>,
}

fn run_spectrum(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.spectrum.as_ref().expect("validated");
    let perm = cfg.permutation()?;
    let coin = permutation_matrix(&perm);
    let d = cfg.dimension;
    let results = run_realizations(sec.realizations, seed, |_, rs| {
        let field = sample_field(&BoxRegion::centered(d, sec.radius + 2)?, &cfg.distribution, rs)?;
        let fr = build_finite_restriction(
            &perm,
            &coin,
            &field,
            Restriction::Box { center: Site::ORIGIN, radius: sec.radius },
            DEFAULT_DIMENSION_CAP,
        )?;
        let mut owner = vec![0usize; fr.basis.len()];
        let mut start = 0;
        let mut max_h = 0.0f64;
        let mut max_res = 0.0f64;
        let mut exact_all = Vec::with_capacity(fr.basis.len());
        for (k, b) in fr.blocks.iter().enumerate() {
            let idx: Vec<usize> = (start..start + b.len()).collect();
            for &i in &idx {
                owner[i] = k;
            }
            start += b.len();
            let num = unitary_spectrum(&fr.matrix.submatrix(&idx, &idx).to_dense())?;
            let exact = block_spectrum_exact(b, &field)?;
            max_h = max_h.max(hausdorff(&exact.eigenvalues, &num.eigenvalues));
            max_res = max_res.max(num.max_residual());
            exact_all.extend(exact.eigenvalues);
        }
        let off_block_entries =
            fr.matrix.triplets().filter(|&(i, j, v)| owner[i] != owner[j] && v != Complex64::new(0.0, 0.0)).count();
        let dense_hausdorff = if fr.basis.len() <= sec.dense_cap {
            let num = unitary_spectrum(&fr.matrix.to_dense())?;
            Some(hausdorff(&exact_all, &num.eigenvalues))
        } else {
            None
        };
        let mut block_lengths: Vec<usize> = fr.blocks.iter().map(|b| b.len()).collect();
        block_lengths.sort_unstable();
        block_lengths.dedup();
        Ok(SpectrumRealization {
            seed: rs,
            blocks: fr.blocks.len(),
            block_lengths,
            max_hausdorff: max_h,
            max_residual: max_res,
            off_block_entries,
            dense_hausdorff,
        })
    });
    let (rows, _) = collect_successes(results, 0.0)?;
    let mut b = Vec::new();
    writeln!(b, "realization,seed,blocks,max_hausdorff,max_residual,off_block_entries,dense_hausdorff")?;
    for (i, r) in rows.iter().enumerate() {
        let dh = r.dense_hausdorff.map_or(String::new(), |v| format!("{v:.6e}"));
        writeln!(
            b,
            "{i},{},{},{:.6e},{:.6e},{},{dh}",
            r.seed, r.blocks, r.max_hausdorff, r.max_residual, r.off_block_entries
        )?;
    }
    let max_h = rows.iter().map(|r| r.max_hausdorff.max(r.dense_hausdorff.unwrap_or(0.0))).fold(0.0, f64::max);
    let off: usize = rows.iter().map(|r| r.off_block_entries).sum();
    let lengths: Vec<usize> = {
        let mut v: Vec<usize> = rows.iter().flat_map(|r| r.block_lengths.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let lines = vec![
        format!("{} realizations, block lengths {lengths:?}", rows.len()),
        format!("max Hausdorff distance exact vs numerical: {max_h:.3e}"),
        format!("off-block entries: {off}"),
    ];
    let report = json!({
        "dimension": cfg.dimension,
        "realizations": rows.len(),
        "block_lengths": lengths,
        "max_hausdorff": max_h,
        "off_block_entries": off,
        "rows": rows,
    });
    Ok(OutputSet { files: vec![("spectrum.csv".into(), b)], report, lines })
}

fn run_arcs(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.arc_stats.as_ref().expect("validated");
    let perm = cfg.permutation()?;
    let mut rows = Vec::with_capacity(sec.lengths.len());
    for (i, &len) in sec.lengths.iter().enumerate() {
        let arc = Arc::centered(sec.center, len)?;
        rows.push(arc_avoidance_probability(
            &perm,
            sec.target,
            &cfg.distribution,
            &arc,
            sec.realizations,
            derive_seed(seed, i as u64),
        )?);
    }
    let mut b = Vec::new();
    writeln!(b, "arc_length,n,avoided,estimate,ci_low,ci_high,exact,fitted_c,seed")?;
    for r in &rows {
        writeln!(
            b,
            "{:.17e},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            r.arc_length, r.n, r.avoided, r.estimate, r.ci_low, r.ci_high, r.exact, r.fitted_c, r.seed
        )?;
    }
    // 1 - P(avoid) against |A|: slope estimates the constant of the linear law
    let fit = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.arc_length).collect();
        let ys: Vec<f64> = rows.iter().map(|r| 1.0 - r.estimate).collect();
        linear_fit(&xs, &ys).ok()
    } else {
        None
    };
    let exact_in_ci = rows.iter().filter(|r| r.ci_low <= r.exact && r.exact <= r.ci_high).count();
    let lines = vec![
        format!("{} arcs, exact probability inside the 95% interval for {exact_in_ci}", rows.len()),
        format!("fitted slope of 1 - P(avoid): {:?}", fit.as_ref().map(|f| f.slope)),
    ];
    let report = json!({ "rows": rows, "fit": fit, "exact_in_ci": exact_in_ci });
    Ok(OutputSet { files: vec![("arcs.csv".into(), b)], report, lines })
}

fn run_dist_scaling(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.dist_scaling.as_ref().expect("validated");
    let perm = cfg.permutation()?;
    let z = Complex64::new(sec.z[0], sec.z[1]);
    let mut etas = sec.etas.clone();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for (ri, &l) in sec.radii.iter().enumerate() {
        // common random numbers across η
        let rs = derive_seed(seed, ri as u64);
        let stats: Vec<_> = etas
            .iter()
            .map(|&eta| spectral_distance_statistics(z, eta, l, &perm, &cfg.distribution, sec.realizations, rs))
            .collect::<Result<_>>()?;
        for w in stats.windows(2) {
            let ratio = if w[0].hits > 0 { Some(w[1].estimate / w[0].estimate) } else { None };
            ratios.push(json!({
                "radius": l,
                "eta_small": w[0].eta,
                "eta_large": w[1].eta,
                "ratio": ratio,
                "hits_small": w[0].hits,
                "hits_large": w[1].hits,
            }));
        }
        rows.extend(stats);
    }
    let mut b = Vec::new();
    writeln!(b, "radius,eta,n,hits,estimate,ci_low,ci_high,seed")?;
    for r in &rows {
        writeln!(
            b,
            "{},{:.17e},{},{},{:.17e},{:.17e},{:.17e},{}",
            r.radius, r.eta, r.n, r.hits, r.estimate, r.ci_low, r.ci_high, r.seed
        )?;
    }
    let gap = (z.norm() - 1.0).abs();
    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| format!("L = {}, η = {}: P = {} ({} hits of {})", r.radius, r.eta, r.estimate, r.hits, r.n))
        .collect();
    lines.push(format!("distance from z to the unit circle: {gap:.6}"));
    let report = json!({ "z": sec.z, "circle_gap": gap, "rows": rows, "ratios": ratios });
    Ok(OutputSet { files: vec![("dist_scaling.csv".into(), b)], report, lines })
}

fn run_dynamics(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.dynamics.as_ref().expect("validated");
    let lc = LocalizationConfig {
        perm: if cfg.coin.is_near_permutation() { Some(cfg.permutation()?) } else { None },
        coin: cfg.coin()?,
        distribution: cfg.distribution.clone(),
        steps: sec.steps,
        realizations: sec.realizations,
        ps: sec.ps.clone(),
        start: sec.start,
        window: sec.window,
        norm: sec.norm,
    };
    let rep = localization_experiment(&lc, seed)?;
    let files = vec![("traces.csv".to_string(), csv_bytes(|w| rep.write_csv(w))?)];
    let lines = rep
        .ps
        .iter()
        .enumerate()
        .map(|(k, p)| {
            format!(
                "p = {p}: median saturation {:.4}, growth exponent {:.4}",
                rep.median_saturation[k], rep.growth_exponent[k]
            )
        })
        .collect();
    let report = json!({
        "steps": sec.steps,
        "coin_distance": crate::coin::coin_distance(&lc.coin, &permutation_matrix(&cfg.permutation()?))?,
        "final_radius": rep.traces.iter().map(|t| t.final_radius).max(),
        "result": rep,
    });
    Ok(OutputSet { files, report, lines })
}

fn run_fm_decay(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.fm_decay.as_ref().expect("validated");
    let ens = FmEnsemble {
        perm: cfg.permutation()?,
        coin: cfg.coin()?,
        distribution: cfg.distribution.clone(),
        center: Site::ORIGIN,
        radius: sec.radius,
    };
    let mut distances = sec.distances.clone();
    distances.sort_unstable();
    distances.dedup();
    let pairs = pairs_at_distances(&ens, sec.source, &distances)?;
    let zs = z_grid(&sec.z_radii, sec.arguments, sec.argument_offset);
    let run = fractional_moment_mc(&ens, sec.s, &zs, &pairs, sec.realizations, seed)?;
    let profiles = run.estimates.iter().map(distance_profile).collect::<Result<Vec<_>>>()?;
    let fits: Vec<std::result::Result<_, String>> = profiles
        .iter()
        .enumerate()
        .map(|(k, p)| decay_fit(p, sec.bootstrap, derive_seed(seed ^ 0x5eed, k as u64)).map_err(|e| e.to_string()))
        .collect();

    let na = sec.arguments;
    let reference: Vec<_> = fits[..na].iter().filter_map(|f| f.as_ref().ok()).cloned().collect();
    let worst = if reference.len() == na { worst_case(&reference).cloned() } else { None };
    // per distance, the largest estimate over the arguments of each |z|
    let envelope = |ri: usize| -> Vec<f64> {
        (0..profiles[0].distances.len())
            .map(|i| (0..na).map(|a| profiles[ri * na + a].mean[i]).fold(0.0, f64::max))
            .collect()
    };
    let base = envelope(0);
    let bounded: Vec<Value> = (1..sec.z_radii.len())
        .map(|ri| {
            let other = envelope(ri);
            let factor = base
                .iter()
                .zip(&other)
                .map(|(&a, &b)| if a == b { 1.0 } else { (a / b).max(b / a) })
                .fold(1.0, f64::max);
            json!({ "radius": sec.z_radii[ri], "reference": sec.z_radii[0], "max_factor": factor,
                    "within_factor_10": factor <= 10.0, "max_estimates": other })
        })
        .collect();

    let mut b = Vec::new();
    writeln!(b, "z_index,z_re,z_im,distance,mean,se")?;
    for (k, (p, z)) in profiles.iter().zip(&zs).enumerate() {
        for i in 0..p.distances.len() {
            writeln!(b, "{k},{:.17e},{:.17e},{},{:.17e},{:.17e}", z.re, z.im, p.distances[i], p.mean[i], p.se[i])?;
        }
    }
    let mut files = vec![("profiles.csv".to_string(), b)];
    files.push(("estimates.json".into(), json_bytes(&run.estimates)?));
    if sec.raw_csv {
        let mut raw = Vec::new();
        for (k, e) in run.estimates.iter().enumerate() {
            writeln!(raw, "# z_index {k}")?;
            e.write_raw_csv(&mut raw)?;
        }
        files.push(("raw.csv".into(), raw));
    }
    let mut lines = vec![format!(
        "{} pairs, {} z values, {} realizations kept of {}",
        pairs.len(),
        zs.len(),
        run.requested - run.failures.len(),
        run.requested
    )];
    if let Some(w) = &worst {
        lines.push(format!(
            "worst case |z| = {}: γ = {:.4} (95% CI [{:.4}, {:.4}]), R² = {:.4}, decaying: {}",
            sec.z_radii[0], w.gamma, w.ci_low, w.ci_high, w.r_squared, w.decaying
        ));
    }
    for v in &bounded {
        lines.push(format!("|z| = {} vs {}: max factor {:.3}", v["radius"], v["reference"], v["max_factor"]));
    }
    let report = json!({
        "s": sec.s,
        "pairs": pairs.len(),
        "z": zs.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "requested": run.requested,
        "failures": run.failures,
        "failure_rate": run.failure_rate(),
        "profiles": profiles,
        "fits": fits.iter().map(|f| match f { Ok(v) => json!(v), Err(e) => json!({ "error": e }) }).collect::<Vec<_>>(),
        "worst_case": worst,
        "boundedness": bounded,
    });
    Ok(OutputSet { files, report, lines })
}

fn run_fv_scan(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.fv_scan.as_ref().expect("validated");
    let rep = finite_volume_bound_scan(sec, &cfg.permutation()?, &cfg.distribution, seed)?;
    let mut b = Vec::new();
    writeln!(b, "L,delta,coin_distance,pairs,estimate,se,envelope_shape,envelope,failures")?;
    for r in &rep.rows {
        writeln!(
            b,
            "{},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            r.l, r.delta, r.coin_distance, r.pairs, r.estimate, r.se, r.envelope_shape, r.envelope, r.failures
        )?;
    }
    let mut lines: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("L = {}: δ = {:.3e}, estimate {:.4e} ± {:.1e}, envelope {:.4e}", r.l, r.delta, r.estimate, r.se, r.envelope))
        .collect();
    lines.push(format!("nonincreasing: {}, below envelope: {}", rep.nonincreasing, rep.below_envelope));
    Ok(OutputSet { files: vec![("scan.csv".into(), b)], report: json!(rep), lines })
}

#[derive(Serialize, Default)]
struct Algebra {
    /// Largest `‖M*M - 1‖` over coins, `U`, `U^L`, `U^{L+3}` and the box and complement restrictions.
    max_unitarity_residual: f64,
    /// Nonzero entries of `U(C_π)` joining different blocks.
    off_block_entries: usize,
    /// Nonzero cross-block entries of resolvent columns at `C_π`.
    off_block_resolvent_entries: usize,
    /// Largest entry of `U^L` joining `H^{Λ_L}` and its complement, over the configured and a Haar coin.
    max_box_leak: f64,
    /// Largest difference between the translated and the original restriction and resolvent column.
    max_translation_deviation: f64,
}

impl Algebra {
    fn merge(mut self, o: &Algebra) -> Algebra {
        self.max_unitarity_residual = self.max_unitarity_residual.max(o.max_unitarity_residual);
        self.off_block_entries += o.off_block_entries;
        self.off_block_resolvent_entries += o.off_block_resolvent_entries;
        self.max_box_leak = self.max_box_leak.max(o.max_box_leak);
        self.max_translation_deviation = self.max_translation_deviation.max(o.max_translation_deviation);
        self
    }
}

fn block_owner(sys: &OuterSystem) -> Vec<usize> {
    sys.blocks().iter().enumerate().flat_map(|(k, b)| std::iter::repeat_n(k, b.len())).collect()
}

fn cross_max(m: &SparseMatrix, inner: &[bool]) -> f64 {
    m.triplets().filter(|&(i, j, _)| inner[i] != inner[j]).map(|(_, _, v)| v.norm()).fold(0.0, f64::max)
}

fn algebra_checks(
    cfg: &ExperimentConfig,
    perm: &Permutation,
    coin: &CoinMatrix,
    l: u32,
    outer: u32,
    rs: u64,
) -> Result<Algebra> {
    let d = cfg.dimension;
    let zero = Complex64::new(0.0, 0.0);
    let field = sample_field(&BoxRegion::centered(d, outer + 2)?, &cfg.distribution, rs)?;
    let c_pi = permutation_matrix(perm);
    let haar = haar_coin(d, rs)?;
    let mut a = Algebra::default();
    for c in [coin, &c_pi, &haar] {
        a.max_unitarity_residual = a.max_unitarity_residual.max(unitarity_residual(c.matrix()));
        let sys = OuterSystem::new(perm, c, &field, Site::ORIGIN, outer, DEFAULT_DIMENSION_CAP)?;
        let mut ops = vec![sys.full().clone(), sys.decoupled(l)?, sys.decoupled(l + 3)?];
        for r in [
            Restriction::Box { center: Site::ORIGIN, radius: l },
            Restriction::Complement { center: Site::ORIGIN, radius: l, outer },
        ] {
            ops.push(build_finite_restriction(perm, c, &field, r, DEFAULT_DIMENSION_CAP)?.matrix);
        }
        for m in &ops {
            a.max_unitarity_residual = a.max_unitarity_residual.max(m.unitarity_residual());
        }
        for ll in [l, l + 3] {
            let mut inner = vec![false; sys.dimension()];
            for i in sys.inner_indices(ll) {
                inner[i] = true;
            }
            a.max_box_leak = a.max_box_leak.max(cross_max(&sys.decoupled(ll)?, &inner));
        }
        if std::ptr::eq(c, &c_pi) {
            let owner = block_owner(&sys);
            a.off_block_entries +=
                sys.full().triplets().filter(|&(i, j, v)| owner[i] != owner[j] && v != zero).count();
            let r = Resolvent::new(sys.full(), sys.basis(), Complex64::from_polar(1.1, 0.4))?;
            let n = sys.dimension();
            for j in (0..n).step_by((n / 8).max(1)) {
                let col = r.column(j)?;
                a.off_block_resolvent_entries +=
                    col.iter().enumerate().filter(|&(i, v)| owner[i] != owner[j] && *v != zero).count();
            }
        }
    }
    // covariance: translated ensemble, same seed
    let ens = FmEnsemble { perm: perm.clone(), coin: coin.clone(), distribution: cfg.distribution.clone(), center: Site::ORIGIN, radius: l };
    let shift = Site::new(&[3, -2, 1][..d]);
    let moved = ens.translated(shift);
    let f0 = ens.restriction(&ens.field(rs)?)?;
    let f1 = moved.restriction(&moved.field(rs)?)?;
    if f0.matrix.nnz() != f1.matrix.nnz() || f0.basis.len() != f1.basis.len() {
        a.max_translation_deviation = f64::INFINITY;
    } else {
        let shifted_states = f0.basis.states().iter().zip(f1.basis.states()).all(|(s, t)| s.site + shift == t.site && s.coin == t.coin);
        let diff = f0.matrix.sub(&f1.matrix).max_abs();
        let z = Complex64::from_polar(0.9, 1.3);
        let r0 = Resolvent::new(&f0.matrix, &f0.basis, z)?.column(0)?;
        let r1 = Resolvent::new(&f1.matrix, &f1.basis, z)?.column(0)?;
        a.max_translation_deviation = if shifted_states { diff.max(max_abs_diff(&r0, &r1)) } else { f64::INFINITY };
    }
    Ok(a)
}

fn run_identities(cfg: &ExperimentConfig, seed: u64) -> Result<OutputSet> {
    let sec = cfg.identities.as_ref().expect("validated");
    let perm = cfg.permutation()?;
    let coin = cfg.coin()?;
    let d = cfg.dimension;
    let zs = z_grid(&sec.z_radii, sec.arguments, sec.argument_offset);
    let results = run_realizations(sec.realizations, seed, |_, rs| -> Result<(Algebra, Vec<IdentityReport>)> {
        let alg = algebra_checks(cfg, &perm, &coin, sec.l, sec.outer_radius, rs)?;
        let field = sample_field(&BoxRegion::centered(d, sec.outer_radius + 2)?, &cfg.distribution, rs)?;
        let sys = OuterSystem::new(&perm, &coin, &field, Site::ORIGIN, sec.outer_radius, DEFAULT_DIMENSION_CAP)?;
        let cols = identity_columns(&sys, sec.l, sec.columns);
        let reps = zs.iter().map(|&z| verify_geometric_identity(&sys, sec.l, z, &cols)).collect::<Result<_>>()?;
        Ok((alg, reps))
    });
    let (rows, _) = collect_successes(results, 0.0)?;
    let algebra = rows.iter().fold(Algebra::default(), |acc, (a, _)| acc.merge(a));
    let mut b = Vec::new();
    writeln!(b, "realization,z_re,z_im,single,double,expansion,columns,expansion_columns,max_entry")?;
    let (mut single, mut double, mut expansion) = (0.0f64, 0.0f64, 0.0f64);
    let mut expansion_columns = usize::MAX;
    for (i, (_, reps)) in rows.iter().enumerate() {
        for r in reps {
            writeln!(
                b,
                "{i},{:.17e},{:.17e},{:.6e},{:.6e},{:.6e},{},{},{:.6e}",
                r.z.re, r.z.im, r.single, r.double, r.expansion, r.columns, r.expansion_columns, r.max_entry
            )?;
            single = single.max(r.single);
            double = double.max(r.double);
            expansion = expansion.max(r.expansion);
            expansion_columns = expansion_columns.min(r.expansion_columns);
        }
    }
    let lines = vec![
        format!("{} realizations x {} z values", rows.len(), zs.len()),
        format!("max deviation: single {single:.3e}, double {double:.3e}, expansion {expansion:.3e}"),
        format!(
            "unitarity {:.3e}, off-block entries {} (resolvent {}), box leak {:.3e}, translation {:.3e}",
            algebra.max_unitarity_residual,
            algebra.off_block_entries,
            algebra.off_block_resolvent_entries,
            algebra.max_box_leak,
            algebra.max_translation_deviation
        ),
    ];
    let report = json!({
        "l": sec.l,
        "outer_radius": sec.outer_radius,
        "realizations": rows.len(),
        "z": zs.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "max_single": single,
        "max_double": double,
        "max_expansion": expansion,
        "min_expansion_columns": expansion_columns,
        "algebra": algebra,
    });
    Ok(OutputSet { files: vec![("identities.csv".into(), b)], report, lines })
}
