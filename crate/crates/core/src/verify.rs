//! Acceptance checks run by `bdm check` and the acceptance test target.
//!
//! Each criterion produces a pass/fail verdict plus detail lines. Lines that
//! start with `warn:` are comparisons reported for information only.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calculus::{self, fd_derivatives, integrate_1d, MaxOptions};
use crate::cli::{exponential_table, render_table, round2, table_thetas, ExponentialCells, TABLE_METHODS, TABLE_NS};
use crate::error::{BdmError, Result};
use crate::model::{cushings, exact_bdm_exponential, exponential_model, fit_geometry, logistic_model, DerivativeSource, ORACLE_NODES};
use crate::otmap::{bdm_sn_multi, pushforward_diagnostic, Frame, PushforwardReport};
use crate::sks::{bdm_marginal_sks, marginal_sks_fit, VFormula};
use crate::snmatch::{bdm_sn_univariate, sn_derivatives, sn_fit, sn_logpdf, sn_marginal, MatchInputs, SnParams};
use crate::specialfn::{chi2_cdf, norm_cdf, norm_pdf, owens_t, sn_cdf, sn_pdf, zeta};
use crate::univariate::{bdm_io_profile, bdm_ho_profile, bdm_wald_multi, Method};

const REFERENCE_TABLE: &str = include_str!("../data/reference_table.csv");

/// Reference two-decimal values, keyed by `(n, method)`, in θ₀ order.
pub fn reference_table() -> Vec<(usize, Method, [f64; 8])> {
    REFERENCE_TABLE
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let mut v = [0.0; 8];
            for (k, x) in v.iter_mut().enumerate() {
                *x = f[2 + k].parse().expect("bundled table is numeric");
            }
            (f[0].parse().expect("bundled n"), Method::parse(f[1]).expect("bundled method"), v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub seed: u64,
    pub table_tol: f64,
    pub sn_roundtrip_tol: f64,
    pub sn_residual_tol: f64,
    pub pushforward_draws: usize,
    pub mean_tol: f64,
    pub cov_tol: f64,
    pub skew_tol: f64,
    pub qq_min: f64,
}

impl CheckSettings {
    pub fn with_seed(seed: u64) -> Self {
        CheckSettings {
            seed,
            table_tol: 0.015,
            sn_roundtrip_tol: 1e-4,
            sn_residual_tol: 1e-4,
            pushforward_draws: 200_000,
            mean_tol: 0.01,
            cov_tol: 0.02,
            skew_tol: 0.03,
            qq_min: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub outcomes: Vec<CriterionOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&format!("{} {} {}\n", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name));
            for l in &o.lines {
                out.push_str(&format!("    {l}\n"));
            }
        }
        let failed: Vec<String> = self.outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
        if failed.is_empty() {
            out.push_str("all criteria passed\n");
        } else {
            out.push_str(&format!("failed criteria: {}\n", failed.join(",")));
        }
        out
    }
}

pub const CRITERIA: [u8; 8] = [1, 2, 3, 4, 5, 6, 7, 8];

pub fn criterion(id: u8, s: &CheckSettings) -> Result<CriterionOutcome> {
    match id {
        1 => table_golden(s),
        2 => spot_anchors(),
        3 => logistic_example(),
        4 => higher_order_accuracy(),
        5 => sn_round_trip(s),
        6 => ot_pushforward(s),
        7 => special_functions(),
        8 => determinism(s),
        _ => Err(BdmError::Domain(format!("unknown criterion {id}"))),
    }
}

/// Runs the selected criteria (all when `selected` is empty), in order.
pub fn run_checks(s: &CheckSettings, selected: &[u8]) -> Result<CheckReport> {
    let ids: Vec<u8> = CRITERIA.iter().copied().filter(|c| selected.is_empty() || selected.contains(c)).collect();
    if let Some(bad) = selected.iter().find(|c| !CRITERIA.contains(c)) {
        return Err(BdmError::Domain(format!("unknown criterion {bad}")));
    }
    let outcomes = ids.iter().map(|&id| criterion(id, s)).collect::<Result<Vec<_>>>()?;
    Ok(CheckReport { outcomes })
}

fn outcome(id: u8, name: &'static str, passed: bool, lines: Vec<String>) -> Result<CriterionOutcome> {
    Ok(CriterionOutcome { id, name, passed, lines })
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

// 1 ------------------------------------------------------------------------

fn table_golden(s: &CheckSettings) -> Result<CriterionOutcome> {
    let start = Instant::now();
    let rows = exponential_table(1.2)?;
    let fast = start.elapsed().as_secs_f64() < 10.0;
    let reference = reference_table();
    let thetas = table_thetas();
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (mi, method) in TABLE_METHODS.iter().enumerate() {
        let (mut good, mut total, mut max_err) = (0, 0, 0.0f64);
        let mut worst = String::new();
        for &(n, pm, vals) in reference.iter().filter(|p| p.1 == *method) {
            for (ti, &theta) in thetas.iter().enumerate() {
                let row = rows.iter().find(|r| r.n == n && r.theta0 == theta).expect("grid cell");
                let ours = row.values[mi];
                let zero_convention = matches!(pm, Method::Io | Method::Ho) && ti == 3;
                let ok = if zero_convention { round2(ours) == "0.00" } else { (ours - vals[ti]).abs() <= s.table_tol };
                let err = (ours - vals[ti]).abs();
                if err > max_err {
                    max_err = err;
                    worst = format!("n={n} theta0={theta}: {ours:.4} vs reference {:.2}", vals[ti]);
                }
                total += 1;
                good += ok as usize;
            }
        }
        all_ok &= good == total;
        lines.push(format!("{}: {good}/{total} cells within {} ({}); worst {worst}", method, s.table_tol, mark(good == total)));
    }
    lines.push(format!("runtime under 10 s: {}", if fast { "yes" } else { "no" }));
    outcome(1, "exponential table reproduction", all_ok && fast, lines)
}

// 2 ------------------------------------------------------------------------

fn spot_anchors() -> Result<CriterionOutcome> {
    let mut lines = Vec::new();
    let exact = exact_bdm_exponential(6, 1.2, 1.2)?;
    let ok_exact = (exact - 0.109).abs() <= 0.002;
    lines.push(format!("exact(6, 1.2, 1.2) = {exact:.5} (target 0.109 +- 0.002) {}", mark(ok_exact)));

    let cells = ExponentialCells::new(6, 1.2)?;
    let j = cells.geometry().obs_info_mle[(0, 0)];
    let ok_j = (j - 6.0 / 1.44).abs() < 1e-8;
    lines.push(format!("j(mle) = {j:.6} (target 4.1667) {}", mark(ok_j)));
    let io = cells.eval(Method::Io, 0.9)?.delta();
    let ok_io = (io - 0.460).abs() <= 0.002;
    lines.push(format!("io(6, 1.2, 0.9) = {io:.5} (target 0.460 +- 0.002) {}", mark(ok_io)));

    let reference_map = ["1.03", "1.11", "1.14", "1.17"];
    let mut ok_map = true;
    for (n, want) in TABLE_NS.iter().zip(reference_map) {
        let (m, _) = exponential_model(*n, 1.2)?;
        let map = fit_geometry(&m)?.map[0];
        let closed = *n as f64 * 1.2 / (*n as f64 + 1.0);
        let ok = (map - closed).abs() < 1e-8 && round2(map) == want;
        ok_map &= ok;
        lines.push(format!("map(n={n}) = {map:.6}, t/(n+1) = {closed:.6}, reference {want} {}", mark(ok)));
    }
    outcome(2, "spot anchors", ok_exact && ok_j && ok_io && ok_map, lines)
}

// 3 ------------------------------------------------------------------------

fn logistic_example() -> Result<CriterionOutcome> {
    let model = logistic_model(&cushings(), 5.0)?;
    let geom = fit_geometry(&model)?;
    let sn = sn_fit(&MatchInputs::from_geometry(&geom, DerivativeSource::LogPosterior)?)?.params;
    let mut lines = Vec::new();
    let mut hard = true;
    let reference = [(0.512, 0.611, 0.612, 0.584), (0.891, 0.998, 0.935, 0.870)];
    for (slot, k) in [1usize, 2].into_iter().enumerate() {
        let oracle = crate::model::exact_marginal_bdm_quadrature(&model, &geom, k, 0.0, ORACLE_NODES)?;
        let io = bdm_io_profile(&model, &geom, k, 0.0)?.delta();
        let ho = bdm_ho_profile(&model, &geom, k, 0.0)?.delta();
        let sks = bdm_marginal_sks(&marginal_sks_fit(&geom, k, DerivativeSource::LogPosterior, VFormula::Marginalized)?, 0.0)?.delta();
        let snm = bdm_sn_univariate(&sn_marginal(&sn, &[k])?, 0.0)?.delta();
        let ex = oracle.delta;
        lines.push(format!(
            "beta{k}: oracle {ex:.4} (quadrature error {:.1e}); io {io:.4}, ho {ho:.4}, sks {sks:.4}, sn {snm:.4}",
            oracle.error_estimate
        ));
        let e_io = (io - ex).abs();
        for (name, v) in [("sks", sks), ("sn", snm)] {
            let e = (v - ex).abs();
            let ok = e <= 0.06 && e < e_io;
            hard &= ok;
            lines.push(format!("beta{k} {name}: |err| {e:.4} <= 0.06 and < io |err| {e_io:.4} {}", mark(ok)));
        }
        let p = reference[slot];
        for (name, ours, want) in [("io", io, p.0), ("ho", ho, p.1), ("sks", sks, p.2), ("sn", snm, p.3)] {
            soft_line(&mut lines, &format!("beta{k} {name}"), ours, want);
        }
    }
    let wald = bdm_wald_multi(&model, &geom, &[1, 2], &[0.0, 0.0], false)?.delta();
    let joint = bdm_sn_multi(&sn_marginal(&sn, &[1, 2])?, &[0.0, 0.0])?.delta();
    soft_line(&mut lines, "joint wald", wald, 0.300);
    soft_line(&mut lines, "joint sn", joint, 0.760);
    outcome(3, "logistic example", hard, lines)
}

fn soft_line(lines: &mut Vec<String>, what: &str, ours: f64, want: f64) {
    let within = (ours - want).abs() <= 0.05;
    lines.push(format!(
        "{}{what}: {ours:.4} vs reference {want:.3} ({})",
        if within { "" } else { "warn: " },
        if within { "within 0.05" } else { "outside 0.05" }
    ));
}

// 4 ------------------------------------------------------------------------

fn higher_order_accuracy() -> Result<CriterionOutcome> {
    let thetas = table_thetas();
    let mut lines = Vec::new();
    let (mut ho_max, mut io_max_all, mut io_max6) = (0.0f64, 0.0f64, 0.0f64);
    let mut sks_err = vec![[0.0; 2]; TABLE_NS.len()];
    for (ni, &n) in TABLE_NS.iter().enumerate() {
        let cells = ExponentialCells::new(n, 1.2)?;
        for &t in thetas.iter().filter(|&&t| t != 1.2) {
            let exact = cells.eval(Method::Exact, t)?.delta();
            ho_max = ho_max.max((cells.eval(Method::Ho, t)?.delta() - exact).abs());
            let io = (cells.eval(Method::Io, t)?.delta() - exact).abs();
            io_max_all = io_max_all.max(io);
            if n == 6 {
                io_max6 = io_max6.max(io);
            }
        }
        for (slot, t) in [0.9, 1.5].into_iter().enumerate() {
            sks_err[ni][slot] = (cells.eval(Method::SksNum, t)?.delta() - cells.eval(Method::Exact, t)?.delta()).abs();
        }
    }
    let ok_ho = ho_max <= 0.005;
    let ok_io = io_max6 >= 0.15 && ho_max < io_max_all;
    lines.push(format!("ho max error {ho_max:.5} <= 0.005 {}", mark(ok_ho)));
    lines.push(format!("io max error {io_max_all:.4} (n=6: {io_max6:.4} >= 0.15), ho smaller {}", mark(ok_io)));
    let mut ok_mono = true;
    for (slot, t) in [0.9, 1.5].into_iter().enumerate() {
        let errs: Vec<f64> = sks_err.iter().map(|e| e[slot]).collect();
        let mono = errs.windows(2).all(|w| w[1] < w[0]);
        ok_mono &= mono;
        let shown: Vec<String> = errs.iter().map(|e| format!("{e:.4}")).collect();
        lines.push(format!("sks-num error at theta0={t} over n=6,12,20,40: {} decreasing {}", shown.join(", "), mark(mono)));
    }
    outcome(4, "higher-order accuracy", ok_ho && ok_io && ok_mono, lines)
}

// 5 ------------------------------------------------------------------------

fn random_sn(rng: &mut ChaCha8Rng, d: usize) -> Result<SnParams> {
    let xi = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let omega = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
    let alpha = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
    SnParams::new(xi, omega, alpha)
}

/// Mode of an SN density by Newton on its exact derivatives.
pub fn sn_mode(p: &SnParams) -> Result<DVector<f64>> {
    let f = |x: &[f64]| sn_logpdf(p, x).unwrap_or(f64::NEG_INFINITY);
    let gh = |x: &[f64]| {
        let (g, nh, _) = sn_derivatives(p, &DVector::from_column_slice(x));
        (g, -nh)
    };
    calculus::maximize_with(&f, Some(&gh), p.mean().as_slice(), MaxOptions { tol: 1e-12, max_iter: 200 })
}

/// Largest parameter difference after fitting to the target's own mode,
/// curvature and third derivatives.
pub fn sn_round_trip_error(target: &SnParams) -> Result<f64> {
    let m = sn_mode(target)?;
    let (_, h, t) = sn_derivatives(target, &m);
    let fit = sn_fit(&MatchInputs::new(m, h, t)?)?.params;
    Ok((&fit.xi - &target.xi).amax().max((&fit.omega - &target.omega).amax()).max((&fit.alpha - &target.alpha).amax()))
}

/// Relative FD residuals of the matching equations: (gradient in sd units, Hessian, third).
pub fn sn_fd_residuals(p: &SnParams, inputs: &MatchInputs) -> Result<(f64, f64, f64)> {
    // differentiate in sd units around m so every step matches the local curvature
    let d = inputs.m.len();
    let sd = DVector::from_fn(d, |i, _| 1.0 / inputs.h[(i, i)].sqrt());
    let f = |y: &[f64]| {
        let x = &inputs.m + DVector::from_column_slice(y).component_mul(&sd);
        sn_logpdf(p, x.as_slice()).unwrap_or(f64::NAN)
    };
    let fd = fd_derivatives(&f, &vec![0.0; d], 3, false)?;
    let grad = fd.gradient.amax();
    let hess_fd = DMatrix::from_fn(d, d, |i, j| -fd.hessian[(i, j)] / (sd[i] * sd[j]));
    let hess = (hess_fd - &inputs.h).amax() / inputs.h.amax();
    let third_fd = DVector::from_fn(d, |i, _| fd.third_unmixed[i] / sd[i].powi(3));
    let third = (third_fd - &inputs.t).amax() / inputs.t.amax().max(f64::MIN_POSITIVE);
    Ok((grad, hess, third))
}

fn sn_round_trip(s: &CheckSettings) -> Result<CriterionOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..50 {
        let target = random_sn(&mut rng, i % 3 + 1)?;
        match sn_round_trip_error(&target) {
            Ok(e) => {
                worst = worst.max(e);
                failures += (e > s.sn_roundtrip_tol) as usize;
            }
            Err(_) => failures += 1,
        }
    }
    let mut lines = vec![format!(
        "50 random targets: {} recovered within {:e}, worst error {worst:.2e} {}",
        50 - failures,
        s.sn_roundtrip_tol,
        mark(failures == 0)
    )];
    let mut ok = failures == 0;
    let exp = fit_geometry(&exponential_model(6, 1.2)?.0)?;
    let logi = fit_geometry(&logistic_model(&cushings(), 5.0)?)?;
    for (name, geom) in [("exponential", exp), ("logistic", logi)] {
        let inputs = MatchInputs::from_geometry(&geom, DerivativeSource::LogPosterior)?;
        let fit = sn_fit(&inputs)?;
        let (g, h, t) = sn_fd_residuals(&fit.params, &inputs)?;
        let this = g.max(h).max(t) <= s.sn_residual_tol;
        ok &= this;
        lines.push(format!("{name}: kappa {:.4}, residuals gradient {g:.1e}, hessian {h:.1e}, third {t:.1e} {}", fit.kappa, mark(this)));
    }
    outcome(5, "skew-normal matching round trip", ok, lines)
}

// 6 ------------------------------------------------------------------------

fn pushforward_ok(r: &PushforwardReport, s: &CheckSettings) -> bool {
    r.max_abs_mean <= s.mean_tol && r.cov_dev <= s.cov_tol && r.max_abs_skewness <= s.skew_tol && r.qq_correlation >= s.qq_min
}

fn ot_pushforward(s: &CheckSettings) -> Result<CriterionOutcome> {
    let geom = fit_geometry(&logistic_model(&cushings(), 5.0)?)?;
    let sn = sn_fit(&MatchInputs::from_geometry(&geom, DerivativeSource::LogPosterior)?)?.params;
    let mut lines = Vec::new();
    let r = pushforward_diagnostic(&sn, Frame::Whitened, s.pushforward_draws, s.seed)?;
    let ok = pushforward_ok(&r, s);
    lines.push(format!(
        "{} draws: mean {:.4}, cov {:.4}, skewness {:.4}, qq {:.6} {}",
        r.n_draws,
        r.max_abs_mean,
        r.cov_dev,
        r.max_abs_skewness,
        r.qq_correlation,
        mark(ok)
    ));
    let r2 = pushforward_diagnostic(&sn, Frame::Whitened, 2 * s.pushforward_draws, s.seed)?;
    let stable = pushforward_ok(&r2, s) == ok;
    lines.push(format!("doubled draws keep the verdict {}", mark(stable)));

    let cells = ExponentialCells::new(6, 1.2)?;
    let geom1 = cells.geometry();
    let p1 = sn_fit(&MatchInputs::from_geometry(geom1, DerivativeSource::LogPosterior)?)?.params;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let t = 0.3 + 2.1 * i as f64 / 49.0;
        worst = worst.max((bdm_sn_multi(&p1, &[t])?.delta() - bdm_sn_univariate(&p1, t)?.delta()).abs());
    }
    let ok_id = worst <= 1e-10;
    lines.push(format!("d=1 identity on 50 points: max difference {worst:.1e} {}", mark(ok_id)));
    outcome(6, "transport pushforward", ok && stable && ok_id, lines)
}

// 7 ------------------------------------------------------------------------

fn special_functions() -> Result<CriterionOutcome> {
    let mut lines = Vec::new();
    let h = 1e-5;
    let mut zeta_err = 0.0f64;
    for i in 0..=120 {
        let k = -6.0 + 0.1 * i as f64;
        // ln_1p form keeps log Φ accurate on the right tail
        let log_phi = |x: f64| if x < 0.0 { norm_cdf(x).ln() } else { (-norm_cdf(-x)).ln_1p() };
        let fd0 = (log_phi(k + h) - log_phi(k - h)) / (2.0 * h);
        let z1 = zeta(1, k)?;
        zeta_err = zeta_err.max((fd0 - z1).abs() / z1.abs());
        for order in 2..=3 {
            let fd = (zeta(order - 1, k + h)? - zeta(order - 1, k - h)?) / (2.0 * h);
            let z = zeta(order, k)?;
            zeta_err = zeta_err.max((fd - z).abs() / z.abs().max(1e-3));
        }
    }
    let ok_zeta = zeta_err <= 1e-5;
    lines.push(format!("zeta derivatives vs finite differences: max relative error {zeta_err:.1e} {}", mark(ok_zeta)));

    let mut chi_err = 0.0f64;
    for i in 1..=400 {
        let x = i as f64 * 0.1;
        chi_err = chi_err.max((chi2_cdf(x, 1)? - (2.0 * norm_cdf(x.sqrt()) - 1.0)).abs());
    }
    let ok_chi = chi_err <= 1e-10;
    lines.push(format!("chi2_cdf(x, 1) vs 2Phi(sqrt x) - 1: max error {chi_err:.1e} {}", mark(ok_chi)));

    let mut sn_err = 0.0f64;
    for &(om, al) in &[(1.0, 0.0), (0.5, 3.0), (2.0, -1.5), (0.8, 10.0)] {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let quad = integrate_1d(&|z| sn_pdf(z, 0.1, om, al), f64::NEG_INFINITY, x, 1e-12)?;
            sn_err = sn_err.max((quad - sn_cdf(x, 0.1, om, al)?).abs());
        }
    }
    let ok_sn = sn_err <= 1e-8;
    lines.push(format!("sn_cdf vs density quadrature: max error {sn_err:.1e} {}", mark(ok_sn)));

    let mut t_err = 0.0f64;
    for &hh in &[0.0, 0.5, 1.3, 3.0] {
        for &a in &[0.2, 1.0, 2.5, 10.0] {
            // T(h, a) = P(X > h, 0 < Y < aX) for h, a >= 0
            let inner = |x: f64| norm_pdf(x) * integrate_1d(&norm_pdf, 0.0, a * x, 1e-13).unwrap_or(f64::NAN);
            let quad = integrate_1d(&inner, hh, f64::INFINITY, 1e-12)?;
            t_err = t_err.max((quad - owens_t(hh, a)).abs());
        }
    }
    let ok_t = t_err <= 1e-10;
    lines.push(format!("owens_t vs 2-D quadrature: max error {t_err:.1e} {}", mark(ok_t)));
    outcome(7, "special functions", ok_zeta && ok_chi && ok_sn && ok_t, lines)
}

// 8 ------------------------------------------------------------------------

fn determinism(s: &CheckSettings) -> Result<CriterionOutcome> {
    let t1 = render_table(&exponential_table(1.2)?);
    let t2 = render_table(&exponential_table(1.2)?);
    let ok_table = t1 == t2;
    let first: Vec<u8> = CRITERIA.iter().copied().filter(|&c| c != 8).collect();
    let c1 = run_checks(s, &first)?.render();
    let c2 = run_checks(s, &first)?.render();
    let ok_check = c1 == c2;
    let lines = vec![
        format!("table output identical across runs ({} bytes) {}", t1.len(), mark(ok_table)),
        format!("check output for criteria 1-7 identical across runs (seed {}) {}", s.seed, mark(ok_check)),
    ];
    outcome(8, "determinism", ok_table && ok_check, lines)
}
