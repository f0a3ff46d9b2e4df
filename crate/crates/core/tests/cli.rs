use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bdm::cli::{parse_result_csv_row, parse_table, result_csv_row, table_header, CURVE_HEADER, RESULT_CSV_HEADER};
use bdm::model::{exact_cdf_exponential, exponential_model, fit_geometry};
use bdm::specialfn::norm_cdf;
use bdm::univariate::{posterior_median_rstar, rstar, PriorMode};
use bdm::verify::{criterion, CheckSettings};
use serde_json::Value;

fn bdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

const GOLDEN: &[(&str, &[&str])] = &[
    ("exp_n6_ho_0.9.json", &["--n", "6", "--mle", "1.2", "--method", "ho", "--theta0", "0.9"]),
    ("exp_n6_io_0.9.json", &["--n", "6", "--mle", "1.2", "--method", "io", "--theta0", "0.9"]),
    ("exp_n6_exact_1.2.json", &["--n", "6", "--mle", "1.2", "--method", "exact", "--theta0", "1.2"]),
    ("exp_n12_sks_0.6.json", &["--n", "12", "--mle", "1.2", "--method", "sks", "--theta0", "0.6"]),
    ("exp_n12_sks-num_0.6.json", &["--n", "12", "--mle", "1.2", "--method", "sks-num", "--theta0", "0.6"]),
    ("exp_n20_sn_0.9.json", &["--n", "20", "--mle", "1.2", "--method", "sn", "--theta0", "0.9"]),
    ("exp_n40_ho_2.1.csv", &["--n", "40", "--mle", "1.2", "--method", "ho", "--theta0", "2.1", "--output", "csv"]),
    ("logistic_b1_io.json", &["--model", "logistic", "--psi-index", "1", "--method", "io", "--theta0", "0"]),
    ("logistic_b2_io.json", &["--model", "logistic", "--psi-index", "2", "--method", "io", "--theta0", "0"]),
    ("logistic_b1_ho.json", &["--model", "logistic", "--psi-index", "1", "--method", "ho", "--theta0", "0"]),
    ("logistic_b2_ho.json", &["--model", "logistic", "--psi-index", "2", "--method", "ho", "--theta0", "0"]),
    ("logistic_b1_sks.json", &["--model", "logistic", "--psi-index", "1", "--method", "sks", "--theta0", "0"]),
    ("logistic_b2_sks.json", &["--model", "logistic", "--psi-index", "2", "--method", "sks", "--theta0", "0"]),
    ("logistic_b1_sn.json", &["--model", "logistic", "--psi-index", "1", "--method", "sn", "--theta0", "0"]),
    ("logistic_b2_sn.json", &["--model", "logistic", "--psi-index", "2", "--method", "sn", "--theta0", "0"]),
    ("logistic_b1_exact.json", &["--model", "logistic", "--psi-index", "1", "--method", "exact", "--theta0", "0"]),
    ("logistic_b2_exact.json", &["--model", "logistic", "--psi-index", "2", "--method", "exact", "--theta0", "0"]),
    ("logistic_b1_wald.json", &["--model", "logistic", "--psi-index", "1", "--method", "wald", "--theta0", "0"]),
    ("logistic_b2_wald.json", &["--model", "logistic", "--psi-index", "2", "--method", "wald", "--theta0", "0"]),
    ("logistic_joint_wald.json", &["--model", "logistic", "--psi-index", "1,2", "--method", "wald", "--theta0", "0,0"]),
    ("logistic_joint_sn.json", &["--model", "logistic", "--psi-index", "1,2", "--method", "sn", "--theta0", "0,0"]),
    ("logistic_joint_sn.csv", &["--model", "logistic", "--psi-index", "1,2", "--method", "sn", "--theta0", "0,0", "--output", "csv"]),
];

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-3)
}

fn same_json(got: &Value, want: &Value) -> bool {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => close(a.as_f64().unwrap(), b.as_f64().unwrap()),
        (Value::Array(a), Value::Array(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same_json(x, y)),
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| same_json(v, w)))
        }
        _ => got == want,
    }
}

fn same_csv(got: &str, want: &str) -> bool {
    let (g, w): (Vec<&str>, Vec<&str>) = (got.lines().collect(), want.lines().collect());
    if g.len() != w.len() || g[0] != w[0] {
        return false;
    }
    g.iter().zip(&w).skip(1).all(|(a, b)| {
        let (ra, rb) = (parse_result_csv_row(a, 2).unwrap(), parse_result_csv_row(b, 2).unwrap());
        let json = |r| serde_json::to_value(r).unwrap();
        same_json(&json(&ra), &json(&rb))
    })
}

#[test]
fn outputs_match_golden_files() {
    for (file, args) in GOLDEN {
        let o = bdm(args);
        assert!(o.status.success(), "{file}: {}", String::from_utf8_lossy(&o.stderr));
        let want = std::fs::read_to_string(golden_dir().join(file)).unwrap();
        let got = stdout(&o);
        let ok = if file.ends_with(".json") {
            same_json(&serde_json::from_str(&got).unwrap(), &serde_json::from_str(&want).unwrap())
        } else {
            same_csv(&got, &want)
        };
        assert!(ok, "{file}\n got: {got}\nwant: {want}");
    }
}

#[test]
fn json_has_the_documented_fields() {
    let o = bdm(&["--method", "exact", "--theta0", "1.2"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["method", "theta0", "delta", "tail_low", "clamped", "diagnostics"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["method"], "exact");
}

#[test]
fn csv_output_round_trips() {
    for method in ["io", "ho", "sks", "sks-num", "sn", "exact"] {
        let o = bdm(&["--method", method, "--theta0", "0.6,1.5", "--output", "csv"]);
        // a vector θ₀ is not valid for the scalar model
        assert_eq!(o.status.code(), Some(2), "{method}");
        let o = bdm(&["--method", method, "--theta0", "0.6", "--output", "csv"]);
        let text = stdout(&o);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(RESULT_CSV_HEADER));
        let row = lines.next().unwrap();
        assert_eq!(result_csv_row(&parse_result_csv_row(row, 2).unwrap()), row);
        assert!(lines.next().is_none());
    }
}

#[test]
fn spot_values_at_two_decimals() {
    let delta = |args: &[&str]| -> f64 {
        let v: Value = serde_json::from_str(&stdout(&bdm(args))).unwrap();
        v["delta"].as_f64().unwrap()
    };
    let ho = delta(&["--model", "exponential", "--n", "6", "--mle", "1.2", "--method", "ho", "--theta0", "0.9"]);
    assert!((ho - 0.62).abs() <= 0.005, "ho {ho}");
    let exact = delta(&["--method", "exact", "--theta0", "1.2"]);
    assert!((exact - 0.11).abs() <= 0.005, "exact {exact}");
}

#[test]
fn sn_at_the_mle_matches_reference_value() {
    let v: Value = serde_json::from_str(&stdout(&bdm(&["--method", "sn", "--theta0", "1.2", "--n", "6"]))).unwrap();
    let sn = v["delta"].as_f64().unwrap();
    assert!((sn - 0.06).abs() <= 0.005, "sn {sn}");
}

fn assert_fails(args: &[&str], code: i32, kind: &str) {
    let o = bdm(args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty(), "{args:?} wrote to stdout");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], kind, "{err}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[test]
fn config_errors_exit_two() {
    assert_fails(&["--method", "ho", "--theta0", "-1"], 2, "domain");
    assert_fails(&["--n", "0", "--method", "ho", "--theta0", "1"], 2, "domain");
    assert_fails(&["--method", "wald2", "--theta0", "1"], 2, "usage");
    assert_fails(&["--theta0", "1", "--bogus"], 2, "usage");
    assert_fails(&["--model", "logistic", "--psi-index", "1", "--method", "sks-num", "--theta0", "0"], 2, "capability");
    assert_fails(&["--model", "logistic", "--psi-index", "1,2", "--method", "ho", "--theta0", "0,0"], 2, "capability");
    assert_fails(&["--model", "logistic", "--psi-index", "7", "--method", "io", "--theta0", "0"], 2, "dimension");
    assert_fails(&["--model", "logistic", "--data", "/nonexistent/x.csv", "--psi-index", "1", "--method", "io", "--theta0", "0"], 2, "io");
}

#[test]
fn numeric_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("separated.csv", "x,y\n1,0\n2,0\n3,1\n4,1\n"), ("zeros.csv", "x,y\n1,0\n2,0\n3,0\n4,0\n")] {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        let p = path.to_str().unwrap();
        assert_fails(&["--model", "logistic", "--data", p, "--psi-index", "1", "--method", "io", "--theta0", "0"], 3, "convergence");
    }
}

#[test]
fn out_flag_writes_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let o = bdm(&["--method", "io", "--theta0", "0.9", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), stdout(&bdm(&["--method", "io", "--theta0", "0.9"])));

    // nothing is written when the run fails
    let bad = dir.path().join("bad.json");
    let o = bdm(&["--method", "io", "--theta0", "-2", "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());
}

#[test]
fn table_is_complete_deterministic_and_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.csv");
    let o = bdm(&["table", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read_to_string(&path).unwrap();
    assert_eq!(first.lines().next(), Some(table_header().as_str()));
    let rows = parse_table(&first).unwrap();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.values.len() == 6 && r.values.iter().all(|v| (0.0..=1.0).contains(v))));
    let again = bdm(&["table"]);
    assert_eq!(stdout(&again), first);
}

fn curve_rows(text: &str) -> (Vec<Vec<Option<f64>>>, Vec<Option<f64>>) {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CURVE_HEADER));
    let parse = |s: &str| if s.is_empty() { None } else { Some(s.parse::<f64>().unwrap()) };
    let mut density = Vec::new();
    let mut median = Vec::new();
    for line in lines {
        let mut f = line.split(',');
        match f.next() {
            Some("density") => density.push(f.map(parse).collect()),
            Some("median") => median = f.skip(1).map(parse).collect(),
            other => panic!("unexpected row kind {other:?}"),
        }
    }
    (density, median)
}

#[test]
fn exponential_curves() {
    let o = bdm(&["curve", "--n", "6", "--mle", "1.2", "--grid", "0.3:3:300"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (rows, median) = curve_rows(&stdout(&o));
    assert_eq!(rows.len(), 300);
    let theta: Vec<f64> = rows.iter().map(|r| r[0].unwrap()).collect();
    let col = |k: usize| -> Vec<f64> { rows.iter().map(|r| r[k].unwrap()).collect() };
    let trapezoid = |y: &[f64]| -> f64 { (1..y.len()).map(|i| 0.5 * (y[i] + y[i - 1]) * (theta[i] - theta[i - 1])).sum() };

    let mass = exact_cdf_exponential(6, 1.2, 3.0).unwrap() - exact_cdf_exponential(6, 1.2, 0.3).unwrap();
    let area = trapezoid(&col(1));
    assert!((area - mass).abs() <= 1e-3, "area {area} vs mass {mass}");

    assert!(col(3).iter().all(|&v| v >= 0.0));

    // the HO median implied by the curve: integrate its density from the grid start
    let (model, _) = exponential_model(6, 1.2).unwrap();
    let geom = fit_geometry(&model).unwrap();
    let below = norm_cdf(-rstar(&model, &geom, 0.3, PriorMode::General).unwrap().rstar);
    let ho = col(5);
    let step = theta[1] - theta[0];
    let mut cum = below;
    let mut implied = None;
    for i in 1..ho.len() {
        let next = cum + 0.5 * (ho[i] + ho[i - 1]) * step;
        if next >= 0.5 {
            implied = Some(theta[i - 1] + step * (0.5 - cum) / (next - cum));
            break;
        }
        cum = next;
    }
    let implied = implied.expect("HO curve reaches its median on the grid");
    let reported = median[4].unwrap();
    assert!((reported - posterior_median_rstar(&model, &geom, None).unwrap()).abs() <= 1e-10);
    assert!((implied - reported).abs() <= step, "implied {implied} vs {reported}");
}

#[test]
fn logistic_marginal_curve() {
    let o = bdm(&["curve", "--model", "logistic", "--psi-index", "2", "--grid", "-1.5:1:120"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (rows, median) = curve_rows(&stdout(&o));
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r[1].is_none() && r[3].unwrap() >= 0.0));
    assert!(median[0].is_none() && median[1..].iter().all(|m| m.is_some()));
    assert_fails(&["curve", "--model", "logistic", "--psi-index", "1,2", "--grid", "-1:1:10"], 2, "capability");
}

#[test]
fn check_is_deterministic() {
    let a = bdm(&["check", "--criteria", "2,5,7", "--seed", "3"]);
    let b = bdm(&["check", "--criteria", "2,5,7", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.lines().any(|l| l.starts_with("PASS 2")));
    assert!(!text.lines().any(|l| l.starts_with("FAIL")));
}

#[test]
fn tightened_tolerance_fails_only_its_criterion() {
    let mut s = CheckSettings::with_seed(1);
    s.sn_roundtrip_tol = 1e-30;
    assert!(!criterion(5, &s).unwrap().passed);
    assert!(criterion(7, &s).unwrap().passed);
}

#[test]
fn clean_build_check_exits_zero() {
    let o = bdm(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}
