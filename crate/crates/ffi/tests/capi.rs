use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bdm::cli::Cli;
use bdm_ffi::*;
use clap::Parser;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bdm_last_error()) }.to_str().unwrap().to_string()
}

struct Model(*mut BdmModel);

impl Drop for Model {
    fn drop(&mut self) {
        unsafe { bdm_model_free(self.0) }
    }
}

fn exponential(n: usize, mle: f64) -> Model {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bdm_model_exponential(n, mle, &mut m) }, BdmStatus::Ok);
    Model(m)
}

fn logistic() -> Model {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bdm_model_logistic_csv(ptr::null(), 5.0, &mut m) }, BdmStatus::Ok);
    Model(m)
}

fn eval(m: &Model, method: u32, psi: &[usize], theta0: &[f64], opts: Option<&BdmOptions>) -> Result<BdmValue, BdmStatus> {
    let mut out = BdmValue { delta: f64::NAN, tail_low: f64::NAN, clamped: false };
    let status = unsafe {
        bdm_evaluate(
            m.0,
            method,
            psi.as_ptr(),
            psi.len(),
            theta0.as_ptr(),
            theta0.len(),
            opts.map_or(ptr::null(), |o| o as *const _),
            &mut out,
        )
    };
    if status == BdmStatus::Ok {
        Ok(out)
    } else {
        Err(status)
    }
}

#[test]
fn exponential_values() {
    let m = exponential(6, 1.2);
    assert_eq!(unsafe { bdm_model_dim(m.0) }, 1);
    let ho = eval(&m, BDM_METHOD_HO, &[], &[0.9], None).unwrap();
    assert!((ho.delta - 0.6172).abs() < 1e-3, "{ho:?}");
    assert!((ho.delta - (1.0 - 2.0 * ho.tail_low.min(1.0 - ho.tail_low))).abs() < 1e-12);
    let exact = eval(&m, BDM_METHOD_EXACT, &[], &[1.2], None).unwrap();
    assert!((exact.delta - 0.109).abs() < 2e-3);
    let io = eval(&m, BDM_METHOD_IO, &[], &[0.9], None).unwrap();
    assert!((io.delta - 0.460).abs() < 2e-3);
    assert_eq!(last_error(), "");
}

#[test]
fn matches_library_results() {
    let m = logistic();
    for (method, code) in [("io", BDM_METHOD_IO), ("ho", BDM_METHOD_HO), ("sks", BDM_METHOD_SKS), ("sn", BDM_METHOD_SN)] {
        let cli = Cli::try_parse_from(["bdm", "--model", "logistic", "--psi-index", "2", "--method", method, "--theta0", "0"]).unwrap();
        let want = bdm::cli::cmd_bdm(&cli.eval).unwrap();
        let got = eval(&m, code, &[2], &[0.0], None).unwrap();
        assert_eq!(got.delta, want.delta(), "{method}");
    }
}

#[test]
fn joint_hypotheses() {
    let m = logistic();
    assert_eq!(unsafe { bdm_model_dim(m.0) }, 3);
    let sn = eval(&m, BDM_METHOD_SN, &[1, 2], &[0.0, 0.0], None).unwrap();
    assert!(sn.tail_low.is_nan());
    assert!((0.0..=1.0).contains(&sn.delta));
    let raw = eval(&m, BDM_METHOD_SN, &[1, 2], &[0.0, 0.0], Some(&BdmOptions { lr: false, frame: BDM_FRAME_RAW })).unwrap();
    assert!((0.0..=1.0).contains(&raw.delta));
    let wald = eval(&m, BDM_METHOD_WALD, &[1, 2], &[0.0, 0.0], None).unwrap();
    let lr = eval(&m, BDM_METHOD_WALD, &[1, 2], &[0.0, 0.0], Some(&BdmOptions { lr: true, frame: BDM_FRAME_WHITENED })).unwrap();
    assert_ne!(wald.delta, lr.delta);
}

#[test]
fn status_codes() {
    let m = exponential(6, 1.2);
    assert_eq!(eval(&m, BDM_METHOD_IO, &[], &[-1.0], None).unwrap_err(), BdmStatus::InvalidArgument);
    assert!(last_error().contains("positive"), "{}", last_error());
    assert_eq!(eval(&m, 99, &[], &[1.0], None).unwrap_err(), BdmStatus::InvalidArgument);
    assert_eq!(eval(&m, BDM_METHOD_IO, &[], &[1.0], Some(&BdmOptions { lr: false, frame: 7 })).unwrap_err(), BdmStatus::InvalidArgument);
    assert_eq!(eval(&m, BDM_METHOD_IO, &[], &[], None).unwrap_err(), BdmStatus::InvalidArgument);

    let l = logistic();
    assert_eq!(eval(&l, BDM_METHOD_SKS_NUM, &[1], &[0.0], None).unwrap_err(), BdmStatus::Unsupported);
    assert_eq!(eval(&l, BDM_METHOD_HO, &[1, 2], &[0.0, 0.0], None).unwrap_err(), BdmStatus::Unsupported);

    // a success clears the message
    eval(&m, BDM_METHOD_IO, &[], &[1.0], None).unwrap();
    assert_eq!(last_error(), "");

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { bdm_model_exponential(0, 1.2, &mut h) }, BdmStatus::InvalidArgument);
    assert!(h.is_null());
}

#[test]
fn null_pointers_are_rejected() {
    unsafe {
        assert_eq!(bdm_model_exponential(6, 1.2, ptr::null_mut()), BdmStatus::NullPointer);
        let mut v = BdmValue { delta: 0.0, tail_low: 0.0, clamped: false };
        let t = 1.0;
        assert_eq!(bdm_evaluate(ptr::null(), BDM_METHOD_IO, ptr::null(), 0, &t, 1, ptr::null(), &mut v), BdmStatus::NullPointer);
        let m = exponential(6, 1.2);
        assert_eq!(bdm_evaluate(m.0, BDM_METHOD_IO, ptr::null(), 0, ptr::null(), 1, ptr::null(), &mut v), BdmStatus::NullPointer);
        assert_eq!(bdm_evaluate(m.0, BDM_METHOD_IO, ptr::null(), 0, &t, 1, ptr::null(), ptr::null_mut()), BdmStatus::NullPointer);
        assert_eq!(bdm_model_dim(ptr::null()), 0);
        bdm_model_free(ptr::null_mut());
        bdm_string_free(ptr::null_mut());
    }
}

#[test]
fn numeric_failure_on_separated_data() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [0.0, 0.0, 1.0, 1.0];
    let mut m = ptr::null_mut();
    let status = unsafe { bdm_model_logistic(x.as_ptr(), 4, 1, y.as_ptr(), 5.0, &mut m) };
    assert_eq!(status, BdmStatus::NumericFailure, "{}", last_error());
    assert!(m.is_null());

    let y_bad = [0.0, 2.0, 1.0, 1.0];
    assert_eq!(unsafe { bdm_model_logistic(x.as_ptr(), 4, 1, y_bad.as_ptr(), 5.0, &mut m) }, BdmStatus::InvalidArgument);
}

#[test]
fn in_memory_data_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    // the last two points sit on the wrong side of any separating line
    let rows = [(0.2, 1.0, 0.0), (1.4, -0.3, 1.0), (-0.5, 0.8, 0.0), (0.9, 0.1, 1.0), (-1.2, -0.7, 0.0), (0.3, 0.4, 1.0), (1.1, 1.5, 0.0), (-0.2, -1.1, 1.0), (-1.0, 0.9, 1.0), (1.3, -0.5, 0.0)];
    let mut text = String::from("a,b,y\n");
    for (a, b, y) in rows {
        text.push_str(&format!("{a},{b},{y}\n"));
    }
    std::fs::write(&path, text).unwrap();
    let x: Vec<f64> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();

    let mut a = ptr::null_mut();
    let mut b = ptr::null_mut();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(bdm_model_logistic(x.as_ptr(), rows.len(), 2, y.as_ptr(), 5.0, &mut a), BdmStatus::Ok, "{}", last_error());
        assert_eq!(bdm_model_logistic_csv(p.as_ptr(), 5.0, &mut b), BdmStatus::Ok, "{}", last_error());
    }
    let (a, b) = (Model(a), Model(b));
    for k in 0..3 {
        assert_eq!(eval(&a, BDM_METHOD_IO, &[k], &[0.1], None).unwrap().delta, eval(&b, BDM_METHOD_IO, &[k], &[0.1], None).unwrap().delta);
    }
}

#[test]
fn json_output() {
    let m = exponential(12, 1.2);
    let t = [0.6];
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(bdm_evaluate_json(m.0, BDM_METHOD_SKS, ptr::null(), 0, t.as_ptr(), 1, ptr::null(), &mut s), BdmStatus::Ok);
        let text = CStr::from_ptr(s).to_str().unwrap().to_string();
        bdm_string_free(s);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["method"], "sks");
        assert_eq!(v["theta0"][0], 0.6);
        assert!(v["diagnostics"].is_object());
    }
}

#[test]
fn errors_are_per_thread() {
    let m = exponential(6, 1.2);
    assert!(eval(&m, BDM_METHOD_IO, &[], &[-1.0], None).is_err());
    let other = std::thread::spawn(last_error).join().unwrap();
    assert_eq!(other, "");
    assert!(!last_error().is_empty());
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(bdm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn ffi_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).to_path_buf()
}

// target/<profile>/deps/capi-* -> target/<profile>
fn profile_dir() -> PathBuf {
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib_dir = profile_dir();
    assert!(lib_dir.join("libbdm_ffi.so").exists() || lib_dir.join("libbdm_ffi.dylib").exists(), "cdylib not built in {lib_dir:?}");
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(ffi_dir().join("tests/c/smoke.c"))
        .arg(format!("-I{}", ffi_dir().join("include").display()))
        .arg(format!("-L{}", lib_dir.display()))
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lbdm_ffi", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}
