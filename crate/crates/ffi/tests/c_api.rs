use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use lpareto_ffi::*;

fn last_error() -> String {
    let p = lp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_config(dir: &Path) -> CString {
    let text = r#"
seed = 7
output_dir = "out"

[synthetic]
n_years = 25
gamma = 0.1
b = [4.0, 5.0, 6.0, 7.0, 8.0]
a = [10.0, 10.1, 10.2, 10.3, 10.4]
theta = [-0.5, -0.25, 0.0, 0.25, 0.5]
tau = 200.0
kappa = 1.0
stations = [
    { id = "DORI", lon = -0.03, lat = 14.03 },
    { id = "OUAGADOUGOU", lon = -1.52, lat = 12.35 },
    { id = "FADA", lon = 0.37, lat = 12.07 },
    { id = "BOBO", lon = -4.32, lat = 11.17 },
    { id = "GAOUA", lon = -3.18, lat = 10.33 },
]

[marginal]
q_ell = 0.9

[diagnose]
bootstrap = 20

[simulate]
n_fields = 50
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(lp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lp_bundle_load(ptr::null(), &mut out) }, LpStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(out.is_null());
    assert_eq!(unsafe { lp_stationary_return_level(0.0, 1.0, 0.1, 0.05, 10.0, 184, ptr::null_mut()) }, LpStatus::NullPointer);
    unsafe { lp_bundle_free(ptr::null_mut()) };
}

#[test]
fn stationary_level_matches_closed_form() {
    let (u, sigma, phi, n_x) = (50.0, 8.0, 0.02, 184usize);
    for gamma in [-0.2, 0.0, 0.2] {
        for m in [10.0, 100.0] {
            let mut x = f64::NAN;
            let st = unsafe { lp_stationary_return_level(u, sigma, gamma, phi, m, n_x, &mut x) };
            assert_eq!(st, LpStatus::Ok);
            let k = n_x as f64 * m * phi;
            let want = if gamma == 0.0 { u + sigma * k.ln() } else { u + sigma / gamma * (k.powf(gamma) - 1.0) };
            assert!((x - want).abs() <= 1e-9 * want.abs(), "{x} vs {want}");
        }
    }
    // fewer than one expected exceedance over the horizon
    let mut x = 0.0;
    let st = unsafe { lp_stationary_return_level(50.0, 8.0, 0.1, 1e-5, 1.0, 184, &mut x) };
    assert_eq!(st, LpStatus::Domain);
    assert!(!last_error().is_empty());
}

#[test]
fn transform_round_trip() {
    for &(x, c, g) in &[(63.0, 1.4, 0.15), (12.0, 0.7, -0.1), (40.0, 2.0, 0.0)] {
        let (mut z, mut back) = (0.0, 0.0);
        unsafe {
            assert_eq!(lp_latent_value(x, c, g, 11.0, 56.1, &mut z), LpStatus::Ok);
            assert_eq!(lp_observed_value(z, c, g, 11.0, 56.1, &mut back), LpStatus::Ok);
        }
        assert!((back - x).abs() < 1e-9);
    }
    let mut z = 0.0;
    assert_eq!(unsafe { lp_latent_value(1.0, -1.0, 0.1, 1.0, 1.0, &mut z) }, LpStatus::Domain);
}

#[test]
fn pipeline_then_bundle_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(unsafe { lp_run_pipeline(cfg.as_ptr()) }, LpStatus::Ok, "{:?}", lp_last_error_message());
    let bundle_path = CString::new(dir.path().join("out/bundle.json").to_str().unwrap()).unwrap();

    let mut b = ptr::null_mut();
    assert_eq!(unsafe { lp_bundle_load(bundle_path.as_ptr(), &mut b) }, LpStatus::Ok);
    assert!(!b.is_null());

    let mut n = 0usize;
    assert_eq!(unsafe { lp_bundle_n_sites(b, &mut n) }, LpStatus::Ok);
    assert_eq!(n, 5);

    let mut buf = [0 as std::ffi::c_char; 4];
    let mut needed = 0usize;
    let st = unsafe { lp_bundle_site_id(b, 1, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(st, LpStatus::BufferTooSmall);
    assert_eq!(needed, "OUAGADOUGOU".len() + 1);
    let mut big = vec![0 as std::ffi::c_char; needed];
    assert_eq!(unsafe { lp_bundle_site_id(b, 1, big.as_mut_ptr(), big.len(), ptr::null_mut()) }, LpStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(big.as_ptr()) }.to_str().unwrap(), "OUAGADOUGOU");

    let mut p = LpSiteParams::default();
    assert_eq!(unsafe { lp_bundle_site_params(b, 4, &mut p) }, LpStatus::Ok);
    assert!(p.a_n > 0.0 && p.phi_u > 0.0 && p.phi_u <= 1.0);
    assert_eq!(unsafe { lp_bundle_site_params(b, 5, &mut p) }, LpStatus::OutOfRange);

    let (mut tau, mut kappa) = (0.0, 0.0);
    assert_eq!(unsafe { lp_bundle_dependence(b, &mut tau, &mut kappa) }, LpStatus::Ok);
    assert!(tau > 0.0 && kappa > 0.0 && kappa <= 2.0);

    // longer periods give higher levels under either definition
    for method in [LpMethod::Ene, LpMethod::Ewt] {
        let (mut x10, mut x50) = (0.0, 0.0);
        assert_eq!(unsafe { lp_bundle_return_level(b, 2, 10.0, 184, method, &mut x10) }, LpStatus::Ok);
        assert_eq!(unsafe { lp_bundle_return_level(b, 2, 50.0, 184, method, &mut x50) }, LpStatus::Ok);
        assert!(x10.is_finite() && x50 > x10);
    }

    let mut small = vec![0.0; 9];
    assert_eq!(unsafe { lp_bundle_simulate(b, 2, 1, small.as_mut_ptr(), small.len()) }, LpStatus::BufferTooSmall);
    let mut fields = vec![f64::NAN; 20];
    assert_eq!(unsafe { lp_bundle_simulate(b, 4, 1, fields.as_mut_ptr(), fields.len()) }, LpStatus::Ok);
    assert!(fields.iter().all(|v| v.is_finite()));
    let mut again = vec![0.0; 20];
    unsafe { lp_bundle_simulate(b, 4, 1, again.as_mut_ptr(), again.len()) };
    assert_eq!(fields, again);

    unsafe { lp_bundle_free(b) };
}

#[test]
fn foreign_schema_version_is_rejected() {
    let json = CString::new(r#"{"schema_version": 42}"#).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { lp_bundle_from_json(json.as_ptr(), &mut b) }, LpStatus::Config);
    assert!(last_error().contains("42"));
    assert!(b.is_null());
}

#[test]
fn missing_config_is_an_io_error() {
    let path = CString::new("/nonexistent/run.toml").unwrap();
    assert_eq!(unsafe { lp_run_pipeline(path.as_ptr()) }, LpStatus::Io);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lpareto.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["lp_bundle_load", "lp_bundle_return_level", "lp_last_error_message", "LP_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| {
        std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success())
    }) else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"lpareto.h\"\nint main(void) { LpBundle *b = 0; LpStatus s = lp_bundle_n_sites(b, 0); lp_bundle_free(b); return s == LP_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
