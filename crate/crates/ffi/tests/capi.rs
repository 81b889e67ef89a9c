use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use headsynth_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hs_last_error_message()) }.to_string_lossy().into_owned()
}

fn small_rig() -> *mut HsRig {
    let mut rig = ptr::null_mut();
    assert_eq!(unsafe { hs_rig_procedural(true, 3, &mut rig) }, HsStatus::Ok);
    assert!(!rig.is_null());
    rig
}

fn info(rig: *const HsRig) -> [usize; 4] {
    let mut out = [0usize; 4];
    assert_eq!(unsafe { hs_rig_info(rig, out.as_mut_ptr()) }, HsStatus::Ok);
    out
}

#[test]
fn rig_lifecycle_and_round_trip() {
    let rig = small_rig();
    let [nv, nt, ns, ne] = info(rig);
    assert!(nv > 0 && nt > 0);
    assert_eq!((ns, ne), (8, 8));
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("rig.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { hs_rig_save(rig, path.as_ptr()) }, HsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { hs_rig_load(path.as_ptr(), &mut loaded) }, HsStatus::Ok);
    assert_eq!(info(loaded), [nv, nt, ns, ne]);
    unsafe {
        hs_rig_free(loaded);
        hs_rig_free(rig);
        hs_rig_free(ptr::null_mut());
    }
}

#[test]
fn error_codes_and_messages() {
    let mut rig = ptr::null_mut();
    assert_eq!(unsafe { hs_rig_procedural(true, 0, ptr::null_mut()) }, HsStatus::NullPointer);
    assert!(last_error().contains("out is null"));
    let missing = CString::new("/nonexistent/dir/rig.json").unwrap();
    assert_eq!(unsafe { hs_rig_load(missing.as_ptr(), &mut rig) }, HsStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/rig.json"));
    assert!(rig.is_null());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { hs_rig_load(bad.as_ptr(), &mut rig) }, HsStatus::Parse);
    let terms = HsLossTerms {
        re_l1: 1.0,
        re_perceptual: 0.0,
        f: 1.0,
        tri: 1.0,
        depth: 1.0,
        opa: 1.0,
        id: 1.0,
        adv: 1.0,
    };
    let mut total = 0.0;
    assert_eq!(unsafe { hs_total_loss(&terms, ptr::null(), &mut total) }, HsStatus::Ok);
    assert!(last_error().is_empty());
    let negative = [1.0, 1.0, -0.1, 1.0, 0.3, 1.0, 0.01];
    assert_eq!(unsafe { hs_total_loss(&terms, negative.as_ptr(), &mut total) }, HsStatus::Contract);
    assert!(!last_error().is_empty());
}

#[test]
fn loss_defaults() {
    let terms = HsLossTerms {
        re_l1: 1.0,
        re_perceptual: 0.0,
        f: 1.0,
        tri: 1.0,
        depth: 1.0,
        opa: 1.0,
        id: 1.0,
        adv: 1.0,
    };
    let mut total = 0.0;
    assert_eq!(unsafe { hs_total_loss(&terms, ptr::null(), &mut total) }, HsStatus::Ok);
    assert!((total - 4.41).abs() < 1e-12);
    let ones = [1.0; 7];
    assert_eq!(unsafe { hs_total_loss(&terms, ones.as_ptr(), &mut total) }, HsStatus::Ok);
    assert!((total - 7.0).abs() < 1e-12);
}

#[test]
fn field_render_and_null_case() {
    let rig = small_rig();
    let [_, _, ns, ne] = info(rig);
    let alpha = vec![0.0; ns];
    let beta = vec![0.0; ne];
    // canonical pose: jaw opened 0.2 rad
    let pose = [0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut field = ptr::null_mut();
    let s = unsafe { hs_field_new(rig, alpha.as_ptr(), ns, beta.as_ptr(), ne, pose.as_ptr(), 8, &mut field) };
    assert_eq!(s, HsStatus::Ok, "{}", last_error());
    let (mut dh, mut dp) = ([1.0; 3], [1.0; 3]);
    for x in [[0.1, 0.2, 0.25], [0.0, -0.1, 0.3], [0.4, 0.0, 0.0]] {
        assert_eq!(unsafe { hs_field_eval(field, x.as_ptr(), dh.as_mut_ptr(), dp.as_mut_ptr()) }, HsStatus::Ok);
        assert!(dh.iter().chain(&dp).all(|v| v.abs() < 1e-9));
    }
    let short = vec![0.0; ns - 1];
    let mut bad = ptr::null_mut();
    let s = unsafe { hs_field_new(rig, short.as_ptr(), ns - 1, beta.as_ptr(), ne, pose.as_ptr(), 8, &mut bad) };
    assert_eq!(s, HsStatus::Contract);
    assert!(bad.is_null());

    let mut id = ptr::null_mut();
    assert_eq!(unsafe { hs_identity_bake(rig, 5, 32, &mut id) }, HsStatus::Ok);
    let cam = HsCamera {
        pitch: 0.0,
        yaw: 0.0,
        roll: 0.0,
        radius: 4.0,
        look_at: [0.0, 0.0, 0.03],
        fov_deg: 12.0,
    };
    let (w, h) = (12, 10);
    let mut rgb = vec![0.0; w * h * 3];
    let mut opa = vec![0.0; w * h];
    let render = |rgb: &mut Vec<f64>, opa: &mut Vec<f64>| unsafe {
        hs_render(rig, id, field, alpha.as_ptr(), ns, beta.as_ptr(), ne, pose.as_ptr(), &cam, w, h, 9, rgb.as_mut_ptr(), opa.as_mut_ptr())
    };
    assert_eq!(render(&mut rgb, &mut opa), HsStatus::Ok, "{}", last_error());
    // the head covers the image center, not the corners
    assert!(opa[(h / 2) * w + w / 2] > 0.9);
    assert!(opa[0] < 0.05);
    assert!(opa.iter().all(|v| (0.0..=1.0).contains(v)));
    let (mut rgb2, mut opa2) = (vec![0.0; w * h * 3], vec![0.0; w * h]);
    render(&mut rgb2, &mut opa2);
    assert_eq!((rgb, opa), (rgb2, opa2));
    let s = unsafe {
        hs_render(rig, id, field, alpha.as_ptr(), ns, beta.as_ptr(), ne, pose.as_ptr(), &cam, w, h, 9, ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(s, HsStatus::NullPointer);
    unsafe {
        hs_identity_free(id);
        hs_field_free(field);
        hs_rig_free(rig);
    }
}

#[test]
fn dataset_generate_and_validate() {
    let rig = small_rig();
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let s = unsafe { hs_dataset_generate(rig, true, 1, 5, 2, 16, 4, out.as_ptr()) };
    assert_eq!(s, HsStatus::Ok, "{}", last_error());
    let mut passed = false;
    assert_eq!(unsafe { hs_dataset_validate(out.as_ptr(), &mut passed) }, HsStatus::Ok);
    assert!(passed);
    std::fs::remove_file(dir.path().join("records/i000_m000_v001/points.pts")).unwrap();
    assert_eq!(unsafe { hs_dataset_validate(out.as_ptr(), &mut passed) }, HsStatus::Validation);
    assert!(!passed);
    assert!(last_error().contains("i000_m000_v001"));
    unsafe { hs_rig_free(rig) };
}

#[test]
fn header_is_current_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/headsynth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "hs_last_error_message",
        "hs_rig_procedural",
        "hs_rig_free",
        "hs_identity_bake",
        "hs_field_new",
        "hs_field_eval",
        "hs_render",
        "hs_dataset_generate",
        "hs_dataset_validate",
        "hs_total_loss",
        "HS_STATUS_NULL_POINTER",
        "typedef struct HsRig HsRig;",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // a C compiler is optional on the build machine
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler found; header syntax not checked");
        return;
    };
    assert!(status.success());
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "headsynth.h"

int main(void) {
    HsRig *rig = NULL;
    size_t info[4];
    HsLossTerms t = {1, 0, 1, 1, 1, 1, 1, 1};
    double total = 0;
    if (hs_rig_procedural(true, 0, &rig) != HS_STATUS_OK) return 1;
    if (hs_rig_info(rig, info) != HS_STATUS_OK || info[2] != 8) return 2;
    if (hs_total_loss(&t, NULL, &total) != HS_STATUS_OK) return 3;
    if (hs_rig_info(NULL, info) != HS_STATUS_NULL_POINTER || hs_last_error_message()[0] == 0) return 4;
    hs_rig_free(rig);
    printf("%.2f\n", total);
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.join("libheadsynth_ffi.a"), deps.parent().unwrap().join("libheadsynth_ffi.a")].into_iter().find(|p| p.is_file());
    let (Some(lib), Ok(_)) = (lib, std::process::Command::new("cc").arg("--version").output()) else {
        eprintln!("static library or C compiler unavailable; link not checked");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new("cc")
        .args(["-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "4.41");
}
