use std::ffi::{c_char, CStr, CString};
use std::ptr;

use reldyn::model::{Model, ModelConfig};
use reldyn_ffi::*;

const SCENE: &str = r#"{"objects":[
  {"id":0,"center":[-0.15,0.0,0.03],"half_extents":[0.03,0.03,0.03]},
  {"id":1,"center":[0.0,0.0,0.03],"half_extents":[0.03,0.03,0.03]},
  {"id":2,"center":[0.15,0.0,0.03],"half_extents":[0.03,0.03,0.03]}]}"#;

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { rd_string_free(s) };
    out
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rd_last_error()) }.to_str().unwrap().to_owned()
}

fn scene() -> *mut RdScene {
    let json = CString::new(SCENE).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { rd_scene_from_json(json.as_ptr(), &mut s) }, RdStatus::Ok);
    s
}

fn model(dir: &tempfile::TempDir) -> *mut RdModel {
    let path = dir.path().join("m.ckpt");
    Model::new(ModelConfig::default(), 1).unwrap().save(&path, serde_json::json!({})).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rd_model_load(c.as_ptr(), &mut m) }, RdStatus::Ok);
    m
}

#[test]
fn label_reports_ground_truth() {
    let s = scene();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rd_scene_label(s, &mut out) }, RdStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert!(v.as_object().is_some_and(|m| m.len() == 6), "{v}");
    unsafe { rd_scene_free(s) };
}

#[test]
fn detect_and_plan_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = (model(&dir), scene());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rd_model_detect(m, s, &mut out) }, RdStatus::Ok);
    let probs: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(probs["probs"].as_array().unwrap().len(), 6);

    let skel = CString::new(r#"{"subgoals":[{"conjuncts":[{"pair":[1,0],"rel":"behind","value":true}]}]}"#).unwrap();
    let cem = CString::new(r#"{"n_samples":16}"#).unwrap();
    let mut a = ptr::null_mut();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { rd_model_plan(m, s, skel.as_ptr(), cem.as_ptr(), 9, &mut a) }, RdStatus::Ok);
    assert_eq!(unsafe { rd_model_plan(m, s, skel.as_ptr(), cem.as_ptr(), 9, &mut b) }, RdStatus::Ok);
    let (a, b) = (take(a), take(b));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["applied"].as_array().unwrap().len(), 1);
    assert!(v["success"].is_boolean());
    unsafe {
        rd_model_free(m);
        rd_scene_free(s);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { rd_scene_from_json(ptr::null(), &mut s) }, RdStatus::NullPointer);
    assert!(last_error().contains("null"));
    let bad = CString::new("{").unwrap();
    assert_eq!(unsafe { rd_scene_from_json(bad.as_ptr(), &mut s) }, RdStatus::Parse);
    assert!(s.is_null());
    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rd_model_load(missing.as_ptr(), &mut m) }, RdStatus::Io);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    // wrong magic is a format-version mismatch
    assert_eq!(unsafe { rd_model_load(junk.as_ptr(), &mut m) }, RdStatus::Version);
    let sc = scene();
    let skel = CString::new(r#"{"subgoals":[{"conjuncts":[{"pair":[0,9],"rel":"left","value":true}]}]}"#).unwrap();
    let real = model(&dir);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rd_model_plan(real, sc, skel.as_ptr(), ptr::null(), 0, &mut out) }, RdStatus::UnknownObject);
    assert!(out.is_null());
    assert_eq!(unsafe { rd_scene_label(sc, ptr::null_mut()) }, RdStatus::NullPointer);
    unsafe {
        rd_model_free(real);
        rd_scene_free(sc);
        rd_model_free(ptr::null_mut());
        rd_scene_free(ptr::null_mut());
        rd_string_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(rd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// The generated header declares every export and is valid C.
#[test]
fn header_compiles_as_c() {
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{inc}/reldyn.h")).unwrap();
    for f in [
        "rd_last_error", "rd_version", "rd_model_load", "rd_model_free", "rd_scene_from_json",
        "rd_scene_free", "rd_scene_label", "rd_model_detect", "rd_model_plan", "rd_string_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "reldyn.h"
int main(void) {
    RdModel *m = NULL; RdScene *s = NULL; char *out = NULL;
    RdStatus st = rd_scene_from_json("{}", &s);
    if (st == RD_STATUS_OK) st = rd_model_detect(m, s, &out);
    rd_string_free(out); rd_scene_free(s); rd_model_free(m);
    return st == RD_STATUS_OK ? 0 : (int)rd_last_error()[0];
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", inc])
        .arg(&src)
        .status()
        .expect("a C compiler is on PATH");
    assert!(status.success());
}
