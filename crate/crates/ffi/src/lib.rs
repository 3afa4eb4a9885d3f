//! C ABI over `reldyn`.
//!
//! Every function returns an [`RdStatus`]; on failure the message is kept in
//! a thread-local slot readable with [`rd_last_error`]. Handles are opaque and
//! owned by the caller once returned; free them with the matching `*_free`.
//! Strings returned through `out` pointers are freed with [`rd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reldyn::model::{Model, RelationalDynamics};
use reldyn::planner::{execute_and_verify, plan_scene, CemConfig, PlanSkeleton};
use reldyn::relations::label_scene_with_visibility;
use reldyn::scene::{render_cloud, Scene};
use reldyn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Version = 6,
    Checkpoint = 7,
    UnknownObject = 8,
    Internal = 9,
}

/// A loaded model.
pub struct RdModel {
    model: Model,
}

/// A parsed scene.
pub struct RdScene {
    scene: Scene,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(RdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => RdStatus::Io,
            Error::Json(_) | Error::Csv(_) | Error::Corpus { .. } => RdStatus::Parse,
            Error::Version { .. } => RdStatus::Version,
            Error::Checkpoint(_) => RdStatus::Checkpoint,
            Error::UnknownObject(_) | Error::OffView(_) => RdStatus::UnknownObject,
            _ => RdStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(RdStatus::Parse, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RdStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            RdStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(RdStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: the caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(RdStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(RdStatus::NullPointer, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(RdStatus::NullPointer, "out is null".into()));
    }
    // SAFETY: `out` is non-null and points to writable storage for a pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(RdStatus::NullPointer, "out is null".into()));
    }
    let c = CString::new(s).map_err(|_| Fail(RdStatus::Internal, "output contains NUL".into()))?;
    // SAFETY: as in `put`.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an `RDGNN-CKPT-1` checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_model_load(path: *const c_char, out: *mut *mut RdModel) -> RdStatus {
    guard(|| {
        let p = unsafe { str_arg(path, "path") }?;
        let (model, _) = Model::load(Path::new(p))?;
        unsafe { put(out, RdModel { model }) }
    })
}

/// # Safety
/// `model` is null or a handle from [`rd_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rd_model_free(model: *mut RdModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in `put`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Parses scene JSON.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_scene_from_json(json: *const c_char, out: *mut *mut RdScene) -> RdStatus {
    guard(|| {
        let text = unsafe { str_arg(json, "json") }?;
        let scene = Scene::from_json(text)?;
        unsafe { put(out, RdScene { scene }) }
    })
}

/// # Safety
/// `scene` is null or a handle from [`rd_scene_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rd_scene_free(scene: *mut RdScene) {
    if !scene.is_null() {
        // SAFETY: created by Box::into_raw in `put`.
        drop(unsafe { Box::from_raw(scene) });
    }
}

/// Ground-truth relations of the visible objects, as relation-matrix JSON.
///
/// # Safety
/// `scene` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_scene_label(scene: *const RdScene, out: *mut *mut c_char) -> RdStatus {
    guard(|| {
        let s = &unsafe { ref_arg(scene, "scene") }?.scene;
        let m = label_scene_with_visibility(s, &render_cloud(s).visible_ids());
        unsafe { put_string(out, serde_json::to_string(&m)?) }
    })
}

/// Detected relation probabilities for every ordered pair, as JSON.
///
/// # Safety
/// `model` and `scene` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_model_detect(model: *const RdModel, scene: *const RdScene, out: *mut *mut c_char) -> RdStatus {
    guard(|| {
        let m = &unsafe { ref_arg(model, "model") }?.model;
        let s = &unsafe { ref_arg(scene, "scene") }?.scene;
        let probs = m.relation_probs(&m.encode_scene(s)?)?;
        unsafe { put_string(out, serde_json::to_string(&probs)?) }
    })
}

/// Plans the skeleton, executes it in the simulator and reports JSON with
/// the plan, the applied actions and the per-step verdicts.
///
/// # Safety
/// `model` and `scene` are live handles; `skeleton_json` is a
/// NUL-terminated string; `cem_json` is null (defaults) or a NUL-terminated
/// string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_model_plan(
    model: *const RdModel,
    scene: *const RdScene,
    skeleton_json: *const c_char,
    cem_json: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> RdStatus {
    guard(|| {
        let m = &unsafe { ref_arg(model, "model") }?.model;
        let s = &unsafe { ref_arg(scene, "scene") }?.scene;
        let skeleton = PlanSkeleton::from_json(unsafe { str_arg(skeleton_json, "skeleton_json") }?)?;
        let cem: CemConfig = if cem_json.is_null() {
            CemConfig::default()
        } else {
            serde_json::from_str(unsafe { str_arg(cem_json, "cem_json") }?)?
        };
        cem.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_scene(m, s, &skeleton, &cem, &mut rng)?;
        let ex = execute_and_verify(m, s, &plan, &skeleton, &cem, &mut rng)?;
        let report = serde_json::json!({
            "plan": ex.result,
            "applied": ex.applied,
            "success": ex.result.success(),
        });
        unsafe { put_string(out, report.to_string()) }
    })
}

/// # Safety
/// `s` is null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rd_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: created by CString::into_raw in `put_string`.
        drop(unsafe { CString::from_raw(s) });
    }
}
