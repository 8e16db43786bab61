//! C ABI for the day-night adaptation pipeline.
//!
//! Conventions: every fallible call returns a [`DynaStatus`]; on failure a
//! human-readable message is retrievable via [`dyna_last_error`] until the
//! next call on the same thread. Models are opaque handles owned by the
//! library; free them with [`dyna_model_free`]. Strings returned through
//! out-parameters are owned by the caller and freed with
//! [`dyna_string_free`]. The generated header lives at `include/dyna.h`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::{Path, PathBuf};

use dyna_core::checkpoint::{load_model, save_model};
use dyna_core::error::DynaError;
use dyna_core::harness::{deploy_to_dir, eval_model, RunConfig, Target};
use dyna_core::segnet::{train_source, SegModelState};
use dyna_core::synth::benchmark_suite;

/// Status codes mirrored by the CLI's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynaStatus {
    Ok = 0,
    UsageError = 1,
    DataError = 2,
    InvariantError = 3,
    NullArgument = 4,
}

/// Opaque model handle.
pub struct DynaModel {
    inner: SegModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &DynaError) -> DynaStatus {
    match err {
        DynaError::Usage(_) => DynaStatus::UsageError,
        _ => DynaStatus::DataError,
    }
}

fn fail(err: &DynaError) -> DynaStatus {
    set_error(&err.to_string());
    status_of(err)
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, DynaStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(DynaStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(DynaStatus::UsageError)
        }
    }
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn dyna_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread; valid until the
/// next library call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn dyna_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned through an out-parameter.
///
/// # Safety
/// `s` must be a pointer previously returned by this library (or null).
#[no_mangle]
pub unsafe extern "C" fn dyna_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Free a model handle.
///
/// # Safety
/// `model` must be a pointer previously returned by this library (or null),
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dyna_model_free(model: *mut DynaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Fresh randomly-initialized model (`in_ch`/`out_ch` channels).
///
/// # Safety
/// `out` must be a valid pointer to a model-handle slot.
#[no_mangle]
pub unsafe extern "C" fn dyna_model_init(
    in_ch: u32,
    out_ch: u32,
    seed: u64,
    out: *mut *mut DynaModel,
) -> DynaStatus {
    if out.is_null() {
        set_error("null out-pointer");
        return DynaStatus::NullArgument;
    }
    if in_ch == 0 || out_ch == 0 {
        set_error("channel counts must be >= 1");
        return DynaStatus::UsageError;
    }
    let model = SegModelState::new(in_ch as usize, out_ch as usize, seed);
    unsafe { *out = Box::into_raw(Box::new(DynaModel { inner: model })) };
    DynaStatus::Ok
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn dyna_model_load(
    path: *const c_char,
    out: *mut *mut DynaModel,
) -> DynaStatus {
    if out.is_null() {
        set_error("null out-pointer");
        return DynaStatus::NullArgument;
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_model(Path::new(&path)) {
        Ok(model) => {
            unsafe { *out = Box::into_raw(Box::new(DynaModel { inner: model })) };
            DynaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dyna_model_save(
    model: *const DynaModel,
    path: *const c_char,
) -> DynaStatus {
    if model.is_null() {
        set_error("null model");
        return DynaStatus::NullArgument;
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_model(Path::new(&path), unsafe { &(*model).inner }) {
        Ok(()) => DynaStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Train a source model on the synthetic source domain.
///
/// # Safety
/// `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn dyna_train_source(
    seed: u64,
    epochs: u32,
    lr: f64,
    out: *mut *mut DynaModel,
) -> DynaStatus {
    if out.is_null() {
        set_error("null out-pointer");
        return DynaStatus::NullArgument;
    }
    let suite = benchmark_suite(seed);
    match train_source(&suite.source_train, epochs as usize, lr, seed) {
        Ok(trained) => {
            unsafe { *out = Box::into_raw(Box::new(DynaModel { inner: trained.model })) };
            DynaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Mean offline Dice of a model over a synthetic target domain
/// (`target` is 'A' or 'B').
///
/// # Safety
/// `model` must be a live handle; `out_dice` a valid f64 slot.
#[no_mangle]
pub unsafe extern "C" fn dyna_eval(
    model: *const DynaModel,
    target: c_char,
    seed: u64,
    out_dice: *mut f64,
) -> DynaStatus {
    if model.is_null() || out_dice.is_null() {
        set_error("null argument");
        return DynaStatus::NullArgument;
    }
    let suite = benchmark_suite(seed);
    let samples = match target as u8 {
        b'A' | b'a' => &suite.target_a,
        b'B' | b'b' => &suite.target_b,
        other => {
            set_error(&format!("unknown target {:?}, expected 'A' or 'B'", other as char));
            return DynaStatus::UsageError;
        }
    };
    match eval_model(unsafe { &(*model).inner }, samples) {
        Ok(d) => {
            unsafe { *out_dice = d };
            DynaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Run a full day-night deployment from a JSON configuration (the same
/// schema as the CLI's `--config` file; `ckpt` and `out_dir` must be set).
/// On success `out_summary_json` receives the report summary; free it with
/// [`dyna_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_summary_json` may
/// be null when the caller only wants the files on disk.
#[no_mangle]
pub unsafe extern "C" fn dyna_deploy(
    config_json: *const c_char,
    out_summary_json: *mut *mut c_char,
) -> DynaStatus {
    if config_json.is_null() {
        set_error("null config");
        return DynaStatus::NullArgument;
    }
    let text = match unsafe { CStr::from_ptr(config_json) }.to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("config is not valid UTF-8");
            return DynaStatus::UsageError;
        }
    };
    let cfg: RunConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("config parse error: {e}"));
            return DynaStatus::UsageError;
        }
    };
    match deploy_to_dir(&cfg) {
        Ok(outcome) => {
            if !out_summary_json.is_null() {
                let json = match serde_json::to_string(&outcome.summary) {
                    Ok(j) => j,
                    Err(e) => {
                        set_error(&format!("summary serialization failed: {e}"));
                        return DynaStatus::DataError;
                    }
                };
                let c = CString::new(json.replace('\0', " ")).unwrap_or_default();
                unsafe { *out_summary_json = c.into_raw() };
            }
            DynaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Convenience for bindings: which target domains exist.
#[no_mangle]
pub extern "C" fn dyna_target_is_valid(target: c_char) -> bool {
    matches!(target as u8, b'A' | b'a' | b'B' | b'b')
}

// keep the harness Target type referenced so the import list stays honest
#[allow(dead_code)]
fn _target_sanity(t: Target) -> Target {
    t
}
