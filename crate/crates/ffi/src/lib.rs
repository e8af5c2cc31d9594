//! C interface to `tsinv-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`TsinvStatus`]; the message of the most recent failure on the calling
//! thread is available from [`tsinv_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tsinv_core::attacks::{run_attack, AttackConfig, AttackMethod, AttackResult};
use tsinv_core::autodiff::Tensor;
use tsinv_core::data::ClientBatch;
use tsinv_core::eval::smape;
use tsinv_core::federation::{capture_round, Defense, GradientCapture};
use tsinv_core::models::{Architecture, Checkpoint, ModelSpec};
use tsinv_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Config = 5,
    CaptureMismatch = 6,
    Data = 7,
    NonFinite = 8,
    OneShotDegenerate = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for TsinvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::NonScalarLoss(_) => TsinvStatus::Shape,
            Error::NonFinite(_) | Error::AttackAborted { .. } => TsinvStatus::NonFinite,
            Error::InvalidSpec(_) | Error::Config(_) => TsinvStatus::Config,
            Error::Data(_) | Error::Csv(_) => TsinvStatus::Data,
            Error::CaptureMismatch(_) => TsinvStatus::CaptureMismatch,
            Error::OneShotDegenerate(_) => TsinvStatus::OneShotDegenerate,
            Error::Io { .. } | Error::Json { .. } => TsinvStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(TsinvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(TsinvStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsinvStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TsinvStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TsinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TsinvStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            TsinvStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// A forecasting model with its parameters.
pub struct TsinvModel(Checkpoint);

/// A shared gradient from one simulated client round, with its private batch.
pub struct TsinvCapture {
    capture: GradientCapture,
    truth: ClientBatch,
}

/// A reconstructed batch.
pub struct TsinvResult(AttackResult);

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tsinv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsinv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized model. `arch` is one of
/// `fcn`, `cnn`, `tcn`, `gru2fcn`, `gru2gru`.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsinv_model_init(
    arch: *const c_char,
    obs_len: usize,
    horizon: usize,
    hidden: usize,
    seed: u64,
    out: *mut *mut TsinvModel,
) -> TsinvStatus {
    guard(|| {
        let arch: Architecture = text(arch, "arch")?.parse()?;
        let ck = Checkpoint::init(ModelSpec::new(arch, obs_len, horizon).with_hidden(hidden).with_seed(seed))?;
        write_out(out, TsinvModel(ck))
    })
}

/// Loads a checkpoint written by `tsinv model init`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsinv_model_load(path: *const c_char, out: *mut *mut TsinvModel) -> TsinvStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        write_out(out, TsinvModel(Checkpoint::load(&path)?))
    })
}

/// Saves the checkpoint to `path` (plus its JSON sidecar).
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tsinv_model_save(model: *const TsinvModel, path: *const c_char) -> TsinvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        m.0.save(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Number of trainable parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_model_param_count(model: *const TsinvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.model.param_count())
}

/// # Safety
/// `model` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_model_free(model: *mut TsinvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Simulates a client round on a batch of `batch_size` windows.
///
/// `obs` holds `batch_size * H` values and `tar` `batch_size * F`, row-major.
/// `defense` is `none`, `gauss`, `prune` or `sign`; `strength` is the noise
/// std or prune ratio (a negative value selects the default).
///
/// # Safety
/// Pointers must be valid for the stated lengths; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tsinv_capture_new(
    model: *const TsinvModel,
    obs: *const f64,
    tar: *const f64,
    batch_size: usize,
    defense: *const c_char,
    strength: f64,
    seed: u64,
    out: *mut *mut TsinvCapture,
) -> TsinvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let spec = m.0.model.spec();
        let (h, f) = (spec.obs_len, spec.horizon);
        if batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        let obs = slice(obs, batch_size * h, "obs")?;
        let tar = slice(tar, batch_size * f, "tar")?;
        let s = (strength >= 0.0).then_some(strength);
        let defense = Defense::from_name(text(defense, "defense")?, s, s)?;
        let batch = ClientBatch {
            obs: Tensor::new(vec![batch_size, h, 1], obs.to_vec())?,
            tar: Tensor::new(vec![batch_size, f, 1], tar.to_vec())?,
        };
        let (capture, truth) = capture_round(&m.0, batch, defense, seed)?;
        write_out(
            out,
            TsinvCapture {
                capture,
                truth: truth.batch,
            },
        )
    })
}

/// Batch size of the capture, or 0 for a null handle.
///
/// # Safety
/// `capture` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_capture_batch_size(capture: *const TsinvCapture) -> usize {
    capture.as_ref().map_or(0, |c| c.capture.batch_size)
}

/// Copies the shared gradient into `buf`. `needed` receives its length;
/// pass a null `buf` to query the length alone.
///
/// # Safety
/// `buf` must be null or writable for `len` values; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsinv_capture_gradient(
    capture: *const TsinvCapture,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> TsinvStatus {
    guard(|| {
        let c = handle(capture, "capture")?;
        copy_out(&c.capture.grads, buf, len, needed)
    })
}

/// # Safety
/// `capture` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_capture_free(capture: *mut TsinvCapture) {
    if !capture.is_null() {
        drop(Box::from_raw(capture));
    }
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize, needed: *mut usize) -> Result<(), Fail> {
    if needed.is_null() {
        return Err(null("needed"));
    }
    *needed = src.len();
    if buf.is_null() {
        return Ok(());
    }
    if len < src.len() {
        return Err(Fail(
            TsinvStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Runs an optimization attack with the method's preset and `steps` iterations.
/// `method` uses the CLI names (`dlg-adam`, `invg`, `ts-inverse`, ...).
///
/// # Safety
/// Handles must come from this library; `method` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tsinv_attack_run(
    model: *const TsinvModel,
    capture: *const TsinvCapture,
    method: *const c_char,
    steps: usize,
    seed: u64,
    out: *mut *mut TsinvResult,
) -> TsinvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(capture, "capture")?;
        let method: AttackMethod = text(method, "method")?.parse()?;
        let mut cfg = AttackConfig::preset(method, m.0.model.spec().architecture)?;
        cfg.steps = steps;
        cfg.seed = seed;
        let r = run_attack(&c.capture, &m.0, &cfg)?;
        write_out(out, TsinvResult(r))
    })
}

/// Copies the reconstructed observations (`B * H` values).
///
/// # Safety
/// As for [`tsinv_capture_gradient`].
#[no_mangle]
pub unsafe extern "C" fn tsinv_result_obs(
    result: *const TsinvResult,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> TsinvStatus {
    guard(|| copy_out(handle(result, "result")?.0.recon_obs.data(), buf, len, needed))
}

/// Copies the reconstructed targets (`B * F` values).
///
/// # Safety
/// As for [`tsinv_capture_gradient`].
#[no_mangle]
pub unsafe extern "C" fn tsinv_result_tar(
    result: *const TsinvResult,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> TsinvStatus {
    guard(|| copy_out(handle(result, "result")?.0.recon_tar.data(), buf, len, needed))
}

/// sMAPE of the reconstruction against the capture's private batch, without
/// permutation matching. Either output pointer may be null.
///
/// # Safety
/// Handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_result_score(
    result: *const TsinvResult,
    capture: *const TsinvCapture,
    smape_obs: *mut f64,
    smape_tar: *mut f64,
) -> TsinvStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let c = handle(capture, "capture")?;
        let o = smape(c.truth.obs.data(), r.0.recon_obs.data())?;
        let t = smape(c.truth.tar.data(), r.0.recon_tar.data())?;
        if !smape_obs.is_null() {
            *smape_obs = o;
        }
        if !smape_tar.is_null() {
            *smape_tar = t;
        }
        Ok(())
    })
}

/// # Safety
/// `result` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tsinv_result_free(result: *mut TsinvResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Symmetric mean absolute percentage error of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must be readable for `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsinv_smape(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> TsinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = smape(slice(a, n, "a")?, slice(b, n, "b")?)?;
        Ok(())
    })
}
