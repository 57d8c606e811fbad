//! C ABI over `xfi-core`.
//!
//! Every function returns an [`XfiStatus`]; on failure the message is available from
//! [`xfi_last_error_message`] on the same thread until the next failing call. Handles are
//! opaque and must be released with their `_free` function. Panics never cross the
//! boundary; they surface as `XFI_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xfi_core::harness::{run_with_config, Command, Experiment, ExperimentConfig, ModelKind, Preset};
use xfi_core::tensor::Tensor;
use xfi_core::training::{binomial_count_pmf, evaluate_subset, keypoint_metrics};
use xfi_core::xfusion::TaskModel;
use xfi_core::XfiError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XfiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Harness command for [`xfi_experiment_run`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XfiCommand {
    Train = 0,
    Eval = 1,
    Ablate = 2,
    Variants = 3,
}

/// Base preset for [`xfi_experiment_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XfiPreset {
    Desk = 0,
    Paper = 1,
}

/// Opaque experiment: merged config, digest and generated dataset.
pub struct XfiExperiment {
    inner: Experiment,
}

/// Opaque trained model bound to the experiment that produced it.
pub struct XfiModel {
    inner: Box<dyn TaskModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &XfiError) -> XfiStatus {
    match err {
        XfiError::ShapeMismatch { .. } | XfiError::InvalidShape { .. } => XfiStatus::Shape,
        XfiError::NonFinite { .. } | XfiError::Diverged { .. } | XfiError::DegenerateAlignment(_) => XfiStatus::Numeric,
        XfiError::Config(_) | XfiError::UnknownParameter(_) | XfiError::DuplicateParameter(_) => XfiStatus::Config,
        XfiError::Checkpoint(_) | XfiError::DigestMismatch { .. } => XfiStatus::Checkpoint,
        XfiError::Io(_) => XfiStatus::Io,
        _ => XfiStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard<F>(f: F) -> XfiStatus
where
    F: FnOnce() -> Result<(), (XfiStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XfiStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            XfiStatus::Panic
        }
    }
}

fn core(err: XfiError) -> (XfiStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (XfiStatus, String) {
    (XfiStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (XfiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (XfiStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (XfiStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (XfiStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or null if none. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn xfi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds an experiment from TOML text merged onto `preset` (`config_toml` may be null
/// for the bare preset) and writes a new handle to `*out`.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_experiment_new(
    config_toml: *const c_char,
    preset: XfiPreset,
    out: *mut *mut XfiExperiment,
) -> XfiStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let preset = match preset {
            XfiPreset::Desk => Preset::Desk,
            XfiPreset::Paper => Preset::Paper,
        };
        let config = if config_toml.is_null() {
            ExperimentConfig::preset(preset)
        } else {
            ExperimentConfig::from_toml_str(str_arg(config_toml, "config_toml")?, Some(preset)).map_err(core)?
        };
        let inner = Experiment::new(config).map_err(core)?;
        *slot = Box::into_raw(Box::new(XfiExperiment { inner }));
        Ok(())
    })
}

/// Releases an experiment handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`xfi_experiment_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xfi_experiment_free(handle: *mut XfiExperiment) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Copies the 64-character hex config digest plus a NUL into `buf` (capacity `len`).
///
/// # Safety
/// `handle` must be valid; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn xfi_experiment_digest(handle: *const XfiExperiment, buf: *mut c_char, len: usize) -> XfiStatus {
    guard(|| {
        let exp = handle.as_ref().ok_or_else(|| null("handle"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let digest = exp.inner.digest.as_bytes();
        if len < digest.len() + 1 {
            return Err((
                XfiStatus::InvalidArgument,
                format!("buffer of {len} bytes cannot hold {} + 1", digest.len()),
            ));
        }
        ptr::copy_nonoverlapping(digest.as_ptr().cast::<c_char>(), buf, digest.len());
        *buf.add(digest.len()) = 0;
        Ok(())
    })
}

/// Number of modalities, in canonical order.
///
/// # Safety
/// `handle` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_experiment_modality_count(handle: *const XfiExperiment, out: *mut usize) -> XfiStatus {
    guard(|| {
        let exp = handle.as_ref().ok_or_else(|| null("handle"))?;
        *out_arg(out, "out")? = exp.inner.config.modality.len();
        Ok(())
    })
}

/// Runs a harness command, writing artifacts under `out_dir`.
///
/// # Safety
/// `handle` must be valid; `out_dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn xfi_experiment_run(
    handle: *const XfiExperiment,
    command: XfiCommand,
    out_dir: *const c_char,
) -> XfiStatus {
    guard(|| {
        let exp = handle.as_ref().ok_or_else(|| null("handle"))?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let command = match command {
            XfiCommand::Train => Command::Train,
            XfiCommand::Eval => Command::Eval,
            XfiCommand::Ablate => Command::Ablate,
            XfiCommand::Variants => Command::Variants,
        };
        run_with_config(command, exp.inner.config.clone(), &dir).map_err(core)?;
        Ok(())
    })
}

/// Trains the configured fusion variant in memory and writes a model handle to `*out`.
///
/// # Safety
/// `handle` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_model_train(handle: *const XfiExperiment, out: *mut *mut XfiModel) -> XfiStatus {
    guard(|| {
        let exp = handle.as_ref().ok_or_else(|| null("handle"))?;
        let slot = out_arg(out, "out")?;
        let kind = ModelKind::Fusion(exp.inner.config.model.variant);
        let (model, _) = exp.inner.train(kind, &exp.inner.config.existence_probs()).map_err(core)?;
        *slot = Box::into_raw(Box::new(XfiModel { inner: model }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`xfi_model_train`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xfi_model_free(model: *mut XfiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates `model` on the experiment's evaluation split with the modalities whose bits
/// are set in `subset_mask` (bit `i` is canonical modality `i`). Writes up to `capacity`
/// metric values to `values` (HPE: MPJPE, PA-MPJPE; HAR: accuracy, silhouette,
/// Calinski–Harabasz) and their count to `*written`.
///
/// # Safety
/// Handles must be valid; `values` must hold `capacity` doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_model_eval_subset(
    handle: *const XfiExperiment,
    model: *const XfiModel,
    subset_mask: u32,
    values: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> XfiStatus {
    guard(|| {
        let exp = handle.as_ref().ok_or_else(|| null("handle"))?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let written = out_arg(written, "written")?;
        let n = exp.inner.config.modality.len();
        if n > 32 || subset_mask == 0 || (n < 32 && subset_mask >> n != 0) {
            return Err((
                XfiStatus::InvalidArgument,
                format!("mask {subset_mask:#x} is not a non-empty subset of {n} modalities"),
            ));
        }
        let present: Vec<bool> = (0..n).map(|i| subset_mask >> i & 1 == 1).collect();
        let metrics = evaluate_subset(model.inner.as_ref(), &exp.inner.data.eval, &present).map_err(core)?;
        if capacity < metrics.len() {
            return Err((
                XfiStatus::InvalidArgument,
                format!("capacity {capacity} < {} metrics", metrics.len()),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        for (i, (_, v)) in metrics.iter().enumerate() {
            *values.add(i) = *v;
        }
        *written = metrics.len();
        Ok(())
    })
}

/// Joint probability of occurrence counts `counts[i]` over `m` iterations with
/// per-modality probabilities `probs[i]`.
///
/// # Safety
/// `counts` and `probs` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_binomial_count_pmf(
    counts: *const u64,
    probs: *const f64,
    n: usize,
    m: u64,
    out: *mut f64,
) -> XfiStatus {
    guard(|| {
        let counts = slice_arg(counts, n, "counts")?;
        let probs = slice_arg(probs, n, "probs")?;
        *out_arg(out, "out")? = binomial_count_pmf(counts, m, probs).map_err(core)?;
        Ok(())
    })
}

/// MPJPE and PA-MPJPE of `pred` against `gt`, both row-major `joints × 3`.
///
/// # Safety
/// `pred` and `gt` must hold `3·joints` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn xfi_keypoint_metrics(
    pred: *const f64,
    gt: *const f64,
    joints: usize,
    mpjpe: *mut f64,
    pa_mpjpe: *mut f64,
) -> XfiStatus {
    guard(|| {
        let len = joints.checked_mul(3).ok_or((XfiStatus::InvalidArgument, "joints overflow".into()))?;
        let p = Tensor::new(vec![joints, 3], slice_arg(pred, len, "pred")?.to_vec()).map_err(core)?;
        let g = Tensor::new(vec![joints, 3], slice_arg(gt, len, "gt")?.to_vec()).map_err(core)?;
        let (m, pa) = keypoint_metrics(&p, &g).map_err(core)?;
        *out_arg(mpjpe, "mpjpe")? = m;
        *out_arg(pa_mpjpe, "pa_mpjpe")? = pa;
        Ok(())
    })
}
