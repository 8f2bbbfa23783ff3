//! C ABI over `msdc-core`.
//!
//! Every entry point returns an [`MsdcStatus`]. On failure the message is
//! kept per thread and read back with [`msdc_last_error`]. Models are
//! opaque [`MsdcModel`] handles owned by the caller until
//! [`msdc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use msdc_core::error::ErrorClass;
use msdc_core::states::{extract_state_model, ExtractionConfig};
use msdc_core::train::TrainedModel;
use msdc_core::{checkpoint, metrics, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdcStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Bad argument or configuration value.
    InvalidArgument = 2,
    /// Unreadable, malformed or mismatched input data.
    Data = 3,
    /// Non-finite values, divergence or non-convergence.
    Numerical = 4,
    /// An output buffer is too small; the required size was written back.
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Trained model loaded from a checkpoint.
pub struct MsdcModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(err: &Error) -> MsdcStatus {
    set_error(err.to_string());
    match err.class() {
        ErrorClass::Usage => MsdcStatus::InvalidArgument,
        ErrorClass::Data => MsdcStatus::Data,
        ErrorClass::Numerical => MsdcStatus::Numerical,
    }
}

fn null(what: &str) -> MsdcStatus {
    set_error(format!("{what} is null"));
    MsdcStatus::NullPointer
}

/// Runs `f`, turning panics into [`MsdcStatus::Internal`].
fn guard(f: impl FnOnce() -> MsdcStatus) -> MsdcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        MsdcStatus::Internal
    })
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize) -> Option<&'a mut [T]> {
    if len == 0 {
        Some(&mut [])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(p, len))
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn msdc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msdc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn msdc_model_load(path: *const c_char, out: *mut *mut MsdcModel) -> MsdcStatus {
    guard(|| {
        if path.is_null() {
            return null("path");
        }
        if out.is_null() {
            return null("out");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            set_error("path is not valid UTF-8");
            return MsdcStatus::InvalidArgument;
        };
        match checkpoint::load(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MsdcModel { inner }));
                MsdcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle from [`msdc_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`msdc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msdc_model_free(model: *mut MsdcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of appliance states M, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msdc_model_num_states(model: *const MsdcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.net.num_states())
}

/// Input window length w, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msdc_model_input_len(model: *const MsdcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.net.arch.input_len)
}

/// Disaggregates `len` aggregate samples. `out_power` and `out_states`
/// must each hold `len` elements; either may be null to skip it.
///
/// # Safety
/// Pointers must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn msdc_model_predict(
    model: *const MsdcModel,
    aggregate: *const f64,
    len: usize,
    out_power: *mut f64,
    out_states: *mut u32,
) -> MsdcStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return null("model");
        };
        let Some(x) = slice(aggregate, len) else {
            return null("aggregate");
        };
        let pred = match model.inner.predict(x) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        if let Some(out) = slice_mut(out_power, len) {
            out.copy_from_slice(&pred.power);
        }
        if let Some(out) = slice_mut(out_states, len) {
            for (o, &s) in out.iter_mut().zip(&pred.states) {
                *o = s as u32;
            }
        }
        MsdcStatus::Ok
    })
}

/// Mean absolute error in watts.
///
/// # Safety
/// `pred` and `truth` must be valid for `len` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msdc_mae(pred: *const f64, truth: *const f64, len: usize, out: *mut f64) -> MsdcStatus {
    guard(|| metric(pred, truth, len, out, metrics::mae))
}

/// Signal aggregate error over the whole series.
///
/// # Safety
/// As for [`msdc_mae`].
#[no_mangle]
pub unsafe extern "C" fn msdc_sae(pred: *const f64, truth: *const f64, len: usize, out: *mut f64) -> MsdcStatus {
    guard(|| metric(pred, truth, len, out, metrics::sae))
}

/// Mean per-period energy error with `period` samples per period.
///
/// # Safety
/// As for [`msdc_mae`].
#[no_mangle]
pub unsafe extern "C" fn msdc_sae_delta(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    period: usize,
    out: *mut f64,
) -> MsdcStatus {
    guard(|| metric(pred, truth, len, out, |p, t| metrics::sae_delta(p, t, period)))
}

/// Fraction of matching state labels.
///
/// # Safety
/// `pred` and `truth` must be valid for `len` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn msdc_state_accuracy(
    pred: *const u32,
    truth: *const u32,
    len: usize,
    out: *mut f64,
) -> MsdcStatus {
    guard(|| {
        let to_usize = |s: &[u32]| s.iter().map(|&v| v as usize).collect::<Vec<_>>();
        metric(pred, truth, len, out, |p, t| metrics::state_accuracy(&to_usize(p), &to_usize(t)))
    })
}

unsafe fn metric<T>(
    pred: *const T,
    truth: *const T,
    len: usize,
    out: *mut f64,
    f: impl FnOnce(&[T], &[T]) -> msdc_core::Result<f64>,
) -> MsdcStatus {
    let (Some(p), Some(t)) = (slice(pred, len), slice(truth, len)) else {
        return null("input");
    };
    if out.is_null() {
        return null("out");
    }
    match f(p, t) {
        Ok(v) => {
            *out = v;
            MsdcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Mean-shift state extraction on one appliance's power readings.
///
/// `bandwidth <= 0` derives it from the data. Centers are written in
/// ascending order to `out_centers` (capacity `centers_cap`) and their
/// count to `*out_num_states`; `out_labels` (length `len`, may be null)
/// receives per-sample state indices. If `centers_cap` is too small,
/// `*out_num_states` still reports the required size.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn msdc_extract_states(
    values: *const f64,
    len: usize,
    bandwidth: f64,
    out_centers: *mut f64,
    centers_cap: usize,
    out_num_states: *mut usize,
    out_labels: *mut u32,
) -> MsdcStatus {
    guard(|| {
        let Some(values) = slice(values, len) else {
            return null("values");
        };
        if out_num_states.is_null() {
            return null("out_num_states");
        }
        let cfg = ExtractionConfig {
            bandwidth: (bandwidth > 0.0).then_some(bandwidth),
            ..ExtractionConfig::default()
        };
        let (model, seq) = match extract_state_model("ffi", values, &cfg) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        *out_num_states = model.num_states();
        if centers_cap < model.num_states() {
            set_error(format!("need room for {} centers, got {centers_cap}", model.num_states()));
            return MsdcStatus::BufferTooSmall;
        }
        let Some(centers) = slice_mut(out_centers, model.num_states()) else {
            return null("out_centers");
        };
        centers.copy_from_slice(&model.centers);
        if let Some(out) = slice_mut(out_labels, len) {
            for (o, &l) in out.iter_mut().zip(seq.labels()) {
                *o = l as u32;
            }
        }
        MsdcStatus::Ok
    })
}
