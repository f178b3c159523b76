//! C ABI over `sidemoe`.
//!
//! Objects cross the boundary as opaque handles: `SmQuantized` from
//! `sm_quantize` / `sm_quantized_from_blob`, `SmConfig` from
//! `sm_config_default` / `sm_config_from_toml`, `SmRun` from `sm_train`.
//! Each is released with the matching `sm_*_free`.
//! Every fallible call returns an [`SmStatus`]; the message of the most
//! recent failure on the calling thread is available from
//! [`sm_last_error`]. Output buffers follow one convention: the required
//! length is always written to `*needed`, and `SM_BUFFER_TOO_SMALL` is
//! returned when `capacity` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sidemoe::harness::{config_memory_report, csv_text, run_experiment, RunArtifacts, RunConfig};
use sidemoe::moe_router::{refine_from, PostMask};
use sidemoe::numerics::DenseTensor;
use sidemoe::quantizer::{dequantize, max_abs_residual, quantization_error, quantize_tensor, QuantizedTensor, Rounding};
use sidemoe::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    Index = 7,
    Divergence = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Rounding applied when mapping weights to grid codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmRounding {
    Floor = 0,
    Nearest = 1,
}

/// Normalization of the selected routing weights.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmPostMask {
    Renormalize = 0,
    Softmax = 1,
}

/// Scale, zero point and range of a quantized tensor.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmQuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub r_min: f64,
    pub r_max: f64,
}

/// Quantized tensor handle.
pub struct SmQuantized(QuantizedTensor);

/// Run configuration handle.
pub struct SmConfig(RunConfig);

/// Finished run handle.
pub struct SmRun(RunArtifacts);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(err: &Error) -> SmStatus {
    match err {
        Error::Dimension { .. } => SmStatus::Dimension,
        Error::Config(_) => SmStatus::Config,
        Error::Numeric(_) | Error::InvalidDistribution(_) => SmStatus::Numeric,
        Error::Index { .. } => SmStatus::Index,
        Error::Divergence { .. } => SmStatus::Divergence,
        Error::Format(_) => SmStatus::Format,
        Error::Io(_) => SmStatus::Io,
    }
}

struct Fail(SmStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        set_error(&e.to_string());
        Fail(status_of(&e))
    }
}

fn null(what: &str) -> Fail {
    set_error(&format!("{what} is null"));
    Fail(SmStatus::NullPointer)
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmStatus::Ok,
        Ok(Err(Fail(s))) => s,
        Err(_) => {
            set_error("internal panic");
            SmStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copy `src` into `(dst, capacity)` after reporting its length.
unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize, needed: *mut usize) -> Result<(), Fail> {
    *out_ptr(needed, "needed")? = src.len();
    if capacity < src.len() {
        set_error(&format!("buffer holds {capacity}, need {}", src.len()));
        return Err(Fail(SmStatus::BufferTooSmall));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Text output: like [`copy_out`] with a trailing NUL counted in `needed`.
unsafe fn copy_text(text: &str, dst: *mut c_char, capacity: usize, needed: *mut usize) -> Result<(), Fail> {
    let mut bytes: Vec<u8> = text.bytes().filter(|&b| b != 0).collect();
    bytes.push(0);
    copy_out(&bytes, dst.cast::<u8>(), capacity, needed)
}

/// Message of the last failed call on this thread, NUL-terminated.
/// Writes nothing but `*needed` when `capacity` is short. Never changes
/// the stored message.
///
/// # Safety
/// `buf` must be valid for `capacity` bytes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_last_error(buf: *mut c_char, capacity: usize, needed: *mut usize) -> SmStatus {
    let mut msg = LAST_ERROR.with(|e| e.borrow().clone());
    msg.push(0);
    let Some(needed) = needed.as_mut() else {
        return SmStatus::NullPointer;
    };
    *needed = msg.len();
    if capacity < msg.len() {
        return SmStatus::BufferTooSmall;
    }
    if buf.is_null() {
        return SmStatus::NullPointer;
    }
    ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
    SmStatus::Ok
}

/// Quantize `len` weights, laid out as a vector.
///
/// # Safety
/// `weights` must be valid for `len` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantize(
    weights: *const f64,
    len: usize,
    bits: u8,
    rounding: SmRounding,
    out: *mut *mut SmQuantized,
) -> SmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let w = DenseTensor::vector(input(weights, len, "weights")?.to_vec());
        let rounding = match rounding {
            SmRounding::Floor => Rounding::Floor,
            SmRounding::Nearest => Rounding::Nearest,
        };
        let q = quantize_tensor(&w, bits, rounding)?;
        *out = Box::into_raw(Box::new(SmQuantized(q)));
        Ok(())
    })
}

/// # Safety
/// `q` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_free(q: *mut SmQuantized) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// # Safety
/// `q` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_params(q: *const SmQuantized, out: *mut SmQuantParams) -> SmStatus {
    guard(|| {
        let p = handle(q, "quantized")?.0.params();
        *out_ptr(out, "out")? = SmQuantParams {
            scale: p.scale,
            zero_point: p.zero_point,
            bits: p.bits,
            r_min: p.r_min,
            r_max: p.r_max,
        };
        Ok(())
    })
}

/// Number of quantized elements, 0 for a null handle.
///
/// # Safety
/// `q` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_len(q: *const SmQuantized) -> usize {
    q.as_ref().map_or(0, |q| q.0.len())
}

/// # Safety
/// `codes` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_codes(
    q: *const SmQuantized,
    codes: *mut u32,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_out(&handle(q, "quantized")?.0.codes().to_vec(), codes, capacity, needed))
}

/// # Safety
/// `values` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_dequantize(
    q: *const SmQuantized,
    values: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_out(dequantize(&handle(q, "quantized")?.0).data(), values, capacity, needed))
}

/// Sum of squared residuals against `original` and the largest absolute
/// residual.
///
/// # Safety
/// `original` must be valid for `len` reads; the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_error(
    q: *const SmQuantized,
    original: *const f64,
    len: usize,
    error_q: *mut f64,
    max_residual: *mut f64,
) -> SmStatus {
    guard(|| {
        let q = &handle(q, "quantized")?.0;
        let w = DenseTensor::new(q.shape().to_vec(), input(original, len, "original")?.to_vec())?;
        *out_ptr(error_q, "error_q")? = quantization_error(&w, q)?;
        *out_ptr(max_residual, "max_residual")? = max_abs_residual(&w, q)?;
        Ok(())
    })
}

/// Serialized `SMQT` blob.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_to_blob(
    q: *const SmQuantized,
    buf: *mut u8,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_out(&handle(q, "quantized")?.0.to_blob(), buf, capacity, needed))
}

/// # Safety
/// `blob` must be valid for `len` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_quantized_from_blob(blob: *const u8, len: usize, out: *mut *mut SmQuantized) -> SmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let q = QuantizedTensor::from_blob(input(blob, len, "blob")?)?;
        *out = Box::into_raw(Box::new(SmQuantized(q)));
        Ok(())
    })
}

/// Combination weights for one token: average of `softmax(scores)` and
/// `correlation`, top-`k` selection, then `mode` normalization. Writes
/// `n` dense weights, zero for unselected experts.
///
/// # Safety
/// `scores` and `correlation` must be valid for `n` reads, `weights` for
/// `n` writes.
#[no_mangle]
pub unsafe extern "C" fn sm_route(
    scores: *const f64,
    correlation: *const f64,
    n: usize,
    k: usize,
    mode: SmPostMask,
    weights: *mut f64,
) -> SmStatus {
    guard(|| {
        let mode = match mode {
            SmPostMask::Renormalize => PostMask::Renormalize,
            SmPostMask::Softmax => PostMask::Softmax,
        };
        let s = input(scores, n, "scores")?.to_vec();
        let c = input(correlation, n, "correlation")?.to_vec();
        let d = refine_from(s, c, k, mode)?;
        let mut needed = 0;
        copy_out(&d.dense_weights(), weights, n, &mut needed)
    })
}

/// Default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_config_default(out: *mut *mut SmConfig) -> SmStatus {
    guard(|| {
        *out_ptr(out, "out")? = Box::into_raw(Box::new(SmConfig(RunConfig::default())));
        Ok(())
    })
}

/// Configuration from a NUL-terminated TOML document; unknown keys fail
/// with `SM_CONFIG`.
///
/// # Safety
/// `toml` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_config_from_toml(toml: *const c_char, out: *mut *mut SmConfig) -> SmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if toml.is_null() {
            return Err(null("toml"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|_| Fail::from(Error::Format("configuration is not UTF-8".into())))?;
        *out = Box::into_raw(Box::new(SmConfig(RunConfig::from_toml(text)?)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_config_set_seed(cfg: *mut SmConfig, seed: u64) -> SmStatus {
    guard(|| {
        out_ptr(cfg, "config")?.0.seed = seed;
        Ok(())
    })
}

/// The configuration as TOML, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_config_to_toml(
    cfg: *const SmConfig,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_text(&handle(cfg, "config")?.0.to_toml(), buf, capacity, needed))
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sm_config_free(cfg: *mut SmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Analytic memory report as JSON, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_memory_report_json(
    cfg: *const SmConfig,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| {
        let report = config_memory_report(&handle(cfg, "config")?.0)?;
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        copy_text(&text, buf, capacity, needed)
    })
}

/// Full seeded run: pretraining, quantization, fine-tuning, evaluation.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_train(cfg: *const SmConfig, out: *mut *mut SmRun) -> SmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let run = run_experiment(&handle(cfg, "config")?.0)?;
        *out = Box::into_raw(Box::new(SmRun(run)));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sm_run_free(run: *mut SmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Final validation and test accuracy.
///
/// # Safety
/// `run` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sm_run_accuracy(run: *const SmRun, val: *mut f64, test: *mut f64) -> SmStatus {
    guard(|| {
        let s = &handle(run, "run")?.0.report.summary;
        *out_ptr(val, "val")? = s.final_val_accuracy;
        *out_ptr(test, "test")? = s.test_accuracy;
        Ok(())
    })
}

/// Per-epoch report CSV, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_run_report_csv(
    run: *const SmRun,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_text(&handle(run, "run")?.0.report.to_csv()?, buf, capacity, needed))
}

/// Run summary JSON, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_run_summary_json(
    run: *const SmRun,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_text(&handle(run, "run")?.0.report.summary_json()?, buf, capacity, needed))
}

/// Re-quantization event log CSV, NUL-terminated.
///
/// # Safety
/// `buf` must be valid for `capacity` writes and `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_run_events_csv(
    run: *const SmRun,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| copy_text(&csv_text(&handle(run, "run")?.0.events)?, buf, capacity, needed))
}
