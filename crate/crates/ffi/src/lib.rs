//! C ABI over the dpadam core: opaque model and privacy-ledger handles,
//! accountant queries and in-place clipping.
//!
//! Every fallible function returns a [`DpStatus`]; on failure a message is
//! available from [`dpadam_last_error`] on the same thread. Output pointers
//! are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dpadam::accountant::{
    calibrate_sigma, classic_gaussian_sigma, epsilon_for, MechanismSpec, PrivacyLedger,
};
use dpadam::mechanisms::{clip_gradient, ClipSpec};
use dpadam::model::{build_mlp, Model, NormKind};
use dpadam::{Error, GradientSet, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    CalibrationFailed = 4,
    ValidationFailed = 5,
    Io = 6,
    Checkpoint = 7,
    BufferSize = 8,
    /// A panic was caught at the boundary; the handle involved should be
    /// treated as unusable.
    Internal = 99,
}

/// Opaque model handle.
pub struct DpModel {
    inner: Model,
}

/// Opaque privacy-ledger handle.
pub struct DpLedger {
    inner: PrivacyLedger,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DpStatus {
    match e {
        Error::ShapeMismatch { .. } => DpStatus::ShapeMismatch,
        Error::CalibrationFailed(_) => DpStatus::CalibrationFailed,
        Error::ValidationFailed(_) => DpStatus::ValidationFailed,
        Error::Io(_) => DpStatus::Io,
        Error::Checkpoint(_) => DpStatus::Checkpoint,
        Error::NonScalarOutput(_) | Error::IncompleteTape(_) => DpStatus::Internal,
        _ => DpStatus::InvalidArgument,
    }
}

struct Fail(DpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DpStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> DpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DpStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DpStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(
            DpStatus::BufferSize,
            format!("{what} has length {got}, expected {want}"),
        ));
    }
    Ok(())
}

/// Message for the most recent failure on this thread, or NULL.
///
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn dpadam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds an MLP; `groups = 0` means no normalization.
///
/// # Safety
/// `widths` must point to `n_widths` readable values and `out_model` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_build(
    widths: *const usize,
    n_widths: usize,
    groups: usize,
    seed: u64,
    out_model: *mut *mut DpModel,
) -> DpStatus {
    guard(|| {
        let widths = slice(widths, n_widths, "widths")?;
        let dst = out(out_model, "out_model")?;
        let norm = match groups {
            0 => NormKind::None,
            g => NormKind::Group { groups: g },
        };
        let inner = build_mlp(widths, norm, seed)?;
        *dst = Box::into_raw(Box::new(DpModel { inner }));
        Ok(())
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_load(
    path: *const c_char,
    out_model: *mut *mut DpModel,
) -> DpStatus {
    guard(|| {
        let p = c_path(path)?;
        let dst = out(out_model, "out_model")?;
        let inner = Model::load(&p)?;
        *dst = Box::into_raw(Box::new(DpModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_save(model: *const DpModel, path: *const c_char) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.inner.save(&c_path(path)?)?;
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_free(model: *mut DpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_shape(
    model: *const DpModel,
    out_input_dim: *mut usize,
    out_param_count: *mut usize,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dim_dst = out(out_input_dim, "out_input_dim")?;
        let count_dst = out(out_param_count, "out_param_count")?;
        *dim_dst = m.inner.input_dim();
        *count_dst = m.inner.param_count();
        Ok(())
    })
}

/// Copies every parameter, flattened in parameter order, into `buf`
/// (length must equal the parameter count).
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_params(
    model: *const DpModel,
    buf: *mut f64,
    len: usize,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        check_len("buf", len, m.inner.param_count())?;
        let dst = slice_mut(buf, len, "buf")?;
        let flat = m.inner.params().iter().flat_map(|t| t.data().iter());
        for (d, s) in dst.iter_mut().zip(flat) {
            *d = *s;
        }
        Ok(())
    })
}

/// Loss and gradient for one sample; the gradient is flattened in parameter
/// order into `grad` (length must equal the parameter count).
///
/// # Safety
/// `model` must be a live handle; `x` must hold `x_len` values, `grad`
/// `grad_len` values; `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_per_sample_gradient(
    model: *const DpModel,
    x: *const f64,
    x_len: usize,
    label: u8,
    out_loss: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(x, x_len, "x")?;
        check_len("grad", grad_len, m.inner.param_count())?;
        let loss_dst = out(out_loss, "out_loss")?;
        let dst = slice_mut(grad, grad_len, "grad")?;
        let (loss, g) = m.inner.per_sample_gradient(x, label)?;
        for (d, s) in dst.iter_mut().zip(g.values()) {
            *d = s;
        }
        *loss_dst = loss;
        Ok(())
    })
}

/// Probability of label 1 for each of `rows` samples in `xs` (row-major).
///
/// # Safety
/// `model` must be a live handle; `xs` must hold `rows · input_dim` values
/// and `out_probs` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn dpadam_model_predict(
    model: *const DpModel,
    xs: *const f64,
    rows: usize,
    out_probs: *mut f64,
) -> DpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dim = m.inner.input_dim();
        let data = slice(xs, rows * dim, "xs")?;
        let dst = slice_mut(out_probs, rows, "out_probs")?;
        let t = Tensor::new(vec![rows, dim], data.to_vec())?;
        dst.copy_from_slice(&m.inner.predict_proba(&t)?);
        Ok(())
    })
}

/// # Safety
/// `out_ledger` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_ledger_new(out_ledger: *mut *mut DpLedger) -> DpStatus {
    guard(|| {
        let dst = out(out_ledger, "out_ledger")?;
        *dst = Box::into_raw(Box::new(DpLedger {
            inner: PrivacyLedger::new(),
        }));
        Ok(())
    })
}

/// Releases a ledger; NULL is ignored.
///
/// # Safety
/// `ledger` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpadam_ledger_free(ledger: *mut DpLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// Charges one step with noise multiplier `sigma` at sampling rate `q`.
///
/// # Safety
/// `ledger` must be a live handle, not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn dpadam_ledger_record(
    ledger: *mut DpLedger,
    sigma: f64,
    q: f64,
) -> DpStatus {
    guard(|| {
        let l = ledger.as_mut().ok_or_else(|| null("ledger"))?;
        l.inner.record(sigma, q)?;
        Ok(())
    })
}

/// # Safety
/// `ledger` must be a live handle; `out_steps` writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_ledger_steps(
    ledger: *const DpLedger,
    out_steps: *mut u64,
) -> DpStatus {
    guard(|| {
        let l = ledger.as_ref().ok_or_else(|| null("ledger"))?;
        *out(out_steps, "out_steps")? = l.inner.step_count();
        Ok(())
    })
}

/// ε spent so far at `delta`, with the minimizing order.
///
/// # Safety
/// `ledger` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_ledger_epsilon(
    ledger: *const DpLedger,
    delta: f64,
    out_epsilon: *mut f64,
    out_alpha: *mut f64,
) -> DpStatus {
    guard(|| {
        let l = ledger.as_ref().ok_or_else(|| null("ledger"))?;
        let eps_dst = out(out_epsilon, "out_epsilon")?;
        let alpha_dst = out(out_alpha, "out_alpha")?;
        let spent = l.inner.spent(delta)?;
        *eps_dst = spent.epsilon;
        *alpha_dst = spent.optimal_alpha;
        Ok(())
    })
}

/// ε after `steps` invocations of the subsampled Gaussian mechanism.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_epsilon_for(
    sigma: f64,
    q: f64,
    steps: u64,
    delta: f64,
    out_epsilon: *mut f64,
    out_alpha: *mut f64,
) -> DpStatus {
    guard(|| {
        let eps_dst = out(out_epsilon, "out_epsilon")?;
        let alpha_dst = out(out_alpha, "out_alpha")?;
        let spent = epsilon_for(&MechanismSpec::new(sigma, q)?, steps, delta)?;
        *eps_dst = spent.epsilon;
        *alpha_dst = spent.optimal_alpha;
        Ok(())
    })
}

/// Smallest σ (relative tolerance 1e-3) meeting `target_eps`.
///
/// # Safety
/// `out_sigma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_calibrate_sigma(
    target_eps: f64,
    delta: f64,
    q: f64,
    steps: u64,
    out_sigma: *mut f64,
) -> DpStatus {
    guard(|| {
        let dst = out(out_sigma, "out_sigma")?;
        *dst = calibrate_sigma(target_eps, delta, q, steps)?;
        Ok(())
    })
}

/// # Safety
/// `out_sigma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpadam_classic_gaussian_sigma(
    epsilon: f64,
    delta: f64,
    sensitivity: f64,
    out_sigma: *mut f64,
) -> DpStatus {
    guard(|| {
        let dst = out(out_sigma, "out_sigma")?;
        *dst = classic_gaussian_sigma(epsilon, delta, sensitivity)?;
        Ok(())
    })
}

/// Scales `g` in place to global L2 norm at most `bound`.
///
/// # Safety
/// `g` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dpadam_clip_in_place(g: *mut f64, len: usize, bound: f64) -> DpStatus {
    guard(|| {
        let spec = ClipSpec::new(bound)?;
        let buf = slice_mut(g, len, "g")?;
        let set = GradientSet::new(vec![Tensor::vector(buf.to_vec())]);
        let clipped = clip_gradient(&set, &spec)?;
        buf.copy_from_slice(clipped.tensors()[0].data());
        Ok(())
    })
}
