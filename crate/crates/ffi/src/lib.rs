//! C ABI for flatlab.
//!
//! Every function returns a [`FlatlabStatus`]; on failure the message is
//! available from [`flatlab_last_error`] on the same thread. Handles are
//! opaque and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flatlab::datasets::{Label, LabeledSet, Space};
use flatlab::flatness::relative_flatness;
use flatlab::hessian::{trace_matrix, HeadHessianMode};
use flatlab::net::{checkpoint_from_str, load_checkpoint, split_at, FeatureSplit, Mlp};
use flatlab::numkit::{haar_orthogonal, Matrix, Rng};
use flatlab::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlatlabStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad sizes, indices or configuration.
    Validation = 2,
    /// A numerical routine failed (non-finite values, no convergence).
    Numeric = 3,
    Io = 4,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 5,
    Panic = 6,
}

/// A network loaded from a checkpoint.
pub struct FlatlabModel(Mlp);

/// A labeled sample in input space.
pub struct FlatlabDataset(LabeledSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Status(FlatlabStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn status_of(e: &Error) -> FlatlabStatus {
    match e {
        Error::Io { .. } => FlatlabStatus::Io,
        e if e.is_validation() => FlatlabStatus::Validation,
        _ => FlatlabStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FlatlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlatlabStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FlatlabStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(FlatlabStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Status(FlatlabStatus::Validation, msg.into())
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
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

unsafe fn out_buffer<'a>(
    p: *mut f64,
    capacity: usize,
    needed: usize,
    out_len: *mut usize,
) -> Result<&'a mut [f64], Fail> {
    if !out_len.is_null() {
        *out_len = needed;
    }
    if capacity < needed {
        return Err(Fail::Status(
            FlatlabStatus::BufferTooSmall,
            format!("buffer of {capacity} for {needed} values"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn model<'a>(m: *const FlatlabModel) -> Result<&'a Mlp, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn dataset<'a>(d: *const FlatlabDataset) -> Result<&'a LabeledSet, Fail> {
    d.as_ref().map(|d| &d.0).ok_or_else(|| null("dataset"))
}

fn split(m: &Mlp, layer: usize) -> Result<FeatureSplit, Fail> {
    Ok(split_at(m, if layer == 0 { m.depth() } else { layer })?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn flatlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn flatlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flatlab_model_load(path: *const c_char, out: *mut *mut FlatlabModel) -> FlatlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = cstr(path, "path")?;
        let (m, _) = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(FlatlabModel(m)));
        Ok(())
    })
}

/// Parse a checkpoint from its JSON text.
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn flatlab_model_from_json(json: *const c_char, out: *mut *mut FlatlabModel) -> FlatlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (m, _) = checkpoint_from_str(cstr(json, "json")?)?;
        *out = Box::into_raw(Box::new(FlatlabModel(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from a `flatlab_model_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn flatlab_model_free(m: *mut FlatlabModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of layers, input width and output width.
///
/// # Safety
/// `m` must be a live model; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn flatlab_model_shape(
    m: *const FlatlabModel,
    depth: *mut usize,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> FlatlabStatus {
    guard(|| {
        let m = model(m)?;
        for (p, v) in [(depth, m.depth()), (input_dim, m.input_dim()), (output_dim, m.output_dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Network outputs for `rows` inputs stored row-major in `x`
/// (`rows × input_dim`). Writes `rows × output_dim` values to `out`.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn flatlab_model_forward(
    m: *const FlatlabModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_capacity: usize,
    out_len: *mut usize,
) -> FlatlabStatus {
    guard(|| {
        let m = model(m)?;
        if cols != m.input_dim() {
            return Err(invalid(format!("inputs of width {cols} for a model expecting {}", m.input_dim())));
        }
        let x = slice(x, rows * cols, "x")?;
        let y = m.predict_batch(&Matrix::new(rows, cols, x.to_vec())?)?;
        out_buffer(out, out_capacity, y.as_slice().len(), out_len)?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Dataset with class labels.
///
/// # Safety
/// `x` must hold `rows * cols` values and `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn flatlab_dataset_from_classes(
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const u64,
    out: *mut *mut FlatlabDataset,
) -> FlatlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = slice(x, rows * cols, "x")?;
        let labels = slice(labels, rows, "labels")?
            .iter()
            .map(|&c| usize::try_from(c).map(Label::Class).map_err(|_| invalid("label out of range")))
            .collect::<Result<Vec<_>, _>>()?;
        let d = LabeledSet::new(Matrix::new(rows, cols, x.to_vec())?, labels, Space::Input)?;
        *out = Box::into_raw(Box::new(FlatlabDataset(d)));
        Ok(())
    })
}

/// Dataset with real-valued targets stored row-major (`rows × target_dim`).
///
/// # Safety
/// `x` must hold `rows * cols` values and `targets` `rows * target_dim`.
#[no_mangle]
pub unsafe extern "C" fn flatlab_dataset_from_targets(
    x: *const f64,
    rows: usize,
    cols: usize,
    targets: *const f64,
    target_dim: usize,
    out: *mut *mut FlatlabDataset,
) -> FlatlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if target_dim == 0 {
            return Err(invalid("target_dim is 0"));
        }
        let x = slice(x, rows * cols, "x")?;
        let t = slice(targets, rows * target_dim, "targets")?;
        let labels = t.chunks(target_dim).map(|c| Label::Target(c.to_vec())).collect();
        let d = LabeledSet::new(Matrix::new(rows, cols, x.to_vec())?, labels, Space::Input)?;
        *out = Box::into_raw(Box::new(FlatlabDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `d` must come from a `flatlab_dataset_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn flatlab_dataset_free(d: *mut FlatlabDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// κ_Tr and κ_max of the model split at `layer` (1-based; 0 selects the last
/// layer).
///
/// # Safety
/// Handles must be live; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn flatlab_relative_flatness(
    m: *const FlatlabModel,
    d: *const FlatlabDataset,
    layer: usize,
    kappa_tr: *mut f64,
    kappa_max: *mut f64,
) -> FlatlabStatus {
    guard(|| {
        if kappa_tr.is_null() || kappa_max.is_null() {
            return Err(null("output"));
        }
        let s = split(model(m)?, layer)?;
        let r = relative_flatness(&s, dataset(d)?, HeadHessianMode::best_for(&s), 1)?;
        *kappa_tr = r.kappa_tr;
        *kappa_max = r.kappa_max;
        Ok(())
    })
}

/// The `d × d` matrix `T[s,s'] = Tr(H_{s,s'})` over the `d` neurons of
/// `layer`, row-major.
///
/// # Safety
/// Handles must be live; `out` must hold `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn flatlab_trace_matrix(
    m: *const FlatlabModel,
    d: *const FlatlabDataset,
    layer: usize,
    out: *mut f64,
    out_capacity: usize,
    out_len: *mut usize,
) -> FlatlabStatus {
    guard(|| {
        let s = split(model(m)?, layer)?;
        let t = trace_matrix(&s, dataset(d)?, HeadHessianMode::best_for(&s))?.trace_matrix;
        out_buffer(out, out_capacity, t.as_slice().len(), out_len)?.copy_from_slice(t.as_slice());
        Ok(())
    })
}

/// A Haar-distributed `m × m` orthogonal matrix, row-major, from `seed`.
///
/// # Safety
/// `out` must hold `out_capacity` values.
#[no_mangle]
pub unsafe extern "C" fn flatlab_haar_sample(
    m: usize,
    seed: u64,
    out: *mut f64,
    out_capacity: usize,
    out_len: *mut usize,
) -> FlatlabStatus {
    guard(|| {
        let o = haar_orthogonal(m, &mut Rng::new(seed, 0))?;
        out_buffer(out, out_capacity, o.as_slice().len(), out_len)?.copy_from_slice(o.as_slice());
        Ok(())
    })
}
