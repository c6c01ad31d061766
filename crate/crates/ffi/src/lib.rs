//! C ABI for loramerge.
//!
//! Objects cross the boundary as opaque handles created by `lm_*_load` /
//! `lm_merge` and released with the matching `lm_*_free`. Every fallible call
//! returns an [`LmStatus`]; on failure a description is available from
//! [`lm_last_error_message`] until the next failing call on the same thread.
//! Matrices are exposed row-major as `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use loramerge::adapters::{load_collection, read_collection, save_collection, AdapterCollection, LayerAdapters};
use loramerge::linalg::effective_rank;
use loramerge::mergers::{merge, MergeConfig};
use loramerge::{ContainerError, Error, Matrix};

/// Status codes. Values match the library's error codes.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    NullPointer = 1,
    NonFinite = 2,
    Shape = 3,
    ZeroSpectrum = 4,
    UndefinedMisalignment = 5,
    OffSimplex = 6,
    InvalidDistribution = 7,
    Invalid = 8,
    Divergence = 9,
    BadMagic = 10,
    Truncated = 11,
    PayloadSizeMismatch = 12,
    DuplicateKey = 13,
    BadHeader = 14,
    InconsistentTasks = 15,
    Io = 20,
    Json = 21,
    Csv = 22,
    Utf8 = 30,
    OutOfRange = 31,
    Panic = 99,
}

impl From<&Error> for LmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::NonFinite(_) => LmStatus::NonFinite,
            Error::Shape(_) => LmStatus::Shape,
            Error::ZeroSpectrum => LmStatus::ZeroSpectrum,
            Error::UndefinedMisalignment => LmStatus::UndefinedMisalignment,
            Error::OffSimplex(_) => LmStatus::OffSimplex,
            Error::InvalidDistribution(_) => LmStatus::InvalidDistribution,
            Error::Invalid(_) => LmStatus::Invalid,
            Error::Divergence(_) => LmStatus::Divergence,
            Error::Container(c) => match c {
                ContainerError::BadMagic => LmStatus::BadMagic,
                ContainerError::Truncated(_) => LmStatus::Truncated,
                ContainerError::PayloadSizeMismatch { .. } => LmStatus::PayloadSizeMismatch,
                ContainerError::DuplicateKey(_) => LmStatus::DuplicateKey,
                ContainerError::BadHeader(_) => LmStatus::BadHeader,
                ContainerError::InconsistentTasks(_) => LmStatus::InconsistentTasks,
            },
            Error::Io(_) => LmStatus::Io,
            Error::Json(_) => LmStatus::Json,
            Error::Csv(_) => LmStatus::Csv,
        }
    }
}

/// A loaded adapter collection.
pub struct LmCollection {
    inner: AdapterCollection,
}

/// The result of a merge: one dense weight matrix per layer.
pub struct LmMerged {
    layer_ids: Vec<String>,
    weights: Vec<Matrix>,
    config_json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(LmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(LmStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LmStatus::Utf8, format!("{name} is not valid UTF-8")))
}

fn put<T>(out: *mut *mut T, value: T) {
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an LMK1 container from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_collection_load(path: *const c_char, out: *mut *mut LmCollection) -> LmStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = c_str(path, "path")?;
        put(out, LmCollection {
            inner: load_collection(Path::new(path))?,
        });
        Ok(())
    })
}

/// Parses an LMK1 container from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lm_collection_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut LmCollection,
) -> LmStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(data, "data")?;
        let bytes = std::slice::from_raw_parts(data, len);
        put(out, LmCollection {
            inner: read_collection(bytes)?,
        });
        Ok(())
    })
}

/// Number of tasks, or 0 for a null handle.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_collection_num_tasks(c: *const LmCollection) -> usize {
    c.as_ref().map_or(0, |c| c.inner.num_tasks())
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_collection_num_layers(c: *const LmCollection) -> usize {
    c.as_ref().map_or(0, |c| c.inner.num_layers())
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_collection_free(c: *mut LmCollection) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Merges every task in `c`. `config_json` is a merge configuration such as
/// `{"method": "ties", "lambda": 1.0}`; omitted parameters take their defaults.
///
/// # Safety
/// `c` must be a live handle, `config_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_merge(
    c: *const LmCollection,
    config_json: *const c_char,
    out: *mut *mut LmMerged,
) -> LmStatus {
    guard(|| {
        non_null(c, "collection")?;
        non_null(out, "out")?;
        let cfg: MergeConfig = serde_json::from_str(c_str(config_json, "config_json")?).map_err(Error::from)?;
        let coll = &(*c).inner;
        let result = merge(coll, &cfg)?;
        let json = serde_json::to_string(&result.config).map_err(Error::from)?;
        put(out, LmMerged {
            layer_ids: coll.layer_ids.clone(),
            weights: result.weights,
            config_json: CString::new(json).expect("JSON has no NUL"),
        });
        Ok(())
    })
}

/// Number of layers in a merge result, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_num_layers(m: *const LmMerged) -> usize {
    m.as_ref().map_or(0, |m| m.weights.len())
}

/// Shape of layer `layer`.
///
/// # Safety
/// `m` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_shape(m: *const LmMerged, layer: usize, rows: *mut usize, cols: *mut usize) -> LmStatus {
    guard(|| {
        non_null(m, "merged")?;
        non_null(rows, "rows")?;
        non_null(cols, "cols")?;
        let w = layer_of(&*m, layer)?;
        *rows = w.rows();
        *cols = w.cols();
        Ok(())
    })
}

/// Row-major weights of layer `layer`; `*data` borrows from `m` and is valid
/// until `m` is freed.
///
/// # Safety
/// `m` must be a live handle; `data` and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_data(
    m: *const LmMerged,
    layer: usize,
    data: *mut *const f64,
    len: *mut usize,
) -> LmStatus {
    guard(|| {
        non_null(m, "merged")?;
        non_null(data, "data")?;
        non_null(len, "len")?;
        let w = layer_of(&*m, layer)?;
        *data = w.data().as_ptr();
        *len = w.data().len();
        Ok(())
    })
}

/// The merge configuration with defaults filled in, as JSON. Borrowed from
/// `m`; null for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_config_json(m: *const LmMerged) -> *const c_char {
    m.as_ref().map_or(ptr::null(), |m| m.config_json.as_ptr())
}

/// Writes the merged weights as a zero-task LMK1 container (f32 payload).
///
/// # Safety
/// `m` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_save(m: *const LmMerged, path: *const c_char) -> LmStatus {
    guard(|| {
        non_null(m, "merged")?;
        let path = c_str(path, "path")?;
        let m = &*m;
        let layers = m
            .weights
            .iter()
            .map(|w| LayerAdapters {
                base: w.clone(),
                adapters: Vec::new(),
            })
            .collect();
        let coll = AdapterCollection::new(m.layer_ids.clone(), Vec::new(), layers)?;
        save_collection(&coll, Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_merged_free(m: *mut LmMerged) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Effective rank `exp(H(p))`, `p_i = σ_i² / Σσ²`, of a singular-value list.
///
/// # Safety
/// `sigma` must point to `len` readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_effective_rank(sigma: *const f64, len: usize, out: *mut f64) -> LmStatus {
    guard(|| {
        non_null(sigma, "sigma")?;
        non_null(out, "out")?;
        *out = effective_rank(std::slice::from_raw_parts(sigma, len))?;
        Ok(())
    })
}

fn layer_of(m: &LmMerged, layer: usize) -> Result<&Matrix, Failure> {
    m.weights.get(layer).ok_or_else(|| {
        Failure(
            LmStatus::OutOfRange,
            format!("layer {layer} out of range ({} layers)", m.weights.len()),
        )
    })
}
