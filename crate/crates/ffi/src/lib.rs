//! C ABI for `rankloss`.
//!
//! Networks and datasets are opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call
//! returns an [`RlStatus`]; on failure a message is kept per thread and
//! can be read with [`rl_last_error`]. Strings returned through out
//! parameters are released with [`rl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rankloss::constraints::max_compressive_rank;
use rankloss::formats::{load_dataset, load_model, model_from_json, model_to_json};
use rankloss::linalg::{svd, truncate, Matrix};
use rankloss::optimizer::{compress_network, CompressionConfig};
use rankloss::report::{evaluate, report_to_json};
use rankloss::{Dataset, Error, Network};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidRank = 3,
    Io = 4,
    Format = 5,
    Convergence = 6,
    State = 7,
    Calibration = 8,
    Panic = 9,
}

/// A feed-forward network.
pub struct RlNetwork(Network);

/// A labelled or regression dataset.
pub struct RlDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RlStatus {
    match e {
        Error::InvalidInput(_) | Error::Divergence { .. } => RlStatus::InvalidInput,
        Error::InvalidRank { .. } => RlStatus::InvalidRank,
        Error::Convergence { .. } => RlStatus::Convergence,
        Error::State { .. } => RlStatus::State,
        Error::CalibrationUnavailable { .. } => RlStatus::Calibration,
        Error::Io { .. } => RlStatus::Io,
        Error::Format { .. } => RlStatus::Format,
        Error::Layer { source, .. } => status_of(source),
    }
}

struct Failure(RlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RlStatus::InvalidInput, msg.into())
}

/// Run `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RlStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(RlStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RlStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_error(msg);
            status
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("output contains a nul byte"))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a model JSON file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out_net` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_network_load(
    path: *const c_char,
    out_net: *mut *mut RlNetwork,
) -> RlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_net, "out_net")?;
        *slot = Box::into_raw(Box::new(RlNetwork(load_model(Path::new(path))?)));
        Ok(())
    })
}

/// Parse a model from JSON text.
///
/// # Safety
/// `json` must be a nul-terminated string and `out_net` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_network_from_json(
    json: *const c_char,
    out_net: *mut *mut RlNetwork,
) -> RlStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let slot = out(out_net, "out_net")?;
        *slot = Box::into_raw(Box::new(RlNetwork(model_from_json(text)?)));
        Ok(())
    })
}

/// Serialize a model to JSON; free the result with [`rl_string_free`].
///
/// # Safety
/// `net` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_network_to_json(
    net: *const RlNetwork,
    out_json: *mut *mut c_char,
) -> RlStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let slot = out(out_json, "out_json")?;
        *slot = c_string(model_to_json(&net.0))?;
        Ok(())
    })
}

/// Number of layers and stored weight parameters (biases excluded).
///
/// # Safety
/// `net` must be a live handle; either out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rl_network_shape(
    net: *const RlNetwork,
    out_layers: *mut usize,
    out_params: *mut usize,
) -> RlStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        if let Some(l) = out_layers.as_mut() {
            *l = net.num_layers();
        }
        if let Some(p) = out_params.as_mut() {
            *p = net.param_count();
        }
        Ok(())
    })
}

/// Release a network handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rl_network_free(net: *mut RlNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Load a dataset CSV file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out_data` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_dataset_load(
    path: *const c_char,
    out_data: *mut *mut RlDataset,
) -> RlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_data, "out_data")?;
        *slot = Box::into_raw(Box::new(RlDataset(load_dataset(Path::new(path))?)));
        Ok(())
    })
}

/// Number of samples in a dataset.
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rl_dataset_len(data: *const RlDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Release a dataset handle. Null is ignored.
///
/// # Safety
/// `data` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rl_dataset_free(data: *mut RlDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Mean loss and top-1 accuracy. Accuracy is NaN for regression data.
///
/// # Safety
/// Handles must be live; either out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rl_evaluate(
    net: *const RlNetwork,
    data: *const RlDataset,
    out_loss: *mut f64,
    out_top1: *mut f64,
) -> RlStatus {
    guard(|| {
        let m = evaluate(&handle(net, "net")?.0, &handle(data, "data")?.0)?;
        if let Some(l) = out_loss.as_mut() {
            *l = m.loss;
        }
        if let Some(t) = out_top1.as_mut() {
            *t = m.top1.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Compress `net` against calibration `data`.
///
/// `config_json` holds a compression config object; null means defaults.
/// On success a new network handle and the report JSON are returned; the
/// input network is left untouched.
///
/// # Safety
/// Handles must be live, `config_json` null or nul-terminated, and the
/// out pointers valid. `out_report` may be null.
#[no_mangle]
pub unsafe extern "C" fn rl_compress(
    net: *const RlNetwork,
    data: *const RlDataset,
    config_json: *const c_char,
    out_net: *mut *mut RlNetwork,
    out_report: *mut *mut c_char,
) -> RlStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        let data = &handle(data, "data")?.0;
        let config: CompressionConfig = if config_json.is_null() {
            CompressionConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| invalid(format!("config json: {e}")))?
        };
        let slot = out(out_net, "out_net")?;
        let (compressed, report) = compress_network(net, data, &config)?;
        if let Some(r) = out_report.as_mut() {
            *r = c_string(report_to_json(&report))?;
        }
        *slot = Box::into_raw(Box::new(RlNetwork(compressed)));
        Ok(())
    })
}

/// Largest rank `k` with `k (rows + cols) < rows cols`; 0 if none.
#[no_mangle]
pub extern "C" fn rl_max_compressive_rank(rows: usize, cols: usize) -> usize {
    max_compressive_rank(rows, cols)
}

/// Rank-`rank` truncated SVD of a row-major `rows × cols` matrix.
///
/// Writes `l` (`rows × rank`, singular values folded in) and `r`
/// (`cols × rank`), both row-major, so the approximation is `l rᵀ`.
///
/// # Safety
/// `weights` must point to `rows * cols` values, `out_l` to room for
/// `rows * rank` and `out_r` to room for `cols * rank`.
#[no_mangle]
pub unsafe extern "C" fn rl_factorize(
    weights: *const f64,
    rows: usize,
    cols: usize,
    rank: usize,
    out_l: *mut f64,
    out_r: *mut f64,
) -> RlStatus {
    guard(|| {
        if weights.is_null() {
            return Err(null("weights"));
        }
        if out_l.is_null() || out_r.is_null() {
            return Err(null("output buffer"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("matrix size overflows"))?;
        let w = Matrix::new(
            rows,
            cols,
            std::slice::from_raw_parts(weights, len).to_vec(),
        )?;
        let f = truncate(&svd(&w)?, rank)?;
        std::slice::from_raw_parts_mut(out_l, rows * rank).copy_from_slice(f.l.as_slice());
        std::slice::from_raw_parts_mut(out_r, cols * rank).copy_from_slice(f.r.as_slice());
        Ok(())
    })
}
