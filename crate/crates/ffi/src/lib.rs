//! C ABI over `kqkit`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`KqStatus`]; on failure the message is available from
//! [`kq_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kqkit::{Error, LayerMetrics, RepresentationSet};
use libc::{c_char, size_t};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KqStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    InvalidArgument = 4,
    Degenerate = 5,
    Selection = 6,
    UnstableAri = 7,
    Panic = 8,
}

/// Opaque handle to a validated per-layer representation set.
pub struct KqRepresentationSet(RepresentationSet);

/// Opaque handle to the metrics computed for one layer.
pub struct KqLayerMetrics(LayerMetrics);

/// Scalar view of a [`KqLayerMetrics`] handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KqMetricValues {
    pub layer: u32,
    pub s: f64,
    pub i: f64,
    pub e: f64,
    pub q: f64,
    pub avg_dpw: f64,
    pub avg_dpb: f64,
    pub min_dpw: f64,
    pub min_dist_b: f64,
    pub avg_norm: f64,
    pub avg_svde: f64,
    pub global_embed_dim: u64,
    pub diagnostic_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> KqStatus {
    match err {
        Error::Io { .. } => KqStatus::Io,
        Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_)
        | Error::InvalidLabels(_)
        | Error::Json(_) => KqStatus::Format,
        Error::NoWithinClassPairs
        | Error::TooFewClasses(_)
        | Error::DimensionTooSmall(_)
        | Error::AllZeroRepresentations => KqStatus::Degenerate,
        Error::Selection(_) => KqStatus::Selection,
        _ => KqStatus::InvalidArgument,
    }
}

fn fail(status: KqStatus, message: impl Into<String>) -> KqStatus {
    set_last_error(message.into());
    status
}

fn from_error(err: Error) -> KqStatus {
    let status = status_of(&err);
    fail(status, err.to_string())
}

/// Runs `body`, converting panics into [`KqStatus::Panic`].
fn guard(body: impl FnOnce() -> KqStatus) -> KqStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(KqStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, KqStatus> {
    if path.is_null() {
        return Err(fail(KqStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(KqStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message of the last failing call on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a set from `n * d` row-major floats and `n` labels in `[0, classes)`.
///
/// # Safety
/// `data` must point to `n * d` floats, `labels` to `n` integers and `out`
/// to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn kq_set_new(
    layer: u32,
    data: *const f32,
    labels: *const u32,
    n: u64,
    d: u64,
    classes: u32,
    out: *mut *mut KqRepresentationSet,
) -> KqStatus {
    guard(|| {
        if data.is_null() || labels.is_null() || out.is_null() {
            return fail(KqStatus::NullPointer, "null argument to kq_set_new");
        }
        let (Ok(n), Ok(d)) = (usize::try_from(n), usize::try_from(d)) else {
            return fail(KqStatus::InvalidArgument, "size does not fit in usize");
        };
        let Some(len) = n.checked_mul(d) else {
            return fail(KqStatus::InvalidArgument, "n * d overflows");
        };
        let data = std::slice::from_raw_parts(data, len).to_vec();
        let labels = std::slice::from_raw_parts(labels, n).to_vec();
        match RepresentationSet::new(layer, d, classes, labels, data) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(KqRepresentationSet(set)));
                KqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Reads a binary dump from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kq_set_read(
    path: *const c_char,
    out: *mut *mut KqRepresentationSet,
) -> KqStatus {
    guard(|| {
        if out.is_null() {
            return fail(KqStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match kqkit::read_dump(path) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(KqRepresentationSet(set)));
                KqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Writes `set` as a binary dump to `path`.
///
/// # Safety
/// `set` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kq_set_write(
    set: *const KqRepresentationSet,
    path: *const c_char,
) -> KqStatus {
    guard(|| {
        let Some(set) = set.as_ref() else {
            return fail(KqStatus::NullPointer, "set is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match kqkit::write_dump(&set.0, path) {
            Ok(()) => KqStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Releases a set handle. Null is ignored.
///
/// # Safety
/// `set` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn kq_set_free(set: *mut KqRepresentationSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of samples, or 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kq_set_len(set: *const KqRepresentationSet) -> u64 {
    set.as_ref().map_or(0, |s| s.0.len() as u64)
}

/// Feature dimension, or 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kq_set_dim(set: *const KqRepresentationSet) -> u64 {
    set.as_ref().map_or(0, |s| s.0.dim() as u64)
}

/// Class count, or 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kq_set_classes(set: *const KqRepresentationSet) -> u32 {
    set.as_ref().map_or(0, |s| s.0.classes())
}

/// Layer index, or 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kq_set_layer(set: *const KqRepresentationSet) -> u32 {
    set.as_ref().map_or(0, |s| s.0.layer_index())
}

/// Computes all metrics for one layer. `cap == 0` analyzes every sample;
/// otherwise a stratified subsample of at most `cap` rows drawn with `seed`.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kq_analyze(
    set: *const KqRepresentationSet,
    cap: u64,
    seed: u64,
    out: *mut *mut KqLayerMetrics,
) -> KqStatus {
    guard(|| {
        let Some(set) = set.as_ref() else {
            return fail(KqStatus::NullPointer, "set is null");
        };
        if out.is_null() {
            return fail(KqStatus::NullPointer, "out is null");
        }
        let cap = (cap != 0).then(|| usize::try_from(cap).unwrap_or(usize::MAX));
        match kqkit::analyze_layer(&set.0, cap, seed) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(KqLayerMetrics(m)));
                KqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a metrics handle. Null is ignored.
///
/// # Safety
/// `metrics` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn kq_metrics_free(metrics: *mut KqLayerMetrics) {
    if !metrics.is_null() {
        drop(Box::from_raw(metrics));
    }
}

/// Copies the scalar metrics into `out`.
///
/// # Safety
/// `metrics` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kq_metrics_values(
    metrics: *const KqLayerMetrics,
    out: *mut KqMetricValues,
) -> KqStatus {
    let (Some(m), false) = (metrics.as_ref(), out.is_null()) else {
        return fail(KqStatus::NullPointer, "null argument to kq_metrics_values");
    };
    let m = &m.0;
    *out = KqMetricValues {
        layer: m.layer,
        s: m.s,
        i: m.i,
        e: m.e,
        q: m.q,
        avg_dpw: m.pair.avg_dpw,
        avg_dpb: m.pair.avg_dpb,
        min_dpw: m.pair.min_dpw,
        min_dist_b: m.pair.min_dist_b,
        avg_norm: m.pair.avg_norm,
        avg_svde: m.avg_svde,
        global_embed_dim: m.global_embed_dim as u64,
        diagnostic_count: m.diagnostics.len() as u64,
    };
    KqStatus::Ok
}

/// Serializes the metrics as a JSON object. Free the result with
/// [`kq_string_free`].
///
/// # Safety
/// `metrics` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kq_metrics_to_json(
    metrics: *const KqLayerMetrics,
    out: *mut *mut c_char,
) -> KqStatus {
    guard(|| {
        let (Some(m), false) = (metrics.as_ref(), out.is_null()) else {
            return fail(KqStatus::NullPointer, "null argument to kq_metrics_to_json");
        };
        let json = match serde_json::to_string(&m.0) {
            Ok(j) => j,
            Err(e) => return from_error(e.into()),
        };
        match CString::new(json) {
            Ok(c) => {
                *out = c.into_raw();
                KqStatus::Ok
            }
            Err(e) => fail(KqStatus::Format, e.to_string()),
        }
    })
}

/// Packing radius for `n` points at minimum distance `dmin` in `dim` dimensions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kq_packing_radius(n: u64, dmin: f64, dim: u64, out: *mut f64) -> KqStatus {
    guard(|| {
        if out.is_null() {
            return fail(KqStatus::NullPointer, "out is null");
        }
        let (Ok(n), Ok(dim)) = (usize::try_from(n), usize::try_from(dim)) else {
            return fail(KqStatus::InvalidArgument, "size does not fit in usize");
        };
        match kqkit::packing_radius(n, dmin, dim) {
            Ok(v) => {
                *out = v;
                KqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Combined score `s + sqrt(i * e)`.
#[no_mangle]
pub extern "C" fn kq_knowledge_quality(s: f64, i: f64, e: f64) -> f64 {
    kqkit::knowledge_quality(s, i, e)
}

/// Selects the `k` layers with the highest `Q` among `count` metrics
/// handles and writes them in ascending order to `out_layers`.
///
/// # Safety
/// `metrics` must point to `count` live handles and `out_layers` to `k`
/// writable integers.
#[no_mangle]
pub unsafe extern "C" fn kq_select_topk(
    metrics: *const *const KqLayerMetrics,
    count: size_t,
    k: size_t,
    out_layers: *mut u32,
) -> KqStatus {
    guard(|| {
        if metrics.is_null() || out_layers.is_null() {
            return fail(KqStatus::NullPointer, "null argument to kq_select_topk");
        }
        let handles = std::slice::from_raw_parts(metrics, count);
        let mut all = Vec::with_capacity(count);
        for h in handles {
            match h.as_ref() {
                Some(m) => all.push(m.0.clone()),
                None => return fail(KqStatus::NullPointer, "null metrics handle"),
            }
        }
        match kqkit::select_topk(&all, k) {
            Ok(sel) => {
                let out = std::slice::from_raw_parts_mut(out_layers, k);
                out.copy_from_slice(&sel.selected);
                KqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Relative improvement of `acc_kd1` over `acc_kd2` against a baseline.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kq_ari(
    acc_kd1: f64,
    acc_kd2: f64,
    acc_baseline: f64,
    out: *mut f64,
) -> KqStatus {
    if out.is_null() {
        return fail(KqStatus::NullPointer, "out is null");
    }
    match kqkit::kd::ari(acc_kd1, acc_kd2, acc_baseline) {
        Ok(v) => {
            *out = v;
            KqStatus::Ok
        }
        Err(e) => fail(KqStatus::UnstableAri, e.to_string()),
    }
}
