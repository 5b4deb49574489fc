//! C ABI over the evaluation harness.
//!
//! Datasets, detection sets and timelines are opaque heap handles created
//! by `*_load` / `sap_simulate_constant` and released with the matching
//! `*_free`. Every fallible call returns a status code (`SAP_STATUS_OK` on
//! success); the message of the most recent failure on the calling thread
//! is available from `sap_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use streamap::dataset::Dataset;
use streamap::detection::{group_by_image, load_results, DetectionMap};
use streamap::eval::{offline_ap, streaming_ap, EvalConfig, EvalResult};
use streamap::geometry::BBox;
use streamap::stream::{simulate_dataset, LatencyModel, PredictionTimeline, SchedulePolicy, StreamConfig};
use streamap::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SapStatus {
    Ok = 0,
    /// Unreadable or malformed input, or an invalid argument.
    Malformed = 2,
    /// Referential-integrity violation in the inputs.
    Integrity = 3,
    /// Internal invariant failure.
    Internal = 4,
    /// A required pointer argument was null.
    NullPointer = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Values for the `policy` argument of `sap_simulate_constant`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SapPolicy {
    LatestBlocking = 0,
    Queue = 1,
}

/// AP summary on a 0–100 scale; -1 marks strata without ground truth.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SapApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

/// Box in `[x, y, width, height]` form.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SapBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub struct SapDataset(Dataset);
pub struct SapDetections {
    map: DetectionMap,
    count: usize,
}
pub struct SapTimeline(PredictionTimeline);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SapStatus {
    match e.exit_code() {
        3 => SapStatus::Integrity,
        4 => SapStatus::Internal,
        _ => SapStatus::Malformed,
    }
}

enum Failure {
    Error(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SapStatus::Ok,
        Ok(Err(Failure::Error(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            SapStatus::NullPointer
        }
        Err(_) => {
            set_error("panic inside streamap".into());
            SapStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Error(Error::InvalidArgument("path is not valid UTF-8".into())))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

fn summary(r: &EvalResult) -> SapApSummary {
    SapApSummary {
        ap: r.ap,
        ap50: r.ap50,
        ap75: r.ap75,
        ap_small: r.ap_small,
        ap_medium: r.ap_medium,
        ap_large: r.ap_large,
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a COCO ground-truth file; frame timestamps use `fps`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sap_dataset_load(path: *const c_char, fps: f64, out: *mut *mut SapDataset) -> SapStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let d = Dataset::load_coco_with_fps(path, fps)?;
        write_out(out, Box::into_raw(Box::new(SapDataset(d))), "out")
    })
}

/// # Safety
/// `d` must come from `sap_dataset_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sap_dataset_free(d: *mut SapDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sap_dataset_image_count(d: *const SapDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.images.len())
}

/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sap_dataset_annotation_count(d: *const SapDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.annotations.len())
}

/// Loads a COCO results array.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sap_detections_load(path: *const c_char, out: *mut *mut SapDetections) -> SapStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let dets = load_results(path)?;
        let count = dets.len();
        let h = SapDetections {
            map: group_by_image(dets),
            count,
        };
        write_out(out, Box::into_raw(Box::new(h)), "out")
    })
}

/// # Safety
/// `d` must come from `sap_detections_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sap_detections_free(d: *mut SapDetections) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// # Safety
/// `d` must be null or a live detections handle.
#[no_mangle]
pub unsafe extern "C" fn sap_detections_count(d: *const SapDetections) -> usize {
    d.as_ref().map_or(0, |d| d.count)
}

/// Simulates every sequence of `gt` with a constant latency in seconds;
/// `policy` is a `SapPolicy` value.
///
/// # Safety
/// `gt` and `dets` must be live handles and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sap_simulate_constant(
    gt: *const SapDataset,
    dets: *const SapDetections,
    latency_seconds: f64,
    fps: f64,
    policy: i32,
    out: *mut *mut SapTimeline,
) -> SapStatus {
    guard(|| {
        let gt = handle(gt, "gt")?;
        let dets = handle(dets, "dets")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = StreamConfig {
            fps,
            frame_count: gt.0.images.len().max(1),
            policy: match policy {
                p if p == SapPolicy::LatestBlocking as i32 => SchedulePolicy::LatestBlocking,
                p if p == SapPolicy::Queue as i32 => SchedulePolicy::EveryFrameQueue,
                p => return Err(Error::InvalidArgument(format!("unknown policy {p}")).into()),
            },
        };
        let t = simulate_dataset(&gt.0, &dets.map, &LatencyModel::Constant(latency_seconds), &cfg)?;
        write_out(out, Box::into_raw(Box::new(SapTimeline(t))), "out")
    })
}

/// Loads a timeline dump written by `sap_timeline_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sap_timeline_load(path: *const c_char, out: *mut *mut SapTimeline) -> SapStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let t = PredictionTimeline::load(path)?;
        write_out(out, Box::into_raw(Box::new(SapTimeline(t))), "out")
    })
}

/// # Safety
/// `t` must be a live timeline handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sap_timeline_save(t: *const SapTimeline, path: *const c_char) -> SapStatus {
    guard(|| {
        let t = handle(t, "timeline")?;
        let path = path_arg(path)?;
        t.0.save(path)?;
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a live timeline handle.
#[no_mangle]
pub unsafe extern "C" fn sap_timeline_len(t: *const SapTimeline) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `t` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sap_timeline_free(t: *mut SapTimeline) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Offline COCO AP with the default configuration.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sap_evaluate_offline(
    gt: *const SapDataset,
    dets: *const SapDetections,
    out: *mut SapApSummary,
) -> SapStatus {
    guard(|| {
        let gt = handle(gt, "gt")?;
        let dets = handle(dets, "dets")?;
        let r = offline_ap(&gt.0, &dets.map, &EvalConfig::default())?;
        write_out(out, summary(&r), "out")
    })
}

/// Streaming AP with the default configuration.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sap_evaluate_streaming(
    gt: *const SapDataset,
    timeline: *const SapTimeline,
    out: *mut SapApSummary,
) -> SapStatus {
    guard(|| {
        let gt = handle(gt, "gt")?;
        let t = handle(timeline, "timeline")?;
        let r = streaming_ap(&gt.0, &t.0, &EvalConfig::default())?;
        write_out(out, summary(&r), "out")
    })
}

fn bbox(b: SapBox) -> Result<BBox, Failure> {
    Ok(BBox::try_new(b.x, b.y, b.w, b.h)?)
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sap_iou(a: SapBox, b: SapBox, out: *mut f64) -> SapStatus {
    guard(|| write_out(out, bbox(a)?.iou(&bbox(b)?), "out"))
}

/// Fails with `Malformed` when both boxes have zero area.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sap_giou(a: SapBox, b: SapBox, out: *mut f64) -> SapStatus {
    guard(|| {
        let v = bbox(a)?.giou(&bbox(b)?)?;
        write_out(out, v, "out")
    })
}
