//! C ABI over the stent tracker.
//!
//! Objects cross the boundary as opaque handles created by `st_*` functions
//! and released by the matching `st_*_free`. Every fallible call returns an
//! [`StStatus`]; on failure [`st_last_error_message`] describes the cause for
//! the calling thread. Panics are caught and reported as `ST_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stent_tracker::cli::RunConfig;
use stent_tracker::eval::{match_predictions, EvalReport};
use stent_tracker::kv::from_kv_str;
use stent_tracker::simulate::{simulate_sequence, SimConfig};
use stent_tracker::track::{track_sequence, Models, Track};
use stent_tracker::{io, Error, Sequence};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidConfig = 4,
    Parse = 5,
    Io = 6,
    DimensionMismatch = 7,
    DegenerateDataset = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// A frame sequence, with ground truth when it was simulated or loaded with one.
pub struct StSequence {
    inner: Sequence,
}

/// Trained object classifier and graph network.
pub struct StModels {
    inner: Models,
}

/// Per-frame stent selections.
pub struct StTrack {
    inner: Track,
}

/// One frame of a track. Coordinates are pixels; fields other than
/// `present` are zero when `present` is 0.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StSelection {
    pub present: i32,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub prob: f64,
}

/// Detection counts and metrics. `mae` and `rmse` are NaN when no landmark matched.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StEvalResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mae: f64,
    pub rmse: f64,
    pub matched_landmarks: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(StStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidConfig { .. } => StStatus::InvalidConfig,
            Error::DimensionMismatch { .. } => StStatus::DimensionMismatch,
            Error::InvalidArgument(_) => StStatus::InvalidArgument,
            Error::DegenerateDataset(_) => StStatus::DegenerateDataset,
            Error::Parse { .. } => StStatus::Parse,
            Error::Io { .. } => StStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            StStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(StStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes NULL or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

/// NULL maps to `None`.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map(Some)
        .map_err(|e| Failure(StStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    unsafe { opt_str(p, what) }?.ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: checked non-NULL; caller provides writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next `st_*` call on the same thread.
#[no_mangle]
pub extern "C" fn st_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Simulates a sequence. `config` holds optional `key=value` lines with
/// simulator keys (`frames`, `noise_sigma`, …) and may be NULL; `seed`
/// replaces the configured seed.
///
/// # Safety
/// `config` is NULL or NUL-terminated; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_sequence_simulate(config: *const c_char, seed: u64, out: *mut *mut StSequence) -> StStatus {
    guard(|| {
        let text = unsafe { opt_str(config, "config") }?.unwrap_or("");
        let mut cfg: SimConfig = from_kv_str(text, "config")?;
        cfg.seed = seed;
        let (seq, _) = simulate_sequence(&cfg)?;
        unsafe { put(out, StSequence { inner: seq }, "out") }
    })
}

/// Loads `frame_*.pgm` (and `ground_truth.jsonl` if present) from `dir`.
///
/// # Safety
/// `dir` is NUL-terminated; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_sequence_load_dir(dir: *const c_char, out: *mut *mut StSequence) -> StStatus {
    guard(|| {
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        let seq = io::read_sequence(&dir)?;
        unsafe { put(out, StSequence { inner: seq }, "out") }
    })
}

/// Writes the sequence in the layout [`st_sequence_load_dir`] reads.
///
/// # Safety
/// `seq` is a live handle; `dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn st_sequence_save_dir(seq: *const StSequence, dir: *const c_char) -> StStatus {
    guard(|| {
        let seq = unsafe { borrow(seq, "seq") }?;
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        Ok(io::write_sequence(&dir, &seq.inner)?)
    })
}

/// # Safety
/// `seq` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_sequence_frame_count(seq: *const StSequence, out: *mut usize) -> StStatus {
    guard(|| {
        let seq = unsafe { borrow(seq, "seq") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = seq.inner.len();
        Ok(())
    })
}

/// # Safety
/// `seq` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_sequence_free(seq: *mut StSequence) {
    unsafe { free(seq) }
}

/// Loads `mlp.txt` and `gcn.txt` from `dir`.
///
/// # Safety
/// `dir` is NUL-terminated; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_models_load(dir: *const c_char, out: *mut *mut StModels) -> StStatus {
    guard(|| {
        let dir = PathBuf::from(unsafe { req_str(dir, "dir") }?);
        let models = io::load_models(&dir)?;
        unsafe { put(out, StModels { inner: models }, "out") }
    })
}

/// # Safety
/// `models` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_models_free(models: *mut StModels) {
    unsafe { free(models) }
}

/// Runs the full tracker. `config` holds optional `key=value` lines with the
/// command-line prefixes (`detect.`, `propose.`, `track.`) and may be NULL.
///
/// # Safety
/// `seq` and `models` are live handles; `config` is NULL or NUL-terminated;
/// `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_track_sequence(
    seq: *const StSequence,
    models: *const StModels,
    config: *const c_char,
    out: *mut *mut StTrack,
) -> StStatus {
    guard(|| {
        let seq = unsafe { borrow(seq, "seq") }?;
        let models = unsafe { borrow(models, "models") }?;
        let lines: Vec<String> = unsafe { opt_str(config, "config") }?
            .unwrap_or("")
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let cfg = RunConfig::resolve(None, &lines)?;
        let track = track_sequence(&seq.inner, &cfg.pipeline, &models.inner)?;
        unsafe { put(out, StTrack { inner: track }, "out") }
    })
}

/// # Safety
/// `track` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_track_len(track: *const StTrack, out: *mut usize) -> StStatus {
    guard(|| {
        let track = unsafe { borrow(track, "track") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = track.inner.len();
        Ok(())
    })
}

/// Selection of frame `t`; `ST_STATUS_OUT_OF_RANGE` past the end.
///
/// # Safety
/// `track` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_track_get(track: *const StTrack, t: usize, out: *mut StSelection) -> StStatus {
    guard(|| {
        let track = unsafe { borrow(track, "track") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let frame = track.inner.frames.get(t).ok_or_else(|| {
            Failure(StStatus::OutOfRange, format!("frame {t} past track length {}", track.inner.len()))
        })?;
        *out = match frame {
            None => StSelection::default(),
            Some(s) => {
                let [a, b] = s.candidate.positions();
                StSelection {
                    present: 1,
                    x0: a.x,
                    y0: a.y,
                    x1: b.x,
                    y1: b.y,
                    prob: s.prob,
                }
            }
        };
        Ok(())
    })
}

/// # Safety
/// `track` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_track_free(track: *mut StTrack) {
    unsafe { free(track) }
}

/// Scores `track` against the ground truth of `seq` at matching `radius` px.
///
/// # Safety
/// `track` and `seq` are live handles; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn st_evaluate(
    track: *const StTrack,
    seq: *const StSequence,
    radius: f64,
    out: *mut StEvalResult,
) -> StStatus {
    guard(|| {
        let track = unsafe { borrow(track, "track") }?;
        let seq = unsafe { borrow(seq, "seq") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let gt = seq
            .inner
            .ground_truth
            .as_ref()
            .ok_or_else(|| Failure(StStatus::InvalidArgument, "sequence has no ground truth".into()))?;
        let report = EvalReport::from_matches(&match_predictions(&track.inner, gt, radius)?, radius);
        let loc = report.localization;
        *out = StEvalResult {
            tp: report.counts.tp,
            fp: report.counts.fp,
            fn_: report.counts.fn_,
            tn: report.counts.tn,
            precision: report.detection.precision,
            recall: report.detection.recall,
            f1: report.detection.f1,
            accuracy: report.detection.accuracy,
            mae: loc.map_or(f64::NAN, |l| l.mae),
            rmse: loc.map_or(f64::NAN, |l| l.rmse),
            matched_landmarks: loc.map_or(0, |l| l.count),
        };
        Ok(())
    })
}
