// SPDX-License-Identifier: Apache-2.0

//! C ABI over the frequency controller, decode router, latency predictor and
//! scenario runner.
//!
//! Every fallible function returns a [`PdsimStatus`]; on failure the message
//! is available from [`pdsim_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function. Strings
//! returned through `char **` are released with [`pdsim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pdsim::calibration::Calibration;
use pdsim::controller::{select_frequency, ControllerConfig};
use pdsim::router::{route_decode, Delta, RouteConfig, RoutePolicy, RouterState};
use pdsim::scenario::{Scenario, ScenarioConfig};
use pdsim::types::{
    FrequencyLadder, FrequencyMHz, InstanceSnapshot, PhaseKind, Request, SloProfile,
};
use pdsim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Coverage = 4,
    Calibration = 5,
    Io = 6,
    Scenario = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdsimPhase {
    Prefill = 0,
    Decode = 1,
}

/// Mirror of the controller/router input for one instance.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PdsimSnapshot {
    pub instance_id: u64,
    pub phase: PdsimPhase,
    pub queue_len: u64,
    pub max_wait_ms: f64,
    pub n_req: u64,
    pub n_kv: u64,
    pub n_bt: u64,
    pub current_freq_mhz: u32,
}

/// Opaque calibration handle.
pub struct PdsimCalibration {
    inner: Calibration,
}

/// Opaque decode router: routing config, the decode controller used for
/// what-if analysis, a calibration copy and the round-robin cursor.
pub struct PdsimRouter {
    state: RouterState,
    route: RouteConfig,
    controller: ControllerConfig,
    calibration: Calibration,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: PdsimStatus, msg: impl Into<String>) -> PdsimStatus {
    set_error(msg.into());
    status
}

fn status_of(err: &Error) -> PdsimStatus {
    match err {
        Error::Validation { .. } | Error::Config(_) | Error::Json { .. } | Error::Ingest { .. } => {
            PdsimStatus::Validation
        }
        Error::Contract(_) => PdsimStatus::InvalidArgument,
        Error::Coverage(_) => PdsimStatus::Coverage,
        Error::Calibration(_) => PdsimStatus::Calibration,
        Error::Io { .. } => PdsimStatus::Io,
        Error::Scenario(_) => PdsimStatus::Scenario,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> PdsimStatus
where
    F: FnOnce() -> Result<(), PdsimStatus>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdsimStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(PdsimStatus::Internal, "panic inside pdsim"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PdsimStatus>;
}

impl<T> OrStatus<T> for pdsim::Result<T> {
    fn or_status(self) -> Result<T, PdsimStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, PdsimStatus> {
    // SAFETY: caller guarantees `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| fail(PdsimStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, PdsimStatus> {
    // SAFETY: caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| fail(PdsimStatus::NullPointer, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, PdsimStatus> {
    if p.is_null() {
        return Err(fail(PdsimStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(PdsimStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ladder_from(levels: *const u32, len: usize) -> Result<FrequencyLadder, PdsimStatus> {
    if levels.is_null() {
        return Err(fail(PdsimStatus::NullPointer, "ladder is null"));
    }
    // SAFETY: caller guarantees `len` readable elements.
    let slice = unsafe { std::slice::from_raw_parts(levels, len) };
    FrequencyLadder::from_mhz(slice).or_status()
}

fn freq(mhz: u32) -> Result<FrequencyMHz, PdsimStatus> {
    FrequencyMHz::new(mhz).or_status()
}

fn snapshot_from(s: &PdsimSnapshot) -> Result<InstanceSnapshot, PdsimStatus> {
    Ok(InstanceSnapshot {
        instance_id: s.instance_id as usize,
        phase: match s.phase {
            PdsimPhase::Prefill => PhaseKind::Prefill,
            PdsimPhase::Decode => PhaseKind::Decode,
        },
        queue_len: s.queue_len as usize,
        max_wait_ms: s.max_wait_ms,
        n_req: s.n_req,
        n_kv: s.n_kv,
        n_bt: s.n_bt,
        current_freq: freq(s.current_freq_mhz)?,
    })
}

fn into_c_string(s: String, out: &mut *mut c_char) -> Result<(), PdsimStatus> {
    let c = CString::new(s).map_err(|_| fail(PdsimStatus::Internal, "output contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next pdsim call on the same thread.
#[no_mangle]
pub extern "C" fn pdsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pdsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this crate.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Built-in default calibration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_calibration_default(out: *mut *mut PdsimCalibration) -> PdsimStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = Box::into_raw(Box::new(PdsimCalibration {
            inner: Calibration::default(),
        }));
        Ok(())
    })
}

/// Parses a calibration JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_calibration_from_json(
    json: *const c_char,
    out: *mut *mut PdsimCalibration,
) -> PdsimStatus {
    guard(|| {
        let text = unsafe { c_str(json, "json") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let inner = Calibration::from_json(text).or_status()?;
        *out = Box::into_raw(Box::new(PdsimCalibration { inner }));
        Ok(())
    })
}

/// Loads a calibration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_calibration_load(
    path: *const c_char,
    out: *mut *mut PdsimCalibration,
) -> PdsimStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let inner = Calibration::load(Path::new(path)).or_status()?;
        *out = Box::into_raw(Box::new(PdsimCalibration { inner }));
        Ok(())
    })
}

/// Serializes a calibration to JSON; free the result with `pdsim_string_free`.
///
/// # Safety
/// `cal` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_calibration_to_json(
    cal: *const PdsimCalibration,
    out: *mut *mut c_char,
) -> PdsimStatus {
    guard(|| {
        let cal = unsafe { deref(cal, "cal") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        into_c_string(cal.inner.to_json(), out)
    })
}

/// # Safety
/// `cal` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdsim_calibration_free(cal: *mut PdsimCalibration) {
    if !cal.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(cal) });
    }
}

/// Predicted prefill batch latency in milliseconds.
///
/// # Safety
/// `cal` must be a live handle; `out_ms` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_predict_ttft(
    cal: *const PdsimCalibration,
    freq_mhz: u32,
    n_bt: u64,
    out_ms: *mut f64,
) -> PdsimStatus {
    guard(|| {
        let cal = unsafe { deref(cal, "cal") }?;
        let out = unsafe { out_ptr(out_ms, "out_ms") }?;
        if n_bt == 0 {
            return Err(fail(PdsimStatus::InvalidArgument, "n_bt must be >= 1"));
        }
        *out = cal.inner.predict_ttft(freq(freq_mhz)?, n_bt).or_status()?;
        Ok(())
    })
}

/// Predicted decode iteration latency in milliseconds.
///
/// # Safety
/// `cal` must be a live handle; `out_ms` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pdsim_predict_itl(
    cal: *const PdsimCalibration,
    freq_mhz: u32,
    n_req: u64,
    n_kv: u64,
    out_ms: *mut f64,
) -> PdsimStatus {
    guard(|| {
        let cal = unsafe { deref(cal, "cal") }?;
        let out = unsafe { out_ptr(out_ms, "out_ms") }?;
        *out = cal
            .inner
            .predict_itl(freq(freq_mhz)?, n_req, n_kv)
            .or_status()?;
        Ok(())
    })
}

/// Lowest ladder frequency predicted to meet the SLO for `snapshot`, or the
/// top level under backlog or when nothing fits.
///
/// # Safety
/// `cal` must be a live handle, `ladder` must point to `ladder_len`
/// values, `snapshot` must be readable and `out_mhz` writable.
#[no_mangle]
pub unsafe extern "C" fn pdsim_select_frequency(
    cal: *const PdsimCalibration,
    ladder: *const u32,
    ladder_len: usize,
    ttft_slo_ms: f64,
    itl_slo_ms: f64,
    snapshot: *const PdsimSnapshot,
    out_mhz: *mut u32,
) -> PdsimStatus {
    guard(|| {
        let cal = unsafe { deref(cal, "cal") }?;
        let snap = snapshot_from(unsafe { deref(snapshot, "snapshot") }?)?;
        let out = unsafe { out_ptr(out_mhz, "out_mhz") }?;
        let ladder = unsafe { ladder_from(ladder, ladder_len) }?;
        let slo = SloProfile::new(ttft_slo_ms, itl_slo_ms).or_status()?;
        let cfg = ControllerConfig::new(ladder, slo, snap.phase);
        cal.inner.covers(&cfg.ladder).or_status()?;
        *out = select_frequency(&cfg, &snap, &cal.inner).or_status()?.get();
        Ok(())
    })
}

/// Creates a decode router. `delta_mhz < 0` means unbounded; `round_robin`
/// non-zero selects plain round-robin instead of state-space routing.
///
/// # Safety
/// `cal` must be a live handle (it is copied), `ladder` must point to
/// `ladder_len` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pdsim_router_new(
    cal: *const PdsimCalibration,
    ladder: *const u32,
    ladder_len: usize,
    ttft_slo_ms: f64,
    itl_slo_ms: f64,
    delta_mhz: i64,
    round_robin: i32,
    out: *mut *mut PdsimRouter,
) -> PdsimStatus {
    guard(|| {
        let cal = unsafe { deref(cal, "cal") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let ladder = unsafe { ladder_from(ladder, ladder_len) }?;
        cal.inner.covers(&ladder).or_status()?;
        let slo = SloProfile::new(ttft_slo_ms, itl_slo_ms).or_status()?;
        let delta = if delta_mhz < 0 {
            Delta::UNBOUNDED
        } else {
            Delta::Mhz(
                u32::try_from(delta_mhz)
                    .map_err(|_| fail(PdsimStatus::InvalidArgument, "delta_mhz too large"))?,
            )
        };
        *out = Box::into_raw(Box::new(PdsimRouter {
            state: RouterState::new(),
            route: RouteConfig {
                delta_mhz: delta,
                policy: if round_robin != 0 {
                    RoutePolicy::RoundRobin
                } else {
                    RoutePolicy::StateSpace
                },
            },
            controller: ControllerConfig::new(ladder, slo, PhaseKind::Decode),
            calibration: cal.inner.clone(),
        }));
        Ok(())
    })
}

/// Picks a decode instance for a request; writes an index into `snapshots`.
///
/// # Safety
/// `router` must be a live handle, `snapshots` must point to `n` values and
/// `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pdsim_router_route_decode(
    router: *mut PdsimRouter,
    snapshots: *const PdsimSnapshot,
    n: usize,
    input_len: u32,
    output_len: u32,
    out_index: *mut usize,
) -> PdsimStatus {
    guard(|| {
        // SAFETY: caller guarantees a live, exclusively used handle.
        let router = unsafe { router.as_mut() }
            .ok_or_else(|| fail(PdsimStatus::NullPointer, "router is null"))?;
        let out = unsafe { out_ptr(out_index, "out_index") }?;
        if snapshots.is_null() {
            return Err(fail(PdsimStatus::NullPointer, "snapshots is null"));
        }
        // SAFETY: caller guarantees `n` readable elements.
        let raw = unsafe { std::slice::from_raw_parts(snapshots, n) };
        let snaps = raw
            .iter()
            .map(snapshot_from)
            .collect::<Result<Vec<_>, _>>()?;
        let req = Request::new(0, 0.0, input_len, output_len).or_status()?;
        *out = route_decode(
            &mut router.state,
            &router.route,
            &snaps,
            &req,
            &router.controller,
            &router.calibration,
        )
        .or_status()?;
        Ok(())
    })
}

/// # Safety
/// `router` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdsim_router_free(router: *mut PdsimRouter) {
    if !router.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(router) });
    }
}

/// Runs a scenario given as JSON and writes the metrics report as JSON.
/// Relative paths in the config resolve against `base_dir` (null: current
/// directory). Free the result with `pdsim_string_free`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `base_dir` null or one,
/// and `out_report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pdsim_run_scenario_json(
    config_json: *const c_char,
    base_dir: *const c_char,
    out_report_json: *mut *mut c_char,
) -> PdsimStatus {
    guard(|| {
        let text = unsafe { c_str(config_json, "config_json") }?;
        let base = if base_dir.is_null() {
            "."
        } else {
            unsafe { c_str(base_dir, "base_dir") }?
        };
        let out = unsafe { out_ptr(out_report_json, "out_report_json") }?;
        let config = ScenarioConfig::from_json(text, "config_json").or_status()?;
        let scenario = Scenario::from_config(config, base.into()).or_status()?;
        let outcome = scenario.run().or_status()?;
        into_c_string(pdsim::metrics::to_json(&outcome.report), out)
    })
}
