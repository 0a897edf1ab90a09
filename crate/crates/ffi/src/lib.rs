//! C interface to segment models: stationary moments, travel times,
//! simulated throughput and the χ² normality test.
//!
//! Every call returns an [`SctmStatus`]. On failure the message is kept per
//! thread and can be copied out with [`sctm_last_error`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use sctm::cli::{segment_travel_time, SolverSection};
use sctm::flux::{DaganzoParams, FluxFunction};
use sctm::model::{Model, SegmentSpec};
use sctm::simulator::{throughput_replications, SimConfig};
use sctm::stationary::{stationary_fixed_point, FixedPointOptions};
use sctm::traveltime::default_grid;
use sctm::validation::chi2_normality;
use sctm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SctmStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Parameter = 3,
    Config = 4,
    NonConvergence = 5,
    GridCoverage = 6,
    Simulation = 7,
    Io = 8,
    /// Output buffer shorter than required.
    BufferTooSmall = 9,
    /// Sample below the minimum size; nothing was computed.
    Skipped = 10,
    Panic = 99,
}

/// Opaque single-class segment model.
pub struct SctmModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SctmStatus {
    match e {
        Error::Domain(_) => SctmStatus::Domain,
        Error::Parameter(_) => SctmStatus::Parameter,
        Error::Config(_) => SctmStatus::Config,
        Error::NonConvergence { .. } => SctmStatus::NonConvergence,
        Error::GridCoverage { .. } => SctmStatus::GridCoverage,
        Error::Simulation(_) => SctmStatus::Simulation,
        Error::Io(_) | Error::Csv(_) => SctmStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SctmStatus, String)>) -> SctmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SctmStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SctmStatus::Panic
        }
    }
}

fn lift(e: Error) -> (SctmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SctmStatus, String) {
    (SctmStatus::NullPointer, format!("{what} is null"))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, or 0 if none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sctm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Builds a segment of `cells` equal cells with a triangular diagram,
/// arrival bound `lambda` and departure bound `nu` (km, h, veh).
///
/// # Safety
/// `out` must be null or a valid pointer to a handle slot.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sctm_segment_new(
    cells: usize,
    cell_length_km: f64,
    v_f: f64,
    w: f64,
    rho_max: f64,
    q_max: f64,
    lambda: f64,
    nu: f64,
    out: *mut *mut SctmModel,
) -> SctmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let flux: Arc<dyn FluxFunction> = Arc::new(DaganzoParams::new(v_f, w, rho_max, q_max).map_err(lift)?);
        if !(cell_length_km > 0.0) {
            return Err((SctmStatus::Parameter, format!("cell length must be positive, got {cell_length_km}")));
        }
        let model = SegmentSpec::uniform(cells, cell_length_km, flux, vec![lambda], vec![nu]).build().map_err(lift)?;
        *out = Box::into_raw(Box::new(SctmModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`sctm_segment_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sctm_model_free(model: *mut SctmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension (cells × classes), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sctm_model_dim(model: *const SctmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// Stationary mean (`dim` entries) and covariance (`dim²`, row-major).
///
/// # Safety
/// `mu` and `v` must be valid for `mu_len` and `v_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sctm_stationary(
    model: *const SctmModel,
    mu: *mut f64,
    mu_len: usize,
    v: *mut f64,
    v_len: usize,
) -> SctmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if mu.is_null() || v.is_null() {
            return Err(null("output buffer"));
        }
        let n = m.model.dim();
        if mu_len < n || v_len < n * n {
            return Err((SctmStatus::BufferTooSmall, format!("need {n} and {} doubles", n * n)));
        }
        let p = stationary_fixed_point(&m.model, FixedPointOptions::default()).map_err(lift)?;
        let mu = std::slice::from_raw_parts_mut(mu, n);
        let v = std::slice::from_raw_parts_mut(v, n * n);
        mu.copy_from_slice(p.mu.as_slice());
        for r in 0..n {
            for c in 0..n {
                v[r * n + c] = p.v[(r, c)];
            }
        }
        Ok(())
    })
}

/// Mean and standard deviation (s) of the time to cross the whole segment,
/// starting from the stationary mean with covariance `diag(μ)/divisor`.
///
/// # Safety
/// `mean` and `std` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sctm_travel_time(
    model: *const SctmModel,
    divisor: f64,
    grid_max_s: f64,
    grid_points: usize,
    mean: *mut f64,
    std: *mut f64,
) -> SctmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if mean.is_null() || std.is_null() {
            return Err(null("output pointer"));
        }
        if !(divisor > 0.0) || !(grid_max_s > 0.0) || grid_points < 2 {
            return Err((SctmStatus::Parameter, "need divisor > 0, grid_max_s > 0 and at least 2 grid points".into()));
        }
        let (mu, sd) = segment_travel_time(&m.model, &SolverSection::default(), &default_grid(grid_max_s, grid_points), divisor).map_err(lift)?;
        *mean = mu;
        *std = sd;
        Ok(())
    })
}

/// Mean simulated throughput (veh/h) over `replications` runs of `horizon_h`
/// hours after `warmup_h` hours, starting empty.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sctm_simulated_throughput(
    model: *const SctmModel,
    horizon_h: f64,
    warmup_h: f64,
    seed: u64,
    replications: usize,
    out: *mut f64,
) -> SctmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SimConfig::new(horizon_h, seed, replications).and_then(|c| c.with_warmup(warmup_h)).map_err(lift)?;
        let reps = throughput_replications(&m.model, &vec![0; m.model.dim()], &cfg).map_err(lift)?;
        *out = reps.iter().sum::<f64>() / reps.len() as f64;
        Ok(())
    })
}

/// Equiprobable-bin χ² normality test of `n` values.
///
/// # Safety
/// `values` must be valid for `n` doubles; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sctm_chi2_normality(values: *const f64, n: usize, statistic: *mut f64, p_value: *mut f64) -> SctmStatus {
    guard(|| {
        if values.is_null() || statistic.is_null() || p_value.is_null() {
            return Err(null("argument"));
        }
        let xs = std::slice::from_raw_parts(values, n);
        let r = chi2_normality(xs).ok_or((SctmStatus::Skipped, format!("sample of {n} is below the minimum size")))?;
        *statistic = r.statistic;
        *p_value = r.p_value;
        Ok(())
    })
}
