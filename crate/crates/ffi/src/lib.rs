//! C ABI for `amlpf`.
//!
//! Every fallible function returns an [`AmlpfStatus`]. On failure the message
//! is kept in a thread-local slot readable through [`amlpf_last_error`].
//! Models are opaque handles created by [`amlpf_model_new`] and released by
//! [`amlpf_model_free`]. Arrays are caller-allocated, row-major `double`
//! buffers whose lengths are passed explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use amlpf::bench::{fit_rate, simulate_data, Fidelity};
use amlpf::filter::{pf_run, ResamplePolicy, TestFunction};
use amlpf::model::{builtin_model, BuiltinModel, StateSpaceModel};
use amlpf::multilevel::{allocate_levels, amlpf_run, MLConfig};
use amlpf::scheme::Level;
use amlpf::streams::{RunSeed, StreamKey};
use amlpf::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmlpfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    DimensionMismatch = 4,
    FilterCollapse = 5,
    NumericalFailure = 6,
    Panic = 7,
}

/// Opaque state-space model.
pub struct AmlpfModel {
    inner: StateSpaceModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> AmlpfStatus {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Contract(_) => AmlpfStatus::InvalidArgument,
        Error::Dimension { .. } => AmlpfStatus::DimensionMismatch,
        Error::FilterCollapse { .. } | Error::Degenerate => AmlpfStatus::FilterCollapse,
        Error::Level { source, .. } => status_of(source),
        _ => AmlpfStatus::NumericalFailure,
    }
}

struct Failure(AmlpfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("[{}] {e}", e.code()))
    }
}

/// Runs `f`, records any error or panic, and returns the status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmlpfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmlpfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AmlpfStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AmlpfStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn check_len(name: &str, have: usize, need: usize) -> Result<(), Failure> {
    if have < need {
        Err(Failure(AmlpfStatus::BufferTooSmall, format!("{name} holds {have}, needs {need}")))
    } else {
        Ok(())
    }
}

fn level(l: u32) -> Result<Level, Failure> {
    Ok(Level::new(l)?)
}

/// # Safety
/// `obs` must point to `horizon * obs_dim` readable doubles.
unsafe fn read_obs(model: &StateSpaceModel, obs: *const f64, horizon: usize) -> Result<Vec<Vec<f64>>, Failure> {
    non_null(obs, "obs")?;
    if horizon == 0 {
        return Err(Failure(AmlpfStatus::InvalidArgument, "horizon must be at least 1".into()));
    }
    let m = model.observation.obs_dim();
    let flat = slice::from_raw_parts(obs, horizon * m);
    Ok(flat.chunks(m).map(<[f64]>::to_vec).collect())
}

fn coordinates(model: &StateSpaceModel) -> Vec<TestFunction> {
    (0..model.dim()).map(TestFunction::coordinate).collect()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amlpf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a builtin model: `gbm`, `clark_cameron` (or `cc`), `nlm` or
/// `linear_gaussian`, with default parameters.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn amlpf_model_new(name: *const c_char, out: *mut *mut AmlpfModel) -> AmlpfStatus {
    guard(|| {
        non_null(name, "name")?;
        non_null(out, "out")?;
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Failure(AmlpfStatus::InvalidArgument, "model name is not UTF-8".into()))?;
        let kind: BuiltinModel = name.parse()?;
        *out = Box::into_raw(Box::new(AmlpfModel {
            inner: builtin_model(kind),
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`amlpf_model_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn amlpf_model_free(model: *mut AmlpfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn amlpf_model_dim(model: *const AmlpfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.dim())
}

/// Observation dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn amlpf_model_obs_dim(model: *const AmlpfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.observation.obs_dim())
}

/// Simulates `horizon` observations into `obs_out` (`horizon * obs_dim`
/// doubles). Transitions are exact where the model allows it, otherwise
/// Milstein at level `fidelity`.
///
/// # Safety
/// `model` must be a live handle and `obs_out` must hold `obs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn amlpf_simulate(
    model: *const AmlpfModel,
    horizon: usize,
    fidelity: u32,
    seed: u64,
    obs_out: *mut f64,
    obs_len: usize,
) -> AmlpfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(obs_out, "obs_out")?;
        let ssm = &(*model).inner;
        check_len("obs_out", obs_len, horizon * ssm.observation.obs_dim())?;
        let mut rng = StreamKey::new(seed).rng();
        let data = simulate_data(ssm, horizon, Fidelity::Auto(level(fidelity)?), &mut rng)?;
        let out = slice::from_raw_parts_mut(obs_out, obs_len);
        for (dst, v) in out.iter_mut().zip(data.obs.iter().flatten()) {
            *dst = *v;
        }
        Ok(())
    })
}

/// Bootstrap particle filter at one level with adaptive resampling at ESS/2.
/// Writes filter means of every coordinate (`horizon * dim`), the log
/// normalizing constant per time (`horizon`) and the substep cost.
///
/// # Safety
/// `obs` must hold `horizon * obs_dim` doubles; `means_out` and `log_nc_out`
/// must hold `horizon * dim` and `horizon` doubles; `cost_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn amlpf_run_pf(
    model: *const AmlpfModel,
    obs: *const f64,
    horizon: usize,
    lvl: u32,
    particles: usize,
    seed: u64,
    means_out: *mut f64,
    log_nc_out: *mut f64,
    cost_out: *mut u64,
) -> AmlpfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(means_out, "means_out")?;
        non_null(log_nc_out, "log_nc_out")?;
        let ssm = &(*model).inner;
        let y = read_obs(ssm, obs, horizon)?;
        let tfs = coordinates(ssm);
        let key = RunSeed::new(seed, 0).level(lvl);
        let out = pf_run(ssm, &y, level(lvl)?, particles, ResamplePolicy::default(), &tfs, key)?;
        let means = slice::from_raw_parts_mut(means_out, horizon * tfs.len());
        let lnc = slice::from_raw_parts_mut(log_nc_out, horizon);
        for (k, s) in out.steps.iter().enumerate() {
            means[k * tfs.len()..(k + 1) * tfs.len()].copy_from_slice(&s.estimates);
            lnc[k] = s.log_nc;
        }
        if !cost_out.is_null() {
            *cost_out = out.cost;
        }
        Ok(())
    })
}

/// Antithetic multilevel particle filter on levels `l_min..=l_max` with the
/// default allocation for `epsilon`. The multilevel normalizing constant can
/// be negative, so it is returned as `sign * exp(log_abs)` per time.
///
/// # Safety
/// As [`amlpf_run_pf`]; `nc_sign_out` must hold `horizon` bytes.
#[no_mangle]
pub unsafe extern "C" fn amlpf_run_amlpf(
    model: *const AmlpfModel,
    obs: *const f64,
    horizon: usize,
    l_min: u32,
    l_max: u32,
    epsilon: f64,
    seed: u64,
    means_out: *mut f64,
    nc_log_abs_out: *mut f64,
    nc_sign_out: *mut i8,
    cost_out: *mut u64,
) -> AmlpfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(means_out, "means_out")?;
        non_null(nc_log_abs_out, "nc_log_abs_out")?;
        non_null(nc_sign_out, "nc_sign_out")?;
        let ssm = &(*model).inner;
        let y = read_obs(ssm, obs, horizon)?;
        let tfs = coordinates(ssm);
        let cfg = MLConfig::allocated(epsilon, l_min, l_max, (1.0, 1.0))?;
        let out = amlpf_run(ssm, &y, &cfg, ResamplePolicy::default(), &tfs, RunSeed::new(seed, 0))?;
        let means = slice::from_raw_parts_mut(means_out, horizon * tfs.len());
        let log_abs = slice::from_raw_parts_mut(nc_log_abs_out, horizon);
        let sign = slice::from_raw_parts_mut(nc_sign_out, horizon);
        for (k, s) in out.combined.iter().enumerate() {
            means[k * tfs.len()..(k + 1) * tfs.len()].copy_from_slice(&s.estimates);
            log_abs[k] = s.nc.log_abs;
            sign[k] = s.nc.sign;
        }
        if !cost_out.is_null() {
            *cost_out = out.total_cost;
        }
        Ok(())
    })
}

/// Particle counts per level for accuracy `epsilon`, written to
/// `counts_out[0..=l_max-l_min]`.
///
/// # Safety
/// `counts_out` must hold `counts_len` elements.
#[no_mangle]
pub unsafe extern "C" fn amlpf_allocate_levels(
    epsilon: f64,
    l_min: u32,
    l_max: u32,
    c0: f64,
    c1: f64,
    counts_out: *mut usize,
    counts_len: usize,
) -> AmlpfStatus {
    guard(|| {
        non_null(counts_out, "counts_out")?;
        let counts = allocate_levels(epsilon, l_min, l_max, (c0, c1))?;
        check_len("counts_out", counts_len, counts.len())?;
        slice::from_raw_parts_mut(counts_out, counts.len()).copy_from_slice(&counts);
        Ok(())
    })
}

/// Least-squares slope of log10 MSE against log10 cost, and its standard
/// error. Needs at least three points.
///
/// # Safety
/// `costs` and `mses` must hold `n` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn amlpf_fit_rate(
    costs: *const f64,
    mses: *const f64,
    n: usize,
    slope_out: *mut f64,
    se_out: *mut f64,
) -> AmlpfStatus {
    guard(|| {
        non_null(costs, "costs")?;
        non_null(mses, "mses")?;
        non_null(slope_out, "slope_out")?;
        non_null(se_out, "se_out")?;
        let points: Vec<(f64, f64)> = slice::from_raw_parts(costs, n)
            .iter()
            .zip(slice::from_raw_parts(mses, n))
            .map(|(c, m)| (*c, *m))
            .collect();
        let (slope, se) = fit_rate(&points)?;
        *slope_out = slope;
        *se_out = se;
        Ok(())
    })
}
