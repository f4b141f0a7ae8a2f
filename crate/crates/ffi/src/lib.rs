//! C ABI over the simulator.
//!
//! Simulations are opaque handles created by `fl_sim_new` and released with
//! `fl_sim_free`. Every fallible call returns an `FlStatus`; on failure the
//! message is available from `fl_last_error_message` on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fedlamb::bench::{load_data, run_experiment, ExperimentConfig};
use fedlamb::federation::{comm_account, ProtocolKind, RoundMetrics};
use fedlamb::{Error, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Protocol = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque simulation handle.
pub struct FlSimulation {
    sim: Simulation,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlRoundMetrics {
    pub round: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub uplink: u64,
    pub downlink: u64,
    pub grad_evals: u64,
    pub wall_ms: f64,
}

impl From<&RoundMetrics> for FlRoundMetrics {
    fn from(m: &RoundMetrics) -> Self {
        FlRoundMetrics {
            round: m.round as u64,
            train_loss: m.train_loss,
            test_accuracy: m.test_accuracy,
            grad_norm_sq: m.grad_norm_sq,
            uplink: m.uplink,
            downlink: m.downlink,
            grad_evals: m.grad_evals,
            wall_ms: m.wall_ms,
        }
    }
}

/// Float counts of one round, summed over participants.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlCommEntry {
    pub uplink_model: u64,
    pub uplink_moment: u64,
    pub uplink_gradient: u64,
    pub downlink_model: u64,
    pub downlink_moment: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FlStatus {
    match e.root() {
        Error::Config { .. } => FlStatus::Config,
        Error::EmptyDataset | Error::Parse { .. } | Error::Validation(_) | Error::Partition(_) => {
            FlStatus::Data
        }
        Error::NumericOverflow { .. } => FlStatus::Numeric,
        Error::Io { .. } => FlStatus::Io,
        _ => FlStatus::Protocol,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (FlStatus, String)>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            FlStatus::Panic
        }
    }
}

fn fail(e: Error) -> (FlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FlStatus, String) {
    (FlStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `s` is null or a valid nul-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, (FlStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (FlStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

/// Builds a simulation from a config document in TOML form. The `output`,
/// `repeat` and `rounds` keys are accepted but unused; rounds are driven by
/// `fl_sim_run_round`.
///
/// # Safety
/// `config_toml` is a nul-terminated string; `out` is a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_sim_new(
    config_toml: *const c_char,
    out: *mut *mut FlSimulation,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(config_toml, "config_toml")?;
        let cfg = ExperimentConfig::parse(text).map_err(fail)?;
        let (train, test) = load_data(&cfg, cfg.seed).map_err(fail)?;
        let sim = Simulation::new(cfg.federation(cfg.seed), train, test).map_err(fail)?;
        *out = Box::into_raw(Box::new(FlSimulation { sim }));
        Ok(())
    })
}

/// Advances one round and optionally reports its metrics.
///
/// # Safety
/// `sim` comes from `fl_sim_new`; `metrics` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_sim_run_round(
    sim: *mut FlSimulation,
    metrics: *mut FlRoundMetrics,
) -> FlStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let report = sim.sim.run_round().map_err(fail)?;
        if let Some(m) = metrics.as_mut() {
            *m = FlRoundMetrics::from(&report.metrics);
        }
        Ok(())
    })
}

/// Number of model parameters; 0 for a null handle.
///
/// # Safety
/// `sim` is null or comes from `fl_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn fl_sim_param_count(sim: *const FlSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.sim.server().global.dim())
}

/// Copies the global model into `buf`, which must hold
/// `fl_sim_param_count` values.
///
/// # Safety
/// `sim` comes from `fl_sim_new`; `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fl_sim_global_params(
    sim: *const FlSimulation,
    buf: *mut f64,
    len: usize,
) -> FlStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let values = sim.sim.server().global.values();
        if len < values.len() {
            return Err((
                FlStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", values.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        Ok(())
    })
}

/// # Safety
/// `sim` is null or comes from `fl_sim_new` and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_sim_free(sim: *mut FlSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Closed-form traffic of one round. `lazy_period = 0` syncs every round.
///
/// # Safety
/// `protocol` is a nul-terminated name such as "fed-lamb"; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fl_comm_account(
    protocol: *const c_char,
    params: usize,
    participants: usize,
    round: usize,
    lazy_period: usize,
    out: *mut FlCommEntry,
) -> FlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let protocol: ProtocolKind = str_arg(protocol, "protocol")?
            .parse()
            .map_err(|e: String| (FlStatus::Config, e))?;
        let e = comm_account(
            protocol,
            params,
            participants,
            round,
            (lazy_period > 0).then_some(lazy_period),
        );
        *out = FlCommEntry {
            uplink_model: e.uplink_model,
            uplink_moment: e.uplink_moment,
            uplink_gradient: e.uplink_gradient,
            downlink_model: e.downlink_model,
            downlink_moment: e.downlink_moment,
        };
        Ok(())
    })
}

/// Runs the experiment described by a config file, writing its metrics and
/// summary files.
///
/// # Safety
/// `config_path` is a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fl_run_experiment(config_path: *const c_char) -> FlStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let cfg = ExperimentConfig::load(path).map_err(fail)?;
        run_experiment(&cfg).map_err(fail)?;
        Ok(())
    })
}
