//! C ABI over `hafl`.
//!
//! Objects are opaque heap handles created by `*_new`/`*_default`/`*_from_*`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`HaflStatus`]; on failure the message is available from
//! [`hafl_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hafl::cli::{build_data, cmd_run};
use hafl::{ExperimentConfig, Federation, HaflError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Parse = 5,
    Io = 6,
    Protocol = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque experiment configuration.
pub struct HaflConfig {
    inner: ExperimentConfig,
}

/// Opaque single-seed federation, advanced one round at a time.
pub struct HaflSimulation {
    inner: Federation,
}

/// Metrics of one completed round.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HaflRoundSummary {
    /// Rounds completed so far, 1-based.
    pub round: u64,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub mean_client_accuracy: f64,
    pub uploaded_params: u64,
    pub uploaded_bytes: u64,
    pub sampled_clients: u64,
    pub dropped_clients: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &HaflError) -> HaflStatus {
    match e {
        HaflError::Config { .. } => HaflStatus::Config,
        HaflError::Parse { .. } => HaflStatus::Parse,
        HaflError::Io { .. } => HaflStatus::Io,
        HaflError::Protocol(_) | HaflError::ModeMismatch { .. } => HaflStatus::Protocol,
        HaflError::Json(_) | HaflError::ThreadPool(_) => HaflStatus::Internal,
        _ => HaflStatus::InvalidArgument,
    }
}

struct Failure(HaflStatus, String);

impl From<HaflError> for Failure {
    fn from(e: HaflError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HaflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HaflStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside hafl".into());
            HaflStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            HaflStatus::NullPointer,
            format!("`{name}` is NULL"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(HaflStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(HaflStatus::NullPointer, format!("`{name}` is NULL")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(HaflStatus::NullPointer, format!("`{name}` is NULL")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(HaflStatus::NullPointer, "`out` is NULL".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hafl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hafl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes uploaded for `selected` rank-1 pairs of a `d × l` adapter.
#[no_mangle]
pub extern "C" fn hafl_upload_size(
    selected: usize,
    d: usize,
    l: usize,
    bytes_per_param: usize,
) -> u64 {
    hafl::upload_size(selected, d, l, bytes_per_param)
}

/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_default(out: *mut *mut HaflConfig) -> HaflStatus {
    guard(|| {
        emit(
            out,
            HaflConfig {
                inner: ExperimentConfig::default(),
            },
        )
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_from_file(
    path: *const c_char,
    out: *mut *mut HaflConfig,
) -> HaflStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = ExperimentConfig::from_file(path)?;
        emit(out, HaflConfig { inner })
    })
}

/// Parses `key = value` text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_from_str(
    text: *const c_char,
    out: *mut *mut HaflConfig,
) -> HaflStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let inner = ExperimentConfig::parse_str(text, Path::new("<string>"))?;
        emit(out, HaflConfig { inner })
    })
}

/// Sets one key. The config is re-validated; on failure it is left unchanged.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_set(
    cfg: *mut HaflConfig,
    key: *const c_char,
    value: *const c_char,
) -> HaflStatus {
    guard(|| {
        let cfg = mut_arg(cfg, "cfg")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.inner.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Writes the canonical `key = value` form into `buf` (NUL-terminated).
/// `*needed` receives the required size including the NUL; pass a NULL
/// `buf` to query it.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must hold `len` bytes or be NULL;
/// `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_to_string(
    cfg: *const HaflConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> HaflStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let needed = mut_arg(needed, "needed")?;
        let text = cfg.inner.to_config_string();
        *needed = text.len() + 1;
        if buf.is_null() {
            return Ok(());
        }
        if len < *needed {
            return Err(Failure(
                HaflStatus::BufferTooSmall,
                format!("buffer of {len} bytes, need {}", *needed),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hafl_config_free(cfg: *mut HaflConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs every configured seed and writes `metrics.csv`, `summary.json`
/// and `rounds.jsonl` into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hafl_run(cfg: *const HaflConfig, out_dir: *const c_char) -> HaflStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let dir = str_arg(out_dir, "out_dir")?;
        cfg.inner.validate()?;
        cmd_run(&cfg.inner, Path::new(dir), cfg.inner.threads)?;
        Ok(())
    })
}

/// Builds data and the initial global adapter for one seed of `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hafl_simulation_new(
    cfg: *const HaflConfig,
    seed: u64,
    out: *mut *mut HaflSimulation,
) -> HaflStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        cfg.validate()?;
        let data = build_data(cfg, seed)?;
        let inner = Federation::new(cfg.federation(seed), cfg.training, data)?;
        emit(out, HaflSimulation { inner })
    })
}

/// Runs one round on the calling thread's rayon pool.
///
/// # Safety
/// `sim` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hafl_simulation_step(
    sim: *mut HaflSimulation,
    out: *mut HaflRoundSummary,
) -> HaflStatus {
    guard(|| {
        let sim = mut_arg(sim, "sim")?;
        let out = mut_arg(out, "out")?;
        let r = sim.inner.run_round()?;
        *out = HaflRoundSummary {
            round: r.round,
            global_accuracy: r.global_accuracy,
            global_loss: r.global_loss,
            mean_client_accuracy: r.mean_client_accuracy,
            uploaded_params: r.uploaded_params,
            uploaded_bytes: r.uploaded_bytes,
            sampled_clients: r.sampled.len() as u64,
            dropped_clients: r.dropped.len() as u64,
        };
        Ok(())
    })
}

/// Copies the current per-rank-1 importance scores into `buf`. `*written`
/// receives the global rank; if `len` is smaller nothing is copied and
/// `HAFL_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `sim` must be a live handle; `buf` must hold `len` doubles or be NULL;
/// `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hafl_simulation_scores(
    sim: *const HaflSimulation,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> HaflStatus {
    guard(|| {
        let sim = ref_arg(sim, "sim")?;
        let written = mut_arg(written, "written")?;
        let scores = sim.inner.scores();
        *written = scores.len();
        if buf.is_null() || len < scores.len() {
            return Err(Failure(
                HaflStatus::BufferTooSmall,
                format!("buffer of {len} doubles, need {}", scores.len()),
            ));
        }
        ptr::copy_nonoverlapping(scores.as_slice().as_ptr(), buf, scores.len());
        Ok(())
    })
}

/// # Safety
/// `sim` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hafl_simulation_free(sim: *mut HaflSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
