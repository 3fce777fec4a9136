//! C ABI for the memcast forecasting engine.
//!
//! The surface follows the usual C conventions: opaque handles behind
//! pointers, integer status codes, and a thread-local last-error message.
//! Every entry point catches panics, so no unwinding ever crosses the FFI
//! boundary. Handles are not thread-safe: confine each `McRunner` to one
//! thread (or guard it with an external lock).
//!
//! A typical session:
//!
//! ```c
//! McRunner *r = NULL;
//! if (mc_runner_open("run/model.ckpt", &r) != MC_OK) { /* mc_last_error */ }
//! size_t rows = mc_runner_context_len(r);
//! size_t d    = mc_runner_feature_count(r);
//! size_t hor  = mc_runner_horizon(r);
//! double *pred = malloc(hor * d * sizeof(double));
//! mc_runner_forecast(r, values, stamps, rows, true, pred, hor * d);
//! mc_runner_close(r);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use memcast::cli;
use memcast::config;
use memcast::data::{calendar_features, Marks, WindowSample};
use memcast::error::Error;
use memcast::tensor::Tape;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum McStatus {
    /// Success.
    MC_OK = 0,
    /// Invalid usage or configuration (bad arguments, bad config file).
    MC_ERR_USAGE = 1,
    /// Data problem (unreadable file, malformed checkpoint, shape mismatch).
    MC_ERR_DATA = 2,
    /// Numeric failure (non-finite values, gradient-check failure).
    MC_ERR_NUMERIC = 3,
    /// A required pointer argument was NULL.
    MC_ERR_NULL = 4,
    /// An internal panic was caught at the boundary.
    MC_ERR_PANIC = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> McStatus {
    match err.exit_code() {
        1 => McStatus::MC_ERR_USAGE,
        2 => McStatus::MC_ERR_DATA,
        _ => McStatus::MC_ERR_NUMERIC,
    }
}

fn fail(err: Error) -> McStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Runs `body` with panic containment, translating results to a status.
fn guarded(body: impl FnOnce() -> Result<(), Error>) -> McStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            clear_error();
            McStatus::MC_OK
        }
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic caught at the FFI boundary");
            McStatus::MC_ERR_PANIC
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or NULL.
unsafe fn cstr_arg(ptr: *const c_char, name: &str) -> Result<String, Error> {
    if ptr.is_null() {
        return Err(Error::Usage(format!("{name} must not be NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Error::Usage(format!("{name} is not valid UTF-8")))
}

// ---------------------------------------------------------------------------
// Library-level calls
// ---------------------------------------------------------------------------

/// Version of the linked engine, as a static string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    static VERSION: &str = concat!("memcast ", env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap` bytes) and returns the full message length
/// in bytes, or 0 when no error is pending. `buf` may be NULL to query the
/// length only.
///
/// # Safety
/// `buf`, when non-NULL, must point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mc_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let guard = e.borrow();
        let Some(msg) = guard.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Runs the gradient self-check battery. `MC_OK` when every check passes;
/// `MC_ERR_NUMERIC` (with details in the last error) otherwise.
#[no_mangle]
pub extern "C" fn mc_selfcheck(inject_fault: bool) -> McStatus {
    guarded(|| {
        let report = cli::cmd_selfcheck(inject_fault)?;
        if report.all_passed() {
            Ok(())
        } else {
            let failing: Vec<&str> = report
                .lines
                .iter()
                .filter(|l| !l.passed)
                .map(|l| l.name.as_str())
                .collect();
            Err(Error::Numeric(format!("self-check failures: {}", failing.join(", "))))
        }
    })
}

/// Trains a model from a config file, writing checkpoint/history/config
/// artifacts. `out_dir` (optional, may be NULL) overrides the config's
/// output directory; `seed` overrides the run seed when non-negative.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated path; `out_dir` must be a
/// valid NUL-terminated path or NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_train(
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: i64,
) -> McStatus {
    guarded(|| {
        let path = cstr_arg(config_path, "config_path")?;
        let mut cfg = config::load_config(Path::new(&path))?;
        if !out_dir.is_null() {
            cfg.out_dir = cstr_arg(out_dir, "out_dir")?;
        }
        if seed >= 0 {
            cfg.seed = seed as u64;
        }
        cli::cmd_train(&cfg)?;
        Ok(())
    })
}

/// Generates a synthetic dataset CSV (see the CLI's `synth` verb).
///
/// # Safety
/// `out_path` must be a valid NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mc_synth(
    points: usize,
    features: usize,
    seed: u64,
    out_path: *const c_char,
) -> McStatus {
    guarded(|| {
        let path = cstr_arg(out_path, "out_path")?;
        cli::cmd_synth(points, features, seed, Path::new(&path))
    })
}

// ---------------------------------------------------------------------------
// Runner handle
// ---------------------------------------------------------------------------

/// Opaque forecasting session: a trained model, its task-level memory, and
/// the normalizer statistics it was fitted with.
pub struct McRunner {
    run: cli::LoadedRun,
}

/// Opens a checkpoint written by training and yields a runner handle in
/// `out`. On failure `*out` is left untouched and a status is returned.
///
/// # Safety
/// `ckpt_path` must be a valid NUL-terminated path; `out` must point to
/// writable pointer storage.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_open(
    ckpt_path: *const c_char,
    out: *mut *mut McRunner,
) -> McStatus {
    if out.is_null() {
        set_error("out must not be NULL");
        return McStatus::MC_ERR_NULL;
    }
    let mut handle: Option<Box<McRunner>> = None;
    let status = guarded(|| {
        let path = cstr_arg(ckpt_path, "ckpt_path")?;
        let run = cli::load_run(Path::new(&path), None)?;
        handle = Some(Box::new(McRunner { run }));
        Ok(())
    });
    if let Some(h) = handle {
        *out = Box::into_raw(h);
    }
    status
}

/// Releases a runner. NULL is a no-op; the pointer must not be used again.
///
/// # Safety
/// `runner` must be NULL or a pointer obtained from [`mc_runner_open`] that
/// has not been closed yet.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_close(runner: *mut McRunner) {
    if !runner.is_null() {
        drop(Box::from_raw(runner));
    }
}

unsafe fn runner_ref<'a>(runner: *const McRunner) -> Option<&'a McRunner> {
    runner.as_ref()
}

/// Number of input rows one forecast consumes (the context length).
/// Returns 0 on a NULL handle.
///
/// # Safety
/// `runner` must be NULL or a live runner pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_context_len(runner: *const McRunner) -> usize {
    runner_ref(runner).map_or(0, |r| r.run.config.window.encoder_len)
}

/// Number of future steps one forecast produces. Returns 0 on NULL.
///
/// # Safety
/// `runner` must be NULL or a live runner pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_horizon(runner: *const McRunner) -> usize {
    runner_ref(runner).map_or(0, |r| r.run.config.window.pred_len)
}

/// Number of features per row (input and output width). Returns 0 on NULL.
///
/// # Safety
/// `runner` must be NULL or a live runner pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_feature_count(runner: *const McRunner) -> usize {
    runner_ref(runner).map_or(0, |r| r.run.model.config.d_f)
}

/// How many times the task-level memory has been updated (training plus any
/// advancing forecasts). Returns 0 on NULL.
///
/// # Safety
/// `runner` must be NULL or a live runner pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_memory_updates(runner: *const McRunner) -> u64 {
    runner_ref(runner).map_or(0, |r| r.run.state.update_count)
}

/// Re-initializes the task-level memory to its untrained starting state.
///
/// # Safety
/// `runner` must be a live runner pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_reset_memory(runner: *mut McRunner) -> McStatus {
    let Some(r) = runner.as_mut() else {
        set_error("runner must not be NULL");
        return McStatus::MC_ERR_NULL;
    };
    guarded(|| {
        r.run.state = r.run.model.init_memory()?;
        Ok(())
    })
}

/// Forecasts the next `horizon x features` values from a context window.
///
/// `values` holds `rows x features` doubles row-major in the original
/// (denormalized) units; `epoch_seconds` holds one UTC UNIX timestamp per
/// row, uniformly spaced and increasing. `rows` must equal the context
/// length. Predictions are written denormalized to `out_pred`, whose
/// capacity `out_cap` must be at least `horizon x features`.
///
/// With `advance_memory` set, the runner's task-level memory absorbs this
/// window and will condition subsequent forecasts; otherwise the call is
/// read-only and repeatable bit for bit.
///
/// # Safety
/// `runner` must be a live runner pointer; `values` must point to
/// `rows * features` readable doubles; `epoch_seconds` to `rows` readable
/// i64s; `out_pred` to `out_cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_runner_forecast(
    runner: *mut McRunner,
    values: *const f64,
    epoch_seconds: *const i64,
    rows: usize,
    advance_memory: bool,
    out_pred: *mut f64,
    out_cap: usize,
) -> McStatus {
    let Some(r) = runner.as_mut() else {
        set_error("runner must not be NULL");
        return McStatus::MC_ERR_NULL;
    };
    if values.is_null() || epoch_seconds.is_null() || out_pred.is_null() {
        set_error("values, epoch_seconds, and out_pred must not be NULL");
        return McStatus::MC_ERR_NULL;
    }
    let d = r.run.model.config.d_f;
    let spec = r.run.config.window.clone();
    let needed = spec.pred_len * d;
    let vals = std::slice::from_raw_parts(values, rows * d);
    let stamps = std::slice::from_raw_parts(epoch_seconds, rows);
    let out = std::slice::from_raw_parts_mut(out_pred, out_cap);

    guarded(AssertUnwindSafe(|| {
        if rows != spec.encoder_len {
            return Err(Error::Usage(format!(
                "forecast needs exactly {} context rows, got {rows}",
                spec.encoder_len
            )));
        }
        if out_cap < needed {
            return Err(Error::Usage(format!(
                "out_pred capacity {out_cap} is below horizon x features = {needed}"
            )));
        }
        let window = build_window(r, vals, stamps, &spec)?;
        let mut state = r.run.state.clone();
        state.frozen = !advance_memory;
        let mut tape = Tape::inference();
        let fwd = r.run.model.forward(&mut tape, &window, &state, None, 0.0, false, 0)?;
        let pred = fwd.pred.to_vec();
        for j in 0..spec.pred_len {
            let row = r.run.normalizer.denormalize(&pred[j * d..(j + 1) * d]);
            out[j * d..(j + 1) * d].copy_from_slice(&row);
        }
        if advance_memory {
            r.run.state = fwd.next_state;
        }
        Ok(())
    }))
}

/// Assembles a forecast-only window sample: normalized context, the decoder
/// seed from the context tail, zero placeholders for the horizon, and
/// calendar marks extrapolated past the last timestamp at the observed
/// uniform spacing.
fn build_window(
    r: &McRunner,
    vals: &[f64],
    stamps: &[i64],
    spec: &memcast::data::WindowSpec,
) -> Result<WindowSample, Error> {
    let d = r.run.model.config.d_f;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("context values must all be finite".into()));
    }
    if stamps.len() < 2 {
        return Err(Error::Usage("need at least two timestamps".into()));
    }
    let step = stamps[1] - stamps[0];
    if step <= 0 {
        return Err(Error::Usage("timestamps must be strictly increasing".into()));
    }
    for w in stamps.windows(2) {
        if w[1] - w[0] != step {
            return Err(Error::Usage(format!(
                "timestamps must be uniformly spaced: expected step {step}, got {}",
                w[1] - w[0]
            )));
        }
    }
    let marks_at = |secs: i64| -> Result<Marks, Error> {
        let dt = chrono::DateTime::from_timestamp(secs, 0)
            .ok_or_else(|| Error::Usage(format!("timestamp {secs} is out of range")))?;
        Ok(calendar_features(dt.naive_utc()))
    };

    let mut enc_input = Vec::with_capacity(stamps.len() * d);
    for row in 0..stamps.len() {
        enc_input.extend(r.run.normalizer.normalize(&vals[row * d..(row + 1) * d]));
    }
    let enc_marks: Vec<Marks> = stamps.iter().map(|&s| marks_at(s)).collect::<Result<_, _>>()?;

    let seed_start = spec.encoder_len - spec.decoder_len;
    let dec_input = enc_input[seed_start * d..].to_vec();
    let mut dec_marks: Vec<Marks> = enc_marks[seed_start..].to_vec();
    let last = stamps[stamps.len() - 1];
    for i in 1..=spec.pred_len {
        dec_marks.push(marks_at(last + step * i as i64)?);
    }

    Ok(WindowSample {
        offset: 0,
        enc_input,
        dec_input,
        target: vec![0.0; spec.pred_len * d],
        enc_marks,
        dec_marks,
    })
}
