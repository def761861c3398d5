//! C ABI over `bayes-lth`.
//!
//! Handles are opaque pointers created by `*_new`/`*_build`/`*_load` functions and
//! released by the matching `*_free`. Every fallible call returns a
//! [`BlthStatus`]; on failure [`blth_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bayes_lth::checkpoint::Checkpoint;
use bayes_lth::config::ExperimentConfig;
use bayes_lth::experiment;
use bayes_lth::metrics;
use bayes_lth::models::Model;
use bayes_lth::pruning::{self, Lineage, ScoreKind};
use bayes_lth::tensor::Tensor;
use bayes_lth::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlthStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Experiment configuration handle.
pub struct BlthConfig {
    inner: ExperimentConfig,
}

/// Model handle: parameters and masks.
pub struct BlthModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BlthStatus {
    match e {
        Error::Shape { .. } => BlthStatus::Shape,
        Error::InvalidArgument(_) => BlthStatus::InvalidArgument,
        Error::Config { .. } => BlthStatus::Config,
        Error::Format { .. } | Error::Label { .. } => BlthStatus::Format,
        Error::Io(_) => BlthStatus::Io,
    }
}

fn fail(status: BlthStatus, msg: &str) -> BlthStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BlthStatus, String)>) -> BlthStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BlthStatus::Ok,
        Ok(Err((status, msg))) => fail(status, &msg),
        Err(_) => fail(BlthStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> (BlthStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BlthStatus, String) {
    (BlthStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BlthStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (BlthStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blth_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn blth_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn blth_config_new(out: *mut *mut BlthConfig) -> BlthStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(BlthConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses `key = value` text into a new configuration.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blth_config_parse(text: *const c_char, out: *mut *mut BlthConfig) -> BlthStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(text, "text")?;
        let inner = ExperimentConfig::parse_str(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(BlthConfig { inner }));
        Ok(())
    })
}

/// Sets one configuration key.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn blth_config_set(config: *mut BlthConfig, key: *const c_char, value: *const c_char) -> BlthStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        let mut next = cfg.inner.clone();
        next.set(key, value).map_err(lib)?;
        next.validate().map_err(lib)?;
        cfg.inner = next;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blth_config_free(config: *mut BlthConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds a freshly initialized model from `config`.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blth_model_build(config: *const BlthConfig, seed: u64, out: *mut *mut BlthModel) -> BlthStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::build(&cfg.inner.model(), seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(BlthModel { model }));
        Ok(())
    })
}

/// Builds a model from `config` and loads a checkpoint into it.
///
/// # Safety
/// `config` must be a live handle; `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn blth_model_load(config: *const BlthConfig, path: *const c_char, out: *mut *mut BlthModel) -> BlthStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut model = Model::build(&cfg.inner.model(), cfg.inner.seed).map_err(lib)?;
        Checkpoint::load(Path::new(path)).map_err(lib)?.apply(&mut model).map_err(lib)?;
        *out = Box::into_raw(Box::new(BlthModel { model }));
        Ok(())
    })
}

/// Writes the model's parameters and masks as a checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn blth_model_save(model: *const BlthModel, path: *const c_char, seed: u64, level: u32) -> BlthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        Checkpoint::from_model(&m.model, seed, level, Lineage::Imp)
            .save(Path::new(path))
            .map_err(lib)
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blth_model_free(model: *mut BlthModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blth_model_num_classes(model: *const BlthModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Fraction of prunable weights still unmasked.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn blth_model_remaining_fraction(model: *const BlthModel, out: *mut f64) -> BlthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.remaining_fraction();
        Ok(())
    })
}

/// Prunes `rate` of the remaining prunable weights globally and installs the new mask.
///
/// `score`: 0 magnitude, 1 snr, 2 square, 3 mu.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn blth_model_prune(model: *mut BlthModel, score: u32, rate: f64) -> BlthStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let kind = u8::try_from(score)
            .ok()
            .and_then(ScoreKind::from_code)
            .ok_or_else(|| (BlthStatus::InvalidArgument, format!("unknown score code {score}")))?;
        let mask = pruning::prune_global(&m.model, kind, rate).map_err(lib)?;
        pruning::commit_mask(&mut m.model, &mask).map_err(lib)
    })
}

/// Mean of `samples` post-softmax predictions.
///
/// `shape` holds `ndim` dimensions, batch first; `input` holds their product
/// in row-major order. `out` receives `batch * num_classes` probabilities.
///
/// # Safety
/// All pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn blth_model_predict_mean(
    model: *const BlthModel,
    input: *const f32,
    shape: *const usize,
    ndim: usize,
    samples: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> BlthStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() || shape.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let shape = std::slice::from_raw_parts(shape, ndim).to_vec();
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, std::slice::from_raw_parts(input, n).to_vec()).map_err(lib)?;
        let probs = m.model.predict_mean(&x, samples, seed).map_err(lib)?;
        if probs.data.len() != out_len {
            return Err((
                BlthStatus::Shape,
                format!("output buffer holds {out_len} values, need {}", probs.data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&probs.data);
        Ok(())
    })
}

/// Mean absolute calibration error over `bins` equal-width bins.
///
/// # Safety
/// `confidences`, `predictions` and `labels` must each hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn blth_mace(
    confidences: *const f64,
    predictions: *const u32,
    labels: *const u32,
    n: usize,
    bins: usize,
    out: *mut f64,
) -> BlthStatus {
    guard(|| {
        if confidences.is_null() || predictions.is_null() || labels.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let conf = std::slice::from_raw_parts(confidences, n);
        let pred: Vec<usize> = std::slice::from_raw_parts(predictions, n).iter().map(|&v| v as usize).collect();
        let lab: Vec<usize> = std::slice::from_raw_parts(labels, n).iter().map(|&v| v as usize).collect();
        *out = metrics::mace(conf, &pred, &lab, bins).map_err(lib)?.mace;
        Ok(())
    })
}

/// Runs a pipeline (`train`, `imp`, `lrr` or `transplant`) writing outputs to `out_dir`.
///
/// # Safety
/// `config` must be a live handle; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn blth_run(config: *const BlthConfig, command: *const c_char, out_dir: *const c_char) -> BlthStatus {
    guard(|| {
        let cfg = &config.as_ref().ok_or_else(|| null("config"))?.inner;
        let command = str_arg(command, "command")?;
        let out = Path::new(str_arg(out_dir, "out_dir")?);
        match command {
            "train" => experiment::run_train(cfg, out).map(drop),
            "imp" => experiment::run_imp(cfg, out).map(drop),
            "lrr" => experiment::run_lrr(cfg, out).map(drop),
            "transplant" => experiment::run_transplant(cfg, out).map(drop),
            _ => return Err((BlthStatus::InvalidArgument, format!("unknown command `{command}`"))),
        }
        .map_err(lib)
    })
}
