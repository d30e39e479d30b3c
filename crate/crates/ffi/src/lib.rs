//! C ABI over the pheadline library.
//!
//! Every function returns a [`PhStatus`]. On failure a message is kept per
//! thread and can be read with [`ph_last_error_message`]. Strings handed
//! out by this library must be released with [`ph_string_free`], models
//! with [`ph_model_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, c_double, c_uint, size_t};

use pheadline::checkpoint::{self, Checkpoint};
use pheadline::data::{encode_record, parse_record, read_jsonl, words};
use pheadline::experiment::evaluate;
use pheadline::metrics::{factcc_proxy, pc_scores, rouge_l, rouge_n, ProxyConfig};
use pheadline::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    InvalidInput = 6,
    UndefinedMetric = 7,
    Panic = 8,
}

/// A loaded checkpoint.
pub struct PhModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(PhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => PhStatus::Io,
            Error::Parse { .. } | Error::Schema { .. } | Error::Json(_) => PhStatus::Parse,
            Error::Checkpoint(_) => PhStatus::Checkpoint,
            Error::UndefinedMetric(_) => PhStatus::UndefinedMetric,
            _ => PhStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PhStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PhStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PhStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PhStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(PhStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(PhStatus::InvalidInput, "output contains a NUL byte".into()))
}

/// Loads a checkpoint written by `pheadline train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ph_model_load(path: *const c_char, out: *mut *mut PhModel) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let inner = checkpoint::load(text(path, "path")?)?;
        *out = Box::into_raw(Box::new(PhModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ph_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ph_model_free(model: *mut PhModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Greedy headline for one JSON record (the dataset line format).
///
/// # Safety
/// `model` must be a live model, `record_json` a NUL-terminated string and
/// `out` a valid pointer. The result must be freed with [`ph_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ph_generate(
    model: *const PhModel,
    record_json: *const c_char,
    out: *mut *mut c_char,
) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(PhStatus::NullPointer, "model is null".into()))?;
        let ck = &m.inner;
        let raw = parse_record(text(record_json, "record_json")?)?;
        let record = encode_record(&raw, &ck.vocab, ck.config.caps);
        let ids = ck
            .model
            .generate_for(&record, &ck.config.train.ablation, ck.config.gen_max_len)?;
        *out = c_string(ck.vocab.detokenize(&ids))?;
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ph_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// ROUGE-N F1 in [0, 100] over lowercased word tokens.
///
/// # Safety
/// `gen` and `reference` must be NUL-terminated strings, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ph_rouge_n(
    gen: *const c_char,
    reference: *const c_char,
    n: c_uint,
    out: *mut c_double,
) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if n == 0 {
            return Err(Failure(PhStatus::InvalidInput, "n must be >= 1".into()));
        }
        *out = rouge_n(
            &words(text(gen, "gen")?),
            &words(text(reference, "reference")?),
            n as usize,
        );
        Ok(())
    })
}

/// ROUGE-L F1 in [0, 100].
///
/// # Safety
/// As for [`ph_rouge_n`].
#[no_mangle]
pub unsafe extern "C" fn ph_rouge_l(gen: *const c_char, reference: *const c_char, out: *mut c_double) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = rouge_l(&words(text(gen, "gen")?), &words(text(reference, "reference")?));
        Ok(())
    })
}

/// Share of headline segments supported by the body, in [0, 100], with the
/// default threshold and window.
///
/// # Safety
/// `gen` and `body` must be NUL-terminated strings, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ph_factcc_proxy(gen: *const c_char, body: *const c_char, out: *mut c_double) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = factcc_proxy(text(gen, "gen")?, text(body, "body")?, &ProxyConfig::default());
        Ok(())
    })
}

/// Personalization consistency of `gen` against `n_history` headlines.
///
/// # Safety
/// `history` must point to `n_history` NUL-terminated strings; the output
/// pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ph_pc_scores(
    gen: *const c_char,
    history: *const *const c_char,
    n_history: size_t,
    out_avg: *mut c_double,
    out_max: *mut c_double,
) -> PhStatus {
    guard(|| {
        out_ptr(out_avg, "out_avg")?;
        out_ptr(out_max, "out_max")?;
        if history.is_null() && n_history > 0 {
            return Err(Failure(PhStatus::NullPointer, "history is null".into()));
        }
        let hist = (0..n_history)
            .map(|i| text(*history.add(i), "history entry").map(words))
            .collect::<Result<Vec<_>, _>>()?;
        let (avg, max) = pc_scores(&words(text(gen, "gen")?), &hist)?;
        *out_avg = avg;
        *out_max = max;
        Ok(())
    })
}

/// Generates for every record of a JSONL dataset and returns the metrics
/// report as a JSON object.
///
/// # Safety
/// `model` must be a live model, `dataset_path` a NUL-terminated string and
/// `out` a valid pointer. The result must be freed with [`ph_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ph_evaluate(
    model: *const PhModel,
    dataset_path: *const c_char,
    out: *mut *mut c_char,
) -> PhStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(PhStatus::NullPointer, "model is null".into()))?;
        let ck = &m.inner;
        let records: Vec<_> = read_jsonl(text(dataset_path, "dataset_path")?)?
            .iter()
            .map(|r| encode_record(r, &ck.vocab, ck.config.caps))
            .collect();
        let report = evaluate(&ck.model, &ck.vocab, &records, &ck.config.train.ablation, &ck.config)?;
        *out = c_string(report.to_json())?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ph_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
