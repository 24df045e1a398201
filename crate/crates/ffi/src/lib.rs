//! C interface to `ccan-core`.
//!
//! Every function returns a [`CcanStatus`]; on failure a message is
//! available from [`ccan_last_error`] until the next call on the same
//! thread. Strings returned through out-pointers are owned by the caller
//! and must be released with [`ccan_string_free`]; models with
//! [`ccan_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ccan_core::analysis::{corpus_bleu, locality_entropy, SentenceAttn};
use ccan_core::commands::evaluate::{translate_all, DecodeConfig};
use ccan_core::data::{Checkpoint, Vocab};
use ccan_core::model::{Capture, Model};
use ccan_core::Error;

/// Status codes. 1 to 3 match the `ccan` command's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcanStatus {
    Ok = 0,
    ConfigError = 1,
    DataError = 2,
    RuntimeError = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Opaque handle to a loaded checkpoint.
pub struct CcanModel {
    model: Model<f32>,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcanStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcanStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CcanStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                1 => CcanStatus::ConfigError,
                2 => CcanStatus::DataError,
                _ => CcanStatus::RuntimeError,
            }
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CcanStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

fn out_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::Core(Error::Data("output contains a NUL byte".into())))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL.
#[no_mangle]
pub extern "C" fn ccan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_load(path: *const c_char, out: *mut *mut CcanModel) -> CcanStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let model = ck.model()?;
        *out = Box::into_raw(Box::new(CcanModel { model, vocab: ck.vocab }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`ccan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_free(model: *mut CcanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size (reserved symbols included).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccan_model_vocab_size(model: *const CcanModel, out: *mut usize) -> CcanStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = m.vocab.len();
        Ok(())
    })
}

/// Translates one whitespace-tokenized sentence. Mask-predict models run
/// `iterations` refinement steps; autoregressive models decode greedily and
/// ignore it. The result is written to `*out`.
///
/// # Safety
/// `model` must be a live handle, `src` a NUL-terminated string and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccan_translate(
    model: *const CcanModel,
    src: *const c_char,
    iterations: u32,
    out: *mut *mut c_char,
) -> CcanStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let ids = m.vocab.encode(str_arg(src, "src")?)?;
        if ids.is_empty() {
            return Err(Error::Data("empty source sentence".into()).into());
        }
        let decode = DecodeConfig {
            iterations: iterations as usize,
            oracle_length: false,
        };
        let tr = translate_all(&m.model, &[ids], None, decode, Capture::Off)?;
        *out = out_string(m.vocab.decode(&tr.hypotheses[0]))?;
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Mean base-2 row entropy of a row-major `rows x cols` attention matrix.
/// Rows are renormalized before the entropy.
///
/// # Safety
/// `probs` must point to `rows * cols` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ccan_locality_entropy(
    probs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> CcanStatus {
    guard(|| {
        if probs.is_null() {
            return Err(Fail::Null("probs"));
        }
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument("matrix size overflows".into()))?;
        let data = std::slice::from_raw_parts(probs, n);
        if data.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()).into());
        }
        let layer: Vec<Vec<f64>> = data.chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
        *out = locality_entropy(&SentenceAttn { layers: vec![layer] })?;
        Ok(())
    })
}

/// Corpus BLEU-4 (0 to 100) of `n` whitespace-tokenized hypothesis /
/// reference pairs.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings and
/// `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ccan_corpus_bleu(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> CcanStatus {
    guard(|| {
        if hyps.is_null() {
            return Err(Fail::Null("hyps"));
        }
        if refs.is_null() {
            return Err(Fail::Null("refs"));
        }
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let split = |arr: *const *const c_char, what| -> Result<Vec<Vec<String>>, Fail> {
            std::slice::from_raw_parts(arr, n)
                .iter()
                .map(|&p| Ok(str_arg(p, what)?.split_whitespace().map(str::to_string).collect()))
                .collect()
        };
        *out = corpus_bleu(&split(hyps, "hyps")?, &split(refs, "refs")?)?;
        Ok(())
    })
}
