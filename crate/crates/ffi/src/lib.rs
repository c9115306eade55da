//! C ABI over `embsqueeze`.
//!
//! Every fallible function returns an [`EmsqStatus`]; on failure the
//! message is available from [`emsq_last_error`] on the same thread until
//! the next failing call. Handles are opaque and must be released with the
//! matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use embsqueeze::analysis::{flops_dense, flops_factorized};
use embsqueeze::data::{Sentence, Vocabulary};
use embsqueeze::embedding::choose_rank;
use embsqueeze::format::ModelFile;
use embsqueeze::models::Model;
use embsqueeze::optim::clr;
use embsqueeze::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmsqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    TokenOutOfRange = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded model, full precision or dequantized.
pub struct EmsqModel {
    model: Model,
}

pub struct EmsqVocab {
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn status_of(e: &Error) -> EmsqStatus {
    match e {
        Error::Io { .. } => EmsqStatus::Io,
        Error::Format(_) | Error::Parse { .. } => EmsqStatus::Format,
        Error::TokenOutOfRange { .. } => EmsqStatus::TokenOutOfRange,
        _ => EmsqStatus::InvalidArgument,
    }
}

fn fail(status: EmsqStatus, msg: impl Into<String>) -> EmsqStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (EmsqStatus, String)>) -> EmsqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmsqStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(EmsqStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> (EmsqStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EmsqStatus, String) {
    (EmsqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (EmsqStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (EmsqStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

unsafe fn tokens_arg<'a>(tokens: *const usize, len: usize) -> Result<&'a [usize], (EmsqStatus, String)> {
    if len == 0 {
        return Err((EmsqStatus::InvalidArgument, "token sequence is empty".into()));
    }
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(tokens, len))
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn emsq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model file (quantized files are dequantized).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_load(path: *const c_char, out: *mut *mut EmsqModel) -> EmsqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let model = ModelFile::load(&path).and_then(|f| f.to_model()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EmsqModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`emsq_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_free(model: *mut EmsqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_num_classes(model: *const EmsqModel, out: *mut usize) -> EmsqStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.num_classes();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_vocab_size(model: *const EmsqModel, out: *mut usize) -> EmsqStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.embedding().vocab_size();
        Ok(())
    })
}

/// Class probabilities for one token sequence; `out` must hold
/// `num_classes` values.
///
/// # Safety
/// `tokens` must point to `len` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_probabilities(
    model: *const EmsqModel,
    tokens: *const usize,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> EmsqStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let tokens = tokens_arg(tokens, len)?;
        let classes = m.model.num_classes();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < classes {
            return Err((
                EmsqStatus::BufferTooSmall,
                format!("need room for {classes} probabilities, got {out_len}"),
            ));
        }
        let o = m.model.forward(&Sentence::new(tokens.to_vec(), 0)).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, classes).copy_from_slice(&o.probabilities);
        Ok(())
    })
}

/// Most probable class (lowest index on ties).
///
/// # Safety
/// `tokens` must point to `len` values and `out_class` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_model_predict(
    model: *const EmsqModel,
    tokens: *const usize,
    len: usize,
    out_class: *mut usize,
) -> EmsqStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let tokens = tokens_arg(tokens, len)?;
        let out = out_class.as_mut().ok_or_else(|| null("out_class"))?;
        *out = m.model.predict(&Sentence::new(tokens.to_vec(), 0)).map_err(lib_err)?;
        Ok(())
    })
}

/// Loads a `vocab.txt` written next to a model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_vocab_load(path: *const c_char, out: *mut *mut EmsqVocab) -> EmsqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let vocab = Vocabulary::load(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(EmsqVocab { vocab }));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from [`emsq_vocab_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn emsq_vocab_free(vocab: *mut EmsqVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Tokenizes `text` and writes ids to `out_ids`. `out_len` always receives
/// the id count; if it exceeds `capacity` nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `text` must be NUL-terminated, `out_ids` must hold `capacity` values
/// (it may be null when `capacity` is 0), and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn emsq_vocab_encode(
    vocab: *const EmsqVocab,
    text: *const c_char,
    out_ids: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> EmsqStatus {
    guard(|| {
        let v = vocab.as_ref().ok_or_else(|| null("vocab"))?;
        if text.is_null() {
            return Err(null("text"));
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| (EmsqStatus::InvalidArgument, "text is not UTF-8".to_string()))?;
        let len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        let ids = v.vocab.encode(text);
        *len = ids.len();
        if ids.len() > capacity {
            return Err((
                EmsqStatus::BufferTooSmall,
                format!("need room for {} ids, got {capacity}", ids.len()),
            ));
        }
        if out_ids.is_null() {
            return Err(null("out_ids"));
        }
        std::slice::from_raw_parts_mut(out_ids, ids.len()).copy_from_slice(&ids);
        Ok(())
    })
}

/// Rank kept when a `m x n` table retains fraction `p`.
///
/// # Safety
/// `out_k` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsq_choose_rank(p: f64, m: usize, n: usize, out_k: *mut usize) -> EmsqStatus {
    guard(|| {
        let out = out_k.as_mut().ok_or_else(|| null("out_k"))?;
        *out = choose_rank(p, m, n).map_err(lib_err)?.k;
        Ok(())
    })
}

/// `(2m - 1) n`; 0 when a dimension is 0.
#[no_mangle]
pub extern "C" fn emsq_flops_dense(m: u64, n: u64) -> u64 {
    if m == 0 || n == 0 {
        return 0;
    }
    flops_dense(m, n)
}

/// `2(m + n) k - (n + k)`; 0 when a dimension is 0.
#[no_mangle]
pub extern "C" fn emsq_flops_factorized(m: u64, n: u64, k: u64) -> u64 {
    if m == 0 || n == 0 || k == 0 {
        return 0;
    }
    flops_factorized(m, n, k)
}

/// Triangular cyclical learning rate at `iteration`.
#[no_mangle]
pub extern "C" fn emsq_clr(iteration: u64, step_size: u64, lr_lb: f64, lr_ub: f64) -> f64 {
    clr(iteration, step_size, lr_lb, lr_ub)
}
