//! C ABI over the `neufa` crate.
//!
//! Models and corpora are opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`NeufaStatus`]; the message of the last failure on the calling
//! thread is available from [`neufa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use neufa::boundary::BoundarySet;
use neufa::data::{generate_synthetic_corpus, load_corpus, save_corpus, Corpus, SyntheticSpec, Utterance};
use neufa::harness::{align_corpus, align_utterance, evaluate, read_predictions};
use neufa::model::{load_checkpoint, save_checkpoint, NeuFA, NeuFAConfig};
use neufa::tensor::Tensor;
use neufa::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeufaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Input = 5,
    Parse = 6,
    Format = 7,
    Shape = 8,
    Contract = 9,
    NonFinite = 10,
    Json = 11,
    Panic = 12,
}

/// A trained or freshly initialised aligner.
pub struct NeufaModel {
    inner: NeuFA,
}

/// Utterances with reference boundaries.
pub struct NeufaCorpus {
    inner: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> NeufaStatus {
    match e {
        Error::Shape { .. } => NeufaStatus::Shape,
        Error::Config(_) => NeufaStatus::Config,
        Error::Contract(_) => NeufaStatus::Contract,
        Error::Input(_) => NeufaStatus::Input,
        Error::Parse { .. } => NeufaStatus::Parse,
        Error::Format(_) => NeufaStatus::Format,
        Error::NonFinite { .. } => NeufaStatus::NonFinite,
        Error::Io(_) => NeufaStatus::Io,
        Error::Json(_) => NeufaStatus::Json,
    }
}

struct Failure(NeufaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NeufaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NeufaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NeufaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NeufaStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(NeufaStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn json_arg<T: serde::de::DeserializeOwned + Default>(s: Option<&str>) -> Result<T, Failure> {
    match s {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| Failure(NeufaStatus::Config, e.to_string())),
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn neufa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn neufa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New model from a JSON configuration; null means all defaults.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn neufa_model_new(config_json: *const c_char, out: *mut *mut NeufaModel) -> NeufaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let json = if config_json.is_null() {
            None
        } else {
            Some(str_arg(config_json, "config_json")?)
        };
        let config: NeuFAConfig = json_arg(json)?;
        let inner = NeuFA::new(config)?;
        *out = Box::into_raw(Box::new(NeufaModel { inner }));
        Ok(())
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn neufa_model_load(path: *const c_char, out: *mut *mut NeufaModel) -> NeufaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = load_checkpoint(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(NeufaModel { inner: ck.model }));
        Ok(())
    })
}

/// Writes the model parameters (no optimizer state) to a checkpoint.
///
/// # Safety
/// `model` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn neufa_model_save(model: *const NeufaModel, path: *const c_char) -> NeufaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        save_checkpoint(path_arg(path, "path")?, &m.inner, None, None)?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn neufa_model_free(model: *mut NeufaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Aligns one utterance. `frames` holds `n_frames * d_mel` values row by
/// row; `left_ms` and `right_ms` must have room for `n_text` values.
///
/// # Safety
/// All pointers are valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn neufa_align(
    model: *const NeufaModel,
    tokens: *const usize,
    n_text: usize,
    frames: *const f64,
    n_frames: usize,
    d_mel: usize,
    frame_shift_ms: f64,
    left_ms: *mut f64,
    right_ms: *mut f64,
) -> NeufaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if tokens.is_null() || frames.is_null() || left_ms.is_null() || right_ms.is_null() {
            return Err(null("tokens, frames, left_ms or right_ms"));
        }
        if n_text == 0 || n_frames == 0 {
            return Err(Failure(NeufaStatus::Input, "empty utterance".into()));
        }
        if !(frame_shift_ms > 0.0) {
            return Err(Failure(NeufaStatus::Input, format!("frame shift must be positive, got {frame_shift_ms}")));
        }
        let tokens = std::slice::from_raw_parts(tokens, n_text).to_vec();
        let data = std::slice::from_raw_parts(frames, n_frames * d_mel).to_vec();
        let utt = Utterance {
            id: String::new(),
            tokens,
            frames: Tensor::new(&[n_frames, d_mel], data)?,
            boundaries: BoundarySet {
                units: Vec::new(),
                frame_shift_ms,
            },
        };
        let a = align_utterance(&m.inner, &utt)?;
        let left = std::slice::from_raw_parts_mut(left_ms, n_text);
        let right = std::slice::from_raw_parts_mut(right_ms, n_text);
        for (i, u) in a.boundaries.units.iter().enumerate() {
            left[i] = u.left_ms;
            right[i] = u.right_ms;
        }
        Ok(())
    })
}

/// Loads a corpus file (one JSON utterance per line).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn neufa_corpus_load(path: *const c_char, out: *mut *mut NeufaCorpus) -> NeufaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = load_corpus(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(NeufaCorpus { inner }));
        Ok(())
    })
}

/// Synthetic corpus from a JSON spec; null means all defaults.
///
/// # Safety
/// `spec_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn neufa_corpus_generate(spec_json: *const c_char, out: *mut *mut NeufaCorpus) -> NeufaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let json = if spec_json.is_null() {
            None
        } else {
            Some(str_arg(spec_json, "spec_json")?)
        };
        let spec: SyntheticSpec = json_arg(json)?;
        let inner = generate_synthetic_corpus(&spec)?;
        *out = Box::into_raw(Box::new(NeufaCorpus { inner }));
        Ok(())
    })
}

/// # Safety
/// `corpus` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn neufa_corpus_save(corpus: *const NeufaCorpus, path: *const c_char) -> NeufaStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        save_corpus(&c.inner, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of utterances, or 0 for a null handle.
///
/// # Safety
/// `corpus` is null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn neufa_corpus_len(corpus: *const NeufaCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.len())
}

/// # Safety
/// `corpus` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn neufa_corpus_free(corpus: *mut NeufaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Aligns every utterance into `out_dir` (TextGrids, attention CSVs and
/// `alignments.jsonl`).
///
/// # Safety
/// Handles come from this library; `out_dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn neufa_align_corpus(
    model: *const NeufaModel,
    corpus: *const NeufaCorpus,
    out_dir: *const c_char,
) -> NeufaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        align_corpus(&m.inner, &c.inner, path_arg(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Pooled boundary errors of the predictions in `pred_dir` against the
/// reference corpus. `accuracy` must have room for 4 values (10, 25, 50
/// and 100 ms); it may be null.
///
/// # Safety
/// `corpus` comes from this library; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn neufa_evaluate(
    pred_dir: *const c_char,
    corpus: *const NeufaCorpus,
    mae_ms: *mut f64,
    median_ms: *mut f64,
    accuracy: *mut f64,
) -> NeufaStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        let mae = out_arg(mae_ms, "mae_ms")?;
        let median = out_arg(median_ms, "median_ms")?;
        let r = evaluate(&read_predictions(path_arg(pred_dir, "pred_dir")?)?, &c.inner)?;
        *mae = r.mae_ms;
        *median = r.median_ms;
        if !accuracy.is_null() {
            let acc = std::slice::from_raw_parts_mut(accuracy, r.accuracy.len());
            for (slot, a) in acc.iter_mut().zip(&r.accuracy) {
                *slot = a.accuracy;
            }
        }
        Ok(())
    })
}
