//! C interface to mkprompt.
//!
//! Every fallible function returns an [`MkpStatus`]; on failure a message is
//! available from [`mkp_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `*_free` function.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`mkp_string_free`].
//!
//! All text crosses the boundary as NUL-terminated UTF-8; token sequences are
//! whitespace-separated, multi-line inputs are newline-separated.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mkprompt::corpus::{detokenize, parse_parallel, tokenize, BpeModel, SentencePair, Vocab};
use mkprompt::decode::{translate, BeamConfig};
use mkprompt::model::{load_checkpoint, ModelParams};
use mkprompt::retrieval::{similarity, TmIndex};
use mkprompt::terminology::{load_dictionary, parse_dictionary, TermMatcher};
use mkprompt::Error;

#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkpStatus {
    MKP_OK = 0,
    MKP_NULL_ARGUMENT = 1,
    MKP_INVALID_UTF8 = 2,
    MKP_IO = 3,
    MKP_FORMAT = 4,
    MKP_INVALID_ARGUMENT = 5,
    MKP_MODEL = 6,
    MKP_PANIC = 7,
}

/// Translation memory with fuzzy-match retrieval.
pub struct MkpTmIndex(TmIndex);

/// Terminology dictionary compiled for soft matching.
pub struct MkpTermMatcher(TermMatcher);

/// Trained model with its vocabulary and, optionally, its BPE merges.
pub struct MkpModel {
    params: ModelParams,
    vocab: Vocab,
    bpe: Option<BpeModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MkpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MkpStatus::MKP_IO,
            Error::Format { .. }
            | Error::LineCountMismatch { .. }
            | Error::Parse { .. }
            | Error::Json(_) => MkpStatus::MKP_FORMAT,
            Error::Shape(_) | Error::Checkpoint(_) | Error::Divergence { .. } => {
                MkpStatus::MKP_MODEL
            }
            _ => MkpStatus::MKP_INVALID_ARGUMENT,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MkpStatus::MKP_FORMAT, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MkpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            MkpStatus::MKP_OK
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_owned());
            MkpStatus::MKP_PANIC
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            MkpStatus::MKP_NULL_ARGUMENT,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(MkpStatus::MKP_INVALID_UTF8, format!("{what}: {e}")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(MkpStatus::MKP_NULL_ARGUMENT, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(
            MkpStatus::MKP_NULL_ARGUMENT,
            "output pointer is null".to_owned(),
        ));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(MkpStatus::MKP_FORMAT, e.to_string()))?;
    put(out, c.into_raw())
}

/// Message for the last failed call on this thread, or NULL after a
/// successful one. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn mkp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn mkp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Static version string; do not free.
#[no_mangle]
pub extern "C" fn mkp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Token-level fuzzy-match similarity of two sentences, in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn mkp_similarity(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> MkpStatus {
    guard(|| {
        let (a, b) = (tokenize(text(a, "a")?), tokenize(text(b, "b")?));
        put(out, similarity(&a, &b)?)
    })
}

/// Builds a memory from two newline-separated documents of equal length.
#[no_mangle]
pub unsafe extern "C" fn mkp_tm_from_text(
    source: *const c_char,
    target: *const c_char,
    out: *mut *mut MkpTmIndex,
) -> MkpStatus {
    guard(|| {
        let pairs = parse_parallel(
            text(source, "source")?,
            text(target, "target")?,
            "<source>",
            "<target>",
        )?;
        put(
            out,
            Box::into_raw(Box::new(MkpTmIndex(TmIndex::build(pairs)))),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn mkp_tm_load(
    source_path: *const c_char,
    target_path: *const c_char,
    out: *mut *mut MkpTmIndex,
) -> MkpStatus {
    guard(|| {
        let pairs = mkprompt::corpus::load_parallel(
            Path::new(text(source_path, "source_path")?),
            Path::new(text(target_path, "target_path")?),
        )?;
        put(
            out,
            Box::into_raw(Box::new(MkpTmIndex(TmIndex::build(pairs)))),
        )
    })
}

/// Number of entries, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn mkp_tm_len(tm: *const MkpTmIndex) -> usize {
    tm.as_ref().map_or(0, |t| t.0.len())
}

/// Best entry strictly above `lambda` as a JSON object
/// `{"id", "score", "src", "tgt"}`, or the JSON literal `null`.
#[no_mangle]
pub unsafe extern "C" fn mkp_tm_retrieve(
    tm: *const MkpTmIndex,
    query: *const c_char,
    lambda: f64,
    out_json: *mut *mut c_char,
) -> MkpStatus {
    guard(|| {
        let tm = handle(tm, "tm")?;
        if !(0.0..1.0).contains(&lambda) {
            return Err(Failure(
                MkpStatus::MKP_INVALID_ARGUMENT,
                "lambda must lie in [0, 1)".to_owned(),
            ));
        }
        let hit =
            tm.0.retrieve_best(&tokenize(text(query, "query")?), lambda)
                .map(|h| {
                    serde_json::json!({
                        "id": h.pair.id,
                        "score": h.score,
                        "src": detokenize(&h.pair.source),
                        "tgt": detokenize(&h.pair.target),
                    })
                });
        put_string(out_json, serde_json::to_string(&hit)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn mkp_tm_free(tm: *mut MkpTmIndex) {
    if !tm.is_null() {
        drop(Box::from_raw(tm));
    }
}

/// Compiles a tab-separated dictionary (`source<TAB>target` per line).
#[no_mangle]
pub unsafe extern "C" fn mkp_terms_from_tsv(
    tsv: *const c_char,
    out: *mut *mut MkpTermMatcher,
) -> MkpStatus {
    guard(|| {
        let dict = parse_dictionary(text(tsv, "tsv")?, "<dictionary>")?;
        put(
            out,
            Box::into_raw(Box::new(MkpTermMatcher(TermMatcher::new(&dict)))),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn mkp_terms_load(
    path: *const c_char,
    out: *mut *mut MkpTermMatcher,
) -> MkpStatus {
    guard(|| {
        let dict = load_dictionary(Path::new(text(path, "path")?))?;
        put(
            out,
            Box::into_raw(Box::new(MkpTermMatcher(TermMatcher::new(&dict)))),
        )
    })
}

/// Dictionary entries found in the pair, as a JSON array of
/// `[source, target]` string pairs.
#[no_mangle]
pub unsafe extern "C" fn mkp_terms_match(
    matcher: *const MkpTermMatcher,
    source: *const c_char,
    target: *const c_char,
    out_json: *mut *mut c_char,
) -> MkpStatus {
    guard(|| {
        let m = handle(matcher, "matcher")?;
        let pair = SentencePair::from_text(0, text(source, "source")?, text(target, "target")?)?;
        let found: Vec<(String, String)> =
            m.0.soft_match(&pair)
                .matches
                .iter()
                .map(|e| (detokenize(&e.source_terms), detokenize(&e.target_terms)))
                .collect();
        put_string(out_json, serde_json::to_string(&found)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn mkp_terms_free(matcher: *mut MkpTermMatcher) {
    if !matcher.is_null() {
        drop(Box::from_raw(matcher));
    }
}

/// Loads a checkpoint and the vocabulary it was trained with. `bpe_path`
/// may be NULL when callers pass inputs already split into subword units.
#[no_mangle]
pub unsafe extern "C" fn mkp_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    bpe_path: *const c_char,
    out: *mut *mut MkpModel,
) -> MkpStatus {
    guard(|| {
        let vocab = Vocab::load(Path::new(text(vocab_path, "vocab_path")?))?;
        let (params, meta) = load_checkpoint(Path::new(text(checkpoint_path, "checkpoint_path")?))?;
        if meta.vocab_hash != vocab.hash() {
            return Err(Failure(
                MkpStatus::MKP_MODEL,
                "checkpoint was trained with a different vocabulary".to_owned(),
            ));
        }
        let bpe = if bpe_path.is_null() {
            None
        } else {
            Some(BpeModel::load(Path::new(text(bpe_path, "bpe_path")?))?)
        };
        put(
            out,
            Box::into_raw(Box::new(MkpModel { params, vocab, bpe })),
        )
    })
}

/// Translates a prompted input (knowledge blocks followed by `[Input]` and
/// the sentence). `prefix` is the forced decoder prefix, for example
/// `[Term] ... [Output]`; NULL or empty forces `[Output]` only. Writes the
/// translation as a space-separated line.
#[no_mangle]
pub unsafe extern "C" fn mkp_model_translate(
    model: *const MkpModel,
    input: *const c_char,
    prefix: *const c_char,
    beam_size: usize,
    out_text: *mut *mut c_char,
) -> MkpStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let split = |s: &str| {
            let t = tokenize(s);
            match &m.bpe {
                Some(b) => b.encode_sequence(&t),
                None => t,
            }
        };
        let input = split(text(input, "input")?);
        let prefix = if prefix.is_null() {
            Vec::new()
        } else {
            split(text(prefix, "prefix")?)
        };
        let cfg = BeamConfig {
            beam_size,
            ..BeamConfig::default()
        };
        let (words, _) = translate(&m.params, &m.vocab, &input, &prefix, &cfg)?;
        put_string(out_text, detokenize(&words))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mkp_model_free(model: *mut MkpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
