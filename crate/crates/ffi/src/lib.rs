//! C ABI over the `quark` crate.
//!
//! Models and rewards are opaque handles created by `quark_*_new`/`_load`
//! functions and released with the matching `_free`. Every fallible call
//! returns a [`QuarkStatus`]; on failure a message is available from
//! [`quark_last_error`] on the same thread until the next failing call.
//! Strings returned through out-pointers are owned by the caller and must be
//! released with [`quark_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use quark::model::{Checkpoint, DecodingParams, LanguageModel, Tokenizer};
use quark::rewards::{Lexicon, TextReward};
use quark::rng::stream;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuarkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Model = 6,
    Panic = 7,
}

/// A language model with its tokenizer, loaded from a checkpoint.
pub struct QuarkModel {
    model: LanguageModel,
    tokenizer: Tokenizer,
}

/// A text reward: constant, diversity, sentiment or banned words.
pub struct QuarkReward {
    reward: TextReward,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(QuarkStatus, String);

impl From<quark::Error> for Failure {
    fn from(e: quark::Error) -> Self {
        let status = match &e {
            quark::Error::Io(_) | quark::Error::File { .. } => QuarkStatus::Io,
            quark::Error::Checkpoint(_) | quark::Error::Json(_) => QuarkStatus::Checkpoint,
            quark::Error::Reward(_) => QuarkStatus::InvalidArgument,
            _ => QuarkStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(QuarkStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QuarkStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(QuarkStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => QuarkStatus::Ok,
        Err(Failure(status, msg)) => {
            let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
            status
        }
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(QuarkStatus::NullPointer, "null string".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(QuarkStatus::InvalidUtf8, "string is not UTF-8".into()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(QuarkStatus::NullPointer, "null handle".into()))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(QuarkStatus::NullPointer, "null output pointer".into()));
    }
    out.write(value);
    Ok(())
}

/// Message of the most recent failure on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn quark_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn quark_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn quark_model_load(path: *const c_char, out: *mut *mut QuarkModel) -> QuarkStatus {
    guard(|| {
        let ck = Checkpoint::load(text(path)?)?;
        let handle = Box::new(QuarkModel { model: ck.model()?, tokenizer: ck.tokenizer() });
        write_out(out, Box::into_raw(handle))
    })
}

/// # Safety
/// `model` must come from [`quark_model_load`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn quark_model_free(model: *mut QuarkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of reward tokens the model was trained with (0 for a reference model).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn quark_model_n_quantiles(model: *const QuarkModel, out: *mut usize) -> QuarkStatus {
    guard(|| write_out(out, handle(model)?.model.config().n_reward_tokens))
}

fn reward_token(m: &QuarkModel, quantile: u32) -> Result<Option<u32>, Failure> {
    if quantile == 0 {
        return Ok(None);
    }
    m.model
        .reward_token(quantile as usize)
        .map(Some)
        .ok_or_else(|| invalid(format!("quantile {quantile} out of range 1..={}", m.model.config().n_reward_tokens)))
}

/// Samples a continuation of `prompt` conditioned on reward quantile `quantile`
/// (1 is the lowest; 0 means unconditioned). `top_p <= 0` decodes greedily.
/// Generation stops at end-of-sequence or after `max_new_tokens`.
///
/// # Safety
/// `model` must be a live handle, `prompt` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn quark_model_sample(
    model: *const QuarkModel,
    prompt: *const c_char,
    quantile: u32,
    max_new_tokens: usize,
    top_p: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> QuarkStatus {
    guard(|| {
        let m = handle(model)?;
        let x = m.tokenizer.encode_prompt(text(prompt)?);
        let token = reward_token(m, quantile)?;
        let mut params = if top_p <= 0.0 {
            DecodingParams::greedy(max_new_tokens)
        } else if top_p <= 1.0 {
            DecodingParams::nucleus(top_p, max_new_tokens)
        } else {
            return Err(invalid(format!("top_p {top_p} exceeds 1")));
        };
        params.stop_token = Some(m.tokenizer.eos());
        let y = m.model.sample(&x, token, &params, &mut stream(seed, &[]))?;
        let body: Vec<u32> = y.into_iter().filter(|&t| !m.tokenizer.is_special(t)).collect();
        let s = CString::new(m.tokenizer.decode(&body)).map_err(|_| invalid("decoded text contains NUL"))?;
        write_out(out, s.into_raw())
    })
}

/// Natural-log probability of `continuation` given `prompt` under quantile `quantile` (0 = unconditioned).
///
/// # Safety
/// `model` must be a live handle, both strings NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn quark_model_logprob(
    model: *const QuarkModel,
    prompt: *const c_char,
    continuation: *const c_char,
    quantile: u32,
    out: *mut f64,
) -> QuarkStatus {
    guard(|| {
        let m = handle(model)?;
        let x = m.tokenizer.encode_prompt(text(prompt)?);
        let y = m.tokenizer.encode(text(continuation)?);
        let lp = m.model.sequence_logprob(&x, &y, reward_token(m, quantile)?)?;
        write_out(out, lp)
    })
}

/// Unconditioned perplexity of `n` continuations given their prompts, pooled over all tokens.
///
/// # Safety
/// `prompts` and `continuations` must each point to `n` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quark_model_perplexity(
    model: *const QuarkModel,
    prompts: *const *const c_char,
    continuations: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> QuarkStatus {
    guard(|| {
        let m = handle(model)?;
        if n > 0 && (prompts.is_null() || continuations.is_null()) {
            return Err(Failure(QuarkStatus::NullPointer, "null array".into()));
        }
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let x = m.tokenizer.encode_prompt(text(*prompts.add(i))?);
            let y = m.tokenizer.encode(text(*continuations.add(i))?);
            pairs.push((x, y));
        }
        write_out(out, m.model.perplexity(&pairs)?)
    })
}

unsafe fn new_reward(reward: TextReward, out: *mut *mut QuarkReward) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(QuarkReward { reward })))
}

unsafe fn terms(p: *const c_char) -> Result<Vec<String>, Failure> {
    if p.is_null() {
        return Ok(Vec::new());
    }
    Ok(Lexicon::parse_terms(text(p)?))
}

fn lexicon(pos: &[String], neg: &[String]) -> Result<Lexicon, Failure> {
    let pos: Vec<&str> = pos.iter().map(String::as_str).collect();
    let neg: Vec<&str> = neg.iter().map(String::as_str).collect();
    Lexicon::new(&pos, &neg).map_err(|e| invalid(e.to_string()))
}

/// Reward that always returns `value`, which must lie in [0, 1].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_constant(value: f64, out: *mut *mut QuarkReward) -> QuarkStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&value) {
            return Err(invalid(format!("constant reward {value} outside [0, 1]")));
        }
        new_reward(TextReward::Constant(value), out)
    })
}

/// Distinct-n-gram diversity of the continuation.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_diversity(out: *mut *mut QuarkReward) -> QuarkStatus {
    guard(|| new_reward(TextReward::Diversity, out))
}

/// Lexicon sentiment. Each list holds one term per line; `#` starts a comment.
///
/// # Safety
/// Both lists must be NUL-terminated strings or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_sentiment(
    positive: *const c_char,
    negative: *const c_char,
    out: *mut *mut QuarkReward,
) -> QuarkStatus {
    guard(|| new_reward(TextReward::Sentiment(lexicon(&terms(positive)?, &terms(negative)?)?), out))
}

/// One minus the fraction of continuation words that are banned. `banned` holds one term per line.
///
/// # Safety
/// `banned` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_banned(banned: *const c_char, out: *mut *mut QuarkReward) -> QuarkStatus {
    guard(|| {
        let neg = terms(banned)?;
        if neg.is_empty() {
            return Err(invalid("banned list is empty"));
        }
        new_reward(TextReward::Banned(lexicon(&[], &neg)?), out)
    })
}

/// Scores `continuation` as a reply to `prompt`.
///
/// # Safety
/// `reward` must be a live handle, both strings NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_score(
    reward: *const QuarkReward,
    prompt: *const c_char,
    continuation: *const c_char,
    out: *mut f64,
) -> QuarkStatus {
    guard(|| {
        let r = handle(reward)?;
        write_out(out, r.reward.score(text(prompt)?, text(continuation)?))
    })
}

/// # Safety
/// `reward` must come from a `quark_reward_*` constructor and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn quark_reward_free(reward: *mut QuarkReward) {
    if !reward.is_null() {
        drop(Box::from_raw(reward));
    }
}
