use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use quark::model::{Checkpoint, LanguageModel, ModelConfig, Tokenizer};
use quark::rng::stream;
use quark_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn write_checkpoint(dir: &std::path::Path, reward_tokens: usize) -> CString {
    let tok = Tokenizer::word_from_corpus("the cat sat on the mat .");
    let cfg = ModelConfig {
        base_vocab: tok.vocab_size(),
        n_reward_tokens: 0,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_length: 16,
        tied: true,
    };
    let mut m = LanguageModel::new(cfg, &mut stream(3, &[])).unwrap();
    if reward_tokens > 0 {
        m.extend_vocab(reward_tokens, &mut stream(4, &[])).unwrap();
    }
    let path = dir.join(format!("m{reward_tokens}.ckpt"));
    Checkpoint::from_model(&m, &tok).save(&path).unwrap();
    c(path.to_str().unwrap())
}

fn last_error() -> String {
    let p = quark_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_roundtrip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), 3);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(quark_model_load(path.as_ptr(), &mut m), QuarkStatus::Ok);
        let mut k = 0usize;
        assert_eq!(quark_model_n_quantiles(m, &mut k), QuarkStatus::Ok);
        assert_eq!(k, 3);

        let sample = |seed: u64, q: u32| {
            let mut out = ptr::null_mut();
            assert_eq!(quark_model_sample(m, c("the cat").as_ptr(), q, 5, 0.9, seed, &mut out), QuarkStatus::Ok);
            let s = CStr::from_ptr(out).to_str().unwrap().to_owned();
            quark_string_free(out);
            s
        };
        assert_eq!(sample(11, 3), sample(11, 3));
        assert!(sample(11, 0).split_whitespace().count() <= 5);

        let mut lp = 0.0;
        assert_eq!(quark_model_logprob(m, c("the").as_ptr(), c("cat sat").as_ptr(), 2, &mut lp), QuarkStatus::Ok);
        assert!(lp < 0.0 && lp.is_finite());

        let mut lp0 = 0.0;
        assert_eq!(quark_model_logprob(m, c("the").as_ptr(), c("cat sat").as_ptr(), 0, &mut lp0), QuarkStatus::Ok);
        let prompts = [c("the")];
        let conts = [c("cat sat")];
        let pp: Vec<_> = prompts.iter().map(|s| s.as_ptr()).collect();
        let cp: Vec<_> = conts.iter().map(|s| s.as_ptr()).collect();
        let mut ppl = 0.0;
        assert_eq!(quark_model_perplexity(m, pp.as_ptr(), cp.as_ptr(), 1, &mut ppl), QuarkStatus::Ok);
        assert!((ppl - (-lp0 / 2.0).exp()).abs() < 1e-9 * ppl);

        let mut out = ptr::null_mut();
        assert_eq!(quark_model_sample(m, c("the").as_ptr(), 4, 5, 0.9, 0, &mut out), QuarkStatus::InvalidArgument);
        assert!(last_error().contains("quantile 4"));
        assert_eq!(quark_model_sample(m, c("the").as_ptr(), 1, 5, 1.5, 0, &mut out), QuarkStatus::InvalidArgument);
        assert!(out.is_null());
        quark_model_free(m);
    }
}

#[test]
fn load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = c(dir.path().join("missing.ckpt").to_str().unwrap());
    let garbage_path = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage_path, b"not a checkpoint").unwrap();
    let garbage = c(garbage_path.to_str().unwrap());
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(quark_model_load(missing.as_ptr(), &mut m), QuarkStatus::Io);
        assert!(last_error().contains("missing.ckpt"));
        assert_eq!(quark_model_load(garbage.as_ptr(), &mut m), QuarkStatus::Checkpoint);
        assert_eq!(quark_model_load(ptr::null(), &mut m), QuarkStatus::NullPointer);
        assert!(m.is_null());
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(quark_model_load(bad_utf8.as_ptr().cast(), &mut m), QuarkStatus::InvalidUtf8);
        quark_model_free(ptr::null_mut());
        quark_reward_free(ptr::null_mut());
        quark_string_free(ptr::null_mut());
    }
}

#[test]
fn rewards_score_text() {
    unsafe {
        let score = |r: *mut QuarkReward, y: &str| {
            let mut v = f64::NAN;
            assert_eq!(quark_reward_score(r, c("x").as_ptr(), c(y).as_ptr(), &mut v), QuarkStatus::Ok);
            v
        };
        let mut r = ptr::null_mut();
        assert_eq!(quark_reward_banned(c("grim\n# comment\nrat\n").as_ptr(), &mut r), QuarkStatus::Ok);
        assert_eq!(score(r, "big cat"), 1.0);
        assert_eq!(score(r, "grim rat sees cat"), 0.5);
        quark_reward_free(r);

        assert_eq!(quark_reward_sentiment(c("good").as_ptr(), c("bad").as_ptr(), &mut r), QuarkStatus::Ok);
        assert!(score(r, "good good") > score(r, "bad bad"));
        quark_reward_free(r);

        assert_eq!(quark_reward_diversity(&mut r), QuarkStatus::Ok);
        assert!(score(r, "a b c d") > score(r, "a a a a"));
        quark_reward_free(r);

        assert_eq!(quark_reward_constant(0.25, &mut r), QuarkStatus::Ok);
        assert_eq!(score(r, "anything"), 0.25);
        quark_reward_free(r);

        let mut bad = ptr::null_mut();
        assert_eq!(quark_reward_constant(1.5, &mut bad), QuarkStatus::InvalidArgument);
        assert_eq!(quark_reward_banned(c("# nothing\n").as_ptr(), &mut bad), QuarkStatus::InvalidArgument);
        assert_eq!(quark_reward_sentiment(c("x").as_ptr(), c("x").as_ptr(), &mut bad), QuarkStatus::InvalidArgument);
        assert!(bad.is_null());
        let mut v = 0.0;
        assert_eq!(quark_reward_score(ptr::null(), c("x").as_ptr(), c("y").as_ptr(), &mut v), QuarkStatus::NullPointer);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/quark.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["quark_model_load", "quark_model_sample", "quark_reward_score", "QUARK_STATUS_PANIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"quark.h\"\nint main(void) { QuarkModel *m = 0; return quark_model_load(\"x\", &m) == QUARK_STATUS_OK; }\n",
    )
    .unwrap();
    let status = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler found, skipping compile check");
            return;
        }
    };
    assert!(status.success());
}
