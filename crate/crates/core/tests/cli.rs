use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "d_model=16",
    "--set", "n_layers=1",
    "--set", "pretrain_steps=40",
    "--set", "iterations=2",
    "--set", "total_steps=6",
    "--set", "batch_size=4",
    "--set", "max_new_tokens=6",
    "--set", "eval_samples=2",
];

fn quark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quark")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = quark(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the banned task into `dir` with a shrunken prompt set.
fn task(dir: &Path) -> String {
    ok(&["gen-task", "--task", "banned", "--out-dir", s(dir), "--seed", "2"]);
    for name in ["prompts.txt", "eval_prompts.txt"] {
        let path = dir.join(name);
        let head: Vec<String> = fs::read_to_string(&path).unwrap().lines().take(10).map(String::from).collect();
        fs::write(&path, head.join("\n") + "\n").unwrap();
    }
    dir.join("task.conf").to_str().unwrap().to_string()
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(TINY);
    args
}

#[test]
fn exit_codes_are_distinct() {
    assert_eq!(quark(&["--help"]).status.code(), Some(0));
    assert_eq!(quark(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(quark(&["pretrain", "--config", "/nonexistent/quark.conf"]).status.code(), Some(2));
    assert_eq!(quark(&["pretrain", "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(quark(&["pretrain", "--set", "d_model=sixteen"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let out = dir.path().join("run");
    assert_eq!(quark(&["pretrain", "--config", &conf, "--workers", "0"]).status.code(), Some(2));
    // Training before pretraining: the reference checkpoint is missing at run time.
    let code = quark(&["train", "--config", &conf, "--out-dir", s(&out)]).status.code();
    assert_eq!(code, Some(1));
    assert_eq!(quark(&["ablate", "--config", &conf, "--sweep", "warp-drive"]).status.code(), Some(2));
}

#[test]
fn empty_corpus_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "\n  \n").unwrap();
    let conf = dir.path().join("q.conf");
    fs::write(&conf, format!("corpus = {}\n", s(&corpus))).unwrap();
    let out = quark(&["pretrain", "--config", s(&conf), "--out-dir", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn pretrain_train_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let run = dir.path().join("run");
    let common = |cmd: &'static str| with_tiny(vec![cmd, "--config", &conf, "--out-dir", s(&run)]);
    ok(&common("pretrain"));
    assert!(run.join("p0.ckpt").exists());
    ok(&common("train"));
    let mut names: Vec<String> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    for want in ["final.ckpt", "iter-0.ckpt", "iter-1.ckpt", "iter-1.pool.jsonl", "reports.jsonl", "eval.tsv", "eval.jsonl"] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
    let reports = fs::read_to_string(run.join("reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 2);
    let first = fs::read(run.join("final.ckpt")).unwrap();

    let ckpt = run.join("final.ckpt");
    let mut eval = common("eval");
    eval.extend(["--checkpoint", s(&ckpt), "--per-quantile"]);
    let a = ok(&eval);
    assert_eq!(a.lines().filter(|l| !l.starts_with("label")).count(), 5, "{a}");
    assert_eq!(ok(&eval), a);

    // Rerunning with the same seed reproduces the checkpoint bit for bit.
    ok(&common("train"));
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), first);

    // Resuming from the first round reproduces the second.
    let resume_from = run.join("iter-0.ckpt");
    let mut resume = common("train");
    resume.extend(["--resume", s(&resume_from)]);
    ok(&resume);
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), first);
    assert_eq!(fs::read_to_string(run.join("reports.jsonl")).unwrap(), reports);

    let pool = run.join("iter-1.pool.jsonl");
    let table = ok(&["inspect-pool", s(&pool), "--quantiles", "5"]);
    assert_eq!(table.lines().count(), 6, "{table}");
}

#[test]
fn quantile_sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let conf = task(dir.path());
    let run = dir.path().join("run");
    ok(&with_tiny(vec!["pretrain", "--config", &conf, "--out-dir", s(&run)]));
    let out = ok(&with_tiny(vec!["ablate", "--config", &conf, "--out-dir", s(&run), "--sweep", "quantiles"]));
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with("label")).collect();
    assert_eq!(rows.len(), 3, "{out}");
    assert!(run.join("ablate-quantiles.tsv").exists());
}

#[test]
fn inspect_pool_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let lines: Vec<String> = (1..=10)
        .map(|i| format!(r#"{{"prompt":[1],"continuation":[2],"reward":{},"insertion_index":{}}}"#, i as f64 / 10.0, i))
        .collect();
    fs::write(&pool, lines.join("\n")).unwrap();
    let out = ok(&["inspect-pool", s(&pool), "--quantiles", "5"]);
    let means: Vec<f64> = out.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    for (m, want) in means.iter().zip([0.15, 0.35, 0.55, 0.75, 0.95]) {
        assert!((m - want).abs() < 1e-9, "{out}");
    }
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(quark(&["inspect-pool", s(&empty)]).status.code(), Some(2));
}
