//! Command-line interface: pretraining, Quark training, evaluation, ablation
//! sweeps, pool inspection, reward serving and toy-task generation.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigValue, EvalDecoding, RewardKind, RunConfig, TokenizerKind};

use crate::datapool::DataPool;
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::{Checkpoint, LanguageModel, Tokenizer};
use crate::rewards::{
    BannedReward, ConstantReward, DiversityReward, Lexicon, Plugin, PluginReward, RewardFn, SentimentReward,
    TextReward,
};
use crate::rng::stream;
use crate::tasks;
use crate::training::{pretrain_mle, quark_train, Quark, RunDir};
use crate::{Error, Result};

/// Exit status for invalid configuration or usage.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "quark", version, about = "Reward-conditioned fine-tuning of small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exploration threads. Results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference model by maximum likelihood on the corpus.
    Pretrain(Common),
    /// Run Quark from the reference checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an `iter-<n>.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, conditioned on the best reward token if it has any.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One row per reward token instead of the best one only.
        #[arg(long)]
        per_quantile: bool,
        #[arg(long)]
        label: Option<String>,
    },
    /// Train once per sweep value and tabulate the evaluations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// kl-coef, quantiles, explore-freq, kl-mode, train-on or explore-token.
        #[arg(long)]
        sweep: String,
        /// Comma-separated values; each sweep has defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Print per-quantile statistics of a pool dump.
    InspectPool {
        pool: PathBuf,
        #[arg(long, default_value_t = 5)]
        quantiles: usize,
    },
    /// Answer reward requests on stdin/stdout with a built-in reward.
    ServeReward {
        /// constant, diversity, sentiment or banned.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        positive: Option<PathBuf>,
        #[arg(long)]
        negative: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        value: f64,
    },
    /// Write the corpus, prompts, lexicons and config of a bundled toy task.
    GenTask {
        /// banned, sentiment or repetition.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(c) => cmd_pretrain(&load_config(&c)?),
        Command::Train { common, resume } => cmd_train(&load_config(&common)?, resume.as_deref()),
        Command::Eval { common, checkpoint, per_quantile, label } => {
            let cfg = load_config(&common)?;
            let reports = cmd_eval(&cfg, &checkpoint, per_quantile, label.as_deref())?;
            print_table(&reports);
            Ok(())
        }
        Command::Ablate { common, sweep, values } => {
            let reports = cmd_ablate(&load_config(&common)?, &sweep, &values)?;
            print_table(&reports);
            Ok(())
        }
        Command::InspectPool { pool, quantiles } => {
            print!("{}", cmd_inspect_pool(&pool, quantiles)?);
            Ok(())
        }
        Command::ServeReward { kind, positive, negative, value } => {
            let reward = text_reward(&kind, positive.as_deref(), negative.as_deref(), value)?;
            let stdin = std::io::stdin();
            reward.serve(stdin.lock(), std::io::stdout().lock())
        }
        Command::GenTask { task, out_dir, seed } => gen_task(&task, &out_dir, seed),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be positive".into()));
    }
    Ok(cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn append_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::file(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::file(path, e))
}

fn prepare_out_dir(cfg: &RunConfig, command: &str) -> Result<RunDir> {
    let dir = RunDir::create(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(format!("{command}.conf")), cfg.to_text())?;
    Ok(dir)
}

fn lexicon(cfg: &RunConfig) -> Result<Lexicon> {
    Lexicon::from_files(cfg.positive_lexicon.as_deref(), cfg.negative_lexicon.as_deref())
}

/// Reward named by the config, scoring token ids through `tokenizer`.
pub fn build_reward(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<Box<dyn RewardFn>> {
    let tokenizer = tokenizer.clone();
    Ok(match cfg.reward {
        RewardKind::Banned => {
            let lexicon = lexicon(cfg)?;
            if lexicon.negative.is_empty() {
                return Err(Error::Config("banned reward needs `negative_lexicon`".into()));
            }
            Box::new(BannedReward { tokenizer, lexicon })
        }
        RewardKind::Sentiment => Box::new(SentimentReward { tokenizer, lexicon: lexicon(cfg)? }),
        RewardKind::Diversity => Box::new(DiversityReward { tokenizer }),
        RewardKind::Constant => Box::new(ConstantReward(cfg.constant_reward)),
        RewardKind::Plugin => {
            let command: Vec<String> = cfg.plugin_command.split_whitespace().map(str::to_owned).collect();
            if command.is_empty() {
                return Err(Error::Config("plugin reward needs `plugin_command`".into()));
            }
            Box::new(PluginReward { tokenizer, plugin: Plugin::spawn(&command, cfg.plugin_timeout())? })
        }
    })
}

fn text_reward(kind: &str, positive: Option<&Path>, negative: Option<&Path>, value: f64) -> Result<TextReward> {
    Ok(match kind {
        "constant" => TextReward::Constant(value),
        "diversity" => TextReward::Diversity,
        "sentiment" => TextReward::Sentiment(Lexicon::from_files(positive, negative)?),
        "banned" => TextReward::Banned(Lexicon::from_files(None, negative)?),
        other => return Err(Error::Config(format!("unknown reward kind {other:?}"))),
    })
}

fn encode_prompts(tokenizer: &Tokenizer, lines: &[String]) -> Result<Vec<Vec<u32>>> {
    if lines.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    Ok(lines.iter().map(|l| tokenizer.encode_prompt(l)).collect())
}

fn load_reference(cfg: &RunConfig) -> Result<(LanguageModel, Tokenizer)> {
    let ck = Checkpoint::load(cfg.p0_path())?;
    Ok((ck.model()?, ck.tokenizer()))
}

/// Builds the tokenizer from `docs` and trains a fresh reference model on them.
pub fn pretrain_model(cfg: &RunConfig, docs: &[String]) -> Result<(LanguageModel, Tokenizer, Vec<f64>)> {
    if docs.is_empty() {
        return Err(Error::CorpusTooShort { len: 0, window: 1 });
    }
    let tokenizer = match cfg.tokenizer {
        TokenizerKind::Word => Tokenizer::word_from_corpus(&docs.join("\n")),
        TokenizerKind::Byte => Tokenizer::Byte,
    };
    let tokens = tasks::corpus_tokens(&tokenizer, docs);
    let mut model = LanguageModel::new(cfg.model_config(tokenizer.vocab_size()), &mut stream(cfg.seed, &[0x1417]))?;
    let losses = pretrain_mle(&mut model, &tokens, &cfg.pretrain_config())?;
    Ok((model, tokenizer, losses))
}

/// Trains the reference model and writes `p0.ckpt` plus `pretrain_loss.tsv`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let docs = read_lines(cfg.require(&cfg.corpus, "corpus")?)?;
    prepare_out_dir(cfg, "pretrain")?;
    let (model, tokenizer, losses) = pretrain_model(cfg, &docs)?;
    let mut curve = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        curve.push_str(&format!("{}\t{l}\n", i + 1));
    }
    write_file(&cfg.out_dir.join("pretrain_loss.tsv"), curve)?;
    let mut ck = Checkpoint::from_model(&model, &tokenizer);
    ck.header.meta = serde_json::json!({ "seed": cfg.seed, "pretrain_steps": cfg.pretrain_steps });
    let path = cfg.out_dir.join("p0.ckpt");
    ck.save(&path)?;
    eprintln!(
        "pretrained {} parameters for {} steps, final loss {:.4}, wrote {}",
        model.n_params(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn eval_options(cfg: &RunConfig, tokenizer: &Tokenizer) -> EvalOptions {
    EvalOptions {
        n_samples: cfg.eval_samples,
        decoding: cfg.eval_decoding(tokenizer.eos()),
        orientation: cfg.orientation,
        threshold: cfg.violation_threshold,
        seed: cfg.seed,
        workers: cfg.workers,
    }
}

fn eval_prompts(cfg: &RunConfig, tokenizer: &Tokenizer) -> Result<Vec<Vec<u32>>> {
    let path = match &cfg.eval_prompts {
        Some(p) => p.as_path(),
        None => cfg.require(&cfg.prompts, "prompts")?,
    };
    encode_prompts(tokenizer, &read_lines(path)?)
}

fn record_evals(cfg: &RunConfig, reports: &[EvalReport]) -> Result<()> {
    let mut lines = String::new();
    for r in reports {
        lines.push_str(&serde_json::to_string(&r.summary())?);
        lines.push('\n');
    }
    append_file(&cfg.out_dir.join("eval.jsonl"), &lines)?;
    let tsv = cfg.out_dir.join("eval.tsv");
    let mut rows = String::new();
    if !tsv.exists() {
        rows.push_str(EvalReport::TABLE_HEADER);
        rows.push('\n');
    }
    for r in reports {
        rows.push_str(&r.table_row());
        rows.push('\n');
    }
    append_file(&tsv, &rows)
}

fn print_table(reports: &[EvalReport]) {
    println!("{}", EvalReport::TABLE_HEADER);
    for r in reports {
        println!("{}", r.table_row());
    }
}

/// Runs Quark, writing per-iteration checkpoints, pool dumps, reports and a final evaluation.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let (reference, tokenizer) = load_reference(cfg)?;
    let prompts = encode_prompts(&tokenizer, &read_lines(cfg.require(&cfg.prompts, "prompts")?)?)?;
    let reward = build_reward(cfg, &tokenizer)?;
    let tcfg = cfg.train_config(tokenizer.eos());
    tcfg.validate()?;
    let run_dir = prepare_out_dir(cfg, "train")?;
    let mut quark = match resume {
        None => {
            let _ = fs::remove_file(run_dir.reports_path());
            Quark::new(&reference, &prompts, reward.as_ref(), tcfg)?
        }
        Some(ckpt_path) => {
            let ck = Checkpoint::load(ckpt_path)?;
            let pool = RunDir::load_pool(&pool_path_for(ckpt_path))?;
            let q = Quark::resume(&reference, &prompts, reward.as_ref(), tcfg, &ck, pool)?;
            keep_reports_before(&run_dir.reports_path(), q.iterations_completed())?;
            q
        }
    };
    let outcome = quark.run(|q, report| {
        eprintln!(
            "iteration {}: step {}, pool {}, explore reward {:.4}, best quantile {:.4}, nll {:.3}, kl {:.3}",
            report.iteration,
            report.global_step,
            report.pool_size,
            report.explore_mean_reward,
            report.quantiles.last().map_or(f64::NAN, |s| s.mean),
            report.loss.nll,
            report.loss.kl
        );
        run_dir.save_iteration(q, &tokenizer, report)
    });
    if let Err(e) = outcome {
        let flushed =
            run_dir.save_state(&quark, &tokenizer, &cfg.out_dir.join("abort.ckpt"), &cfg.out_dir.join("abort.pool.jsonl"));
        if let Err(f) = flushed {
            eprintln!("could not flush state after failure: {f}");
        }
        return Err(e);
    }
    let final_path = cfg.out_dir.join("final.ckpt");
    quark.checkpoint(&tokenizer).save(&final_path)?;
    if cfg.eval_samples > 0 {
        let prompts = eval_prompts(cfg, &tokenizer)?;
        let opts = eval_options(cfg, &tokenizer);
        let policy = quark.policy();
        let reports = vec![
            evaluate("p0", &reference, &reference, &prompts, reward.as_ref(), None, &opts)?,
            evaluate("quark", policy, &reference, &prompts, reward.as_ref(), policy.reward_token(cfg.quantiles), &opts)?,
        ];
        record_evals(cfg, &reports)?;
        print_table(&reports);
    }
    Ok(())
}

/// Pool dump saved next to `iter-<n>.ckpt`.
pub fn pool_path_for(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}.pool.jsonl"))
}

fn keep_reports_before(path: &Path, completed: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = RunDir::read_reports(path)?
        .into_iter()
        .filter(|r| r.iteration < completed)
        .map(|r| serde_json::to_string(&r))
        .collect::<std::result::Result<_, _>>()?;
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_file(path, text)
}

/// Evaluates `checkpoint` against the reference, one row per requested condition.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, per_quantile: bool, label: Option<&str>) -> Result<Vec<EvalReport>> {
    let ck = Checkpoint::load(checkpoint)?;
    let (policy, tokenizer) = (ck.model()?, ck.tokenizer());
    let (reference, _) = load_reference(cfg)?;
    let prompts = eval_prompts(cfg, &tokenizer)?;
    let reward = build_reward(cfg, &tokenizer)?;
    let opts = eval_options(cfg, &tokenizer);
    let k = policy.config().n_reward_tokens;
    let label = label.unwrap_or("eval");
    let conditions: Vec<(String, Option<u32>)> = match (k, per_quantile) {
        (0, _) => vec![(label.to_string(), None)],
        (_, true) => (1..=k).map(|q| (format!("{label} r{q}"), policy.reward_token(q))).collect(),
        (_, false) => vec![(format!("{label} r{k}"), policy.reward_token(k))],
    };
    let reports = conditions
        .into_iter()
        .map(|(name, token)| evaluate(name, &policy, &reference, &prompts, reward.as_ref(), token, &opts))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::file(&cfg.out_dir, e))?;
    record_evals(cfg, &reports)?;
    Ok(reports)
}

/// Config key and default values of a named sweep.
pub fn sweep_spec(sweep: &str) -> Result<(&'static str, &'static [&'static str])> {
    Ok(match sweep {
        "kl-coef" => ("kl_coef", &["0", "0.05", "0.1", "0.2"]),
        "quantiles" => ("quantiles", &["2", "5", "8"]),
        "explore-freq" => ("iterations", &["2", "4", "8", "16"]),
        "kl-mode" => ("kl_mode", &["exact", "approximate"]),
        "train-on" => ("train_on", &["all-quantiles", "best-only"]),
        "explore-token" => ("explore_token", &["best", "random"]),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep {other:?}; expected kl-coef, quantiles, explore-freq, kl-mode, train-on or explore-token"
            )))
        }
    })
}

/// One training run per sweep value, all with the same seed; rows are evaluated at `r_K`.
pub fn cmd_ablate(cfg: &RunConfig, sweep: &str, values: &[String]) -> Result<Vec<EvalReport>> {
    let (key, defaults) = sweep_spec(sweep)?;
    let values: Vec<String> =
        if values.is_empty() { defaults.iter().map(|s| s.to_string()).collect() } else { values.to_vec() };
    let mut configs = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.train_config(0).validate()?;
        configs.push(c);
    }
    let (reference, tokenizer) = load_reference(cfg)?;
    let prompts = encode_prompts(&tokenizer, &read_lines(cfg.require(&cfg.prompts, "prompts")?)?)?;
    let eval = eval_prompts(cfg, &tokenizer)?;
    let reward = build_reward(cfg, &tokenizer)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::file(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join(format!("ablate-{sweep}.conf")), cfg.to_text())?;
    let mut reports = Vec::with_capacity(configs.len());
    for (c, v) in configs.iter().zip(&values) {
        eprintln!("{sweep} = {v}");
        let (policy, _) = quark_train(&reference, &prompts, reward.as_ref(), c.train_config(tokenizer.eos()))?;
        let opts = eval_options(c, &tokenizer);
        let label = format!("{key}={v}");
        reports.push(evaluate(label, &policy, &reference, &eval, reward.as_ref(), policy.reward_token(c.quantiles), &opts)?);
    }
    let mut tsv = format!("{}\n", EvalReport::TABLE_HEADER);
    let mut jsonl = String::new();
    for r in &reports {
        tsv.push_str(&r.table_row());
        tsv.push('\n');
        jsonl.push_str(&serde_json::to_string(&r.summary())?);
        jsonl.push('\n');
    }
    write_file(&cfg.out_dir.join(format!("ablate-{sweep}.tsv")), tsv)?;
    write_file(&cfg.out_dir.join(format!("ablate-{sweep}.jsonl")), jsonl)?;
    Ok(reports)
}

/// Tab-separated per-quantile statistics of a pool dump.
pub fn cmd_inspect_pool(path: &Path, quantiles: usize) -> Result<String> {
    let mut pool = RunDir::load_pool(path)?;
    if pool.is_empty() {
        return Err(Error::Config(format!("{}: pool dump is empty", path.display())));
    }
    pool.quantize(quantiles)?;
    format_stats(&pool)
}

fn format_stats(pool: &DataPool) -> Result<String> {
    let mut out = String::from("quantile\tcount\tmean\tmin\tmax\n");
    for s in pool.stats()? {
        out.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\n", s.quantile, s.count, s.mean, s.min, s.max));
    }
    Ok(out)
}

/// Writes a bundled task's data files and `task.conf` into `dir`.
pub fn gen_task(task: &str, dir: &Path, seed: u64) -> Result<()> {
    let (data, conf) = tasks::bundled(task, seed)
        .ok_or_else(|| Error::Config(format!("unknown task {task:?}; expected banned, sentiment or repetition")))?;
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let lines = |xs: &[String]| xs.iter().map(|x| format!("{x}\n")).collect::<String>();
    write_file(&dir.join("corpus.txt"), lines(&data.corpus))?;
    write_file(&dir.join("prompts.txt"), lines(&data.prompts))?;
    write_file(&dir.join("eval_prompts.txt"), lines(&data.eval_prompts))?;
    if !data.negative_terms.is_empty() {
        write_file(&dir.join("negative.txt"), lines(&data.negative_terms))?;
    }
    if !data.positive_terms.is_empty() {
        write_file(&dir.join("positive.txt"), lines(&data.positive_terms))?;
    }
    write_file(&dir.join("task.conf"), conf)?;
    Ok(())
}
