//! Scalar rewards in `[0, 1]`.
//!
//! The n-gram diversity reward is computed exactly. Sentiment and toxicity are
//! approximated by lexicon matches on detokenized text; anything else can be
//! attached as an external process speaking a line-delimited JSON protocol.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("reward {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("plugin i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed plugin response {line:?}: {detail}")]
    Malformed { line: String, detail: String },
    #[error("plugin did not answer within {0:?}")]
    Timeout(Duration),
    #[error("plugin closed its output")]
    Closed,
    #[error("plugin channel unusable after an earlier failure")]
    Poisoned,
    #[error("lexicon: {0}")]
    Lexicon(String),
}

/// `100 · (1 − |unique n-grams| / |n-grams|)`; 0 when `y` has no n-grams.
pub fn rep_n<T: Eq + Hash>(y: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if y.len() < n {
        return 0.0;
    }
    let total = y.len() - n + 1;
    let unique: HashSet<&[T]> = y.windows(n).collect();
    100.0 * (1.0 - unique.len() as f64 / total as f64)
}

/// `Π_{n=2..4} (1 − rep_n(y)/100)`.
pub fn diversity<T: Eq + Hash>(y: &[T]) -> f64 {
    (2..=4).map(|n| 1.0 - rep_n(y, n) / 100.0).product()
}

/// Case-folded words with non-alphanumeric boundaries (apostrophes stay inside words).
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term lists for lexicon rewards. Terms may span several words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub positive: Vec<Vec<String>>,
    pub negative: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(positive: &[&str], negative: &[&str]) -> Result<Self, RewardError> {
        let norm = |ts: &[&str]| ts.iter().map(|t| words(t)).filter(|w| !w.is_empty()).collect::<Vec<_>>();
        let lex = Lexicon {
            positive: norm(positive),
            negative: norm(negative),
        };
        lex.check_disjoint()?;
        Ok(lex)
    }

    /// One term per line; `#` starts a comment.
    pub fn parse_terms(text: &str) -> Vec<String> {
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    }

    pub fn from_files(positive: Option<&Path>, negative: Option<&Path>) -> crate::Result<Self> {
        let read = |p: Option<&Path>| -> crate::Result<Vec<String>> {
            match p {
                Some(p) => Ok(Self::parse_terms(&std::fs::read_to_string(p).map_err(|e| crate::Error::file(p, e))?)),
                None => Ok(Vec::new()),
            }
        };
        let (pos, neg) = (read(positive)?, read(negative)?);
        let pos: Vec<&str> = pos.iter().map(String::as_str).collect();
        let neg: Vec<&str> = neg.iter().map(String::as_str).collect();
        Ok(Self::new(&pos, &neg)?)
    }

    fn check_disjoint(&self) -> Result<(), RewardError> {
        if let Some(t) = self.positive.iter().find(|t| self.negative.contains(t)) {
            return Err(RewardError::Lexicon(format!("term {:?} is both positive and negative", t.join(" "))));
        }
        Ok(())
    }
}

/// Marks every word covered by an occurrence of any term.
fn covered(ws: &[String], terms: &[Vec<String>]) -> Vec<bool> {
    let mut mask = vec![false; ws.len()];
    for term in terms {
        if term.len() > ws.len() {
            continue;
        }
        for start in 0..=ws.len() - term.len() {
            if ws[start..start + term.len()] == term[..] {
                mask[start..start + term.len()].iter_mut().for_each(|m| *m = true);
            }
        }
    }
    mask
}

fn occurrences(ws: &[String], terms: &[Vec<String>]) -> usize {
    terms
        .iter()
        .filter(|t| t.len() <= ws.len())
        .map(|t| ws.windows(t.len()).filter(|w| *w == &t[..]).count())
        .sum()
}

/// `0.5 · (1 + (p − q)/(p + q))` over positive/negative hits; 0.5 with no hits.
pub fn lexicon_sentiment(text: &str, lexicon: &Lexicon) -> f64 {
    let ws = words(text);
    let p = occurrences(&ws, &lexicon.positive) as f64;
    let q = occurrences(&ws, &lexicon.negative) as f64;
    if p + q == 0.0 {
        0.5
    } else {
        0.5 * (1.0 + (p - q) / (p + q))
    }
}

/// `1 − banned words / words`, where banned words are those covered by a
/// negative term; 1.0 for empty text.
pub fn banned_lexicon_reward(text: &str, lexicon: &Lexicon) -> f64 {
    let ws = words(text);
    if ws.is_empty() {
        return 1.0;
    }
    let hits = covered(&ws, &lexicon.negative).into_iter().filter(|&b| b).count();
    1.0 - hits as f64 / ws.len() as f64
}

/// Fraction of words covered by banned terms, `1 − banned_lexicon_reward`.
pub fn banned_rate(text: &str, lexicon: &Lexicon) -> f64 {
    1.0 - banned_lexicon_reward(text, lexicon)
}

fn check_range(r: f64) -> Result<f64, RewardError> {
    if r.is_finite() && (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(RewardError::OutOfRange(r))
    }
}

/// A deterministic reward `r(x, y) ∈ [0, 1]` over token ids.
pub trait RewardFn: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, prompt: &[u32], continuation: &[u32]) -> Result<f64, RewardError>;

    fn score_batch(&self, items: &[(&[u32], &[u32])]) -> Result<Vec<f64>, RewardError> {
        items.iter().map(|(x, y)| self.score(x, y)).collect()
    }
}

/// Constant reward, mostly for tests and degenerate configurations.
#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(pub f64);

impl RewardFn for ConstantReward {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, _: &[u32], _: &[u32]) -> Result<f64, RewardError> {
        check_range(self.0)
    }
}

/// N-gram diversity of the continuation, special tokens removed.
#[derive(Debug, Clone)]
pub struct DiversityReward {
    pub tokenizer: Tokenizer,
}

impl RewardFn for DiversityReward {
    fn name(&self) -> &str {
        "diversity"
    }

    fn score(&self, _: &[u32], continuation: &[u32]) -> Result<f64, RewardError> {
        let y: Vec<u32> = continuation.iter().copied().filter(|&t| !self.tokenizer.is_special(t)).collect();
        check_range(diversity(&y))
    }
}

#[derive(Debug, Clone)]
pub struct SentimentReward {
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
}

impl RewardFn for SentimentReward {
    fn name(&self) -> &str {
        "sentiment"
    }

    fn score(&self, _: &[u32], continuation: &[u32]) -> Result<f64, RewardError> {
        check_range(lexicon_sentiment(&self.tokenizer.decode(continuation), &self.lexicon))
    }
}

#[derive(Debug, Clone)]
pub struct BannedReward {
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
}

impl RewardFn for BannedReward {
    fn name(&self) -> &str {
        "banned"
    }

    fn score(&self, _: &[u32], continuation: &[u32]) -> Result<f64, RewardError> {
        check_range(banned_lexicon_reward(&self.tokenizer.decode(continuation), &self.lexicon))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PluginRequest {
    pub x: String,
    pub y: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PluginResponse {
    pub reward: f64,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    poisoned: bool,
}

/// External process scoring `{"x", "y"}` request lines with `{"reward"}` response lines, in order.
pub struct Plugin {
    channel: Mutex<Channel>,
    timeout: Duration,
}

impl Plugin {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, RewardError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| RewardError::Io(std::io::Error::other("empty plugin command")))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Plugin {
            channel: Mutex::new(Channel {
                child,
                stdin,
                lines: rx,
                poisoned: false,
            }),
            timeout,
        })
    }

    /// Scores a batch of (prompt text, continuation text) pairs.
    pub fn score_texts(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, RewardError> {
        let mut ch = self.channel.lock().unwrap_or_else(|e| e.into_inner());
        if ch.poisoned {
            return Err(RewardError::Poisoned);
        }
        let result = exchange(&mut ch, pairs, self.timeout);
        if result.is_err() {
            ch.poisoned = true;
        }
        result
    }
}

fn exchange(ch: &mut Channel, pairs: &[(String, String)], timeout: Duration) -> Result<Vec<f64>, RewardError> {
    let mut buf = Vec::new();
    for (x, y) in pairs {
        serde_json::to_writer(&mut buf, &PluginRequest { x: x.clone(), y: y.clone() })
            .map_err(|e| RewardError::Io(e.into()))?;
        buf.push(b'\n');
    }
    ch.stdin.write_all(&buf)?;
    ch.stdin.flush()?;
    let mut out = Vec::with_capacity(pairs.len());
    for _ in pairs {
        let line = match ch.lines.recv_timeout(timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => return Err(RewardError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(RewardError::Closed),
        };
        let resp: PluginResponse = serde_json::from_str(&line).map_err(|e| RewardError::Malformed {
            line: line.clone(),
            detail: e.to_string(),
        })?;
        out.push(check_range(resp.reward)?);
    }
    Ok(out)
}

impl Drop for Plugin {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = ch.child.kill();
        let _ = ch.child.wait();
    }
}

/// Reward computed by an external [`Plugin`] on detokenized text.
pub struct PluginReward {
    pub tokenizer: Tokenizer,
    pub plugin: Plugin,
}

impl RewardFn for PluginReward {
    fn name(&self) -> &str {
        "plugin"
    }

    fn score(&self, prompt: &[u32], continuation: &[u32]) -> Result<f64, RewardError> {
        Ok(self.score_batch(&[(prompt, continuation)])?[0])
    }

    fn score_batch(&self, items: &[(&[u32], &[u32])]) -> Result<Vec<f64>, RewardError> {
        let texts: Vec<(String, String)> = items
            .iter()
            .map(|(x, y)| (self.tokenizer.decode(x), self.tokenizer.decode(y)))
            .collect();
        self.plugin.score_texts(&texts)
    }
}

/// Built-in rewards on raw text, as served by the `serve-reward` command.
#[derive(Debug, Clone)]
pub enum TextReward {
    Constant(f64),
    Diversity,
    Sentiment(Lexicon),
    Banned(Lexicon),
}

impl TextReward {
    pub fn score(&self, _x: &str, y: &str) -> f64 {
        match self {
            TextReward::Constant(c) => *c,
            TextReward::Diversity => diversity(&y.split_whitespace().collect::<Vec<_>>()),
            TextReward::Sentiment(l) => lexicon_sentiment(y, l),
            TextReward::Banned(l) => banned_lexicon_reward(y, l),
        }
    }

    /// Answers plugin requests from `input` until it closes.
    pub fn serve<R: BufRead, W: Write>(&self, input: R, mut output: W) -> crate::Result<()> {
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let req: PluginRequest = serde_json::from_str(&line).map_err(|e| crate::Error::Parse {
                what: "plugin request",
                line: i + 1,
                detail: e.to_string(),
            })?;
            serde_json::to_writer(&mut output, &PluginResponse { reward: self.score(&req.x, &req.y) })?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(())
    }
}
