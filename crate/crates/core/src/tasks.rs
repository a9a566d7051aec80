//! Seeded generators for the bundled toy tasks.
//!
//! Each task yields a pretraining corpus (one document per line), prompts, and
//! the word lists its reward needs. Everything is word-level and small enough
//! to train on one core in seconds.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::RngExt;

use crate::model::Tokenizer;
use crate::rng::{stream, StreamRng};

const ADJ_SAFE: &[&str] = &["big", "small", "red", "blue", "old", "new", "tall", "short", "warm", "soft"];
const ADJ_BANNED: &[&str] = &["dark", "grim", "cruel", "vile", "foul", "harsh", "toxic", "rotten", "bitter", "sour"];
const NOUN_SAFE: &[&str] = &["cat", "dog", "bird", "fish", "tree", "house", "car", "boat", "road", "hill", "lamp", "cup"];
const NOUN_BANNED: &[&str] =
    &["rat", "snake", "wasp", "slug", "toad", "mold", "worm", "crow", "leech", "wolf", "tick", "flea"];
const VERBS: &[&str] = &["sees", "likes", "finds", "takes", "moves", "helps", "holds", "makes", "wants", "knows"];

/// Corpus, prompts and reward vocabulary of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub corpus: Vec<String>,
    pub prompts: Vec<String>,
    /// Held-out prompts for evaluation.
    pub eval_prompts: Vec<String>,
    /// Banned words, or negative sentiment words.
    pub negative_terms: Vec<String>,
    pub positive_terms: Vec<String>,
}

impl TaskData {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::word_from_corpus(&self.corpus.join("\n"))
    }
}

/// Names accepted by [`bundled`].
pub const BUNDLED: &[&str] = &["banned", "sentiment", "repetition"];

/// Data and run configuration of a bundled task, as written by `quark gen-task`.
pub fn bundled(name: &str, seed: u64) -> Option<(TaskData, &'static str)> {
    Some(match name {
        "banned" => (banned_grammar(seed, 2000, 200, 0.75, 0.0), BANNED_CONF),
        "sentiment" => (sentiment_reviews(seed, 2000, 200), SENTIMENT_CONF),
        "repetition" => (repetitive_articles(seed, 8, 2000, 200, 0.4), REPETITION_CONF),
        _ => return None,
    })
}

/// Desk-scale run configuration written next to the banned-word task data.
pub const BANNED_CONF: &str = "\
# Unlearning banned words at desk scale.
corpus = corpus.txt
prompts = prompts.txt
eval_prompts = eval_prompts.txt
negative_lexicon = negative.txt
reward = banned
orientation = reward

d_model = 32
n_layers = 2
n_heads = 2
context_length = 32
pretrain_steps = 1500
pretrain_window = 24

quantiles = 5
kl_coef = 0.05
iterations = 10
total_steps = 1500
batch_size = 32
max_new_tokens = 12
top_p = 0.9
lr = 1e-3
warmup_steps = 50
reset_pool = true
eval_samples = 10
";

/// Desk-scale run configuration written next to the sentiment task data.
pub const SENTIMENT_CONF: &str = "\
# Steering toward positive sentiment at desk scale.
corpus = corpus.txt
prompts = prompts.txt
eval_prompts = eval_prompts.txt
positive_lexicon = positive.txt
negative_lexicon = negative.txt
reward = sentiment
orientation = reward

d_model = 32
n_layers = 2
n_heads = 2
context_length = 32
pretrain_steps = 1500
pretrain_window = 24

quantiles = 5
kl_coef = 0.05
iterations = 10
total_steps = 1500
batch_size = 32
max_new_tokens = 12
top_p = 0.9
lr = 1e-3
warmup_steps = 50
eval_samples = 10
";

/// Desk-scale run configuration written next to the repetition task data.
pub const REPETITION_CONF: &str = "\
# Reducing degenerate repetition at desk scale.
corpus = corpus.txt
prompts = prompts.txt
eval_prompts = eval_prompts.txt
reward = diversity
orientation = reward

d_model = 32
n_layers = 2
n_heads = 2
context_length = 40
pretrain_steps = 1500
pretrain_window = 24

quantiles = 8
kl_coef = 0.01
iterations = 8
total_steps = 1500
batch_size = 32
samples_per_prompt = 1
greedy_fraction = 0.5
max_new_tokens = 24
top_p = 0.9
lr = 1e-3
warmup_steps = 50
eval_samples = 1
eval_decoding = greedy
";

/// Concatenates documents as `BOS doc EOS` token runs.
pub fn corpus_tokens(tokenizer: &Tokenizer, docs: &[String]) -> Vec<u32> {
    docs.iter()
        .flat_map(|d| {
            std::iter::once(tokenizer.bos())
                .chain(tokenizer.encode(d))
                .chain(std::iter::once(tokenizer.eos()))
        })
        .collect()
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|i| 1.0 / ((i + 1) as f64).powf(s))).expect("positive weights")
}

/// Word class that picks a banned word with probability `p_banned`. Both
/// groups follow Zipf laws; `safe_skew` is the exponent for safe words.
struct Slot {
    safe: &'static [&'static str],
    banned: &'static [&'static str],
    safe_dist: WeightedIndex<f64>,
    banned_dist: Option<WeightedIndex<f64>>,
    p_banned: f64,
}

impl Slot {
    fn new(safe: &'static [&'static str], banned: &'static [&'static str], p_banned: f64, safe_skew: f64) -> Self {
        Slot { safe, banned, safe_dist: zipf(safe.len(), safe_skew), banned_dist: (!banned.is_empty()).then(|| zipf(banned.len(), 0.8)), p_banned }
    }

    fn draw(&self, rng: &mut StreamRng) -> &'static str {
        match &self.banned_dist {
            Some(d) if rng.random::<f64>() < self.p_banned => self.banned[d.sample(rng)],
            _ => self.safe[self.safe_dist.sample(rng)],
        }
    }
}

/// Sentences `ADJ NOUN VERB ADJ NOUN .` where adjective and noun slots pick a
/// banned word with probability `p_banned`. Prompts are an `ADJ NOUN` opener.
pub fn banned_grammar(seed: u64, n_docs: usize, n_prompts: usize, p_banned: f64, safe_skew: f64) -> TaskData {
    let mut rng = stream(seed, &[0xb4]);
    let adj = Slot::new(ADJ_SAFE, ADJ_BANNED, p_banned, safe_skew);
    let noun = Slot::new(NOUN_SAFE, NOUN_BANNED, p_banned, safe_skew);
    let verb = Slot::new(VERBS, &[], 0.0, 0.8);
    let sentence = |rng: &mut StreamRng| {
        format!("{} {} {} {} {} .", adj.draw(rng), noun.draw(rng), verb.draw(rng), adj.draw(rng), noun.draw(rng))
    };
    let corpus = (0..n_docs).map(|_| (0..4).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" ")).collect();
    let opener = |rng: &mut StreamRng| format!("{} {}", adj.draw(rng), noun.draw(rng));
    let prompts = (0..n_prompts).map(|_| opener(&mut rng)).collect();
    let eval_prompts = (0..n_prompts).map(|_| opener(&mut rng)).collect();
    TaskData {
        corpus,
        prompts,
        eval_prompts,
        negative_terms: ADJ_BANNED.iter().chain(NOUN_BANNED).map(|s| s.to_string()).collect(),
        positive_terms: Vec::new(),
    }
}

const SUBJECTS: &[&str] = &["the movie", "the film", "the plot", "the cast", "the ending", "the music", "the story"];
const POSITIVE: &[&str] = &["great", "wonderful", "brilliant", "charming", "moving", "fun"];
const NEGATIVE: &[&str] = &["awful", "boring", "dull", "terrible", "weak", "messy"];
const NEUTRAL: &[&str] = &["long", "short", "loud", "quiet", "simple", "strange", "familiar", "slow"];
const LINKS: &[&str] = &["was", "felt", "seemed", "looked"];

/// Review-like sentences `SUBJECT LINK ADJ and ADJ .` with mostly neutral or
/// negative adjectives, so positive continuations start out rare.
pub fn sentiment_reviews(seed: u64, n_docs: usize, n_prompts: usize) -> TaskData {
    let mut rng = stream(seed, &[0x5e]);
    let pick = |rng: &mut StreamRng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    let adjective = |rng: &mut StreamRng| {
        let u = rng.random::<f64>();
        if u < 0.2 {
            pick(rng, POSITIVE)
        } else if u < 0.5 {
            pick(rng, NEGATIVE)
        } else {
            pick(rng, NEUTRAL)
        }
    };
    let sentence = |rng: &mut StreamRng| {
        let (s, l) = (pick(rng, SUBJECTS), pick(rng, LINKS));
        let (a, b) = (adjective(rng), adjective(rng));
        format!("{s} {l} {a} and {b} .")
    };
    let corpus = (0..n_docs).map(|_| (0..3).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" ")).collect();
    let opener = |rng: &mut StreamRng| pick(rng, SUBJECTS).to_string();
    let prompts = (0..n_prompts).map(|_| opener(&mut rng)).collect();
    let eval_prompts = (0..n_prompts).map(|_| opener(&mut rng)).collect();
    TaskData {
        corpus,
        prompts,
        eval_prompts,
        negative_terms: NEGATIVE.iter().map(|s| s.to_string()).collect(),
        positive_terms: POSITIVE.iter().map(|s| s.to_string()).collect(),
    }
}

/// First-order Markov text over `3 · n_cycles` words. Every word's most likely
/// successor (probability `p_dominant`) is the next word of its 3-cycle, so
/// greedy decoding falls into a loop while sampling stays varied.
pub fn repetitive_articles(seed: u64, n_cycles: usize, n_docs: usize, n_prompts: usize, p_dominant: f64) -> TaskData {
    let mut rng = stream(seed, &[0x7e]);
    const SYLLABLES: &[&str] = &["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bo", "di"];
    let n = 3 * n_cycles;
    let vocab: Vec<String> = (0..n)
        .map(|i| format!("{}{}", SYLLABLES[i % SYLLABLES.len()], SYLLABLES[(i / SYLLABLES.len() + 3 * i) % SYLLABLES.len()]))
        .enumerate()
        .map(|(i, w)| format!("{w}{i}"))
        .collect();
    let fanout = 8.min(n - 1);
    let successors: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..n)
        .map(|w| {
            let dominant = 3 * (w / 3) + (w % 3 + 1) % 3;
            let mut others: Vec<usize> = (0..n).filter(|&o| o != dominant && o != w).collect();
            others.shuffle(&mut rng);
            others.truncate(fanout);
            let rest = 1.0 - p_dominant;
            let tail_w: Vec<f64> = (0..fanout).map(|i| 1.0 / ((i + 1) as f64).powf(0.5)).collect();
            let z: f64 = tail_w.iter().sum();
            let mut ids = vec![dominant];
            let mut weights = vec![p_dominant];
            for (o, tw) in others.into_iter().zip(tail_w) {
                ids.push(o);
                weights.push(rest * tw / z);
            }
            (ids, WeightedIndex::new(weights).expect("positive weights"))
        })
        .collect();
    let walk = |rng: &mut StreamRng, len: usize| {
        let mut w = rng.random_range(0..n);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(vocab[w].as_str());
            let (ids, dist) = &successors[w];
            w = ids[dist.sample(rng)];
        }
        out.join(" ")
    };
    let corpus = (0..n_docs).map(|_| walk(&mut rng, 30)).collect();
    let prompts = (0..n_prompts).map(|_| walk(&mut rng, 2)).collect();
    let eval_prompts = (0..n_prompts).map(|_| walk(&mut rng, 2)).collect();
    TaskData { corpus, prompts, eval_prompts, negative_terms: Vec::new(), positive_terms: Vec::new() }
}
