use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

const BYTE_BOS: u32 = 256;
const BYTE_EOS: u32 = 257;
const BYTE_PAD: u32 = 258;

const WORD_SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Maps text to base-vocabulary token ids.
///
/// `Byte` has no out-of-vocabulary inputs: ids 0..=255 are raw bytes, followed by
/// begin/end/pad. `Word` splits on whitespace over a fixed word list, with
/// pad/bos/eos/unk at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tokenizer {
    Byte,
    Word {
        words: Vec<String>,
        #[serde(skip)]
        index: WordIndex,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordIndex(HashMap<String, u32>);

impl Tokenizer {
    /// Word tokenizer over the sorted set of whitespace-separated words in `text`.
    pub fn word_from_corpus(text: &str) -> Self {
        let words: BTreeSet<&str> = text.split_whitespace().collect();
        Self::word(words.into_iter().map(str::to_owned).collect())
    }

    pub fn word(words: Vec<String>) -> Self {
        let mut t = Tokenizer::Word {
            words,
            index: WordIndex::default(),
        };
        t.reindex();
        t
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        if let Tokenizer::Word { words, index } = self {
            index.0 = words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), (i + WORD_SPECIALS.len()) as u32))
                .collect();
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 259,
            Tokenizer::Word { words, .. } => words.len() + WORD_SPECIALS.len(),
        }
    }

    pub fn bos(&self) -> u32 {
        match self {
            Tokenizer::Byte => BYTE_BOS,
            Tokenizer::Word { .. } => 1,
        }
    }

    pub fn eos(&self) -> u32 {
        match self {
            Tokenizer::Byte => BYTE_EOS,
            Tokenizer::Word { .. } => 2,
        }
    }

    pub fn pad(&self) -> u32 {
        match self {
            Tokenizer::Byte => BYTE_PAD,
            Tokenizer::Word { .. } => 0,
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        match self {
            Tokenizer::Byte => id >= BYTE_BOS,
            Tokenizer::Word { .. } => (id as usize) < WORD_SPECIALS.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
            Tokenizer::Word { index, .. } => text
                .split_whitespace()
                .map(|w| index.0.get(w).copied().unwrap_or(3))
                .collect(),
        }
    }

    /// Encodes a prompt: begin token followed by the text.
    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode(text));
        ids
    }

    /// Decodes ids to text, dropping special tokens and ids outside the base vocabulary.
    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < BYTE_BOS).map(|&i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Word { words, .. } => ids
                .iter()
                .filter_map(|&i| (i as usize).checked_sub(WORD_SPECIALS.len()).and_then(|j| words.get(j)))
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_roundtrip() {
        let t = Tokenizer::Byte;
        assert_eq!(t.vocab_size(), 259);
        let ids = t.encode("héllo");
        assert_eq!(t.decode(&ids), "héllo");
        assert_eq!(t.encode_prompt("a"), vec![256, 97]);
    }

    #[test]
    fn word_vocab_and_unknowns() {
        let t = Tokenizer::word_from_corpus("b a c a\nb");
        assert_eq!(t.vocab_size(), 7);
        assert_eq!(t.encode("a b zzz"), vec![4, 5, 3]);
        assert_eq!(t.decode(&[1, 4, 6, 2]), "a c");
    }

    #[test]
    fn serde_restores_index() {
        let t = Tokenizer::word_from_corpus("x y");
        let json = serde_json::to_string(&t).unwrap();
        let mut back: Tokenizer = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back, t);
        assert_eq!(back.encode("y"), vec![5]);
    }
}
