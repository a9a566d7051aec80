//! Binary checkpoint format.
//!
//! ```text
//! magic "QUARKCKP" | u32 format version | u32 header length | header (UTF-8 JSON)
//! u32 record count | records...
//! record: u32 name length | name | u32 rank | rank × u32 dims | f32 values
//! ```
//!
//! All integers and floats are little-endian. Records whose names start with
//! [`Checkpoint::STATE_PREFIX`] carry training state (optimizer moments) and are
//! not model parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelConfig, Tokenizer};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"QUARKCKP";
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tokenizer: Tokenizer,
    pub n_reward_tokens: usize,
    /// Lowest reward of each quantile, lowest quantile first. Empty before quantization.
    #[serde(default)]
    pub quantile_boundaries: Vec<f64>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub const STATE_PREFIX: &'static str = "state.";

    pub fn from_model(model: &LanguageModel, tokenizer: &Tokenizer) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                tokenizer: tokenizer.clone(),
                n_reward_tokens: model.config().n_reward_tokens,
                quantile_boundaries: Vec::new(),
                meta: serde_json::Value::Null,
            },
            records: model
                .named_params()
                .map(|(n, t)| (n.to_owned(), t.clone().with_grad(false)))
                .collect(),
        }
    }

    pub fn model(&self) -> Result<LanguageModel> {
        let named = self
            .records
            .iter()
            .filter(|(n, _)| !n.starts_with(Self::STATE_PREFIX))
            .cloned()
            .collect();
        LanguageModel::from_named(self.header.model.clone(), named)
    }

    pub fn tokenizer(&self) -> Tokenizer {
        let mut t = self.header.tokenizer.clone();
        t.reindex();
        t
    }

    pub fn record(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.records.len())?;
        for (name, t) in &self.records {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = read_u32(r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&read_bytes(r, header_len)?)?;
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("record {name}: bad rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_bytes(r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, records })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint(format!("truncated: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn model() -> LanguageModel {
        let cfg = ModelConfig {
            base_vocab: 12,
            n_reward_tokens: 0,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_length: 10,
            tied: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = LanguageModel::new(cfg, &mut rng).unwrap();
        m.extend_vocab(3, &mut rng).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut ck = Checkpoint::from_model(&m, &Tokenizer::word_from_corpus("a b c"));
        ck.header.quantile_boundaries = vec![0.1, 1.0 / 3.0, 0.7];
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model().unwrap(), m);
        assert_eq!(back.header.quantile_boundaries, ck.header.quantile_boundaries);
        assert_eq!(back.tokenizer().encode("c"), vec![6]);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let bytes = Checkpoint::from_model(&model(), &Tokenizer::Byte).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    }
}
