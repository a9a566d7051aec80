//! Accumulating store of scored generations with a reward-sorted K-way partition.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub continuation: Vec<u32>,
    pub reward: f64,
    pub insertion_index: u64,
    /// 1-based quantile, set by the most recent [`DataPool::quantize`].
    #[serde(skip)]
    pub quantile: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileStats {
    pub quantile: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Partition {
    /// Example positions sorted by (reward, insertion index).
    order: Vec<usize>,
    /// Ranges into `order`, lowest-reward quantile first.
    ranges: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPool {
    examples: Vec<Example>,
    next_index: u64,
    capacity: Option<usize>,
    partition: Option<Partition>,
}

impl DataPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pool that evicts its oldest examples beyond `capacity`.
    pub fn with_capacity_limit(capacity: usize) -> Self {
        DataPool {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn n_quantiles(&self) -> Option<usize> {
        self.partition.as_ref().map(|p| p.ranges.len())
    }

    /// Drops every example. Insertion indices keep increasing.
    pub fn clear(&mut self) {
        self.examples.clear();
        self.partition = None;
    }

    /// Appends scored examples with fresh insertion indices. Invalidates the partition.
    pub fn add(&mut self, items: impl IntoIterator<Item = (Vec<u32>, Vec<u32>, f64)>) -> Result<()> {
        let items: Vec<_> = items.into_iter().collect();
        if let Some(&(_, _, r)) = items.iter().find(|(_, _, r)| !r.is_finite()) {
            return Err(Error::NonFiniteReward(r));
        }
        for (prompt, continuation, reward) in items {
            self.examples.push(Example {
                prompt,
                continuation,
                reward,
                insertion_index: self.next_index,
                quantile: None,
            });
            self.next_index += 1;
        }
        if let Some(cap) = self.capacity {
            if self.examples.len() > cap {
                let excess = self.examples.len() - cap;
                self.examples.drain(..excess);
            }
        }
        self.partition = None;
        Ok(())
    }

    /// Stable sort by (reward, insertion index), split into `k` contiguous groups.
    /// The `N mod k` leftover examples go one each to the lowest quantiles.
    pub fn quantize(&mut self, k: usize) -> Result<()> {
        let n = self.examples.len();
        if k == 0 || n < k {
            return Err(Error::PoolTooSmall { size: n, k });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let ex = &self.examples;
        order.sort_by(|&a, &b| {
            ex[a].reward
                .total_cmp(&ex[b].reward)
                .then(ex[a].insertion_index.cmp(&ex[b].insertion_index))
        });
        let (base, rem) = (n / k, n % k);
        let mut ranges = Vec::with_capacity(k);
        let mut start = 0;
        for q in 0..k {
            let size = base + usize::from(q < rem);
            ranges.push(start..start + size);
            start += size;
        }
        for (q, range) in ranges.iter().enumerate() {
            for &i in &order[range.clone()] {
                self.examples[i].quantile = Some(q + 1);
            }
        }
        self.partition = Some(Partition { order, ranges });
        Ok(())
    }

    fn partition(&self) -> Result<&Partition> {
        self.partition.as_ref().ok_or(Error::NotQuantized)
    }

    /// Examples of 1-based quantile `k`, in ascending reward order.
    pub fn quantile(&self, k: usize) -> Result<impl Iterator<Item = &Example>> {
        let p = self.partition()?;
        let range = p.ranges.get(k.wrapping_sub(1)).ok_or(Error::EmptyQuantile(k))?;
        Ok(p.order[range.clone()].iter().map(|&i| &self.examples[i]))
    }

    /// Draws `batch_size` examples: quantile `k` uniform over `1..=K`, then an
    /// example uniform within it. Pairs each with reward token `token_base + k − 1`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        token_base: u32,
        rng: &mut R,
    ) -> Result<Vec<(&Example, u32)>> {
        let k = self.partition()?.ranges.len();
        let all: Vec<usize> = (1..=k).collect();
        self.sample_batch_from(batch_size, &all, token_base, rng)
    }

    /// As [`sample_batch`](Self::sample_batch), with `k` uniform over the listed quantiles only.
    pub fn sample_batch_from<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        quantiles: &[usize],
        token_base: u32,
        rng: &mut R,
    ) -> Result<Vec<(&Example, u32)>> {
        let p = self.partition()?;
        for &k in quantiles {
            match p.ranges.get(k.wrapping_sub(1)) {
                Some(r) if !r.is_empty() => {}
                _ => return Err(Error::EmptyQuantile(k)),
            }
        }
        if batch_size > 0 && quantiles.is_empty() {
            return Err(Error::EmptyQuantile(0));
        }
        Ok((0..batch_size)
            .map(|_| {
                let k = quantiles[rng.random_range(0..quantiles.len())];
                let range = &p.ranges[k - 1];
                let i = p.order[rng.random_range(range.clone())];
                (&self.examples[i], token_base + k as u32 - 1)
            })
            .collect())
    }

    pub fn stats(&self) -> Result<Vec<QuantileStats>> {
        let p = self.partition()?;
        Ok(p.ranges
            .iter()
            .enumerate()
            .map(|(q, r)| {
                let rewards: Vec<f64> = p.order[r.clone()].iter().map(|&i| self.examples[i].reward).collect();
                let count = rewards.len();
                QuantileStats {
                    quantile: q + 1,
                    count,
                    mean: if count == 0 { f64::NAN } else { rewards.iter().sum::<f64>() / count as f64 },
                    min: rewards.iter().copied().fold(f64::INFINITY, f64::min),
                    max: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect())
    }

    /// Lowest reward in each quantile.
    pub fn boundaries(&self) -> Result<Vec<f64>> {
        Ok(self.stats()?.iter().map(|s| s.min).collect())
    }

    /// One JSON object per line: prompt, continuation, reward, insertion_index.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Inverse of [`dump`](Self::dump). The result is unquantized.
    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut pool = DataPool::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Example = serde_json::from_str(&line).map_err(|err| Error::Parse {
                what: "pool dump",
                line: i + 1,
                detail: err.to_string(),
            })?;
            if !e.reward.is_finite() {
                return Err(Error::NonFiniteReward(e.reward));
            }
            pool.next_index = pool.next_index.max(e.insertion_index + 1);
            pool.examples.push(e);
        }
        Ok(pool)
    }

    pub fn set_capacity(&mut self, capacity: Option<usize>) {
        self.capacity = capacity;
    }
}
