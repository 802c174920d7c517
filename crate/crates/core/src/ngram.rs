//! Character n-gram language model with longest-suffix backoff and add-δ
//! smoothing.
//!
//! Each word is counted followed by END, so the model also scores word
//! termination. Contexts hold at most `k_max − 1` symbols and never include
//! a start marker: the context of the first character is the empty string.

use std::collections::BTreeMap;

use crate::alphabet::{Alphabet, ALPHABET_SIZE, END};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub counts: [u64; ALPHABET_SIZE],
    pub total: u64,
}

impl Default for CountRow {
    fn default() -> Self {
        CountRow {
            counts: [0; ALPHABET_SIZE],
            total: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    k_max: usize,
    delta: f64,
    /// context (symbol indices) → next-symbol counts
    tables: BTreeMap<Vec<u8>, CountRow>,
}

pub const DEFAULT_ORDER: usize = 6;
pub const DEFAULT_DELTA: f64 = 0.1;

impl NgramModel {
    pub fn fit(corpus: &[String], k_max: usize, delta: f64) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::input("n-gram order must be at least 1"));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::input(format!("smoothing constant must be a finite non-negative number, got {delta}")));
        }
        let mut tables: BTreeMap<Vec<u8>, CountRow> = BTreeMap::new();
        for word in corpus {
            let mut seq: Vec<u8> = Alphabet.encode(word)?.into_iter().map(|s| s as u8).collect();
            seq.push(END as u8);
            for t in 0..seq.len() {
                let longest = t.min(k_max - 1);
                for l in 0..=longest {
                    let row = tables.entry(seq[t - l..t].to_vec()).or_default();
                    row.counts[seq[t] as usize] += 1;
                    row.total += 1;
                }
            }
        }
        Ok(NgramModel { k_max, delta, tables })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn tables(&self) -> &BTreeMap<Vec<u8>, CountRow> {
        &self.tables
    }

    /// The longest stored suffix of `context` (truncated to `k_max − 1`).
    fn row_for(&self, context: &[usize]) -> Option<&CountRow> {
        let start = context.len().saturating_sub(self.k_max - 1);
        let ctx: Vec<u8> = context[start..].iter().map(|&s| s as u8).collect();
        (0..=ctx.len()).find_map(|i| self.tables.get(&ctx[i..]))
    }

    /// `P(symbol | context)` over symbol indices.
    pub fn prob_symbols(&self, context: &[usize], symbol: usize) -> f64 {
        let n = ALPHABET_SIZE as f64;
        match self.row_for(context) {
            None => 1.0 / n,
            Some(row) => {
                let denom = row.total as f64 + n * self.delta;
                (row.counts[symbol] as f64 + self.delta) / denom
            }
        }
    }

    pub fn log_prob_symbols(&self, context: &[usize], symbol: usize) -> f64 {
        self.prob_symbols(context, symbol).ln()
    }

    /// `P(c | context)`; `c = None` queries END.
    pub fn prob(&self, context: &str, c: Option<char>) -> Result<f64> {
        let ctx = Alphabet.encode(context)?;
        let symbol = match c {
            None => END,
            Some(ch) => Alphabet
                .index_of(ch)
                .ok_or_else(|| Error::input(format!("character {ch:?} is not in the alphabet")))?,
        };
        Ok(self.prob_symbols(&ctx, symbol))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.k_max as u32).to_le_bytes());
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&(self.tables.len() as u64).to_le_bytes());
        for (ctx, row) in &self.tables {
            out.extend_from_slice(&(ctx.len() as u32).to_le_bytes());
            out.extend_from_slice(ctx);
            for c in row.counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let k_max = r.u32()? as usize;
        let delta = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if k_max == 0 || !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::format("n-gram header is invalid"));
        }
        let n = r.u64()?;
        let mut tables = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let ctx = r.take(len)?.to_vec();
            if len >= k_max || ctx.iter().any(|&s| s as usize >= END) {
                return Err(Error::format("n-gram context is invalid"));
            }
            let mut row = CountRow::default();
            for c in row.counts.iter_mut() {
                *c = r.u64()?;
            }
            row.total = row.counts.iter().sum();
            tables.insert(ctx, row);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after n-gram tables"));
        }
        Ok(NgramModel { k_max, delta, tables })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("n-gram data is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
