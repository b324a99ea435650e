//! FAST action tokenizer: percentile normalisation, DCT along time,
//! scale-and-round quantisation, frequency-major flattening and BPE.

mod bpe;
mod transform;

use std::fmt::Write as _;
use std::path::Path;

pub use bpe::{base_id, base_value, bpe_train, bpe_train_with_bound, FastVocab, TokenId};
pub use transform::{
    dct2, dequantize, fit_norm, flatten, idct2, percentile, quantize, unflatten, NormStats,
};

#[derive(Debug, thiserror::Error)]
pub enum FastError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("quantised value {0} exceeds the integer range")]
    OutOfRange(f64),
    #[error("token {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("malformed vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_VOCAB_SIZE: usize = 256;
const VOCAB_VERSION: u32 = 1;

/// Token ids for one action chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastTokenSequence {
    pub ids: Vec<TokenId>,
    pub chunk_len: usize,
    pub dims: usize,
}

impl FastTokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_rows(chunk: &[Vec<f64>], stats: &NormStats) -> Result<(), FastError> {
    if chunk.is_empty() {
        return Err(FastError::Invalid("chunk has no rows".into()));
    }
    if let Some(r) = chunk.iter().find(|r| r.len() != stats.dims()) {
        return Err(FastError::Invalid(format!(
            "chunk row has {} dims, stats have {}",
            r.len(),
            stats.dims()
        )));
    }
    Ok(())
}

/// Quantised, flattened integers for one chunk (everything before BPE).
pub fn chunk_integers(chunk: &[Vec<f64>], stats: &NormStats, gamma: f64) -> Result<Vec<i64>, FastError> {
    check_rows(chunk, stats)?;
    let normed: Vec<Vec<f64>> = chunk
        .iter()
        .map(|r| r.iter().enumerate().map(|(d, &x)| stats.normalize(d, x)).collect())
        .collect();
    Ok(flatten(&quantize(&dct2(&normed), gamma)?))
}

pub fn encode_chunk(
    chunk: &[Vec<f64>],
    stats: &NormStats,
    gamma: f64,
    vocab: &FastVocab,
) -> Result<FastTokenSequence, FastError> {
    let ints = chunk_integers(chunk, stats, gamma)?;
    Ok(FastTokenSequence { ids: vocab.encode(&ints), chunk_len: chunk.len(), dims: stats.dims() })
}

pub fn decode_chunk(
    tokens: &[TokenId],
    stats: &NormStats,
    gamma: f64,
    vocab: &FastVocab,
    k: usize,
) -> Result<Vec<Vec<f64>>, FastError> {
    if !(gamma > 0.0) {
        return Err(FastError::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    let ints = unflatten(&vocab.decode(tokens)?, k, stats.dims())?;
    let rows = idct2(&dequantize(&ints, gamma));
    Ok(rows
        .iter()
        .map(|r| r.iter().enumerate().map(|(d, &y)| stats.denormalize(d, y)).collect())
        .collect())
}

/// Largest per-entry reconstruction error for in-range data in dimension `d`.
pub fn reconstruction_bound(stats: &NormStats, gamma: f64, k: usize, d: usize) -> f64 {
    0.5 / gamma * stats.slope(d) * (k as f64).sqrt()
}

/// Fitted normalisation, quantisation scale and vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct FastTokenizer {
    pub stats: NormStats,
    pub gamma: f64,
    pub chunk_len: usize,
    pub vocab: FastVocab,
    /// Requested vocabulary capacity (the trained vocab may be smaller).
    pub capacity: usize,
}

impl FastTokenizer {
    /// Fits normalisation and BPE on a corpus of `k × dims` chunks. The base
    /// alphabet covers every integer reachable from normalised data.
    pub fn fit(corpus: &[Vec<Vec<f64>>], gamma: f64, vocab_size: usize) -> Result<Self, FastError> {
        let stats = fit_norm(corpus)?;
        let k = corpus[0].len();
        if corpus.iter().any(|c| c.len() != k) {
            return Err(FastError::Invalid("chunks differ in length".into()));
        }
        let ints = corpus
            .iter()
            .map(|c| chunk_integers(c, &stats, gamma))
            .collect::<Result<Vec<_>, _>>()?;
        let bound = (gamma * (k as f64).sqrt()).ceil() as i64;
        let vocab = bpe_train_with_bound(&ints, vocab_size, bound)?;
        Ok(Self { stats, gamma, chunk_len: k, vocab, capacity: vocab_size })
    }

    pub fn dims(&self) -> usize {
        self.stats.dims()
    }

    /// Every id the tokenizer can emit fits in `0..capacity`.
    pub fn id_space(&self) -> usize {
        self.capacity.max(self.vocab.vocab_size())
    }

    pub fn encode(&self, chunk: &[Vec<f64>]) -> Result<FastTokenSequence, FastError> {
        if chunk.len() != self.chunk_len {
            return Err(FastError::Invalid(format!(
                "chunk has {} rows, tokenizer expects {}",
                chunk.len(),
                self.chunk_len
            )));
        }
        encode_chunk(chunk, &self.stats, self.gamma, &self.vocab)
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, FastError> {
        decode_chunk(tokens, &self.stats, self.gamma, &self.vocab, self.chunk_len)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fast vocab");
        let _ = writeln!(s, "version {VOCAB_VERSION}");
        let _ = writeln!(s, "gamma {:?}", self.gamma);
        let _ = writeln!(s, "chunk_len {}", self.chunk_len);
        let _ = writeln!(s, "dims {}", self.dims());
        let _ = writeln!(s, "capacity {}", self.capacity);
        let _ = writeln!(s, "bound {}", self.vocab.bound());
        let _ = writeln!(s, "oov {}", self.vocab.oov_id());
        for (v, id) in self.vocab.alphabet() {
            let _ = writeln!(s, "base {v} {id}");
        }
        for (i, (a, b)) in self.vocab.merges().iter().enumerate() {
            let _ = writeln!(s, "merge {a} {b} {}", self.vocab.oov_id() as usize + 1 + i);
        }
        for d in 0..self.dims() {
            let _ = writeln!(s, "norm {d} {:?} {:?}", self.stats.low[d], self.stats.high[d]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FastError> {
        let mut gamma = None;
        let mut chunk_len = None;
        let mut dims = None;
        let mut capacity = None;
        let mut bound = None;
        let mut merges = Vec::new();
        let mut low = Vec::new();
        let mut high = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: &str| FastError::Parse { line: line_no, msg: msg.to_string() };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64, FastError> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| err("expected a number"))
            };
            let int = |i: usize| -> Result<i64, FastError> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| err("expected an integer"))
            };
            match f[0] {
                "version" => {
                    if int(1)? != i64::from(VOCAB_VERSION) {
                        return Err(err("unsupported version"));
                    }
                }
                "gamma" => gamma = Some(num(1)?),
                "chunk_len" => chunk_len = Some(int(1)? as usize),
                "dims" => dims = Some(int(1)? as usize),
                "capacity" => capacity = Some(int(1)? as usize),
                "bound" => bound = Some(int(1)?),
                "oov" => {}
                "base" => {
                    if base_id(int(1)?) != int(2)? as u64 {
                        return Err(err("base alphabet entry disagrees with zigzag order"));
                    }
                }
                "merge" => merges.push((int(1)? as TokenId, int(2)? as TokenId)),
                "norm" => {
                    if int(1)? as usize != low.len() {
                        return Err(err("norm rows out of order"));
                    }
                    low.push(num(2)?);
                    high.push(num(3)?);
                }
                _ => return Err(err("unknown key")),
            }
        }
        let missing = |k: &str| FastError::Parse { line: 0, msg: format!("missing `{k}`") };
        let dims = dims.ok_or_else(|| missing("dims"))?;
        if low.len() != dims {
            return Err(FastError::Parse { line: 0, msg: format!("{} norm rows for {dims} dims", low.len()) });
        }
        Ok(Self {
            stats: NormStats { low, high },
            gamma: gamma.ok_or_else(|| missing("gamma"))?,
            chunk_len: chunk_len.ok_or_else(|| missing("chunk_len"))?,
            vocab: FastVocab::new(bound.ok_or_else(|| missing("bound"))?, merges)?,
            capacity: capacity.ok_or_else(|| missing("capacity"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FastError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FastError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_corpus(n: usize) -> Vec<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| {
                (0..7)
                    .map(|t| (0..20).map(|d| ((i + d) as f64 * 0.3 + t as f64 * 0.1).sin()).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_chunk_is_a_fixed_point() {
        let tok = FastTokenizer::fit(&smooth_corpus(20), DEFAULT_GAMMA, DEFAULT_VOCAB_SIZE).unwrap();
        let mid: Vec<f64> = (0..20).map(|d| 0.5 * (tok.stats.low[d] + tok.stats.high[d])).collect();
        let chunk = vec![mid.clone(); 7];
        let ints = chunk_integers(&chunk, &tok.stats, tok.gamma).unwrap();
        assert!(ints.iter().all(|&v| v == 0));
        let back = tok.decode(&tok.encode(&chunk).unwrap().ids).unwrap();
        for row in back {
            for (a, b) in row.iter().zip(&mid) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vocab_file_round_trips() {
        let tok = FastTokenizer::fit(&smooth_corpus(30), DEFAULT_GAMMA, DEFAULT_VOCAB_SIZE).unwrap();
        let back = FastTokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(back, tok);
        assert!(FastTokenizer::from_text("version 9\n").is_err());
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let tok = FastTokenizer::fit(&smooth_corpus(10), DEFAULT_GAMMA, DEFAULT_VOCAB_SIZE).unwrap();
        assert!(tok.decode(&[0]).is_err());
    }
}
