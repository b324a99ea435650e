use std::collections::HashMap;

use super::FastError;

pub type TokenId = u32;

/// Zigzag map from a quantised coefficient to its base token id.
pub fn base_id(v: i64) -> u64 {
    if v >= 0 {
        2 * v as u64
    } else {
        2 * (-v) as u64 - 1
    }
}

pub fn base_value(id: u64) -> i64 {
    if id % 2 == 0 {
        (id / 2) as i64
    } else {
        -(id.div_ceil(2) as i64)
    }
}

/// Byte-pair vocabulary over quantised integers.
///
/// Ids `0..=2·bound` are the base alphabet (zigzag order), `2·bound + 1` is the
/// out-of-alphabet token, and merged tokens follow in merge order.
#[derive(Clone, Debug, PartialEq)]
pub struct FastVocab {
    bound: i64,
    merges: Vec<(TokenId, TokenId)>,
    expansions: Vec<Vec<TokenId>>,
}

impl FastVocab {
    pub fn new(bound: i64, merges: Vec<(TokenId, TokenId)>) -> Result<Self, FastError> {
        if bound < 0 {
            return Err(FastError::Invalid(format!("alphabet bound {bound}")));
        }
        let base = (2 * bound + 1) as usize;
        let mut expansions: Vec<Vec<TokenId>> = (0..base as TokenId).map(|i| vec![i]).collect();
        expansions.push(Vec::new());
        for (i, &(a, b)) in merges.iter().enumerate() {
            let next = base + 1 + i;
            if a as usize >= next || b as usize >= next || a as usize == base || b as usize == base {
                return Err(FastError::Invalid(format!("merge {i} ({a},{b}) refers to unknown token")));
            }
            let mut e = expansions[a as usize].clone();
            e.extend_from_slice(&expansions[b as usize]);
            expansions.push(e);
        }
        Ok(Self { bound, merges, expansions })
    }

    pub fn bound(&self) -> i64 {
        self.bound
    }

    pub fn base_size(&self) -> usize {
        (2 * self.bound + 1) as usize
    }

    pub fn oov_id(&self) -> TokenId {
        self.base_size() as TokenId
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Number of distinct token ids.
    pub fn vocab_size(&self) -> usize {
        self.expansions.len()
    }

    /// Base alphabet as `(integer, id)` pairs in id order.
    pub fn alphabet(&self) -> Vec<(i64, TokenId)> {
        (0..self.base_size() as u64).map(|id| (base_value(id), id as TokenId)).collect()
    }

    pub fn symbol(&self, v: i64) -> TokenId {
        if v.abs() <= self.bound {
            base_id(v) as TokenId
        } else {
            self.oov_id()
        }
    }

    /// Applies the merge list in order to a base-id sequence.
    pub fn encode_ids(&self, base: &[TokenId]) -> Vec<TokenId> {
        let mut seq = base.to_vec();
        let first = self.base_size() as TokenId + 1;
        for (i, &pair) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            merge_in_place(&mut seq, pair, first + i as TokenId);
        }
        seq
    }

    pub fn encode(&self, ints: &[i64]) -> Vec<TokenId> {
        let base: Vec<TokenId> = ints.iter().map(|&v| self.symbol(v)).collect();
        self.encode_ids(&base)
    }

    /// Expands tokens to base ids.
    pub fn decode_ids(&self, tokens: &[TokenId]) -> Result<Vec<TokenId>, FastError> {
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for &t in tokens {
            let e = self.expansions.get(t as usize).ok_or(FastError::UnknownToken(t))?;
            if t == self.oov_id() {
                out.push(t);
            } else {
                out.extend_from_slice(e);
            }
        }
        Ok(out)
    }

    /// Expands tokens to integers; the out-of-alphabet token decodes to 0.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<i64>, FastError> {
        let oov = self.oov_id();
        Ok(self
            .decode_ids(tokens)?
            .into_iter()
            .map(|id| if id == oov { 0 } else { base_value(u64::from(id)) })
            .collect())
    }
}

fn merge_in_place(seq: &mut Vec<TokenId>, pair: (TokenId, TokenId), new: TokenId) {
    let mut w = 0;
    let mut r = 0;
    while r < seq.len() {
        if r + 1 < seq.len() && seq[r] == pair.0 && seq[r + 1] == pair.1 {
            seq[w] = new;
            r += 2;
        } else {
            seq[w] = seq[r];
            r += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

/// Greedy BPE over integer sequences with an alphabet covering `[-bound, bound]`.
///
/// Each round merges the most frequent adjacent pair (ties: smallest pair),
/// stopping at `vocab_size` ids or when no pair occurs at least twice.
pub fn bpe_train_with_bound(
    corpus: &[Vec<i64>],
    vocab_size: usize,
    bound: i64,
) -> Result<FastVocab, FastError> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(FastError::EmptyCorpus);
    }
    let seen = corpus.iter().flatten().map(|v| v.abs()).max().unwrap_or(0);
    let bound = bound.max(seen);
    let base = (2 * bound + 1) as usize;
    if vocab_size <= base + 1 {
        return Err(FastError::Invalid(format!(
            "vocab_size {vocab_size} must exceed the {} base + out-of-alphabet ids",
            base + 1
        )));
    }
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| s.iter().map(|&v| base_id(v) as TokenId).collect())
        .collect();
    let mut merges = Vec::new();
    let mut next = (base + 1) as TokenId;
    while (next as usize) < vocab_size {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
        let Some((pair, _)) = best else { break };
        for s in &mut seqs {
            merge_in_place(s, pair, next);
        }
        merges.push(pair);
        next += 1;
    }
    FastVocab::new(bound, merges)
}

/// [`bpe_train_with_bound`] with the alphabet sized to the corpus.
pub fn bpe_train(corpus: &[Vec<i64>], vocab_size: usize) -> Result<FastVocab, FastError> {
    bpe_train_with_bound(corpus, vocab_size, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_round_trip() {
        for v in -40..=40 {
            assert_eq!(base_value(base_id(v)), v);
        }
        assert_eq!(base_id(0), 0);
    }

    #[test]
    fn runs_of_zero_merge_hierarchically() {
        // bound 0: base {0}, oov 1, merges from 2
        let v = bpe_train(&[vec![0, 0, 0, 0], vec![0, 0, 0, 0]], 4).unwrap();
        assert_eq!(v.merges(), &[(0, 0), (2, 2)]);
        assert_eq!(v.encode(&[0, 0, 0, 0]), vec![3]);
    }

    #[test]
    fn single_run_stops_when_pair_occurs_once() {
        let v = bpe_train(&[vec![0, 0, 0, 0]], 4).unwrap();
        assert_eq!(v.merges(), &[(0, 0)]);
    }

    #[test]
    fn distinct_symbols_never_merge() {
        let v = bpe_train(&[vec![1, 2, 3, -1, -2, -3]], 64).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        // (0,2) and (2,0) both appear twice; (0,2) sorts first
        let v = bpe_train(&[vec![0, 1, 0, 1]], 7).unwrap();
        assert_eq!(v.merges()[0], (0, 2));
    }

    #[test]
    fn unknown_token_is_rejected() {
        let v = bpe_train(&[vec![0, 0, 0]], 4).unwrap();
        assert!(matches!(v.decode(&[99]), Err(FastError::UnknownToken(99))));
    }

    #[test]
    fn out_of_alphabet_decodes_to_zero() {
        let v = bpe_train(&[vec![0, 1, 1, 0]], 8).unwrap();
        let enc = v.encode(&[5, 1]);
        assert_eq!(enc[0], v.oov_id());
        assert_eq!(v.decode(&enc).unwrap(), vec![0, 1]);
    }
}
