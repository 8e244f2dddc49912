// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic key→value recall task.
//!
//! Vocabulary layout: keys occupy tokens `0..n_keys`, values occupy
//! `n_keys..n_keys + n_vals`, followed by three markers `SEP`, `QUERY` and
//! `IS`. A prompt lists `n_facts` context facts then asks for one key:
//!
//! ```text
//! k₁ v₁ SEP  k₂ v₂ SEP  …  QUERY k IS   → answer: value(k)
//! ```
//!
//! The queried key never appears among the context facts, so the answer
//! must come from the memorized map. The final token is always `IS`; the
//! queried key sits one position earlier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Observable;
use crate::numeric::RngStream;

/// Largest vocabulary a task may occupy.
pub const MAX_VOCAB: usize = 256;
/// Marker tokens appended after keys and values.
pub const N_MARKERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvTask {
    pub seed: u64,
    pub n_keys: usize,
    pub n_vals: usize,
    pub n_facts: usize,
    /// `mapping[k]` is the value index (not token) of key `k`.
    pub mapping: Vec<usize>,
}

impl KvTask {
    /// `make_kv_task` with three context facts per prompt.
    ///
    /// The map is a random injection when `n_keys <= n_vals` and a random
    /// function otherwise.
    pub fn new(seed: u64, n_keys: usize, n_vals: usize) -> Result<Self> {
        Self::with_facts(seed, n_keys, n_vals, 3)
    }

    pub fn with_facts(seed: u64, n_keys: usize, n_vals: usize, n_facts: usize) -> Result<Self> {
        if n_keys < 2 || n_vals < 2 {
            return Err(Error::Config("a task needs at least two keys and two values".into()));
        }
        let needed = n_keys + n_vals + N_MARKERS;
        if needed > MAX_VOCAB {
            return Err(Error::Config(format!(
                "task needs {needed} tokens, exceeding the vocabulary budget of {MAX_VOCAB}"
            )));
        }
        if n_facts + 2 > n_keys {
            return Err(Error::Config(format!(
                "{n_facts} context facts need at least {} keys",
                n_facts + 2
            )));
        }
        let mut rng = RngStream::new(seed).child_named("kv-map");
        let mapping = if n_keys <= n_vals {
            let mut vals: Vec<usize> = (0..n_vals).collect();
            rng.shuffle(&mut vals);
            vals.truncate(n_keys);
            vals
        } else {
            (0..n_keys).map(|_| rng.below(n_vals)).collect()
        };
        Ok(Self {
            seed,
            n_keys,
            n_vals,
            n_facts,
            mapping,
        })
    }

    pub fn vocab_needed(&self) -> usize {
        self.n_keys + self.n_vals + N_MARKERS
    }

    pub fn prompt_len(&self) -> usize {
        3 * self.n_facts + 3
    }

    pub fn key_token(&self, key: usize) -> usize {
        key
    }

    pub fn value_token(&self, value: usize) -> usize {
        self.n_keys + value
    }

    pub fn sep_token(&self) -> usize {
        self.n_keys + self.n_vals
    }

    pub fn query_token(&self) -> usize {
        self.sep_token() + 1
    }

    pub fn is_token(&self) -> usize {
        self.sep_token() + 2
    }

    /// Answer token for `key`.
    pub fn answer(&self, key: usize) -> usize {
        self.value_token(self.mapping[key])
    }

    /// A fixed wrong-answer token for `key`: the next value token, cyclically.
    pub fn distractor(&self, key: usize) -> usize {
        self.value_token((self.mapping[key] + 1) % self.n_vals)
    }

    /// Answer vs. distractor logit difference at the final position.
    pub fn observable(&self, key: usize) -> Observable {
        Observable::new(self.answer(key), self.distractor(key))
    }

    /// Prompt querying `key` after listing the facts for `context`.
    pub fn prompt(&self, key: usize, context: &[usize]) -> Result<Vec<usize>> {
        if key >= self.n_keys || context.iter().any(|&k| k >= self.n_keys || k == key) {
            return Err(Error::Config(format!("invalid query {key} or context {context:?}")));
        }
        let mut out = Vec::with_capacity(3 * context.len() + 3);
        for &k in context {
            out.extend([self.key_token(k), self.answer(k), self.sep_token()]);
        }
        out.extend([self.query_token(), self.key_token(key), self.is_token()]);
        Ok(out)
    }

    /// `n_facts` distinct context keys avoiding every key in `exclude`.
    pub fn sample_context(&self, exclude: &[usize], rng: &mut RngStream) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..self.n_keys).filter(|k| !exclude.contains(k)).collect();
        rng.shuffle(&mut pool);
        pool.truncate(self.n_facts);
        pool
    }

    /// Random prompt; returns `(tokens, queried key)`.
    pub fn sample(&self, rng: &mut RngStream) -> (Vec<usize>, usize) {
        let key = rng.below(self.n_keys);
        let ctx = self.sample_context(&[key], rng);
        (self.prompt(key, &ctx).expect("valid prompt"), key)
    }

    /// Two prompts with identical context that differ only in the queried key.
    pub fn prompt_pair(&self, key_a: usize, key_b: usize, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
        if key_a == key_b {
            return Err(Error::Config("a prompt pair needs two different keys".into()));
        }
        let ctx = self.sample_context(&[key_a, key_b], rng);
        Ok((self.prompt(key_a, &ctx)?, self.prompt(key_b, &ctx)?))
    }

    /// `count` ordered key pairs whose answers differ.
    pub fn answer_pairs(&self, count: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(count);
        let mut guard = 0;
        while out.len() < count && guard < 100 * count.max(1) {
            guard += 1;
            let a = rng.below(self.n_keys);
            let b = rng.below(self.n_keys);
            if a != b && self.answer(a) != self.answer(b) {
                out.push((a, b));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_map() {
        let a = KvTask::new(3, 16, 16).unwrap();
        let b = KvTask::new(3, 16, 16).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.mapping.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16, "injective when keys <= values");
    }

    #[test]
    fn prompt_structure() {
        let t = KvTask::new(1, 16, 16).unwrap();
        let mut rng = RngStream::new(5);
        let (p, key) = t.sample(&mut rng);
        assert_eq!(p.len(), t.prompt_len());
        assert_eq!(p[p.len() - 2], t.key_token(key));
        assert_eq!(p[p.len() - 1], t.is_token());
        assert!(p.iter().all(|&tok| tok < t.vocab_needed()));
        // Context facts carry the true mapping.
        for f in 0..t.n_facts {
            assert_eq!(p[3 * f + 1], t.answer(p[3 * f]));
        }
    }

    #[test]
    fn pairs_share_template() {
        let t = KvTask::new(1, 16, 16).unwrap();
        let mut rng = RngStream::new(9);
        let (a, b) = t.prompt_pair(2, 7, &mut rng).unwrap();
        assert_eq!(a.len(), b.len());
        let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(differing, vec![a.len() - 2]);
        assert!(t.prompt_pair(2, 2, &mut rng).is_err());
    }

    #[test]
    fn vocab_overflow() {
        assert!(matches!(KvTask::new(0, 200, 100), Err(Error::Config(_))));
        assert!(KvTask::with_facts(0, 4, 4, 3).is_err());
    }
}
