//! Signed feature hashing for (question, prefix, candidate step) triples.

use crate::env::{self, ActionCandidate, StepContext};
use crate::error::Result;
use crate::hashing::hash_words;
use crate::types::{Question, Step};

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    /// Builds from unsorted pairs, summing repeated indices and dropping zeros.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut out = SparseVec::default();
        for (i, v) in pairs {
            if out.indices.last() == Some(&i) {
                *out.values.last_mut().expect("paired") += v;
            } else {
                out.indices.push(i);
                out.values.push(v);
            }
        }
        let keep: Vec<bool> = out.values.iter().map(|v| *v != 0.0).collect();
        if keep.iter().any(|k| !k) {
            let mut it = keep.iter();
            out.indices.retain(|_| *it.next().expect("same length"));
            out.values.retain(|v| *v != 0.0);
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    /// `dense += alpha * self`
    pub fn add_scaled_to(&self, alpha: f64, dense: &mut [f64]) {
        for (i, v) in self.iter() {
            dense[i] += alpha * v;
        }
    }

    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        self.add_scaled_to(1.0, &mut out);
        out
    }
}

mod group {
    pub const PAYLOAD_STATE: u64 = 0x11;
    pub const PAYLOAD: u64 = 0x12;
    pub const LAST: u64 = 0x13;
    pub const SECOND_LAST: u64 = 0x14;
    pub const POSITION: u64 = 0x15;
    pub const CANDIDATE: u64 = 0x16;
}

const POSITION_BUCKETS: u64 = 8;

/// Feature vector of `candidate` at an already computed context.
pub fn featurize_at(ctx: &StepContext, candidate: &ActionCandidate, d: usize) -> SparseVec {
    debug_assert!(d.is_power_of_two());
    let cand = u64::from(candidate.token) << 1 | u64::from(candidate.step.is_terminal);
    let mut keys: Vec<[u64; 4]> = vec![
        [group::PAYLOAD_STATE, ctx.payload_token, u64::from(ctx.state), cand],
        [group::PAYLOAD, ctx.payload_token, cand, 0],
        [group::POSITION, (ctx.position as u64).min(POSITION_BUCKETS - 1), cand, 0],
        [group::CANDIDATE, cand, 0, 0],
    ];
    if let Some(last) = ctx.last {
        keys.push([group::LAST, u64::from(last), cand, 0]);
    }
    if let Some(prev) = ctx.second_last {
        keys.push([group::SECOND_LAST, u64::from(prev), cand, 0]);
    }
    let mask = (d - 1) as u64;
    SparseVec::from_pairs(
        keys.iter()
            .map(|k| {
                let h = hash_words(k);
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                ((h & mask) as u32, sign)
            })
            .collect(),
    )
}

pub fn featurize(question: &Question, prefix: &[Step], candidate: &ActionCandidate, d: usize) -> Result<SparseVec> {
    let ctx = env::context(question, prefix)?;
    Ok(featurize_at(&ctx, candidate, d))
}

/// Legal candidates at `prefix` with their feature vectors.
pub fn candidate_features(question: &Question, prefix: &[Step], d: usize) -> Result<(Vec<ActionCandidate>, Vec<SparseVec>)> {
    let ctx = env::context(question, prefix)?;
    let cands = env::candidates_at(question, &ctx);
    let feats = cands.iter().map(|c| featurize_at(&ctx, c, d)).collect();
    Ok((cands, feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_question_set, legal_actions, EnvSpec};

    #[test]
    fn from_pairs_merges_and_sorts() {
        let v = SparseVec::from_pairs(vec![(5, 1.0), (2, -1.0), (5, 1.0), (7, 1.0), (7, -1.0)]);
        assert_eq!(v.indices, vec![2, 5]);
        assert_eq!(v.values, vec![-1.0, 2.0]);
        assert_eq!(v.dot(&[1.0; 8]), 1.0);
    }

    #[test]
    fn deterministic_and_in_range() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 5).unwrap();
        for q in &qs {
            let prefix = vec![Step::intermediate(3)];
            for c in legal_actions(q, &prefix).unwrap() {
                let a = featurize(q, &prefix, &c, 4096).unwrap();
                let b = featurize(q, &prefix, &c, 4096).unwrap();
                assert_eq!(a, b);
                assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
                assert!(a.indices.iter().all(|&i| i < 4096));
            }
        }
    }

    #[test]
    fn empty_prefix_uses_question_and_candidate_groups_only() {
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 1, 0, 1).unwrap();
        let c = &legal_actions(&qs[0], &[]).unwrap()[0];
        let ctx = env::context(&qs[0], &[]).unwrap();
        assert!(ctx.last.is_none() && ctx.second_last.is_none());
        let f = featurize(&qs[0], &[], c, 1 << 20).unwrap();
        assert_eq!(f.nnz(), 4);
        let g = featurize(&qs[0], &[Step::intermediate(1), Step::intermediate(2)], c, 1 << 20).unwrap();
        assert_eq!(g.nnz(), 6);
    }

    #[test]
    fn distinct_candidates_have_distinct_vectors() {
        // Collision audit over every candidate of 100 questions at every position.
        let qs = generate_question_set(&EnvSpec::default_arithmetic(), 2, 0, 100).unwrap();
        for q in &qs {
            let mut prefix = Vec::new();
            for pos in 0..4 {
                let (_, feats) = candidate_features(q, &prefix, 4096).unwrap();
                for i in 0..feats.len() {
                    for j in i + 1..feats.len() {
                        assert_ne!(feats[i], feats[j], "question {} position {pos}", q.id);
                    }
                }
                if pos < 3 {
                    prefix.push(Step::intermediate(pos as u32));
                }
            }
        }
    }
}
