//! Capacity-bounded store of correct rollouts, the reference distribution for
//! discriminator training.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Rollout, Step};

pub const DEFAULT_PER_QUESTION_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    RejectedIncorrect,
    RejectedDuplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferCounters {
    pub rejected_incorrect: u64,
    pub rejected_duplicate: u64,
    pub evicted: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<Rollout>,
    capacity: usize,
    per_question_cap: usize,
    counts: BTreeMap<u64, usize>,
    seen: HashSet<(u64, Vec<Step>)>,
    pub counters: BufferCounters,
}

/// On-disk form of one buffered rollout.
#[derive(Serialize, Deserialize)]
struct BufferRecord {
    question_id: u64,
    steps: Vec<Step>,
    #[serde(with = "crate::numfmt::vec")]
    step_logprobs: Vec<f64>,
    outcome_reward: u8,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, per_question_cap: usize) -> Result<Self> {
        if capacity == 0 || per_question_cap == 0 {
            return Err(Error::Config(
                "buffer capacity and per-question cap must be positive".into(),
            ));
        }
        Ok(ReplayBuffer {
            entries: Vec::new(),
            capacity,
            per_question_cap,
            counts: BTreeMap::new(),
            seen: HashSet::new(),
            counters: BufferCounters::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_question_cap(&self) -> usize {
        self.per_question_cap
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[Rollout] {
        &self.entries
    }

    pub fn question_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.counts.keys().copied()
    }

    pub fn count_for(&self, question_id: u64) -> usize {
        self.counts.get(&question_id).copied().unwrap_or(0)
    }

    /// Adds `rollout` iff it is correct and not an exact duplicate.
    ///
    /// A question already at its cap drops its oldest entry first; a full
    /// buffer drops the oldest entry of its most-represented question.
    pub fn insert(&mut self, rollout: Rollout) -> InsertOutcome {
        if rollout.outcome_reward != 1 {
            self.counters.rejected_incorrect += 1;
            return InsertOutcome::RejectedIncorrect;
        }
        let key = (rollout.question_id, rollout.steps.clone());
        if self.seen.contains(&key) {
            self.counters.rejected_duplicate += 1;
            return InsertOutcome::RejectedDuplicate;
        }
        if self.count_for(rollout.question_id) >= self.per_question_cap {
            self.evict_oldest_of(rollout.question_id);
        }
        self.seen.insert(key);
        *self.counts.entry(rollout.question_id).or_insert(0) += 1;
        self.entries.push(rollout);
        if self.entries.len() > self.capacity {
            // Most-represented question; ties go to the smallest id.
            let (&qid, _) = self
                .counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("buffer is non-empty");
            self.evict_oldest_of(qid);
        }
        InsertOutcome::Inserted
    }

    fn evict_oldest_of(&mut self, question_id: u64) {
        if let Some(pos) = self.entries.iter().position(|r| r.question_id == question_id) {
            let r = self.entries.remove(pos);
            self.seen.remove(&(r.question_id, r.steps));
            let c = self.counts.get_mut(&question_id).expect("count tracked");
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&question_id);
            }
            self.counters.evicted += 1;
        }
    }

    /// Up to `batch` distinct question ids, uniformly without replacement.
    pub fn sample_questions<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<u64>> {
        if self.entries.is_empty() {
            return Err(Error::BufferEmpty);
        }
        let ids: Vec<u64> = self.counts.keys().copied().collect();
        if batch >= ids.len() {
            return Ok(ids);
        }
        Ok(index::sample(rng, ids.len(), batch)
            .into_iter()
            .map(|i| ids[i])
            .collect())
    }

    /// `k` stored rollouts for `question_id`, uniformly with replacement.
    pub fn sample_reference<R: Rng + ?Sized>(
        &self,
        question_id: u64,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<&Rollout>> {
        let pool: Vec<&Rollout> = self
            .entries
            .iter()
            .filter(|r| r.question_id == question_id)
            .collect();
        if pool.is_empty() {
            return Err(Error::NoReference(question_id));
        }
        Ok((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.entries {
            let rec = BufferRecord {
                question_id: r.question_id,
                steps: r.steps.clone(),
                step_logprobs: r.step_logprobs.clone(),
                outcome_reward: r.outcome_reward,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<buffer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R, capacity: usize, per_question_cap: usize) -> Result<Self> {
        let mut buf = ReplayBuffer::new(capacity, per_question_cap)?;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<buffer>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BufferRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("buffer line {}: {e}", lineno + 1)))?;
            let rollout = Rollout {
                question_id: rec.question_id,
                steps: rec.steps,
                step_logprobs: rec.step_logprobs,
                outcome_reward: rec.outcome_reward,
                prm_rewards: None,
                truncated: false,
            };
            rollout.validate()?;
            if buf.insert(rollout) != InsertOutcome::Inserted {
                return Err(Error::Format(format!(
                    "buffer line {}: incorrect or duplicate rollout",
                    lineno + 1
                )));
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, capacity: usize, per_question_cap: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f), capacity, per_question_cap)
    }
}
