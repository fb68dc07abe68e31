//! Questions, reasoning steps and rollouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Answer tokens are small non-negative integers in every environment.
pub type Answer = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Add,
    Mul,
}

impl Operator {
    pub fn apply(self, lhs: u32, rhs: u32, modulus: u32) -> u32 {
        let (l, r, m) = (u64::from(lhs), u64::from(rhs), u64::from(modulus));
        let v = match self {
            Operator::Add => (l + r) % m,
            Operator::Mul => (l * r) % m,
        };
        v as u32
    }

    pub fn token(self) -> u64 {
        match self {
            Operator::Add => 1,
            Operator::Mul => 2,
        }
    }
}

/// Environment-specific encoding of a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payload {
    ArithmeticChain {
        modulus: u32,
        operands: Vec<u32>,
        operators: Vec<Operator>,
    },
    /// Layered DAG. Node 0 is the start; `edges[n]` lists the sorted successors
    /// of node `n`; nodes in the last layer are sinks.
    GraphPath {
        layers: Vec<Vec<u32>>,
        edges: Vec<Vec<u32>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub env_id: String,
    pub payload: Payload,
    /// Visible to the outcome verifier and the oracles only.
    pub ground_truth: Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub action_id: u32,
    pub is_terminal: bool,
    pub declared_answer: Option<Answer>,
}

impl Step {
    pub fn intermediate(action_id: u32) -> Self {
        Step {
            action_id,
            is_terminal: false,
            declared_answer: None,
        }
    }

    pub fn terminal(action_id: u32, answer: Answer) -> Self {
        Step {
            action_id,
            is_terminal: true,
            declared_answer: Some(answer),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.is_terminal == self.declared_answer.is_some()
    }
}

/// One complete sampled chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub question_id: u64,
    pub steps: Vec<Step>,
    /// Natural-log probability of each step under the sampling policy and temperature.
    #[serde(with = "crate::numfmt::vec")]
    pub step_logprobs: Vec<f64>,
    pub outcome_reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::numfmt::opt_vec")]
    pub prm_rewards: Option<Vec<f64>>,
    /// Set when the chain hit `max_steps` and a terminal answer was forced.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_correct(&self) -> bool {
        self.outcome_reward == 1
    }

    pub fn answer(&self) -> Option<Answer> {
        self.steps.last().and_then(|s| s.declared_answer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRollout(msg));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        if self.step_logprobs.len() != self.steps.len() {
            return bad(format!(
                "{} logprobs for {} steps",
                self.step_logprobs.len(),
                self.steps.len()
            ));
        }
        let last = self.steps.len() - 1;
        for (i, s) in self.steps.iter().enumerate() {
            if !s.is_well_formed() {
                return bad(format!("step {i}: declared answer present iff terminal"));
            }
            if s.is_terminal != (i == last) {
                return bad(format!("step {i}: exactly the last step must be terminal"));
            }
        }
        if let Some(lp) = self.step_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return bad(format!("step logprob {lp} is not <= 0"));
        }
        if self.outcome_reward > 1 {
            return bad(format!("outcome reward {}", self.outcome_reward));
        }
        if let Some(r) = &self.prm_rewards {
            if r.len() != self.steps.len() {
                return bad("prm_rewards length".into());
            }
        }
        Ok(())
    }
}
