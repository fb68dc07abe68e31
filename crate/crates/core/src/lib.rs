//! Adversarially learned process rewards for step-wise reasoning.
//!
//! A step scorer is trained as a structured discriminator between reference
//! rollouts (correct chains kept in a replay buffer) and fresh policy
//! rollouts. The induced step reward both shapes policy optimization, mixed
//! with a group-relative outcome objective, and guides test-time search:
//! Best-of-N, breadth-first beam search and UCT tree search.
//!
//! Everything runs on small synthetic environments where brute-force oracles
//! ([`oracle`]) give exact ground truth for every component.

pub mod buffer;
pub mod checks;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod export;
pub mod features;
pub mod hashing;
pub mod numfmt;
pub mod oracle;
pub mod optim;
pub mod policy;
pub mod prm;
pub mod rl;
pub mod rng;
pub mod search;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
