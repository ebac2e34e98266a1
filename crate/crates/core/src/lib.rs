//! Variable-length demonstration retrieval for LLM knowledge-concept tagging.
//!
//! A recurrent policy picks demonstrations one at a time from a per-concept
//! bank (or decides to stop early), the judge answers with the assembled
//! few-shot prompt, and the policy is trained with PPO on step-wise
//! correctness rewards plus a stop bonus. PromptPG and RetICL-style
//! retrievers, similarity heuristics, a deterministic simulated judge and an
//! evaluation harness are included so the whole loop runs offline.

pub mod dataset;
pub mod digest;
pub mod embed;
mod error;
pub mod eval;
#[cfg(feature = "remote")]
pub mod http;
pub mod judge;
pub mod policy;
pub mod prompt;
pub mod rewards;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
