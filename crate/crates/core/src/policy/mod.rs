//! Sequential retrieval policy: a fusion layer turns the (knowledge,
//! question) embeddings into the initial LSTM state, the LSTM consumes the
//! embeddings of demonstrations selected so far, and a bilinear scorer rates
//! every bank entry plus a learnable stop embedding. A linear value head on
//! the same hidden state serves as critic.

mod checkpoint;
mod grad;
mod params;
mod promptpg;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, sigmoid, Matrix};
use crate::{Error, Result};

pub use checkpoint::{
    load_checkpoint, load_policy, load_promptpg, save_checkpoint, Checkpoint, CheckpointMeta, ModelKind,
    CHECKPOINT_VERSION,
};
pub use grad::{policy_gradients, EpisodeInput, StepForward, StepLossTerms};
pub use params::{ParameterSet, PolicyOptions, PolicyParameters};
pub use promptpg::{promptpg_gradients, promptpg_scores, PromptPgEpisode, PromptPgParameters};

/// One retrieval decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Select(usize),
    Stop,
}

impl Action {
    /// Position in an [`ActionDistribution`] over a bank of `bank_len` demos.
    pub fn slot(self, bank_len: usize) -> usize {
        match self {
            Action::Select(i) => i,
            Action::Stop => bank_len,
        }
    }

    pub fn from_slot(slot: usize, bank_len: usize) -> Self {
        if slot == bank_len {
            Action::Stop
        } else {
            Action::Select(slot)
        }
    }
}

/// Recurrent state before choosing the next action.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    /// Demonstrations chosen so far, in order.
    pub selected: Vec<usize>,
}

/// Softmax over `bank_len` demos followed by the stop slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `true` where the action is not allowed.
    pub mask: Vec<bool>,
}

impl ActionDistribution {
    pub fn bank_len(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn log_prob(&self, slot: usize) -> f64 {
        self.probs[slot].ln()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Masked softmax. Masked entries get probability exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoLegalAction);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { 0.0 } else { (z - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `h0 = tanh(W0 [x_k ‖ x_q] + b0)`, `c0 = 0`.
pub fn fuse_query(knowledge: &[f64], question: &[f64], params: &PolicyParameters) -> Result<PolicyState> {
    check_dim(params.dim, knowledge.len())?;
    check_dim(params.dim, question.len())?;
    let mut joined = Vec::with_capacity(2 * params.dim);
    joined.extend_from_slice(knowledge);
    joined.extend_from_slice(question);
    let mut h = params.fuse_w.matvec(&joined);
    for (hi, bi) in h.iter_mut().zip(&params.fuse_b) {
        *hi = (*hi + bi).tanh();
    }
    Ok(PolicyState {
        h,
        c: vec![0.0; params.hidden],
        selected: Vec::new(),
    })
}

/// Intermediate values of one LSTM step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub input: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Gate layout in the stacked matrices: input, forget, candidate, output.
pub(crate) fn lstm_step(h: &[f64], c: &[f64], x: &[f64], params: &PolicyParameters) -> (Vec<f64>, Vec<f64>, LstmCache) {
    let hd = params.hidden;
    let mut z = params.lstm_wx.matvec(x);
    let zh = params.lstm_wh.matvec(h);
    for ((zi, zhi), bi) in z.iter_mut().zip(&zh).zip(&params.lstm_b) {
        *zi += zhi + bi;
    }
    let i: Vec<f64> = z[..hd].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = z[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = z[2 * hd..3 * hd].iter().map(|&v| v.tanh()).collect();
    let o: Vec<f64> = z[3 * hd..].iter().map(|&v| sigmoid(v)).collect();
    let c_new: Vec<f64> = (0..hd).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();
    let cache = LstmCache {
        input: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    (h_new, c_new, cache)
}

/// One LSTM step consuming a demonstration embedding. `selected` is left for
/// the caller to update.
pub fn advance_state(state: &PolicyState, demo: &[f64], params: &PolicyParameters) -> Result<PolicyState> {
    check_dim(params.dim, demo.len())?;
    let (h, c, _) = lstm_step(&state.h, &state.c, demo, params);
    Ok(PolicyState {
        h,
        c,
        selected: state.selected.clone(),
    })
}

/// Bilinear scores `h · W_a · x` for each bank row and the stop embedding,
/// masked and normalized.
pub fn score_actions(
    state: &PolicyState,
    bank: &Matrix,
    params: &PolicyParameters,
    stop_allowed: bool,
) -> Result<ActionDistribution> {
    check_dim(params.dim, bank.cols())?;
    check_dim(params.hidden, state.h.len())?;
    let n = bank.rows();
    let u = params.score_w.matvec_t(&state.h);
    let mut logits = bank.matvec(&u);
    logits.push(dot(&u, &params.stop_embedding));
    let mut mask = vec![false; n + 1];
    if params.options.mask_selected {
        for &s in &state.selected {
            if s < n {
                mask[s] = true;
            }
        }
    }
    mask[n] = !stop_allowed;
    let probs = masked_softmax(&logits, &mask)?;
    Ok(ActionDistribution { logits, probs, mask })
}

pub fn value_estimate(state: &PolicyState, params: &PolicyParameters) -> f64 {
    dot(&params.value_w, &state.h) + params.value_b[0]
}

/// Draws an action slot by inverse CDF; returns the slot and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (slot, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_legal = slot;
        acc += p;
        if u < acc {
            return (slot, p.ln());
        }
    }
    (last_legal, dist.probs[last_legal].ln())
}

/// Highest-probability slot, lowest index on ties.
pub fn greedy_action(dist: &ActionDistribution) -> (usize, f64) {
    let mut best = 0;
    for (slot, &p) in dist.probs.iter().enumerate() {
        if p > dist.probs[best] {
            best = slot;
        }
    }
    (best, dist.probs[best].ln())
}
