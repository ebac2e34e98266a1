//! Analytic gradients of per-step losses through the scorer, value head,
//! every LSTM step, and the fusion layer.

use super::{fuse_query, lstm_step, score_actions, Action, LstmCache, ParameterSet, PolicyParameters, PolicyState};
use crate::tensor::{axpy, Matrix};
use crate::{Error, Result};

/// A stored action sequence with the context needed to replay its forward
/// pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeInput<'a> {
    pub knowledge: &'a [f64],
    pub question: &'a [f64],
    /// Bank embeddings, one row per demonstration.
    pub bank: &'a Matrix,
    pub actions: &'a [Action],
    pub stop_allowed: bool,
}

/// Forward quantities at one decision step, as seen by a loss.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub log_prob: f64,
    pub entropy: f64,
    pub value: f64,
    pub probs: Vec<f64>,
    pub slot: usize,
}

/// A step's loss contribution and its partial derivatives with respect to
/// the step's log-probability, entropy and value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLossTerms {
    pub loss: f64,
    pub d_log_prob: f64,
    pub d_entropy: f64,
    pub d_value: f64,
}

struct StepRecord {
    h: Vec<f64>,
    u: Vec<f64>,
    probs: Vec<f64>,
    slot: usize,
    entropy: f64,
    terms: StepLossTerms,
}

/// Evaluates `loss` at every step of every episode and returns the summed
/// loss with its gradient with respect to all policy parameters.
///
/// `loss(episode, step, forward)` supplies the step's contribution; the
/// total is the plain sum of contributions, so any averaging belongs in the
/// closure.
pub fn policy_gradients<F>(
    params: &PolicyParameters,
    episodes: &[EpisodeInput<'_>],
    mut loss: F,
) -> Result<(f64, PolicyParameters)>
where
    F: FnMut(usize, usize, &StepForward) -> StepLossTerms,
{
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (e, ep) in episodes.iter().enumerate() {
        if ep.actions.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let mut joined = Vec::with_capacity(2 * params.dim);
        joined.extend_from_slice(ep.knowledge);
        joined.extend_from_slice(ep.question);
        let h0_state = fuse_query(ep.knowledge, ep.question, params)?;
        let h0 = h0_state.h.clone();
        let mut state = h0_state;
        let mut caches: Vec<LstmCache> = Vec::with_capacity(ep.actions.len());
        let mut steps: Vec<StepRecord> = Vec::with_capacity(ep.actions.len());
        let n = ep.bank.rows();

        for (t, &action) in ep.actions.iter().enumerate() {
            if t > 0 {
                let prev = match ep.actions[t - 1] {
                    Action::Select(i) => i,
                    Action::Stop => return Err(Error::InvalidArgument("stop before the final step".into())),
                };
                let (h, c, cache) = lstm_step(&state.h, &state.c, ep.bank.row(prev), params);
                caches.push(cache);
                let mut selected = std::mem::take(&mut state.selected);
                selected.push(prev);
                state = PolicyState { h, c, selected };
            }
            let dist = score_actions(&state, ep.bank, params, ep.stop_allowed)?;
            let slot = action.slot(n);
            if slot > n || dist.probs[slot] == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "episode {e} step {t}: action {action:?} has zero probability"
                )));
            }
            let entropy = dist.entropy();
            let fwd = StepForward {
                log_prob: dist.log_prob(slot),
                entropy,
                value: super::value_estimate(&state, params),
                probs: dist.probs,
                slot,
            };
            let terms = loss(e, t, &fwd);
            total += terms.loss;
            steps.push(StepRecord {
                h: state.h.clone(),
                u: params.score_w.matvec_t(&state.h),
                probs: fwd.probs,
                slot,
                entropy,
                terms,
            });
        }

        let hd = params.hidden;
        let mut dh_carry = vec![0.0; hd];
        let mut dc_carry = vec![0.0; hd];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            let g = logit_grad(&s.probs, s.slot, s.entropy, &s.terms);
            let mut du = ep.bank.matvec_t(&g[..n]);
            let g_stop = g[n];
            axpy(g_stop, &params.stop_embedding, &mut du);
            axpy(g_stop, &s.u, &mut grads.stop_embedding);
            grads.score_w.add_outer(1.0, &s.h, &du);
            let mut dh = params.score_w.matvec(&du);
            for k in 0..hd {
                dh[k] += dh_carry[k] + s.terms.d_value * params.value_w[k];
            }
            axpy(s.terms.d_value, &s.h, &mut grads.value_w);
            grads.value_b[0] += s.terms.d_value;

            if t > 0 {
                let (dh_prev, dc_prev) = lstm_backward(&caches[t - 1], &dh, &dc_carry, params, &mut grads);
                dh_carry = dh_prev;
                dc_carry = dc_prev;
            } else {
                let dz: Vec<f64> = dh.iter().zip(&h0).map(|(d, h)| d * (1.0 - h * h)).collect();
                grads.fuse_w.add_outer(1.0, &dz, &joined);
                axpy(1.0, &dz, &mut grads.fuse_b);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if !params.options.learn_stop {
        grads.stop_embedding.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok((total, grads))
}

/// Gradient of a step loss with respect to the logits. Masked entries
/// (probability zero) receive exactly zero.
pub(crate) fn logit_grad(probs: &[f64], slot: usize, entropy: f64, terms: &StepLossTerms) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if p == 0.0 {
                return 0.0;
            }
            let onehot = if k == slot { 1.0 } else { 0.0 };
            terms.d_log_prob * (onehot - p) - terms.d_entropy * p * (p.ln() + entropy)
        })
        .collect()
}

fn lstm_backward(
    cache: &LstmCache,
    dh: &[f64],
    dc_next: &[f64],
    params: &PolicyParameters,
    grads: &mut PolicyParameters,
) -> (Vec<f64>, Vec<f64>) {
    let hd = params.hidden;
    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
        let d_o = dh[k] * tc;
        let d_i = dc * g;
        let d_g = dc * i;
        let d_f = dc * cache.c_prev[k];
        dc_prev[k] = dc * f;
        dz[k] = d_i * i * (1.0 - i);
        dz[hd + k] = d_f * f * (1.0 - f);
        dz[2 * hd + k] = d_g * (1.0 - g * g);
        dz[3 * hd + k] = d_o * o * (1.0 - o);
    }
    grads.lstm_wx.add_outer(1.0, &dz, &cache.input);
    grads.lstm_wh.add_outer(1.0, &dz, &cache.h_prev);
    axpy(1.0, &dz, &mut grads.lstm_b);
    (params.lstm_wh.matvec_t(&dz), dc_prev)
}
