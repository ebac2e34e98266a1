//! PromptPG-style retriever: each demonstration is scored independently by a
//! two-layer perceptron over `[x_k ‖ x_q ‖ x_e]`, with a softmax across the
//! bank and no stop action or sequential state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{masked_softmax, params::ParameterSet};
use crate::tensor::{axpy, dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPgParameters {
    pub dim: usize,
    pub hidden: usize,
    /// hidden × 3·dim
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PromptPgParameters {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            w1: Matrix::zeros(hidden, 3 * dim),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: vec![0.0],
        }
    }

    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim, hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        for t in [p.w1.as_mut_slice(), p.w2.as_mut_slice()] {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        p
    }

    fn input(&self, knowledge: &[f64], question: &[f64], demo: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(3 * self.dim);
        z.extend_from_slice(knowledge);
        z.extend_from_slice(question);
        z.extend_from_slice(demo);
        z
    }

    fn hidden_act(&self, z: &[f64]) -> Vec<f64> {
        let mut a = self.w1.matvec(z);
        for (ai, bi) in a.iter_mut().zip(&self.b1) {
            *ai = (*ai + bi).tanh();
        }
        a
    }
}

impl ParameterSet for PromptPgParameters {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("w1", vec![self.hidden, 3 * self.dim], self.w1.as_slice()),
            ("b1", vec![self.hidden], &self.b1),
            ("w2", vec![self.hidden], &self.w2),
            ("b2", vec![1], &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden)
    }
}

/// Per-demonstration selection probabilities.
pub fn promptpg_scores(
    knowledge: &[f64],
    question: &[f64],
    bank: &Matrix,
    params: &PromptPgParameters,
) -> Result<Vec<f64>> {
    for len in [knowledge.len(), question.len(), bank.cols()] {
        if len != params.dim {
            return Err(Error::DimensionMismatch {
                expected: params.dim,
                actual: len,
            });
        }
    }
    let scores: Vec<f64> = (0..bank.rows())
        .map(|r| {
            let a = params.hidden_act(&params.input(knowledge, question, bank.row(r)));
            dot(&params.w2, &a) + params.b2[0]
        })
        .collect();
    masked_softmax(&scores, &vec![false; scores.len()])
}

/// One PromptPG sample: the chosen demonstrations and a loss weight.
#[derive(Debug, Clone, Copy)]
pub struct PromptPgEpisode<'a> {
    pub knowledge: &'a [f64],
    pub question: &'a [f64],
    pub bank: &'a Matrix,
    pub selected: &'a [usize],
    pub weight: f64,
}

/// Loss `Σ_e weight_e · Σ_{i ∈ selected_e} ln p_i` and its gradient.
pub fn promptpg_gradients(
    params: &PromptPgParameters,
    episodes: &[PromptPgEpisode<'_>],
) -> Result<(f64, PromptPgParameters)> {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ep in episodes {
        let probs = promptpg_scores(ep.knowledge, ep.question, ep.bank, params)?;
        let k = ep.selected.len() as f64;
        total += ep.weight * ep.selected.iter().map(|&i| probs[i].ln()).sum::<f64>();
        for (j, &p) in probs.iter().enumerate() {
            let chosen = ep.selected.iter().filter(|&&i| i == j).count() as f64;
            let ds = ep.weight * (chosen - k * p);
            if ds == 0.0 {
                continue;
            }
            let z = params.input(ep.knowledge, ep.question, ep.bank.row(j));
            let a = params.hidden_act(&z);
            axpy(ds, &a, &mut grads.w2);
            grads.b2[0] += ds;
            let dpre: Vec<f64> = a
                .iter()
                .zip(&params.w2)
                .map(|(ai, wi)| ds * wi * (1.0 - ai * ai))
                .collect();
            grads.w1.add_outer(1.0, &dpre, &z);
            axpy(1.0, &dpre, &mut grads.b1);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("promptpg loss".into()));
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> Matrix {
        Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8])
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = PromptPgParameters::zeros(2, 4);
        let probs = promptpg_scores(&[1.0, 0.0], &[0.0, 1.0], &bank(), &p).unwrap();
        for x in probs {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn permuting_rows_permutes_probs() {
        let p = PromptPgParameters::init(2, 5, 7);
        let b = bank();
        let probs = promptpg_scores(&[1.0, 0.0], &[0.0, 1.0], &b, &p).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let perm = [2, 0, 1];
        let permuted = Matrix::from_vec(3, 2, perm.iter().flat_map(|&r| b.row(r).to_vec()).collect());
        let probs2 = promptpg_scores(&[1.0, 0.0], &[0.0, 1.0], &permuted, &p).unwrap();
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert!((probs2[new_idx] - probs[old_idx]).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = PromptPgParameters::init(2, 3, 1);
        let b = bank();
        let (k, q) = ([0.6, 0.8], [1.0, 0.0]);
        let eps = [
            PromptPgEpisode {
                knowledge: &k,
                question: &q,
                bank: &b,
                selected: &[0, 2],
                weight: -0.7,
            },
            PromptPgEpisode {
                knowledge: &q,
                question: &k,
                bank: &b,
                selected: &[1],
                weight: 1.3,
            },
        ];
        let (_, g) = promptpg_gradients(&p, &eps).unwrap();
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|(_, _, v)| v.to_vec()).collect();
        let mut idx = 0;
        for ti in 0..p.tensors().len() {
            for j in 0..p.tensors()[ti].2.len() {
                let f = |delta: f64| {
                    let mut pp = p.clone();
                    pp.tensors_mut()[ti].1[j] += delta;
                    promptpg_gradients(&pp, &eps).unwrap().0
                };
                let num = (f(1e-5) - f(-1e-5)) / 2e-5;
                let a = analytic[idx];
                assert!(
                    (a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-6),
                    "{a} vs {num}"
                );
                idx += 1;
            }
        }
    }
}
