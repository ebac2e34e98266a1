use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{l2_norm, Matrix};

/// Uniform access to the named tensors of a model, used by the optimizer,
/// gradient clipping, checkpoints and finite-difference checks.
pub trait ParameterSet: Clone {
    /// `(name, shape, values)` for every tensor, in a fixed order.
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])>;

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn zeros_like(&self) -> Self;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += factor * other`; tensors must have matching shapes.
    fn add_scaled(&mut self, factor: f64, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += factor * x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyOptions {
    /// Forbid re-selecting a demonstration within one trajectory.
    pub mask_selected: bool,
    /// Train the stop embedding; when false its gradient is dropped.
    pub learn_stop: bool,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self {
            mask_selected: true,
            learn_stop: true,
        }
    }
}

/// All learnable tensors of the retrieval policy for embedding dimension
/// `dim` and hidden size `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub dim: usize,
    pub hidden: usize,
    pub options: PolicyOptions,
    /// hidden × 2·dim
    pub fuse_w: Matrix,
    pub fuse_b: Vec<f64>,
    /// 4·hidden × dim, gates stacked as input, forget, candidate, output.
    pub lstm_wx: Matrix,
    /// 4·hidden × hidden
    pub lstm_wh: Matrix,
    pub lstm_b: Vec<f64>,
    /// hidden × dim
    pub score_w: Matrix,
    pub stop_embedding: Vec<f64>,
    pub value_w: Vec<f64>,
    pub value_b: Vec<f64>,
}

impl PolicyParameters {
    pub fn zeros(dim: usize, hidden: usize, options: PolicyOptions) -> Self {
        Self {
            dim,
            hidden,
            options,
            fuse_w: Matrix::zeros(hidden, 2 * dim),
            fuse_b: vec![0.0; hidden],
            lstm_wx: Matrix::zeros(4 * hidden, dim),
            lstm_wh: Matrix::zeros(4 * hidden, hidden),
            lstm_b: vec![0.0; 4 * hidden],
            score_w: Matrix::zeros(hidden, dim),
            stop_embedding: vec![0.0; dim],
            value_w: vec![0.0; hidden],
            value_b: vec![0.0],
        }
    }

    /// Weights uniform in ±1/√hidden, biases zero, stop embedding a random
    /// unit vector.
    pub fn init(dim: usize, hidden: usize, options: PolicyOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim, hidden, options);
        let bound = 1.0 / (hidden as f64).sqrt();
        for t in [
            p.fuse_w.as_mut_slice(),
            p.lstm_wx.as_mut_slice(),
            p.lstm_wh.as_mut_slice(),
            p.score_w.as_mut_slice(),
            p.value_w.as_mut_slice(),
        ] {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = l2_norm(&v);
            if n > 1e-6 {
                p.stop_embedding = v.into_iter().map(|x| x / n).collect();
                break;
            }
        }
        p
    }
}

impl ParameterSet for PolicyParameters {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let (h, d) = (self.hidden, self.dim);
        vec![
            ("fuse_w", vec![h, 2 * d], self.fuse_w.as_slice()),
            ("fuse_b", vec![h], &self.fuse_b),
            ("lstm_wx", vec![4 * h, d], self.lstm_wx.as_slice()),
            ("lstm_wh", vec![4 * h, h], self.lstm_wh.as_slice()),
            ("lstm_b", vec![4 * h], &self.lstm_b),
            ("score_w", vec![h, d], self.score_w.as_slice()),
            ("stop_embedding", vec![d], &self.stop_embedding),
            ("value_w", vec![h], &self.value_w),
            ("value_b", vec![1], &self.value_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("fuse_w", self.fuse_w.as_mut_slice()),
            ("fuse_b", &mut self.fuse_b),
            ("lstm_wx", self.lstm_wx.as_mut_slice()),
            ("lstm_wh", self.lstm_wh.as_mut_slice()),
            ("lstm_b", &mut self.lstm_b),
            ("score_w", self.score_w.as_mut_slice()),
            ("stop_embedding", &mut self.stop_embedding),
            ("value_w", &mut self.value_w),
            ("value_b", &mut self.value_b),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden, self.options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = PolicyParameters::init(4, 9, PolicyOptions::default(), 3);
        assert_eq!(a, PolicyParameters::init(4, 9, PolicyOptions::default(), 3));
        assert_ne!(a, PolicyParameters::init(4, 9, PolicyOptions::default(), 4));
        let bound = 1.0 / 3.0;
        assert!(a.lstm_wh.as_slice().iter().all(|x| x.abs() <= bound));
        assert!(a.lstm_b.iter().all(|&x| x == 0.0));
        assert!((l2_norm(&a.stop_embedding) - 1.0).abs() < 1e-12);
        assert_eq!(a.num_parameters(), 9 * 8 + 9 + 36 * 4 + 36 * 9 + 36 + 9 * 4 + 4 + 9 + 1);
    }

    #[test]
    fn add_scaled_and_norm() {
        let a = PolicyParameters::init(2, 3, PolicyOptions::default(), 1);
        let mut b = a.clone();
        b.add_scaled(-1.0, &a);
        assert_eq!(b.global_norm(), 0.0);
        assert_eq!(b, a.zeros_like());
    }
}
