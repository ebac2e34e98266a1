//! Step rewards, the stop bonus, discounted returns and advantages.
//!
//! A trajectory starts from the zero-shot correctness `r0`. Each `Select`
//! step is re-judged with the demonstrations chosen so far and earns ±1. A
//! `Stop` step repeats the most recent reward and adds the same value as a
//! bonus weighted by `omega`, so it contributes `(1 + omega) · r_prev`.
//!
//! With intermediate rewards and `T = 2`, stopping when the latest answer is
//! correct beats continuing only while `gamma < omega / (1 + omega)`:
//! `(1 + ω) > 1 + γ(1 + ω)` rearranges to exactly that bound.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::judge::eval_reward;
use crate::policy::Action;
use crate::prompt::Judgment;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub gamma: f64,
    pub omega: f64,
    pub intermediate_rewards: bool,
    pub stop_enabled: bool,
    pub max_shots: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::flexsdr(0.3, 1.0, 4)
    }
}

impl RewardConfig {
    pub fn flexsdr(gamma: f64, omega: f64, max_shots: usize) -> Self {
        Self {
            gamma,
            omega,
            intermediate_rewards: true,
            stop_enabled: true,
            max_shots,
        }
    }

    /// Early stop kept, reward only at the final step.
    pub fn flexreticr(gamma: f64, omega: f64, max_shots: usize) -> Self {
        Self {
            intermediate_rewards: false,
            ..Self::flexsdr(gamma, omega, max_shots)
        }
    }

    /// Fixed length, undiscounted, reward only at the final step.
    pub fn reticl(max_shots: usize) -> Self {
        Self {
            gamma: 1.0,
            omega: 0.0,
            intermediate_rewards: false,
            stop_enabled: false,
            max_shots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.gamma == 1.0 && self.intermediate_rewards {
            return Err(Error::InvalidArgument(
                "gamma = 1 requires final-step-only rewards".into(),
            ));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "omega must be >= 0, got {}",
                self.omega
            )));
        }
        if self.max_shots == 0 {
            return Err(Error::InvalidArgument("max_shots must be positive".into()));
        }
        Ok(())
    }

    /// Whether the stop-bonus orderings are guaranteed for these settings.
    pub fn stop_chain_valid(&self) -> bool {
        self.omega > 0.0 && self.gamma < self.omega / (1.0 + self.omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    /// Behavior log-probability at collection time.
    pub log_prob: f64,
    /// Value estimate at collection time.
    pub value: f64,
    pub reward: i8,
    pub bonus: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stop,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: String,
    pub r0: i8,
    pub steps: Vec<Step>,
    pub terminated_by: Termination,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Selected demonstration indices in order.
    pub fn selected(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s.action {
                Action::Select(i) => Some(i),
                Action::Stop => None,
            })
            .collect()
    }

    pub fn shots(&self) -> usize {
        self.selected().len()
    }

    pub fn validate(&self, max_shots: usize) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::InvalidArgument(format!(
                "trajectory `{}`: {m}",
                self.instance_id
            )))
        };
        if self.steps.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if self.r0 != 1 && self.r0 != -1 {
            return bad("r0 must be ±1");
        }
        let last = self.steps.len() - 1;
        let mut prev = self.r0;
        for (t, s) in self.steps.iter().enumerate() {
            if s.reward != 1 && s.reward != -1 {
                return bad("rewards must be ±1");
            }
            match s.action {
                Action::Stop => {
                    if t != last {
                        return bad("stop must be the final step");
                    }
                    if s.reward != prev || s.bonus != prev {
                        return bad("stop must repeat the most recent reward");
                    }
                }
                Action::Select(_) => {
                    if s.bonus != 0 {
                        return bad("bonus only on stop");
                    }
                }
            }
            prev = s.reward;
        }
        if self.shots() > max_shots {
            return bad("too many selections");
        }
        let ends_in_stop = self.steps[last].action == Action::Stop;
        if ends_in_stop != (self.terminated_by == Termination::Stop) {
            return bad("termination does not match final action");
        }
        Ok(())
    }
}

/// Reward for a `Select` step judged with demonstrations `e_1..e_t`.
pub fn step_reward(judgment: &Judgment, gold: Label) -> i8 {
    eval_reward(judgment, gold)
}

/// `(r_t, r'_t)` for a stop taken after a step that earned `prev_reward`.
pub fn stop_reward(prev_reward: i8) -> (i8, i8) {
    (prev_reward, prev_reward)
}

/// The stop step's instant contribution `r_t + ω · r'_t`.
pub fn stop_contribution(prev_reward: i8, omega: f64) -> f64 {
    let (r, b) = stop_reward(prev_reward);
    r as f64 + omega * b as f64
}

/// Discounted returns `G_t = ρ_t + γ G_{t+1}`. With intermediate rewards
/// `ρ_t = r_t + ω r'_t` at every step; otherwise only the final step is
/// non-zero.
pub fn compute_returns(traj: &Trajectory, cfg: &RewardConfig) -> Result<Vec<f64>> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let last = traj.steps.len() - 1;
    let mut returns = vec![0.0; traj.steps.len()];
    let mut next = 0.0;
    for t in (0..traj.steps.len()).rev() {
        let s = &traj.steps[t];
        let rho = if cfg.intermediate_rewards || t == last {
            s.reward as f64 + cfg.omega * s.bonus as f64
        } else {
            0.0
        };
        next = rho + cfg.gamma * next;
        returns[t] = next;
    }
    Ok(returns)
}

/// `A_t = G_t − V_t` without normalization.
pub fn raw_advantages(returns: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if returns.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} returns but {} values",
            returns.len(),
            values.len()
        )));
    }
    Ok(returns.iter().zip(values).map(|(g, v)| g - v).collect())
}

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Shifts to mean zero and scales to unit standard deviation in place.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in values.iter_mut() {
        *a = (*a - mean) / (std + ADVANTAGE_EPS);
    }
}

/// Batch-normalized advantages over a flattened batch of steps.
pub fn advantages(returns: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let mut a = raw_advantages(returns, values)?;
    normalize(&mut a);
    Ok(a)
}
