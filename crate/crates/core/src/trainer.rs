//! Rollouts, the clipped PPO objective, REINFORCE for PromptPG, bounded
//! replay, and the training loop.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index::sample as sample_indices, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TaggingInstance;
use crate::judge::{eval_reward, Judge};
use crate::policy::{
    advance_state, fuse_query, policy_gradients, promptpg_gradients, promptpg_scores, sample_action, save_checkpoint,
    score_actions, value_estimate, Action, CheckpointMeta, EpisodeInput, ParameterSet, PolicyOptions, PolicyParameters,
    PromptPgEpisode, PromptPgParameters, StepForward, StepLossTerms,
};
use crate::rewards::{compute_returns, normalize, stop_reward, RewardConfig, Step, Termination, Trajectory};
use crate::task::{greedy_selection, held_out_train, promptpg_top_k, Query, Task};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Flexsdr,
    Flexreticr,
    Reticl,
    Promptpg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::Flexsdr, Self::Flexreticr, Self::Reticl, Self::Promptpg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flexsdr => "flexsdr",
            Self::Flexreticr => "flexreticr",
            Self::Reticl => "reticl",
            Self::Promptpg => "promptpg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The reward settings this algorithm implies, keeping `gamma`, `omega`
    /// and `max_shots` from `base` where the preset leaves them free.
    pub fn reward_preset(self, base: &RewardConfig) -> RewardConfig {
        match self {
            Self::Flexsdr => RewardConfig::flexsdr(base.gamma, base.omega, base.max_shots),
            Self::Flexreticr => RewardConfig::flexreticr(base.gamma, base.omega, base.max_shots),
            Self::Reticl | Self::Promptpg => RewardConfig::reticl(base.max_shots),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub reward: RewardConfig,
    pub algorithm: Algorithm,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub replay_capacity: usize,
    pub replay_reuse: usize,
    pub episodes: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub hidden: usize,
    pub policy: PolicyOptions,
    pub checkpoint_every: usize,
    pub probe_every: usize,
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            algorithm: Algorithm::Flexsdr,
            clip_eps: 0.2,
            ppo_epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            value_coef: 0.5,
            entropy_coef: 0.01,
            replay_capacity: 64,
            replay_reuse: 2,
            episodes: 500,
            seed: 0,
            grad_clip_norm: 1.0,
            hidden: 128,
            policy: PolicyOptions::default(),
            checkpoint_every: 100,
            probe_every: 10,
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    /// Defaults with the reward preset of `algorithm` applied.
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let mut c = Self::default();
        c.apply_algorithm(algorithm);
        c
    }

    pub fn apply_algorithm(&mut self, algorithm: Algorithm) {
        self.algorithm = algorithm;
        self.reward = algorithm.reward_preset(&self.reward);
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return bad("clip_eps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be positive");
        }
        if self.ppo_epochs == 0 && self.algorithm != Algorithm::Promptpg {
            return bad("ppo_epochs must be positive");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if self.algorithm == Algorithm::Promptpg && (self.reward.stop_enabled || self.reward.intermediate_rewards) {
            return bad("promptpg uses a fixed shot count and a single terminal reward");
        }
        Ok(())
    }
}

/// Samples one trajectory. Judges zero-shot first for `r0`, then re-judges
/// after every selection.
pub fn rollout<R: Rng + ?Sized>(
    params: &PolicyParameters,
    query: &Query<'_>,
    judge: &dyn Judge,
    cfg: &RewardConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let inst = query.instance;
    let r0 = eval_reward(&judge.judge(inst, &[])?, inst.label);
    let n = query.bank_matrix.rows();
    let mut state = fuse_query(query.knowledge, query.question, params)?;
    let mut steps = Vec::with_capacity(cfg.max_shots + 1);
    let mut prev = r0;
    let mut terminated_by = Termination::MaxLen;
    for t in 0..cfg.max_shots {
        if !cfg.stop_enabled && params.options.mask_selected && t >= n {
            break;
        }
        let dist = score_actions(&state, query.bank_matrix, params, cfg.stop_enabled)?;
        let (slot, log_prob) = sample_action(&dist, rng);
        let value = value_estimate(&state, params);
        match Action::from_slot(slot, n) {
            Action::Stop => {
                let (reward, bonus) = stop_reward(prev);
                steps.push(Step {
                    action: Action::Stop,
                    log_prob,
                    value,
                    reward,
                    bonus,
                });
                terminated_by = Termination::Stop;
                break;
            }
            Action::Select(i) => {
                let mut selected = state.selected.clone();
                selected.push(i);
                let reward = eval_reward(&judge.judge(inst, &query.demos(&selected))?, inst.label);
                steps.push(Step {
                    action: Action::Select(i),
                    log_prob,
                    value,
                    reward,
                    bonus: 0,
                });
                prev = reward;
                if t + 1 < cfg.max_shots {
                    state = advance_state(&state, query.bank_matrix.row(i), params)?;
                }
                state.selected = selected;
            }
        }
    }
    Ok(Trajectory {
        instance_id: inst.id.clone(),
        r0,
        steps,
        terminated_by,
    })
}

/// A trajectory ready for a PPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSample {
    pub trajectory: Trajectory,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Computes returns per trajectory and advantages `G − V_behavior`
/// normalized across the whole batch.
pub fn prepare_batch(trajectories: Vec<Trajectory>, cfg: &RewardConfig) -> Result<Vec<PpoSample>> {
    let mut out = Vec::with_capacity(trajectories.len());
    let mut flat = Vec::new();
    for t in trajectories {
        let returns = compute_returns(&t, cfg)?;
        flat.extend(returns.iter().zip(&t.steps).map(|(g, s)| g - s.value));
        out.push(PpoSample {
            trajectory: t,
            returns,
            advantages: Vec::new(),
        });
    }
    normalize(&mut flat);
    let mut it = flat.into_iter();
    for s in &mut out {
        s.advantages = it.by_ref().take(s.returns.len()).collect();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Loss coefficients of the clipped surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoCoefficients {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&TrainConfig> for PpoCoefficients {
    fn from(c: &TrainConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
        }
    }
}

/// Per-step terms of the clipped surrogate for one step, already divided by
/// the batch step count `n`.
pub fn ppo_step_terms(
    fwd: &StepForward,
    behavior_log_prob: f64,
    advantage: f64,
    target: f64,
    coef: &PpoCoefficients,
    n: f64,
) -> (StepLossTerms, f64, bool) {
    let ratio = (fwd.log_prob - behavior_log_prob).exp();
    let clipped = ratio.clamp(1.0 - coef.clip_eps, 1.0 + coef.clip_eps);
    let unclipped_term = ratio * advantage;
    let clipped_term = clipped * advantage;
    let uses_clipped = clipped_term < unclipped_term;
    let surrogate = unclipped_term.min(clipped_term);
    let d_surrogate = if uses_clipped { 0.0 } else { ratio * advantage };
    let verr = fwd.value - target;
    let terms = StepLossTerms {
        loss: (-surrogate + coef.value_coef * verr * verr - coef.entropy_coef * fwd.entropy) / n,
        d_log_prob: -d_surrogate / n,
        d_entropy: -coef.entropy_coef / n,
        d_value: 2.0 * coef.value_coef * verr / n,
    };
    (terms, ratio, ratio != clipped)
}

/// The clipped PPO loss over a batch with its gradient.
pub fn ppo_loss(
    params: &PolicyParameters,
    task: &Task<'_>,
    batch: &[PpoSample],
    coef: &PpoCoefficients,
    stop_allowed: bool,
) -> Result<(PpoStats, PolicyParameters)> {
    let actions: Vec<Vec<Action>> = batch.iter().map(|s| s.trajectory.actions()).collect();
    let mut episodes = Vec::with_capacity(batch.len());
    for (s, a) in batch.iter().zip(&actions) {
        let inst = task
            .dataset
            .instance(&s.trajectory.instance_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown instance `{}`", s.trajectory.instance_id)))?;
        let q = task.query(inst)?;
        episodes.push(EpisodeInput {
            knowledge: q.knowledge,
            question: q.question,
            bank: q.bank_matrix,
            actions: a,
            stop_allowed,
        });
    }
    let n = batch.iter().map(|s| s.trajectory.steps.len()).sum::<usize>().max(1) as f64;
    let mut stats = PpoStats::default();
    let (loss, grads) = policy_gradients(params, &episodes, |e, t, fwd| {
        let s = &batch[e];
        let (terms, ratio, clipped) = ppo_step_terms(
            fwd,
            s.trajectory.steps[t].log_prob,
            s.advantages[t],
            s.returns[t],
            coef,
            n,
        );
        let verr = fwd.value - s.returns[t];
        stats.value_loss += coef.value_coef * verr * verr / n;
        stats.entropy += fwd.entropy / n;
        stats.mean_ratio += ratio / n;
        stats.clip_fraction += if clipped { 1.0 / n } else { 0.0 };
        terms
    })?;
    stats.loss = loss;
    stats.policy_loss = loss - stats.value_loss + coef.entropy_coef * stats.entropy;
    Ok((stats, grads))
}

/// A PromptPG sample: demonstrations drawn without replacement and the
/// terminal reward of judging with all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPgSample {
    pub instance_id: String,
    pub selected: Vec<usize>,
    pub reward: i8,
}

/// Draws `k` distinct demonstrations, each in proportion to the scorer's
/// probabilities renormalized over the ones not yet drawn.
pub fn sample_without_replacement<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            acc += probs[i];
            if u < acc {
                pick = pos;
                break;
            }
        }
        out.push(remaining.remove(pick));
    }
    out
}

/// `−mean[(Σ log p_i)(r − mean r)]` with its gradient.
pub fn reinforce_loss(
    params: &PromptPgParameters,
    task: &Task<'_>,
    batch: &[PromptPgSample],
) -> Result<(f64, PromptPgParameters)> {
    if batch.is_empty() {
        return Ok((0.0, params.zeros_like()));
    }
    let b = batch.len() as f64;
    let baseline = batch.iter().map(|s| s.reward as f64).sum::<f64>() / b;
    let mut queries = Vec::with_capacity(batch.len());
    for s in batch {
        let inst = task
            .dataset
            .instance(&s.instance_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown instance `{}`", s.instance_id)))?;
        queries.push(task.query(inst)?);
    }
    let episodes: Vec<PromptPgEpisode> = batch
        .iter()
        .zip(&queries)
        .map(|(s, q)| PromptPgEpisode {
            knowledge: q.knowledge,
            question: q.question,
            bank: q.bank_matrix,
            selected: &s.selected,
            weight: -(s.reward as f64 - baseline) / b,
        })
        .collect();
    promptpg_gradients(params, &episodes)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<P: ParameterSet> {
    m: P,
    v: P,
    t: i32,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<P: ParameterSet> Adam<P> {
    pub fn new(like: &P, learning_rate: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let g_all = grads.tensors();
        for ((((_, p), (_, m)), (_, v)), (_, _, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(g_all)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: ParameterSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

struct ReplayEntry {
    trajectory: Trajectory,
    uses: usize,
}

/// Bounded FIFO of past trajectories with their behavior log-probabilities.
pub struct ReplayBuffer {
    capacity: usize,
    reuse: usize,
    entries: VecDeque<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reuse: usize) -> Self {
        Self {
            capacity,
            reuse,
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        if self.capacity == 0 || self.reuse == 0 {
            return;
        }
        self.entries.push_back(ReplayEntry { trajectory, uses: 0 });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Up to `k` stored trajectories chosen uniformly. Each draw counts as a
    /// reuse; entries are dropped once they reach the reuse cap.
    pub fn sample<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<Trajectory> {
        let k = k.min(self.entries.len());
        let mut idx = sample_indices(rng, self.entries.len(), k).into_vec();
        idx.sort_unstable();
        let out = idx
            .iter()
            .map(|&i| {
                let e = &mut self.entries[i];
                e.uses += 1;
                e.trajectory.clone()
            })
            .collect();
        let reuse = self.reuse;
        self.entries.retain(|e| e.uses < reuse);
        out
    }

    /// Writes the buffer as JSON lines.
    pub fn spill(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, &e.trajectory)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trained parameters of either model family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Policy(PolicyParameters),
    PromptPg(PromptPgParameters),
}

impl Model {
    pub fn init(cfg: &TrainConfig, dim: usize) -> Self {
        match cfg.algorithm {
            Algorithm::Promptpg => Model::PromptPg(PromptPgParameters::init(dim, cfg.hidden, cfg.seed)),
            _ => Model::Policy(PolicyParameters::init(dim, cfg.hidden, cfg.policy, cfg.seed)),
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        match self {
            Model::Policy(p) => save_checkpoint(p, &CheckpointMeta::for_policy(p, config_hash), path),
            Model::PromptPg(p) => save_checkpoint(p, &CheckpointMeta::for_promptpg(p, config_hash), path),
        }
    }

    /// Demonstrations chosen for `query` at evaluation time.
    pub fn select(&self, query: &Query<'_>, reward: &RewardConfig) -> Result<Vec<usize>> {
        match self {
            Model::Policy(p) => greedy_selection(p, query, reward.max_shots, reward.stop_enabled),
            Model::PromptPg(p) => promptpg_top_k(p, query, reward.max_shots),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub loss: f64,
    pub mean_return: f64,
    pub mean_shots: f64,
    pub trajectories: usize,
    pub replayed: usize,
    pub skipped: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<PpoStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    pub config_hash: String,
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl TrainOutput {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpisodeLog>,
    pub rollbacks: usize,
}

fn probe_accuracy(
    model: &Model,
    task: &Task<'_>,
    probe: &[&TaggingInstance],
    judge: &dyn Judge,
    reward: &RewardConfig,
) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in probe {
        let Ok(q) = task.query(inst) else { continue };
        let Ok(sel) = model.select(&q, reward) else { continue };
        match judge.judge(inst, &q.demos(&sel)) {
            Ok(j) => {
                total += 1;
                correct += usize::from(j.prediction == inst.label);
            }
            Err(e) => log::warn!("probe judge failed on `{}`: {e}", inst.id),
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Trains a retriever. With `output`, writes `train_log.jsonl`, periodic
/// `checkpoint-NNNNNN.ckpt` files and `final.ckpt` under its directory.
pub fn train(
    task: &Task<'_>,
    judge: &dyn Judge,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let config_hash = output.map(|o| o.config_hash.clone()).unwrap_or_default();
    let mut log_writer = match output {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let p = o.log_path();
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let (probe, pool) = held_out_train(task.dataset, cfg.seed, cfg.probe_size);
    if pool.is_empty() && cfg.episodes > 0 {
        return Err(Error::InvalidArgument("no train instances".into()));
    }
    let mut model = Model::init(cfg, task.dim());
    let mut lr = cfg.learning_rate;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, cfg.replay_reuse);
    let mut policy_opt = match &model {
        Model::Policy(p) => Some(Adam::new(p, lr)),
        Model::PromptPg(_) => None,
    };
    let mut pg_opt = match &model {
        Model::PromptPg(p) => Some(Adam::new(p, lr)),
        Model::Policy(_) => None,
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj_counter: u64 = 0;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut rollbacks = 0;

    for episode in 1..=cfg.episodes {
        let picks: Vec<&TaggingInstance> = pool
            .choose_multiple(&mut batch_rng, cfg.batch_size.min(pool.len()))
            .copied()
            .collect();
        let mut skipped = 0;
        let mut entry = EpisodeLog {
            episode,
            loss: 0.0,
            mean_return: 0.0,
            mean_shots: 0.0,
            trajectories: 0,
            replayed: 0,
            skipped: 0,
            learning_rate: lr,
            stats: None,
            probe_accuracy: None,
            event: None,
            config_hash: config_hash.clone(),
        };
        let snapshot = model.clone();

        match &mut model {
            Model::Policy(params) => {
                let mut fresh = Vec::with_capacity(picks.len());
                for inst in &picks {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    traj_counter += 1;
                    rng.set_stream(traj_counter);
                    let q = task.query(inst)?;
                    match rollout(params, &q, judge, &cfg.reward, &mut rng) {
                        Ok(t) => fresh.push(t),
                        Err(e @ (Error::Judge(_) | Error::Http { .. } | Error::MalformedResponse(_))) => {
                            log::warn!("skipping trajectory for `{}`: {e}", inst.id);
                            skipped += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
                let replayed = replay.sample(cfg.batch_size, &mut batch_rng);
                entry.trajectories = fresh.len();
                entry.replayed = replayed.len();
                if !fresh.is_empty() {
                    let mut returns0 = 0.0;
                    for t in &fresh {
                        returns0 += compute_returns(t, &cfg.reward)?[0];
                    }
                    entry.mean_return = returns0 / fresh.len() as f64;
                    entry.mean_shots = fresh.iter().map(|t| t.shots() as f64).sum::<f64>() / fresh.len() as f64;
                }
                let mut all = fresh.clone();
                all.extend(replayed);
                if !all.is_empty() {
                    let batch = prepare_batch(all, &cfg.reward)?;
                    let coef = PpoCoefficients::from(cfg);
                    let opt = policy_opt.as_mut().expect("policy optimizer");
                    opt.learning_rate = lr;
                    for _ in 0..cfg.ppo_epochs {
                        match ppo_loss(params, task, &batch, &coef, cfg.reward.stop_enabled) {
                            Ok((stats, mut grads)) => {
                                clip_grad_norm(&mut grads, cfg.grad_clip_norm);
                                opt.step(params, &grads);
                                entry.loss = stats.loss;
                                entry.stats = Some(stats);
                            }
                            Err(Error::NonFinite(what)) => {
                                log::warn!("episode {episode}: non-finite {what}, update aborted");
                                entry.event = Some(format!("aborted update: non-finite {what}"));
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                for t in fresh {
                    replay.push(t);
                }
            }
            Model::PromptPg(params) => {
                let mut samples = Vec::with_capacity(picks.len());
                for inst in &picks {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    traj_counter += 1;
                    rng.set_stream(traj_counter);
                    let q = task.query(inst)?;
                    let probs = promptpg_scores(q.knowledge, q.question, q.bank_matrix, params)?;
                    let selected = sample_without_replacement(&probs, cfg.reward.max_shots, &mut rng);
                    match judge.judge(inst, &q.demos(&selected)) {
                        Ok(j) => samples.push(PromptPgSample {
                            instance_id: inst.id.clone(),
                            selected,
                            reward: eval_reward(&j, inst.label),
                        }),
                        Err(e) => {
                            log::warn!("skipping trajectory for `{}`: {e}", inst.id);
                            skipped += 1;
                        }
                    }
                }
                entry.trajectories = samples.len();
                if !samples.is_empty() {
                    let n = samples.len() as f64;
                    entry.mean_return = samples.iter().map(|s| s.reward as f64).sum::<f64>() / n;
                    entry.mean_shots = samples.iter().map(|s| s.selected.len() as f64).sum::<f64>() / n;
                    match reinforce_loss(params, task, &samples) {
                        Ok((loss, mut grads)) => {
                            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
                            let opt = pg_opt.as_mut().expect("promptpg optimizer");
                            opt.learning_rate = lr;
                            opt.step(params, &grads);
                            entry.loss = loss;
                        }
                        Err(Error::NonFinite(what)) => {
                            entry.event = Some(format!("aborted update: non-finite {what}"));
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }

        let finite = match &model {
            Model::Policy(p) => p.is_finite(),
            Model::PromptPg(p) => p.is_finite(),
        };
        if !finite {
            model = snapshot;
            lr *= 0.5;
            rollbacks += 1;
            log::warn!("episode {episode}: non-finite parameters, rolled back; learning rate now {lr}");
            entry.event = Some(format!("rollback; learning rate halved to {lr}"));
            if let Some(o) = policy_opt.as_mut() {
                if let Model::Policy(p) = &model {
                    *o = Adam::new(p, lr);
                }
            }
            if let Some(o) = pg_opt.as_mut() {
                if let Model::PromptPg(p) = &model {
                    *o = Adam::new(p, lr);
                }
            }
        }
        entry.skipped = skipped;

        if cfg.probe_every > 0 && episode % cfg.probe_every == 0 && !probe.is_empty() {
            entry.probe_accuracy = probe_accuracy(&model, task, &probe, judge, &cfg.reward);
        }
        if let (Some(o), true) = (output, cfg.checkpoint_every > 0 && episode % cfg.checkpoint_every == 0) {
            model.save(&o.dir.join(format!("checkpoint-{episode:06}.ckpt")), &o.config_hash)?;
        }
        if let Some((w, p)) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
        }
        log::debug!(
            "episode {episode}: loss {:.4} return {:.3} shots {:.2}",
            entry.loss,
            entry.mean_return,
            entry.mean_shots
        );
        log.push(entry);
    }

    if let Some(o) = output {
        model.save(&o.final_checkpoint(), &o.config_hash)?;
    }
    if let Some((mut w, p)) = log_writer {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { model, log, rollbacks })
}
