//! Browser demo: return curves, prompt preview and a small in-page training
//! run. Every export takes plain values and returns JSON text so the page
//! stays framework-free.

use std::collections::BTreeSet;

use flexsdr::dataset::{Demonstration, Label, Split};
use flexsdr::embed::{embed_dataset, SyntheticEmbedder};
use flexsdr::eval::{evaluate_retriever, EvalOptions, Retriever};
use flexsdr::judge::{SimJudgeConfig, SimulatedJudge};
use flexsdr::policy::Action;
use flexsdr::prompt::{assemble_prompt, parse_judgment};
use flexsdr::rewards::{compute_returns, RewardConfig, Step, Termination, Trajectory};
use flexsdr::synth::{generate, SynthConfig};
use flexsdr::task::Task;
use flexsdr::trainer::{train, Algorithm, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sign(s: &str) -> Result<i8, String> {
    match s.trim() {
        "+" | "1" | "+1" => Ok(1),
        "-" | "-1" => Ok(-1),
        other => Err(format!("reward `{other}` is not +1 or -1")),
    }
}

fn trajectory(r0: i8, rewards: &[i8], stop: bool) -> Trajectory {
    let step = |reward: i8, action, bonus| Step {
        action,
        log_prob: 0.0,
        value: 0.0,
        reward,
        bonus,
    };
    let mut steps: Vec<Step> = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| step(r, Action::Select(i), 0))
        .collect();
    if stop {
        let prev = rewards.last().copied().unwrap_or(r0);
        steps.push(step(prev, Action::Stop, prev));
    }
    Trajectory {
        instance_id: "demo".into(),
        r0,
        steps,
        terminated_by: if stop { Termination::Stop } else { Termination::MaxLen },
    }
}

/// Returns for one trajectory. `rewards` lists the selection rewards as
/// comma-separated `+`/`-`; `stop` appends a stop action.
#[wasm_bindgen]
pub fn returns(
    gamma: f64,
    omega: f64,
    intermediate: bool,
    r0: i8,
    rewards: &str,
    stop: bool,
) -> Result<String, String> {
    let rs = rewards
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(sign)
        .collect::<Result<Vec<_>, _>>()?;
    if r0 != 1 && r0 != -1 {
        return Err(format!("r0 must be +1 or -1, got {r0}"));
    }
    let cfg = RewardConfig {
        gamma,
        omega,
        intermediate_rewards: intermediate,
        stop_enabled: true,
        max_shots: rs.len().max(1),
    };
    cfg.validate().map_err(err)?;
    let traj = trajectory(r0, &rs, stop);
    traj.validate(cfg.max_shots).map_err(err)?;
    let g = compute_returns(&traj, &cfg).map_err(err)?;
    Ok(json!({ "returns": g, "stop_chain_valid": cfg.stop_chain_valid() }).to_string())
}

#[derive(Serialize)]
struct ChainRow {
    r0: i8,
    r1: i8,
    r2: i8,
    /// Return at the first action of: stop now, select then stop, select twice.
    stop_now: f64,
    one_then_stop: f64,
    two: f64,
    ok: bool,
}

/// Compares stopping early against continuing for every sign pattern of the
/// first three rewards.
#[wasm_bindgen]
pub fn stop_chain(gamma: f64, omega: f64) -> Result<String, String> {
    let cfg = RewardConfig::flexsdr(gamma, omega, 2);
    cfg.validate().map_err(err)?;
    let g0 = |t: Trajectory| compute_returns(&t, &cfg).map(|g| g[0]).map_err(err);
    let mut rows = Vec::new();
    for r0 in [1, -1] {
        for r1 in [1, -1] {
            for r2 in [1, -1] {
                let a = g0(trajectory(r0, &[], true))?;
                let b = g0(trajectory(r0, &[r1], true))?;
                let c = g0(trajectory(r0, &[r1, r2], false))?;
                let ok = (a - b).signum() == r0 as f64 && (b - c).signum() == r1 as f64;
                rows.push(ChainRow {
                    r0,
                    r1,
                    r2,
                    stop_now: a,
                    one_then_stop: b,
                    two: c,
                    ok,
                });
            }
        }
    }
    Ok(json!({ "valid": cfg.stop_chain_valid(), "rows": rows }).to_string())
}

#[derive(Deserialize)]
struct DemoInput {
    question: String,
    label: bool,
    #[serde(default)]
    reason: String,
}

/// Assembles the prompt for `demos` (a JSON list of
/// `{question, label, reason}`) and parses `reply` as a judge answer.
#[wasm_bindgen]
pub fn prompt_preview(knowledge: &str, question: &str, demos: &str, reply: &str) -> Result<String, String> {
    let inputs: Vec<DemoInput> = if demos.trim().is_empty() {
        Vec::new()
    } else {
        serde_json::from_str(demos).map_err(|e| format!("demos: {e}"))?
    };
    let demos: Vec<Demonstration> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, d)| Demonstration {
            id: format!("d{i}"),
            knowledge_id: "k".into(),
            question_text: d.question,
            label: Label::from(d.label),
            reason_text: d.reason,
            hints: BTreeSet::new(),
            embedding: None,
        })
        .collect();
    let refs: Vec<&Demonstration> = demos.iter().collect();
    let j = parse_judgment(reply);
    Ok(json!({
        "prompt": assemble_prompt(knowledge, question, &refs),
        "prediction": if j.prediction.is_match() { "Yes" } else { "No" },
        "parse_ok": j.parse_ok,
    })
    .to_string())
}

/// Trains a small retriever on a synthetic two-concept task with the
/// simulated judge and evaluates it on the test split.
#[wasm_bindgen]
pub fn train_demo(algorithm: &str, episodes: usize, seed: u64) -> Result<String, String> {
    let algorithm = Algorithm::parse(algorithm).ok_or_else(|| format!("unknown algorithm `{algorithm}`"))?;
    let mut ds = generate(&SynthConfig {
        concepts: 2,
        instances_per_concept: 60,
        seed,
        ..Default::default()
    })
    .map_err(err)?;
    let embedder = SyntheticEmbedder::new(seed, 32).map_err(err)?;
    let index = embed_dataset(&mut ds, &embedder).map_err(err)?;
    let task = Task::new(&ds, &index).map_err(err)?;
    let judge = SimulatedJudge::new(SimJudgeConfig::default()).map_err(err)?;
    let mut cfg = TrainConfig::for_algorithm(algorithm);
    cfg.episodes = episodes;
    cfg.seed = seed;
    cfg.hidden = 16;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    cfg.probe_size = 16;
    cfg.probe_every = 10;
    let out = train(&task, &judge, &cfg, None).map_err(err)?;
    let retriever = Retriever::Model {
        model: &out.model,
        reward: cfg.reward,
    };
    let test: Vec<_> = ds.split(Split::Test).collect();
    let report = evaluate_retriever(&retriever, &task, &test, "test", &judge, &EvalOptions::default()).map_err(err)?;
    let curve: Vec<_> = out
        .log
        .iter()
        .map(|e| json!({ "episode": e.episode, "mean_return": e.mean_return, "mean_shots": e.mean_shots }))
        .collect();
    Ok(json!({
        "algorithm": algorithm.name(),
        "curve": curve,
        "accuracy": report.accuracy,
        "mean_shots": report.mean_shots,
        "mean_shots_zero_shot_solvable": report.mean_shots_zero_shot_solvable,
        "mean_shots_other": report.mean_shots_other,
    })
    .to_string())
}
