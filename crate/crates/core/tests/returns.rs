use flexsdr::policy::Action;
use flexsdr::rewards::{
    advantages, compute_returns, normalize, raw_advantages, stop_reward, RewardConfig, Step, Termination, Trajectory,
};
use proptest::prelude::*;

fn step(action: Action, reward: i8, bonus: i8) -> Step {
    Step {
        action,
        log_prob: 0.0,
        value: 0.0,
        reward,
        bonus,
    }
}

/// Valid trajectories for `max_shots`: some selections, then a stop unless
/// the budget ran out.
fn trajectory(max_shots: usize) -> impl Strategy<Value = Trajectory> {
    (prop::bool::ANY, prop::collection::vec(prop::bool::ANY, 0..=max_shots)).prop_map(move |(r0, picks)| {
        let sign = |b: bool| if b { 1 } else { -1 };
        let r0 = sign(r0);
        let mut steps: Vec<Step> = picks
            .iter()
            .enumerate()
            .map(|(i, &c)| step(Action::Select(i), sign(c), 0))
            .collect();
        let terminated_by = if steps.len() == max_shots {
            Termination::MaxLen
        } else {
            let prev = steps.last().map_or(r0, |s| s.reward);
            let (r, b) = stop_reward(prev);
            steps.push(step(Action::Stop, r, b));
            Termination::Stop
        };
        Trajectory {
            instance_id: "t".into(),
            r0,
            steps,
            terminated_by,
        }
    })
}

proptest! {
    #[test]
    fn returns_are_discounted_sums(t in trajectory(4), gamma in 0.01f64..0.99, omega in 0.0f64..3.0) {
        let cfg = RewardConfig::flexsdr(gamma, omega, 4);
        let g = compute_returns(&t, &cfg).unwrap();
        prop_assert_eq!(g.len(), t.steps.len());
        for (k, gk) in g.iter().enumerate() {
            let expected: f64 = t.steps[k..]
                .iter()
                .enumerate()
                .map(|(j, s)| gamma.powi(j as i32) * (s.reward as f64 + omega * s.bonus as f64))
                .sum();
            prop_assert!((gk - expected).abs() < 1e-12, "t={k}: {gk} vs {expected}");
        }
    }

    #[test]
    fn final_only_returns_discount_the_last_signal(t in trajectory(4), gamma in 0.01f64..1.0, omega in 0.0f64..3.0) {
        let cfg = RewardConfig::flexreticr(gamma, omega, 4);
        let g = compute_returns(&t, &cfg).unwrap();
        let last = t.steps.last().unwrap();
        let rho = last.reward as f64 + omega * last.bonus as f64;
        let n = t.steps.len();
        for (k, gk) in g.iter().enumerate() {
            prop_assert!((gk - gamma.powi((n - 1 - k) as i32) * rho).abs() < 1e-12);
        }
    }

    #[test]
    fn stopping_on_a_correct_answer_beats_continuing(omega in 0.01f64..5.0, frac in 0.001f64..0.999, r1 in prop::bool::ANY, r2 in prop::bool::ANY) {
        let gamma = frac * omega / (1.0 + omega);
        let cfg = RewardConfig::flexsdr(gamma, omega, 2);
        prop_assert!(cfg.stop_chain_valid());
        let sign = |b: bool| if b { 1i8 } else { -1 };
        let (r1, r2) = (sign(r1), sign(r2));
        let (sr, sb) = stop_reward(r1);
        let stop_after_one = Trajectory {
            instance_id: "b".into(),
            r0: 1,
            steps: vec![step(Action::Select(0), r1, 0), step(Action::Stop, sr, sb)],
            terminated_by: Termination::Stop,
        };
        let two = Trajectory {
            instance_id: "c".into(),
            r0: 1,
            steps: vec![step(Action::Select(0), r1, 0), step(Action::Select(1), r2, 0)],
            terminated_by: Termination::MaxLen,
        };
        let gb = compute_returns(&stop_after_one, &cfg).unwrap()[0];
        let gc = compute_returns(&two, &cfg).unwrap()[0];
        prop_assert!((gb - gc) * r1 as f64 > 0.0);
    }

    #[test]
    fn above_the_threshold_an_early_stop_loses(omega in 0.0f64..5.0, frac in 0.0f64..1.0) {
        let lo = omega / (1.0 + omega);
        let gamma = lo + frac * (0.999 - lo);
        let cfg = RewardConfig::flexsdr(gamma, omega, 2);
        prop_assert!(!cfg.stop_chain_valid());
        let (sr, sb) = stop_reward(1);
        let stop_now = Trajectory {
            instance_id: "a".into(),
            r0: 1,
            steps: vec![step(Action::Stop, sr, sb)],
            terminated_by: Termination::Stop,
        };
        let stop_after_one = Trajectory {
            instance_id: "b".into(),
            r0: 1,
            steps: vec![step(Action::Select(0), 1, 0), step(Action::Stop, sr, sb)],
            terminated_by: Termination::Stop,
        };
        let ga = compute_returns(&stop_now, &cfg).unwrap()[0];
        let gb = compute_returns(&stop_after_one, &cfg).unwrap()[0];
        prop_assert!(ga <= gb + 1e-12);
    }

    #[test]
    fn normalized_values_have_zero_mean_unit_spread(mut v in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 0.1);
        normalize(&mut v);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn advantages_rank_like_raw_advantages(g in prop::collection::vec(-3.0f64..3.0, 1..20), seed in 0u64..1000) {
        let values: Vec<f64> = g.iter().enumerate().map(|(i, _)| ((i as u64 * 31 + seed) % 7) as f64 / 7.0).collect();
        let raw = raw_advantages(&g, &values).unwrap();
        let adv = advantages(&g, &values).unwrap();
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] > raw[j] + 1e-9 {
                    prop_assert!(adv[i] > adv[j]);
                }
            }
        }
    }
}

#[test]
fn constant_input_normalizes_to_zero() {
    let mut v = vec![2.5; 6];
    normalize(&mut v);
    assert!(v.iter().all(|x| x.abs() < 1e-6));
}

#[test]
fn empty_trajectory_is_rejected() {
    let t = Trajectory {
        instance_id: "e".into(),
        r0: 1,
        steps: vec![],
        terminated_by: Termination::Stop,
    };
    assert!(compute_returns(&t, &RewardConfig::default()).is_err());
}
