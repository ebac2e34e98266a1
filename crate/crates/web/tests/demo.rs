use flexsdr_web::{prompt_preview, returns, stop_chain, train_demo};
use proptest::prelude::*;
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn stop_adds_the_bonus_to_the_last_reward() {
    let v = parse(returns(0.5, 1.0, true, 1, "+,-", true));
    let g = floats(&v["returns"]);
    // Stop repeats -1 with bonus -1.
    assert_eq!(g, vec![1.0 + 0.5 * (-1.0 + 0.5 * -2.0), -1.0 + 0.5 * -2.0, -2.0]);
    assert_eq!(v["stop_chain_valid"], false);
}

#[test]
fn final_only_rewards_discount_the_last_step() {
    let g = floats(&parse(returns(0.9, 0.0, false, -1, "-,-,+", false))["returns"]);
    assert_eq!(g, vec![0.9 * 0.9, 0.9, 1.0]);
}

#[test]
fn bad_inputs_are_reported() {
    assert!(returns(0.3, 1.0, true, 2, "+", false).is_err());
    assert!(returns(0.3, 1.0, true, 1, "+,x", false).is_err());
    assert!(returns(0.0, 1.0, true, 1, "+", false).is_err());
    assert!(returns(0.3, 1.0, true, 1, "", false).is_err());
    assert!(prompt_preview("k", "q", "[{]", "<Yes>").is_err());
    assert!(train_demo("ppo", 1, 0).is_err());
}

#[test]
fn preview_numbers_demos_and_reads_the_verdict() {
    let demos = r#"[{"question": "Add 1/2 and 1/3.", "label": true, "reason": "fractions"}, {"question": "Count the apples.", "label": false}]"#;
    let v = parse(prompt_preview(
        "fractions",
        "What is 3/4 of 8?",
        demos,
        "It scales a fraction. <Yes>",
    ));
    let prompt = v["prompt"].as_str().unwrap();
    let a = prompt.find("Add 1/2 and 1/3.").unwrap();
    let b = prompt.find("Count the apples.").unwrap();
    assert!(a < b && prompt.contains("What is 3/4 of 8?"));
    assert_eq!(v["prediction"], "Yes");
    assert_eq!(v["parse_ok"], true);
    let none = parse(prompt_preview("fractions", "q", "", "unsure"));
    assert_eq!(none["prediction"], "No");
    assert_eq!(none["parse_ok"], false);
}

#[test]
fn training_demo_is_deterministic() {
    let a = parse(train_demo("flexsdr", 20, 3));
    assert_eq!(a, parse(train_demo("flexsdr", 20, 3)));
    assert_eq!(a["curve"].as_array().unwrap().len(), 20);
    let acc = a["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(a["mean_shots"].as_f64().unwrap() <= 4.0);
    let fixed = parse(train_demo("reticl", 2, 3));
    assert_eq!(fixed["mean_shots"].as_f64().unwrap(), 4.0);
}

proptest! {
    #[test]
    fn chain_holds_exactly_below_the_threshold(gamma in 0.01f64..0.99, omega in 0.0f64..5.0) {
        let v = parse(stop_chain(gamma, omega));
        let valid = v["valid"].as_bool().unwrap();
        prop_assert_eq!(valid, omega > 0.0 && gamma < omega / (1.0 + omega));
        let rows = v["rows"].as_array().unwrap();
        prop_assert_eq!(rows.len(), 8);
        if valid {
            prop_assert!(rows.iter().all(|r| r["ok"] == true));
        }
    }
}
