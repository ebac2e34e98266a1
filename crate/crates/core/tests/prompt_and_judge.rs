use std::collections::BTreeSet;

use flexsdr::dataset::{Demonstration, Label, SimMeta, Split, TaggingInstance};
use flexsdr::judge::{Judge, SimJudgeConfig, SimulatedJudge};
use flexsdr::prompt::{assemble_prompt, judgment_token, parse_judgment, PromptTemplate, SYSTEM_INSTRUCTION};
use proptest::prelude::*;

fn demo(id: &str, label: Label, hints: &[u32]) -> Demonstration {
    Demonstration {
        id: id.into(),
        knowledge_id: "k".into(),
        question_text: format!("question of {id}"),
        label,
        reason_text: format!("reason of {id}"),
        hints: hints.iter().copied().collect(),
        embedding: None,
    }
}

fn instance(id: &str, solvable: bool, required: BTreeSet<u32>) -> TaggingInstance {
    TaggingInstance {
        id: id.into(),
        knowledge_id: "k".into(),
        knowledge_text: "K".into(),
        question_text: "Q".into(),
        label: Label::Match,
        split: Split::Test,
        sim_meta: Some(SimMeta {
            zero_shot_solvable: solvable,
            required_hints: required,
        }),
    }
}

proptest! {
    #[test]
    fn final_token_decides(prefix in "[a-z ,.]{0,40}", tokens in prop::collection::vec(prop::bool::ANY, 1..5), upper in prop::bool::ANY) {
        let mut text = prefix;
        for &t in &tokens {
            text.push_str(judgment_token(Label::from(t)));
            text.push_str(" and then ");
        }
        text.push_str("so the answer is ");
        let last = *tokens.last().unwrap();
        let tok = judgment_token(Label::from(last));
        text.push_str(&if upper { tok.to_uppercase() } else { tok.to_string() });
        let j = parse_judgment(&text);
        prop_assert!(j.parse_ok);
        prop_assert_eq!(j.prediction, Label::from(last));
    }

    #[test]
    fn text_without_verdict_is_a_parse_failure(text in "[a-xz ,.]{0,60}") {
        prop_assume!(!text.split_whitespace().any(|w| w.trim_matches(|c: char| !c.is_alphanumeric()) == "no"));
        let j = parse_judgment(&text);
        prop_assert!(!j.parse_ok);
        prop_assert_eq!(j.prediction, Label::Mismatch);
    }

    #[test]
    fn demos_render_in_order(labels in prop::collection::vec(prop::bool::ANY, 0..6)) {
        let demos: Vec<Demonstration> = labels.iter().enumerate().map(|(i, &l)| demo(&format!("d{i}"), Label::from(l), &[])).collect();
        let refs: Vec<&Demonstration> = demos.iter().collect();
        let p = assemble_prompt("K", "Q", &refs);
        prop_assert!(p.starts_with(SYSTEM_INSTRUCTION));
        prop_assert!(p.ends_with("<Knowledge>: K\n<Question>: Q"));
        let mut at = 0;
        for (i, d) in demos.iter().enumerate() {
            let pos = p[at..].find(&format!("Example {}:\nQuestion: {}", i + 1, d.question_text));
            prop_assert!(pos.is_some());
            at += pos.unwrap();
        }
    }

    /// With no noise, more demonstrations never turn a correct judgment
    /// into a wrong one.
    #[test]
    fn coverage_is_monotone(
        required in prop::collection::btree_set(0u32..6, 0..3),
        solvable in prop::bool::ANY,
        bank in prop::collection::vec(prop::collection::btree_set(0u32..6, 1..3), 1..6),
        extra in prop::collection::btree_set(0u32..6, 1..3),
    ) {
        let judge = SimulatedJudge::new(SimJudgeConfig::default()).unwrap();
        let inst = instance("i", solvable, required);
        let demos: Vec<Demonstration> = bank.iter().enumerate().map(|(i, h)| demo(&format!("d{i}"), Label::Match, &h.iter().copied().collect::<Vec<_>>())).collect();
        let refs: Vec<&Demonstration> = demos.iter().collect();
        let before = judge.judge(&inst, &refs).unwrap().prediction == inst.label;
        let more = demo("extra", Label::Mismatch, &extra.iter().copied().collect::<Vec<_>>());
        let mut with = refs.clone();
        with.push(&more);
        let after = judge.judge(&inst, &with).unwrap().prediction == inst.label;
        prop_assert!(!before || after);
        if solvable {
            prop_assert!(before);
        }
    }

    #[test]
    fn noise_ignores_demo_order(seed in 0u64..1000, n in 1usize..5) {
        let judge = SimulatedJudge::new(SimJudgeConfig { noise_prob: 0.5, seed }).unwrap();
        let inst = instance("i", false, BTreeSet::from([0]));
        let demos: Vec<Demonstration> = (0..n).map(|i| demo(&format!("d{i}"), Label::Match, &[i as u32])).collect();
        let forward: Vec<&Demonstration> = demos.iter().collect();
        let backward: Vec<&Demonstration> = demos.iter().rev().collect();
        prop_assert_eq!(judge.judge(&inst, &forward).unwrap(), judge.judge(&inst, &backward).unwrap());
    }
}

#[test]
fn noise_flips_at_the_configured_rate() {
    let judge = SimulatedJudge::new(SimJudgeConfig {
        noise_prob: 0.2,
        seed: 4,
    })
    .unwrap();
    let n = 4000;
    let wrong = (0..n)
        .filter(|i| {
            let inst = instance(&format!("i{i}"), true, BTreeSet::new());
            judge.judge(&inst, &[]).unwrap().prediction != inst.label
        })
        .count();
    let rate = wrong as f64 / n as f64;
    assert!((rate - 0.2).abs() < 0.03, "flip rate {rate}");
}

#[test]
fn instances_need_simulation_metadata() {
    let judge = SimulatedJudge::new(SimJudgeConfig::default()).unwrap();
    let mut inst = instance("i", true, BTreeSet::new());
    inst.sim_meta = None;
    assert!(judge.judge(&inst, &[]).is_err());
    assert!(SimulatedJudge::new(SimJudgeConfig {
        noise_prob: 1.0,
        seed: 0
    })
    .is_err());
}

#[test]
fn template_sections_override_defaults() {
    let t = PromptTemplate::from_sections("[system]\nBe brief.\n\n[demo_block]\n#{index} {question} => {judgment}\n")
        .unwrap();
    let d = demo("d", Label::Mismatch, &[]);
    let p = t.assemble("K", "Q", &[&d]);
    assert!(p.starts_with("Be brief."));
    assert!(p.contains("#1 question of d => <No>"));
    assert!(PromptTemplate::from_sections("[nonsense]\nx").is_err());
    assert!(PromptTemplate::from_sections("stray text").is_err());
}

#[test]
fn placeholders_inside_values_are_not_expanded() {
    let d = Demonstration {
        question_text: "what is {reason}?".into(),
        ..demo("d", Label::Match, &[])
    };
    let p = assemble_prompt("K", "Q", &[&d]);
    assert!(p.contains("Question: what is {reason}?"));
}
