//! Seeded synthetic tagging tasks for offline training with the simulated
//! judge.
//!
//! Every concept owns a small vocabulary of hint words. Each demonstration
//! in a concept's bank illustrates one hint and mentions its word; a
//! question that is not zero-shot solvable needs one or two hints and
//! mentions their words, so a retriever that reads the embeddings can tell
//! which demonstrations help. Zero-shot solvable questions mention no hint.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Demonstration, DemonstrationBank, Label, SimMeta, Split, TaggingInstance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub concepts: usize,
    pub instances_per_concept: usize,
    pub positive_ratio: f64,
    pub positive_demos: usize,
    pub negative_demos: usize,
    pub hints_per_concept: usize,
    /// Fraction of non-trivial questions that need two hints instead of one.
    pub two_hint_fraction: f64,
    pub zero_shot_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concepts: 8,
            instances_per_concept: 100,
            positive_ratio: 0.2,
            positive_demos: 5,
            negative_demos: 5,
            hints_per_concept: 6,
            two_hint_fraction: 0.25,
            zero_shot_fraction: 0.3,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.concepts == 0 || self.instances_per_concept == 0 {
            return bad("concepts and instances_per_concept must be positive".into());
        }
        if self.positive_demos + self.negative_demos == 0 {
            return bad("banks need at least one demonstration".into());
        }
        if self.hints_per_concept == 0 || self.hints_per_concept > self.positive_demos + self.negative_demos {
            return bad(format!(
                "hints_per_concept must be in 1..={} so every hint has a demonstration",
                self.positive_demos + self.negative_demos
            ));
        }
        for (name, v) in [
            ("positive_ratio", self.positive_ratio),
            ("two_hint_fraction", self.two_hint_fraction),
            ("zero_shot_fraction", self.zero_shot_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.two_hint_fraction > 0.0 && self.hints_per_concept < 2 {
            return bad("two-hint questions need hints_per_concept >= 2".into());
        }
        Ok(())
    }
}

const CONCEPT_NAMES: [&str; 12] = [
    "fractions",
    "ratios",
    "percentages",
    "linear equations",
    "area of polygons",
    "prime factorization",
    "probability",
    "angles",
    "exponents",
    "inequalities",
    "mean and median",
    "place value",
];

const FILLER: [&str; 16] = [
    "students", "teacher", "book", "garden", "train", "market", "class", "box", "river", "shop", "farm", "school",
    "team", "bus", "cake", "paint",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vor", "dez", "pi", "qua", "xel", "bo", "ny", "fi", "gar", "hu",
];

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let w: String = (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn concept_name(i: usize) -> String {
    CONCEPT_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("topic {i}"))
}

fn exact_flags(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (fraction * n as f64).round() as usize;
    let mut v: Vec<bool> = (0..n).map(|i| i < k).collect();
    v.shuffle(rng);
    v
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *FILLER.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a dataset. Identical configs give identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used = BTreeSet::new();
    let mut ds = Dataset::default();
    let m = cfg.hints_per_concept;

    for c in 0..cfg.concepts {
        let kid = format!("k{c:02}");
        let name = concept_name(c);
        let words: Vec<String> = (0..m).map(|_| pseudo_word(&mut rng, &mut used)).collect();
        let hint_id = |j: usize| (c * m + j) as u32;
        let knowledge_text = format!(
            "{name}: questions whose solution requires reasoning about {name}, for example {}.",
            words.join(", ")
        );
        ds.knowledge_texts.insert(kid.clone(), knowledge_text.clone());

        let bank_size = cfg.positive_demos + cfg.negative_demos;
        let mut demo_hints: Vec<usize> = (0..bank_size).map(|i| i % m).collect();
        demo_hints.shuffle(&mut rng);
        let demonstrations = demo_hints
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let label = Label::from(i < cfg.positive_demos);
                let (question_text, reason_text) = if label.is_match() {
                    (
                        format!(
                            "{w}: a {name} problem where {w} decides the {}.",
                            filler(&mut rng, 1),
                            w = words[j]
                        ),
                        format!("Solving it hinges on {}, a core part of {name}.", words[j]),
                    )
                } else {
                    (
                        format!(
                            "{w}: a counting problem where {w} names the {}.",
                            filler(&mut rng, 1),
                            w = words[j]
                        ),
                        format!("It mentions {} only on the surface and never uses {name}.", words[j]),
                    )
                };
                Demonstration {
                    id: format!("{kid}-d{i}"),
                    knowledge_id: kid.clone(),
                    question_text,
                    label,
                    reason_text,
                    hints: BTreeSet::from([hint_id(j)]),
                    embedding: None,
                }
            })
            .collect();
        ds.banks.insert(
            kid.clone(),
            DemonstrationBank {
                knowledge_id: kid.clone(),
                demonstrations,
            },
        );

        let n = cfg.instances_per_concept;
        let positive = exact_flags(n, cfg.positive_ratio, &mut rng);
        let zero_shot = exact_flags(n, cfg.zero_shot_fraction, &mut rng);
        let test = exact_flags(n, cfg.test_fraction, &mut rng);
        for i in 0..n {
            let two = m >= 2 && rng.gen_bool(cfg.two_hint_fraction);
            let mut required = BTreeSet::new();
            if !zero_shot[i] {
                let count = if two { 2 } else { 1 };
                let mut js: Vec<usize> = (0..m).collect();
                js.shuffle(&mut rng);
                js.truncate(count);
                js.sort_unstable();
                required.extend(js);
            }
            let mentions: Vec<&str> = required.iter().map(|&j| words[j].as_str()).collect();
            let subject = if positive[i] { name.as_str() } else { "a quantity" };
            let question_text = if mentions.is_empty() {
                format!("A {} question on {subject}.", filler(&mut rng, 1))
            } else {
                format!(
                    "A {} question on {subject} involving {}.",
                    filler(&mut rng, 1),
                    mentions.join(" and ")
                )
            };
            ds.instances.push(TaggingInstance {
                id: format!("{kid}-q{i:03}"),
                knowledge_id: kid.clone(),
                knowledge_text: knowledge_text.clone(),
                question_text,
                label: Label::from(positive[i]),
                split: if test[i] { Split::Test } else { Split::Train },
                sim_meta: Some(SimMeta {
                    zero_shot_solvable: zero_shot[i],
                    required_hints: required.into_iter().map(hint_id).collect(),
                }),
            });
        }
    }
    Ok(ds)
}

/// Counts used by tests and the CLI summary.
pub fn summary(ds: &Dataset) -> BTreeMap<&'static str, usize> {
    let mut s = BTreeMap::new();
    s.insert("instances", ds.instances.len());
    s.insert("positives", ds.instances.iter().filter(|i| i.label.is_match()).count());
    s.insert(
        "zero_shot_solvable",
        ds.instances
            .iter()
            .filter(|i| i.sim_meta.as_ref().is_some_and(|m| m.zero_shot_solvable))
            .count(),
    );
    s.insert("test", ds.split(Split::Test).count());
    s.insert("banks", ds.banks.len());
    s
}
