//! Metrics, similarity heuristics, and retriever evaluation reports.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingVector, Label, TaggingInstance};
use crate::digest::sha256_parts;
use crate::judge::Judge;
use crate::rewards::RewardConfig;
use crate::task::{Query, Task};
use crate::trainer::Model;
use crate::{Error, Result};

/// Confusion counts with "match" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, prediction: Label, gold: Label) {
        match (prediction, gold) {
            (Label::Match, Label::Match) => self.tp += 1,
            (Label::Match, Label::Mismatch) => self.fp += 1,
            (Label::Mismatch, Label::Match) => self.fn_ += 1,
            (Label::Mismatch, Label::Mismatch) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1; empty denominators give 0.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let n = c.total();
    if n == 0 {
        return Err(Error::InvalidArgument("no evaluated instances".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, n),
        precision,
        recall,
        f1,
    })
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    TopK(usize),
    Threshold(f64),
}

/// What a similarity baseline compares the question against.
#[derive(Debug, Clone)]
pub enum Corpus<'a> {
    /// K/Q: the knowledge definition, plus the candidate questions it ranks
    /// for top-K.
    Knowledge {
        knowledge: &'a EmbeddingVector,
        candidates: Vec<&'a EmbeddingVector>,
    },
    /// Q/Q: labeled questions of the same knowledge concept.
    Labeled(Vec<(&'a EmbeddingVector, Label)>),
}

/// K/Q predicts a match when `sim(k, q) ≥ η`, or for top-K when fewer than
/// K candidates are strictly closer to `k` than `q`. Q/Q predicts a match
/// when the most similar positive labeled question is within `η`, or for
/// top-K by majority vote of the K nearest labeled questions (ties go to
/// mismatch).
pub fn similarity_baseline(question: &EmbeddingVector, corpus: &Corpus<'_>, mode: SimilarityMode) -> Result<Label> {
    match (corpus, mode) {
        (Corpus::Knowledge { knowledge, .. }, SimilarityMode::Threshold(eta)) => {
            Ok(Label::from(cosine_similarity(knowledge, question)? >= eta))
        }
        (Corpus::Knowledge { knowledge, candidates }, SimilarityMode::TopK(k)) => {
            if candidates.is_empty() {
                return Err(Error::InvalidArgument("empty similarity corpus".into()));
            }
            let s = cosine_similarity(knowledge, question)?;
            let mut closer = 0;
            for c in candidates {
                if cosine_similarity(knowledge, c)? > s {
                    closer += 1;
                }
            }
            Ok(Label::from(closer < k))
        }
        (Corpus::Labeled(items), mode) => {
            if items.is_empty() {
                return Err(Error::InvalidArgument("empty similarity corpus".into()));
            }
            match mode {
                SimilarityMode::Threshold(eta) => Ok(Label::from(qq_score(question, items)? >= eta)),
                SimilarityMode::TopK(k) => {
                    let mut scored = Vec::with_capacity(items.len());
                    for (i, (e, l)) in items.iter().enumerate() {
                        scored.push((cosine_similarity(question, e)?, i, *l));
                    }
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    let top = &scored[..k.max(1).min(scored.len())];
                    let yes = top.iter().filter(|(_, _, l)| l.is_match()).count();
                    Ok(Label::from(2 * yes > top.len()))
                }
            }
        }
    }
}

/// Similarity to the nearest positive labeled question, or −1 without one.
fn qq_score(question: &EmbeddingVector, items: &[(&EmbeddingVector, Label)]) -> Result<f64> {
    let mut best = -1.0f64;
    for (e, l) in items {
        if l.is_match() {
            best = best.max(cosine_similarity(question, e)?);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySetup {
    KnowledgeQuestion,
    QuestionQuestion,
}

/// Labeled questions used as the Q/Q corpus: every labeled instance in
/// `reference` other than the query itself.
fn qq_corpus<'a>(task: &'a Task<'_>, reference: &[&'a TaggingInstance], inst: &TaggingInstance) -> Result<Corpus<'a>> {
    let mut items = Vec::new();
    for r in reference {
        if r.knowledge_id == inst.knowledge_id && r.id != inst.id {
            items.push((task.index.question(&r.id)?, r.label));
        }
    }
    Ok(Corpus::Labeled(items))
}

/// The similarity score a threshold is compared with for one instance.
pub fn similarity_score(
    task: &Task<'_>,
    inst: &TaggingInstance,
    setup: SimilaritySetup,
    reference: &[&TaggingInstance],
) -> Result<f64> {
    let q = task.index.question(&inst.id)?;
    match setup {
        SimilaritySetup::KnowledgeQuestion => cosine_similarity(task.index.knowledge(&inst.knowledge_id)?, q),
        SimilaritySetup::QuestionQuestion => match qq_corpus(task, reference, inst)? {
            Corpus::Labeled(items) if !items.is_empty() => qq_score(q, &items),
            _ => Err(Error::InvalidArgument("empty similarity corpus".into())),
        },
    }
}

/// Inclusive grid `start, start + step, …, ≤ end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaGrid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl EtaGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.step.is_nan() || self.step <= 0.0 || self.start.is_nan() || self.start > self.end {
            return Vec::new();
        }
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((self.start + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSearch {
    pub best_eta: f64,
    pub best_f1: f64,
    pub table: Vec<(f64, f64)>,
}

/// Picks the η maximizing F1 of `score ≥ η` over `(score, gold)` pairs;
/// ties go to the smallest η.
pub fn grid_search_eta(items: &[(f64, Label)], grid: &EtaGrid) -> Result<EtaSearch> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty eta grid".into()));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no labeled items for eta search".into()));
    }
    let mut table = Vec::with_capacity(points.len());
    let mut best = (points[0], f64::NEG_INFINITY);
    for eta in points {
        let mut c = ConfusionCounts::default();
        for &(s, gold) in items {
            c.add(Label::from(s >= eta), gold);
        }
        let f1 = metrics(&c)?.f1;
        table.push((eta, f1));
        if f1 > best.1 {
            best = (eta, f1);
        }
    }
    Ok(EtaSearch {
        best_eta: best.0,
        best_f1: best.1,
        table,
    })
}

/// How demonstrations are chosen for each evaluated instance.
#[derive(Debug, Clone)]
pub enum Retriever<'m> {
    Model { model: &'m Model, reward: RewardConfig },
    Random { k: usize, seed: u64 },
    SimilarityOrder { k: usize },
    ZeroShot,
}

impl Retriever<'_> {
    pub fn name(&self) -> String {
        match self {
            Retriever::Model {
                model: Model::Policy(_),
                ..
            } => "policy".into(),
            Retriever::Model {
                model: Model::PromptPg(_),
                ..
            } => "promptpg".into(),
            Retriever::Random { k, .. } => format!("random({k})"),
            Retriever::SimilarityOrder { k } => format!("similarity-order({k})"),
            Retriever::ZeroShot => "zero-shot".into(),
        }
    }

    pub fn select(&self, query: &Query<'_>) -> Result<Vec<usize>> {
        let n = query.bank.len();
        match self {
            Retriever::Model { model, reward } => model.select(query, reward),
            Retriever::Random { k, seed } => {
                let digest = sha256_parts(&[&seed.to_le_bytes(), query.instance.id.as_bytes()]);
                let mut rng = ChaCha8Rng::from_seed(digest);
                Ok(sample_indices(&mut rng, n, (*k).min(n)).into_vec())
            }
            Retriever::SimilarityOrder { k } => {
                let q = EmbeddingVector::new(query.question.to_vec())?;
                let mut scored = Vec::with_capacity(n);
                for i in 0..n {
                    let e = EmbeddingVector::new(query.bank_matrix.row(i).to_vec())?;
                    scored.push((cosine_similarity(&q, &e)?, i));
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                Ok(scored.into_iter().take(*k).map(|(_, i)| i).collect())
            }
            Retriever::ZeroShot => Ok(Vec::new()),
        }
    }
}

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub knowledge_id: String,
    pub gold: Label,
    pub prediction: Label,
    pub shots: usize,
    pub demo_ids: Vec<String>,
    pub parse_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_solvable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub mean_shots: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retriever: String,
    pub split: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_shots: f64,
    pub parse_failure_rate: f64,
    pub counts: ConfusionCounts,
    pub judge_failures: usize,
    pub per_knowledge: BTreeMap<String, Breakdown>,
    /// Mean shots over zero-shot-solvable instances and over the rest, when
    /// the dataset carries simulation metadata.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_shots_zero_shot_solvable: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_shots_other: Option<f64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub predictions: Vec<PredictionRecord>,
}

fn mean_shots<'a>(records: impl Iterator<Item = &'a PredictionRecord>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0usize);
    for r in records {
        n += 1;
        s += r.shots;
    }
    (n > 0).then(|| s as f64 / n as f64)
}

impl EvalReport {
    /// Assembles a report whose every number is recomputed from `predictions`.
    pub fn from_predictions(
        retriever: String,
        split: String,
        predictions: Vec<PredictionRecord>,
        judge_failures: usize,
    ) -> Result<Self> {
        let mut counts = ConfusionCounts::default();
        let mut by_k: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
        for p in &predictions {
            counts.add(p.prediction, p.gold);
            by_k.entry(p.knowledge_id.clone()).or_default().push(p);
        }
        let m = metrics(&counts)?;
        let mut per_knowledge = BTreeMap::new();
        for (k, recs) in by_k {
            let mut c = ConfusionCounts::default();
            recs.iter().for_each(|p| c.add(p.prediction, p.gold));
            per_knowledge.insert(
                k,
                Breakdown {
                    counts: c,
                    metrics: metrics(&c)?,
                    mean_shots: mean_shots(recs.into_iter()).unwrap_or(0.0),
                },
            );
        }
        let n = predictions.len() as f64;
        Ok(Self {
            retriever,
            split,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            mean_shots: mean_shots(predictions.iter()).unwrap_or(0.0),
            parse_failure_rate: predictions.iter().filter(|p| !p.parse_ok).count() as f64 / n,
            counts,
            judge_failures,
            per_knowledge,
            mean_shots_zero_shot_solvable: mean_shots(
                predictions.iter().filter(|p| p.zero_shot_solvable == Some(true)),
            ),
            mean_shots_other: mean_shots(predictions.iter().filter(|p| p.zero_shot_solvable == Some(false))),
            config_hash: String::new(),
            config: serde_json::Value::Null,
            predictions,
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }

    /// Whether the stored metrics equal a recomputation from the counts.
    pub fn is_consistent(&self) -> bool {
        metrics(&self.counts).map(|m| m == self.metrics()).unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Judge failures tolerated before the run fails.
    pub failure_budget: usize,
}

fn zero_shot_flag(inst: &TaggingInstance) -> Option<bool> {
    inst.sim_meta.as_ref().map(|m| m.zero_shot_solvable)
}

/// Judges each instance once with the retriever's final demonstration
/// sequence.
pub fn evaluate_retriever(
    retriever: &Retriever<'_>,
    task: &Task<'_>,
    instances: &[&TaggingInstance],
    split: &str,
    judge: &dyn Judge,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(instances.len());
    let mut failures = 0;
    for inst in instances {
        let q = task.query(inst)?;
        let selected = retriever.select(&q)?;
        let demos = q.demos(&selected);
        match judge.judge(inst, &demos) {
            Ok(j) => predictions.push(PredictionRecord {
                instance_id: inst.id.clone(),
                knowledge_id: inst.knowledge_id.clone(),
                gold: inst.label,
                prediction: j.prediction,
                shots: selected.len(),
                demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
                parse_ok: j.parse_ok,
                zero_shot_solvable: zero_shot_flag(inst),
            }),
            Err(e) => {
                failures += 1;
                log::warn!("judge failed on `{}`: {e}", inst.id);
                if failures > opts.failure_budget {
                    return Err(Error::FailureBudget {
                        failures,
                        budget: opts.failure_budget,
                    });
                }
            }
        }
    }
    EvalReport::from_predictions(retriever.name(), split.to_string(), predictions, failures)
}

/// Evaluates a similarity heuristic. `reference` supplies the labeled
/// questions for Q/Q and the candidate pool for K/Q top-K.
pub fn evaluate_similarity(
    task: &Task<'_>,
    instances: &[&TaggingInstance],
    reference: &[&TaggingInstance],
    split: &str,
    setup: SimilaritySetup,
    mode: SimilarityMode,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(instances.len());
    for inst in instances {
        let q = task.index.question(&inst.id)?;
        let corpus = match setup {
            SimilaritySetup::KnowledgeQuestion => {
                let mut candidates = Vec::new();
                for r in reference.iter().filter(|r| r.knowledge_id == inst.knowledge_id) {
                    candidates.push(task.index.question(&r.id)?);
                }
                Corpus::Knowledge {
                    knowledge: task.index.knowledge(&inst.knowledge_id)?,
                    candidates,
                }
            }
            SimilaritySetup::QuestionQuestion => qq_corpus(task, reference, inst)?,
        };
        predictions.push(PredictionRecord {
            instance_id: inst.id.clone(),
            knowledge_id: inst.knowledge_id.clone(),
            gold: inst.label,
            prediction: similarity_baseline(q, &corpus, mode)?,
            shots: 0,
            demo_ids: Vec::new(),
            parse_ok: true,
            zero_shot_solvable: zero_shot_flag(inst),
        });
    }
    let name = match (setup, mode) {
        (SimilaritySetup::KnowledgeQuestion, SimilarityMode::TopK(k)) => format!("similarity-kq-top{k}"),
        (SimilaritySetup::KnowledgeQuestion, SimilarityMode::Threshold(e)) => format!("similarity-kq-eta{e}"),
        (SimilaritySetup::QuestionQuestion, SimilarityMode::TopK(k)) => format!("similarity-qq-top{k}"),
        (SimilaritySetup::QuestionQuestion, SimilarityMode::Threshold(e)) => format!("similarity-qq-eta{e}"),
    };
    EvalReport::from_predictions(name, split.to_string(), predictions, 0)
}

/// A metric-by-retriever table with mean shots in its own column.
pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record([
        "retriever",
        "split",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "mean_shots",
    ])
    .map_err(io)?;
    for r in reports {
        w.write_record([
            r.retriever.clone(),
            r.split.clone(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.precision),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.f1),
            format!("{:.2}", r.mean_shots),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        })
        .unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.8, 0.75, 0.75, 0.75));
        let m = metrics(&ConfusionCounts {
            tp: 2,
            fp: 0,
            fn_: 0,
            tn: 4,
        })
        .unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 1,
        })
        .unwrap();
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&v(&[1.0, 2.0]), &v(&[-1.0, -2.0])).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).is_err());
        assert!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn knowledge_threshold_and_top_k() {
        let k = v(&[1.0, 0.0]);
        let q_close = v(&[0.7, (1.0f64 - 0.49).sqrt()]);
        let q_far = v(&[0.4, (1.0f64 - 0.16).sqrt()]);
        let corpus = Corpus::Knowledge {
            knowledge: &k,
            candidates: vec![&q_close, &q_far],
        };
        assert_eq!(
            similarity_baseline(&q_close, &corpus, SimilarityMode::Threshold(0.5)).unwrap(),
            Label::Match
        );
        assert_eq!(
            similarity_baseline(&q_far, &corpus, SimilarityMode::Threshold(0.5)).unwrap(),
            Label::Mismatch
        );
        assert_eq!(
            similarity_baseline(&q_close, &corpus, SimilarityMode::TopK(1)).unwrap(),
            Label::Match
        );
        assert_eq!(
            similarity_baseline(&q_far, &corpus, SimilarityMode::TopK(1)).unwrap(),
            Label::Mismatch
        );
        let empty = Corpus::Knowledge {
            knowledge: &k,
            candidates: vec![],
        };
        assert!(similarity_baseline(&q_far, &empty, SimilarityMode::TopK(1)).is_err());
        assert!(similarity_baseline(&q_far, &Corpus::Labeled(vec![]), SimilarityMode::TopK(1)).is_err());
    }

    #[test]
    fn question_votes() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        let corpus = Corpus::Labeled(vec![(&a, Label::Match), (&b, Label::Mismatch)]);
        assert_eq!(
            similarity_baseline(&v(&[0.9, 0.1]), &corpus, SimilarityMode::TopK(1)).unwrap(),
            Label::Match
        );
        assert_eq!(
            similarity_baseline(&v(&[0.1, 0.9]), &corpus, SimilarityMode::TopK(1)).unwrap(),
            Label::Mismatch
        );
        assert_eq!(
            similarity_baseline(&v(&[0.1, 0.9]), &corpus, SimilarityMode::TopK(2)).unwrap(),
            Label::Mismatch
        );
    }

    #[test]
    fn eta_search_rules() {
        let grid = EtaGrid {
            start: 0.0,
            end: 1.0,
            step: 0.25,
        };
        assert_eq!(grid.points(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let all_pos = [(0.3, Label::Match), (0.9, Label::Match)];
        assert_eq!(grid_search_eta(&all_pos, &grid).unwrap().best_eta, 0.0);
        let single = EtaGrid {
            start: 0.4,
            end: 0.4,
            step: 0.1,
        };
        assert_eq!(grid_search_eta(&all_pos, &single).unwrap().best_eta, 0.4);
        // 0.5 and 0.75 both separate these perfectly.
        let items = [(0.8, Label::Match), (0.3, Label::Mismatch)];
        let s = grid_search_eta(&items, &grid).unwrap();
        assert_eq!(s.best_eta, 0.5);
        assert_eq!(s.best_f1, 1.0);
        assert!(grid_search_eta(
            &items,
            &EtaGrid {
                start: 1.0,
                end: 0.0,
                step: 0.1
            }
        )
        .is_err());
    }

    #[test]
    fn report_recomputes_from_predictions() {
        let rec = |id: &str, gold: Label, prediction: Label, shots| PredictionRecord {
            instance_id: id.into(),
            knowledge_id: "k".into(),
            gold,
            prediction,
            shots,
            demo_ids: vec![],
            parse_ok: true,
            zero_shot_solvable: Some(shots == 0),
        };
        let r = EvalReport::from_predictions(
            "x".into(),
            "test".into(),
            vec![
                rec("a", Label::Match, Label::Match, 0),
                rec("b", Label::Mismatch, Label::Match, 2),
                rec("c", Label::Mismatch, Label::Mismatch, 4),
            ],
            0,
        )
        .unwrap();
        assert!(r.is_consistent());
        assert_eq!(r.mean_shots, 2.0);
        assert_eq!(r.mean_shots_zero_shot_solvable, Some(0.0));
        assert_eq!(r.mean_shots_other, Some(3.0));
        let csv = reports_to_csv(&[r]).unwrap();
        assert!(csv.starts_with("retriever,split,accuracy"));
        assert!(csv.contains("x,test,0.6667,0.5000,1.0000,0.6667,2.00"));
    }
}
