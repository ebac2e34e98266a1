//! Domain types shared across the crate, plus JSON-lines dataset ingestion.
//!
//! A dataset file holds one JSON object per line. Records with split `demo`
//! become demonstrations in the bank of their knowledge concept; the rest are
//! tagging instances. Bank order follows file order and defines action ids.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::tensor::{dot, l2_norm};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Mismatch = 0,
    Match = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Mismatch => Label::Match,
            Label::Match => Label::Mismatch,
        }
    }

    pub fn is_match(self) -> bool {
        self == Label::Match
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Mismatch),
            1 => Ok(Label::Match),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<bool> for Label {
    fn from(b: bool) -> Self {
        if b {
            Label::Match
        } else {
            Label::Mismatch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Demo,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "demo" => Some(Split::Demo),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Demo => "demo",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground truth for the simulated judge.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimMeta {
    pub zero_shot_solvable: bool,
    pub required_hints: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggingInstance {
    pub id: String,
    pub knowledge_id: String,
    pub knowledge_text: String,
    pub question_text: String,
    pub label: Label,
    pub split: Split,
    pub sim_meta: Option<SimMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub knowledge_id: String,
    pub question_text: String,
    pub label: Label,
    pub reason_text: String,
    pub hints: BTreeSet<u32>,
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationBank {
    pub knowledge_id: String,
    pub demonstrations: Vec<Demonstration>,
}

impl DemonstrationBank {
    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn get(&self, action: usize) -> Option<&Demonstration> {
        self.demonstrations.get(action)
    }
}

/// A finite embedding vector. Vectors produced by this crate's embedders are
/// unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        Ok(Self(values))
    }

    /// Scales to unit L2 norm. Fails on zero vectors.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let v = Self::new(values)?;
        let n = l2_norm(&v.0);
        if n == 0.0 {
            return Err(Error::InvalidArgument("zero-norm embedding vector".into()));
        }
        Ok(Self(v.0.into_iter().map(|x| x / n).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Vec<f64> {
        e.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub instances: Vec<TaggingInstance>,
    pub banks: BTreeMap<String, DemonstrationBank>,
    /// Knowledge text per concept, as seen on any record of that concept.
    pub knowledge_texts: BTreeMap<String, String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaggingInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn instance(&self, id: &str) -> Option<&TaggingInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn bank(&self, knowledge_id: &str) -> Option<&DemonstrationBank> {
        self.banks.get(knowledge_id)
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn req_str(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(line, field, "expected a string")),
        None => Err(schema(line, field, "missing")),
    }
}

fn opt_tags(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Option<BTreeSet<u32>>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|n| u32::try_from(n).ok())
                    .ok_or_else(|| schema(line, field, "expected small non-negative integers"))
            })
            .collect::<Result<BTreeSet<u32>>>()
            .map(Some),
        Some(_) => Err(schema(line, field, "expected an array of integers")),
    }
}

/// Parses one record. `line` is 1-based and used only for error messages.
fn parse_record(text: &str, line: usize) -> Result<Record> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema(line, "<record>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(schema(line, "<record>", "expected a JSON object"));
    };
    let id = req_str(&obj, line, "id")?;
    let knowledge_id = req_str(&obj, line, "knowledge_id")?;
    let knowledge_text = req_str(&obj, line, "knowledge_text")?;
    let question_text = req_str(&obj, line, "question_text")?;
    let label = match obj.get("label") {
        Some(v) => v
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .and_then(|n| Label::try_from(n).ok())
            .ok_or_else(|| schema(line, "label", format!("must be 0 or 1, got {v}")))?,
        None => return Err(schema(line, "label", "missing")),
    };
    let split_raw = req_str(&obj, line, "split")?;
    let split = Split::parse(&split_raw)
        .ok_or_else(|| schema(line, "split", format!("unknown split `{split_raw}` (train|test|demo)")))?;
    let reason = match obj.get("reason") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema(line, "reason", "expected a string")),
    };
    let hints = opt_tags(&obj, line, "hints")?;
    let zero_shot_solvable = match obj.get("zero_shot_solvable") {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => return Err(schema(line, "zero_shot_solvable", "expected a boolean")),
    };
    let required_hints = opt_tags(&obj, line, "required_hints")?;
    Ok(Record {
        id,
        knowledge_id,
        knowledge_text,
        question_text,
        label,
        split,
        reason,
        hints,
        zero_shot_solvable,
        required_hints,
    })
}

/// On-disk record layout; key order here is the serialized key order.
#[derive(Debug, Serialize)]
struct Record {
    id: String,
    knowledge_id: String,
    knowledge_text: String,
    question_text: String,
    label: Label,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hints: Option<BTreeSet<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_shot_solvable: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    required_hints: Option<BTreeSet<u32>>,
}

/// Parses dataset text (JSON lines). Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec = parse_record(raw, idx + 1)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        ds.knowledge_texts
            .entry(rec.knowledge_id.clone())
            .or_insert_with(|| rec.knowledge_text.clone());
        match rec.split {
            Split::Demo => {
                let demo = Demonstration {
                    id: rec.id,
                    knowledge_id: rec.knowledge_id.clone(),
                    question_text: rec.question_text,
                    label: rec.label,
                    reason_text: rec.reason.unwrap_or_default(),
                    hints: rec.hints.unwrap_or_default(),
                    embedding: None,
                };
                ds.banks
                    .entry(rec.knowledge_id.clone())
                    .or_insert_with(|| DemonstrationBank {
                        knowledge_id: rec.knowledge_id,
                        demonstrations: Vec::new(),
                    })
                    .demonstrations
                    .push(demo);
            }
            split => {
                let sim_meta = if rec.zero_shot_solvable.is_some() || rec.required_hints.is_some() {
                    Some(SimMeta {
                        zero_shot_solvable: rec.zero_shot_solvable.unwrap_or(false),
                        required_hints: rec.required_hints.unwrap_or_default(),
                    })
                } else {
                    None
                };
                ds.instances.push(TaggingInstance {
                    id: rec.id,
                    knowledge_id: rec.knowledge_id,
                    knowledge_text: rec.knowledge_text,
                    question_text: rec.question_text,
                    label: rec.label,
                    split,
                    sim_meta,
                });
            }
        }
    }
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Serializes instances first (in order), then each bank's demonstrations in
/// bank order.
pub fn dataset_to_jsonl(ds: &Dataset) -> String {
    let mut out = String::new();
    let mut push = |rec: &Record| {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    };
    for inst in &ds.instances {
        push(&Record {
            id: inst.id.clone(),
            knowledge_id: inst.knowledge_id.clone(),
            knowledge_text: inst.knowledge_text.clone(),
            question_text: inst.question_text.clone(),
            label: inst.label,
            split: inst.split,
            reason: None,
            hints: None,
            zero_shot_solvable: inst.sim_meta.as_ref().map(|m| m.zero_shot_solvable),
            required_hints: inst.sim_meta.as_ref().map(|m| m.required_hints.clone()),
        });
    }
    for (kid, bank) in &ds.banks {
        let knowledge_text = ds.knowledge_texts.get(kid).cloned().unwrap_or_default();
        for d in &bank.demonstrations {
            push(&Record {
                id: d.id.clone(),
                knowledge_id: d.knowledge_id.clone(),
                knowledge_text: knowledge_text.clone(),
                question_text: d.question_text.clone(),
                label: d.label,
                split: Split::Demo,
                reason: Some(d.reason_text.clone()),
                hints: Some(d.hints.clone()),
                zero_shot_solvable: None,
                required_hints: None,
            });
        }
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_jsonl(ds)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub record_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record_id {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks dataset invariants. Returns an empty list when all hold.
pub fn validate_dataset(ds: &Dataset) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |id: Option<&str>, message: String| {
        out.push(Diagnostic {
            record_id: id.map(str::to_string),
            message,
        })
    };
    let mut ids = HashSet::new();
    for inst in &ds.instances {
        if !ids.insert(inst.id.as_str()) {
            diag(Some(&inst.id), "duplicate id".into());
        }
        if inst.knowledge_text.trim().is_empty() {
            diag(Some(&inst.id), "empty knowledge_text".into());
        }
        if inst.question_text.trim().is_empty() {
            diag(Some(&inst.id), "empty question_text".into());
        }
        if !ds.banks.contains_key(&inst.knowledge_id) {
            diag(
                Some(&inst.id),
                format!("no demonstration bank for knowledge `{}`", inst.knowledge_id),
            );
        }
    }
    for (kid, bank) in &ds.banks {
        if bank.knowledge_id != *kid {
            diag(
                None,
                format!("bank keyed `{kid}` claims knowledge `{}`", bank.knowledge_id),
            );
        }
        if bank.demonstrations.is_empty() {
            diag(None, format!("empty bank for knowledge `{kid}`"));
        }
        for d in &bank.demonstrations {
            if !ids.insert(d.id.as_str()) {
                diag(Some(&d.id), "duplicate id".into());
            }
            if d.knowledge_id != *kid {
                diag(
                    Some(&d.id),
                    format!("demonstration of `{}` stored in bank `{kid}`", d.knowledge_id),
                );
            }
            if d.question_text.trim().is_empty() {
                diag(Some(&d.id), "empty question_text".into());
            }
            if d.reason_text.trim().is_empty() {
                diag(Some(&d.id), "empty reason".into());
            }
        }
    }
    out
}
