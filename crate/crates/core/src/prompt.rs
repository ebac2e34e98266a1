//! Zero-shot and few-shot prompt assembly, and parsing of judge responses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Demonstration, Label};
use crate::{Error, Result};

pub const SYSTEM_INSTRUCTION: &str =
    "You are a knowledge concept annotator. Your job is to judge whether the <Question> is concerning the <Knowledge>.";
pub const RESPONSE_FORMAT_INSTRUCTION: &str =
    "The judgment token: <Yes> or <No> should be provided at the end of the response.";
pub const REASONING_INSTRUCTION: &str = "You should first provide the reasons before giving your judgement.";

pub const YES_TOKEN: &str = "<Yes>";
pub const NO_TOKEN: &str = "<No>";

/// Prompt layout. Block templates use `{index}`, `{knowledge}`, `{question}`,
/// `{reason}` and `{judgment}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_instruction: String,
    pub response_format_instruction: String,
    pub reasoning_instruction: String,
    pub demo_block_template: String,
    pub query_block_template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_instruction: SYSTEM_INSTRUCTION.into(),
            response_format_instruction: RESPONSE_FORMAT_INSTRUCTION.into(),
            reasoning_instruction: REASONING_INSTRUCTION.into(),
            demo_block_template: "Example {index}:\nQuestion: {question}\nReason: {reason}\nJudgment: {judgment}"
                .into(),
            query_block_template: "<Knowledge>: {knowledge}\n<Question>: {question}".into(),
        }
    }
}

pub fn judgment_token(label: Label) -> &'static str {
    match label {
        Label::Match => YES_TOKEN,
        Label::Mismatch => NO_TOKEN,
    }
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    // Single left-to-right pass so placeholder-looking text inside values is
    // never substituted again.
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (key, value) in pairs {
            let needle_len = key.len() + 2;
            if tail.len() >= needle_len && &tail[1..needle_len - 1] == *key && tail.as_bytes()[needle_len - 1] == b'}' {
                out.push_str(value);
                rest = &tail[needle_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

impl PromptTemplate {
    /// Loads overrides from a plain-text file with `[section]` headers:
    /// `system`, `response_format`, `reasoning`, `demo_block`, `query_block`.
    /// Sections absent from the file keep their defaults.
    pub fn from_sections(text: &str) -> Result<Self> {
        let mut t = Self::default();
        let mut current: Option<(String, Vec<&str>)> = None;
        let mut sections = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
                if let Some(done) = current.take() {
                    sections.push(done);
                }
                current = Some((trimmed[1..trimmed.len() - 1].to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !trimmed.is_empty() {
                return Err(Error::InvalidArgument(
                    "template text before first [section] header".into(),
                ));
            }
        }
        if let Some(done) = current.take() {
            sections.push(done);
        }
        for (name, body) in sections {
            let value = body.join("\n").trim_matches('\n').to_string();
            match name.as_str() {
                "system" => t.system_instruction = value,
                "response_format" => t.response_format_instruction = value,
                "reasoning" => t.reasoning_instruction = value,
                "demo_block" => t.demo_block_template = value,
                "query_block" => t.query_block_template = value,
                other => return Err(Error::InvalidArgument(format!("unknown template section `{other}`"))),
            }
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sections(&text)
    }

    pub fn render_demo_block(&self, index: usize, demo: &Demonstration) -> String {
        let index = index.to_string();
        fill(
            &self.demo_block_template,
            &[
                ("index", &index),
                ("question", &demo.question_text),
                ("reason", &demo.reason_text),
                ("judgment", judgment_token(demo.label)),
            ],
        )
    }

    pub fn render_query_block(&self, knowledge: &str, question: &str) -> String {
        fill(
            &self.query_block_template,
            &[("knowledge", knowledge), ("question", question)],
        )
    }

    /// Instructions, then one block per demonstration in order, then the
    /// query block.
    pub fn assemble(&self, knowledge: &str, question: &str, demos: &[&Demonstration]) -> String {
        let mut parts = vec![
            self.system_instruction.clone(),
            self.reasoning_instruction.clone(),
            self.response_format_instruction.clone(),
        ];
        parts.extend(demos.iter().enumerate().map(|(i, d)| self.render_demo_block(i + 1, d)));
        parts.push(self.render_query_block(knowledge, question));
        parts.join("\n\n")
    }
}

/// Assembles a prompt with the default template.
pub fn assemble_prompt(knowledge: &str, question: &str, demos: &[&Demonstration]) -> String {
    PromptTemplate::default().assemble(knowledge, question, demos)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub prediction: Label,
    pub raw_text: String,
    pub parse_ok: bool,
}

/// Reads the final verdict: the last `<Yes>`/`<No>` token (case-insensitive),
/// or a bare `Yes`/`No` final word if that comes later. Unparseable text
/// predicts mismatch with `parse_ok = false`.
pub fn parse_judgment(raw: &str) -> Judgment {
    let lower = raw.to_lowercase();
    let tagged = [("<yes>", Label::Match), ("<no>", Label::Mismatch)]
        .into_iter()
        .filter_map(|(tok, label)| lower.rfind(tok).map(|pos| (pos, label)))
        .max_by_key(|(pos, _)| *pos);

    let trimmed = lower.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '>');
    let final_word_start = trimmed.rfind(|c: char| c.is_whitespace()).map(|i| i + 1).unwrap_or(0);
    let final_word = trimmed[final_word_start..].trim_matches(|c: char| !c.is_alphanumeric());
    let bare = match final_word {
        "yes" => Some((final_word_start, Label::Match)),
        "no" => Some((final_word_start, Label::Mismatch)),
        _ => None,
    };

    let chosen = match (tagged, bare) {
        (Some(t), Some(b)) => Some(if b.0 > t.0 { b.1 } else { t.1 }),
        (Some(t), None) => Some(t.1),
        (None, Some(b)) => Some(b.1),
        (None, None) => None,
    };
    Judgment {
        prediction: chosen.unwrap_or(Label::Mismatch),
        raw_text: raw.to_string(),
        parse_ok: chosen.is_some(),
    }
}
