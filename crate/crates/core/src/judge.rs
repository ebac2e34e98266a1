//! The environment: maps (knowledge, question, demonstrations) to a judgment.

use serde::{Deserialize, Serialize};

use crate::dataset::{Demonstration, Label, TaggingInstance};
use crate::digest::unit_interval;
use crate::prompt::{judgment_token, Judgment};
use crate::{Error, Result};

pub trait Judge: Send + Sync {
    fn judge(&self, instance: &TaggingInstance, demos: &[&Demonstration]) -> Result<Judgment>;
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn judge(&self, instance: &TaggingInstance, demos: &[&Demonstration]) -> Result<Judgment> {
        (**self).judge(instance, demos)
    }
}

/// +1 when the prediction matches the gold label, -1 otherwise.
pub fn eval_reward(judgment: &Judgment, gold: Label) -> i8 {
    if judgment.prediction == gold {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimJudgeConfig {
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for SimJudgeConfig {
    fn default() -> Self {
        Self {
            noise_prob: 0.0,
            seed: 0,
        }
    }
}

/// Hint-coverage oracle. An instance is judged correctly when it is
/// zero-shot solvable or the demonstrations jointly carry every required
/// hint. Noise flips are a pure function of (seed, instance id, sorted demo
/// ids), so call order never matters.
#[derive(Debug, Clone)]
pub struct SimulatedJudge {
    cfg: SimJudgeConfig,
}

impl SimulatedJudge {
    pub fn new(cfg: SimJudgeConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.noise_prob) {
            return Err(Error::InvalidArgument(format!(
                "noise_prob must be in [0, 1), got {}",
                cfg.noise_prob
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> SimJudgeConfig {
        self.cfg
    }

    fn flips(&self, instance: &TaggingInstance, demos: &[&Demonstration]) -> bool {
        if self.cfg.noise_prob == 0.0 {
            return false;
        }
        let mut ids: Vec<&str> = demos.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        let joined = ids.join("\u{1f}");
        let u = unit_interval(&[&self.cfg.seed.to_le_bytes(), instance.id.as_bytes(), joined.as_bytes()]);
        u < self.cfg.noise_prob
    }
}

impl Judge for SimulatedJudge {
    fn judge(&self, instance: &TaggingInstance, demos: &[&Demonstration]) -> Result<Judgment> {
        let meta = instance
            .sim_meta
            .as_ref()
            .ok_or_else(|| Error::MissingSimMeta(instance.id.clone()))?;
        let covered = meta
            .required_hints
            .iter()
            .all(|h| demos.iter().any(|d| d.hints.contains(h)));
        let mut correct = meta.zero_shot_solvable || covered;
        if self.flips(instance, demos) {
            correct = !correct;
        }
        let prediction = if correct {
            instance.label
        } else {
            instance.label.flipped()
        };
        let raw_text = format!(
            "Considered {} demonstration(s); the question {} the knowledge concept. {}",
            demos.len(),
            if prediction.is_match() {
                "exercises"
            } else {
                "does not exercise"
            },
            judgment_token(prediction)
        );
        Ok(Judgment {
            prediction,
            raw_text,
            parse_ok: true,
        })
    }
}

#[cfg(feature = "remote")]
pub use remote::{RemoteJudge, RemoteJudgeConfig};

#[cfg(feature = "remote")]
mod remote {
    use std::collections::HashMap;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    use serde::{Deserialize, Serialize};
    use serde_json::{json, Value};

    use super::Judge;
    use crate::dataset::{Demonstration, TaggingInstance};
    use crate::digest::sha256_hex;
    use crate::http::{read_credential, JsonClient, RetryPolicy};
    use crate::prompt::{parse_judgment, Judgment, PromptTemplate};
    use crate::{Error, Result};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct RemoteJudgeConfig {
        pub base_url: String,
        pub model: String,
        pub temperature: f64,
        pub api_key_env: String,
        pub max_in_flight: usize,
        pub retry: RetryPolicy,
        /// Response cache directory; `None` keeps the cache in memory only.
        pub cache_dir: Option<PathBuf>,
        pub template: Option<PathBuf>,
    }

    impl Default for RemoteJudgeConfig {
        fn default() -> Self {
            Self {
                base_url: "https://api.openai.com/v1".into(),
                model: "gpt-4o-mini".into(),
                temperature: 0.0,
                api_key_env: "OPENAI_API_KEY".into(),
                max_in_flight: 4,
                retry: RetryPolicy::default(),
                cache_dir: None,
                template: None,
            }
        }
    }

    /// Chat-completions judge with a write-through response cache keyed by
    /// the hash of the full request body.
    pub struct RemoteJudge {
        cfg: RemoteJudgeConfig,
        template: PromptTemplate,
        client: JsonClient,
        memory: Mutex<HashMap<String, String>>,
        network_calls: AtomicUsize,
    }

    impl RemoteJudge {
        pub fn new(cfg: RemoteJudgeConfig) -> Result<Self> {
            let key = read_credential(&cfg.api_key_env)?;
            let template = match &cfg.template {
                Some(p) => PromptTemplate::load(p)?,
                None => PromptTemplate::default(),
            };
            if let Some(dir) = &cfg.cache_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let client = JsonClient::new(Some(key), cfg.retry.clone(), cfg.max_in_flight)?;
            Ok(Self {
                cfg,
                template,
                client,
                memory: Mutex::new(HashMap::new()),
                network_calls: AtomicUsize::new(0),
            })
        }

        pub fn network_calls(&self) -> usize {
            self.network_calls.load(Ordering::SeqCst)
        }

        fn cached(&self, key: &str) -> Option<String> {
            if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
                return Some(hit.clone());
            }
            let dir = self.cfg.cache_dir.as_ref()?;
            let text = std::fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
            let v: Value = serde_json::from_str(&text).ok()?;
            let content = v.get("content")?.as_str()?.to_string();
            self.memory
                .lock()
                .expect("cache lock")
                .insert(key.to_string(), content.clone());
            Some(content)
        }

        fn store(&self, key: &str, content: &str) -> Result<()> {
            let mut mem = self.memory.lock().expect("cache lock");
            if let Some(dir) = &self.cfg.cache_dir {
                let path = dir.join(format!("{key}.json"));
                let body = serde_json::to_string(&json!({ "content": content }))?;
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            }
            mem.insert(key.to_string(), content.to_string());
            Ok(())
        }
    }

    impl Judge for RemoteJudge {
        fn judge(&self, instance: &TaggingInstance, demos: &[&Demonstration]) -> Result<Judgment> {
            let prompt = self
                .template
                .assemble(&instance.knowledge_text, &instance.question_text, demos);
            let body = json!({
                "model": self.cfg.model,
                "temperature": self.cfg.temperature,
                "messages": [{ "role": "user", "content": prompt }],
            });
            let key = sha256_hex(&[serde_json::to_string(&body)?.as_bytes()]);
            if let Some(content) = self.cached(&key) {
                return Ok(parse_judgment(&content));
            }
            let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let resp = self.client.post(&url, &body)?;
            let content = resp
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?;
            self.store(&key, content)?;
            Ok(parse_judgment(content))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JudgeConfig {
    Simulated(SimJudgeConfig),
    #[cfg(feature = "remote")]
    Remote(RemoteJudgeConfig),
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig::Simulated(SimJudgeConfig::default())
    }
}

pub fn build_judge(cfg: &JudgeConfig) -> Result<Box<dyn Judge>> {
    Ok(match cfg {
        JudgeConfig::Simulated(c) => Box::new(SimulatedJudge::new(*c)?),
        #[cfg(feature = "remote")]
        JudgeConfig::Remote(c) => Box::new(RemoteJudge::new(c.clone())?),
    })
}
