//! Text embedders: seeded synthetic hashing, precomputed tables, and a remote
//! embeddings endpoint. Every provider returns unit-length vectors, so cosine
//! similarity is a plain dot product.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EmbeddingVector};
use crate::digest::{sha256_hex, sha256_parts, text_hash};
use crate::{Error, Result};

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn dim(&self) -> usize;

    /// Provider and model identity, used to key caches.
    fn cache_identity(&self) -> String;
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).embed(text)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn cache_identity(&self) -> String {
        (**self).cache_identity()
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Adds the counter-mode hash expansion of `token` into `acc`, entries
/// uniform in [-1, 1).
fn expand_into(token: &str, seed: u64, acc: &mut [f64]) {
    let seed = seed.to_le_bytes();
    for (block, chunk) in acc.chunks_mut(4).enumerate() {
        let digest = sha256_parts(&[&seed, token.as_bytes(), &(block as u64).to_le_bytes()]);
        for (slot, bytes) in chunk.iter_mut().zip(digest.chunks_exact(8)) {
            let x = u64::from_le_bytes(bytes.try_into().expect("8 bytes"));
            *slot += ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
        }
    }
}

/// Deterministic bag-of-tokens embedding: each lower-cased alphanumeric token
/// is hash-expanded into `d` pseudo-random floats, the expansions are summed,
/// and the sum is L2-normalized. Texts without tokens are expanded whole.
pub fn synthetic_embed(text: &str, seed: u64, d: usize) -> Result<EmbeddingVector> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be >= 2, got {d}"
        )));
    }
    let mut acc = vec![0.0; d];
    let mut any = false;
    for tok in tokens(text) {
        expand_into(&tok, seed, &mut acc);
        any = true;
    }
    if !any {
        expand_into(text, seed, &mut acc);
    }
    EmbeddingVector::normalized(acc)
}

#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl SyntheticEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be >= 2, got {dim}"
            )));
        }
        Ok(Self { seed, dim })
    }
}

impl Embedder for SyntheticEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        synthetic_embed(text, self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cache_identity(&self) -> String {
        format!("synthetic/seed={}/d={}", self.seed, self.dim)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    hash: String,
    vector: Vec<f64>,
}

fn read_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TableRow>(l)
                .map(|r| (r.hash, r.vector))
                .map_err(|e| Error::EmbeddingTable(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes a table of `{"hash", "vector"}` rows keyed by [`text_hash`].
pub fn write_embedding_table<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (text, v) in rows {
        let row = TableRow {
            hash: text_hash(text),
            vector: v.as_slice().to_vec(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lookup embedder over a precomputed table.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    table: HashMap<String, EmbeddingVector>,
    dim: usize,
    source: String,
}

impl FileEmbedder {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_table(path)?;
        let mut table = HashMap::with_capacity(rows.len());
        let mut dim = None;
        for (hash, vector) in rows {
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::EmbeddingTable(format!(
                        "dimension mismatch: row `{hash}` has {} entries, expected {d}",
                        vector.len()
                    )))
                }
                _ => {}
            }
            let v =
                EmbeddingVector::normalized(vector).map_err(|e| Error::EmbeddingTable(format!("row `{hash}`: {e}")))?;
            table.insert(hash, v);
        }
        Ok(Self {
            table,
            dim: dim.unwrap_or(0),
            source: path.display().to_string(),
        })
    }
}

impl Embedder for FileEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let h = text_hash(text);
        self.table.get(&h).cloned().ok_or_else(|| {
            let preview: String = text.chars().take(40).collect();
            Error::MissingEmbedding(format!("{preview} (hash {h})"))
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cache_identity(&self) -> String {
        format!("file/{}", self.source)
    }
}

/// Content-hash keyed embedding cache, optionally persisted as an append-only
/// table file with the same row schema as embedding tables.
#[derive(Debug, Default)]
pub struct EmbedCache {
    entries: Mutex<HashMap<String, EmbeddingVector>>,
    path: Option<PathBuf>,
}

impl EmbedCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for (hash, vector) in read_table(&path)? {
                entries.insert(hash, EmbeddingVector::new(vector)?);
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            path: Some(path),
        })
    }

    pub fn key(identity: &str, text: &str) -> String {
        sha256_hex(&[identity.as_bytes(), text.as_bytes()])
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingVector> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, v: EmbeddingVector) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let row = TableRow {
                hash: key.clone(),
                vector: v.as_slice().to_vec(),
            };
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(path, e))?;
        }
        entries.insert(key, v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbedCache,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbedCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbedCache {
        &self.cache
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let key = EmbedCache::key(&self.inner.cache_identity(), text);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        self.cache.insert(key, v.clone())?;
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn cache_identity(&self) -> String {
        self.inner.cache_identity()
    }
}

#[cfg(feature = "remote")]
pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};

#[cfg(feature = "remote")]
mod remote {
    use serde::{Deserialize, Serialize};
    use serde_json::{json, Value};

    use super::{EmbedCache, Embedder};
    use crate::dataset::EmbeddingVector;
    use crate::http::{read_credential, JsonClient, RetryPolicy};
    use crate::{Error, Result};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct RemoteEmbedderConfig {
        pub base_url: String,
        pub model: String,
        pub dim: usize,
        pub api_key_env: String,
        pub max_in_flight: usize,
        pub retry: RetryPolicy,
    }

    impl Default for RemoteEmbedderConfig {
        fn default() -> Self {
            Self {
                base_url: "https://api.openai.com/v1".into(),
                model: "text-embedding-3-small".into(),
                dim: 1536,
                api_key_env: "OPENAI_API_KEY".into(),
                max_in_flight: 4,
                retry: RetryPolicy::default(),
            }
        }
    }

    /// Embeddings-endpoint client. Every successful lookup is written
    /// through the cache; cached texts never touch the network.
    pub struct RemoteEmbedder {
        cfg: RemoteEmbedderConfig,
        client: JsonClient,
        cache: EmbedCache,
    }

    impl RemoteEmbedder {
        pub fn new(cfg: RemoteEmbedderConfig, cache: EmbedCache) -> Result<Self> {
            let key = read_credential(&cfg.api_key_env)?;
            let client = JsonClient::new(Some(key), cfg.retry.clone(), cfg.max_in_flight)?;
            Ok(Self { cfg, client, cache })
        }

        fn fetch(&self, text: &str) -> Result<EmbeddingVector> {
            let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
            let body = json!({ "model": self.cfg.model, "input": text });
            let resp = self.client.post(&url, &body)?;
            let values: Vec<f64> = resp
                .pointer("/data/0/embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::MalformedResponse("missing data[0].embedding".into()))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| Error::MalformedResponse("non-numeric embedding entry".into()))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::MalformedResponse("empty embedding vector".into()));
            }
            if values.len() != self.cfg.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.cfg.dim,
                    actual: values.len(),
                });
            }
            EmbeddingVector::normalized(values).map_err(|e| Error::MalformedResponse(e.to_string()))
        }
    }

    impl Embedder for RemoteEmbedder {
        fn embed(&self, text: &str) -> Result<EmbeddingVector> {
            let key = EmbedCache::key(&self.cache_identity(), text);
            if let Some(v) = self.cache.get(&key) {
                return Ok(v);
            }
            let v = self.fetch(text)?;
            self.cache.insert(key, v.clone())?;
            Ok(v)
        }

        fn dim(&self) -> usize {
            self.cfg.dim
        }

        fn cache_identity(&self) -> String {
            format!("remote/{}/{}", self.cfg.base_url, self.cfg.model)
        }
    }
}

/// Embedder selection as it appears in run configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum EmbedderConfig {
    Synthetic {
        seed: u64,
        dim: usize,
    },
    File {
        path: PathBuf,
    },
    #[cfg(feature = "remote")]
    Remote {
        #[serde(flatten)]
        endpoint: RemoteEmbedderConfig,
        cache_path: Option<PathBuf>,
    },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Synthetic { seed: 0, dim: 64 }
    }
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
    Ok(match cfg {
        EmbedderConfig::Synthetic { seed, dim } => Box::new(SyntheticEmbedder::new(*seed, *dim)?),
        EmbedderConfig::File { path } => Box::new(FileEmbedder::open(path)?),
        #[cfg(feature = "remote")]
        EmbedderConfig::Remote { endpoint, cache_path } => {
            let cache = match cache_path {
                Some(p) => EmbedCache::open(p)?,
                None => EmbedCache::in_memory(),
            };
            Box::new(RemoteEmbedder::new(endpoint.clone(), cache)?)
        }
    })
}

/// Embeddings of every text a dataset needs: knowledge definitions keyed by
/// knowledge id, questions keyed by instance id. Demonstration embeddings are
/// stored on the demonstrations themselves.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub knowledge: BTreeMap<String, EmbeddingVector>,
    pub questions: HashMap<String, EmbeddingVector>,
}

impl EmbeddingIndex {
    pub fn knowledge(&self, knowledge_id: &str) -> Result<&EmbeddingVector> {
        self.knowledge
            .get(knowledge_id)
            .ok_or_else(|| Error::MissingEmbedding(format!("knowledge `{knowledge_id}`")))
    }

    pub fn question(&self, instance_id: &str) -> Result<&EmbeddingVector> {
        self.questions
            .get(instance_id)
            .ok_or_else(|| Error::MissingEmbedding(format!("question of `{instance_id}`")))
    }
}

/// Embeds all knowledge texts, questions and demonstrations of `ds`.
/// Demonstrations are embedded by their question text.
pub fn embed_dataset(ds: &mut Dataset, embedder: &dyn Embedder) -> Result<EmbeddingIndex> {
    let dim = embedder.dim();
    let check = |v: EmbeddingVector| -> Result<EmbeddingVector> {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        Ok(v)
    };
    let mut index = EmbeddingIndex {
        dim,
        ..Default::default()
    };
    for (kid, text) in &ds.knowledge_texts {
        index.knowledge.insert(kid.clone(), check(embedder.embed(text)?)?);
    }
    for inst in &ds.instances {
        if !index.knowledge.contains_key(&inst.knowledge_id) {
            let v = check(embedder.embed(&inst.knowledge_text)?)?;
            index.knowledge.insert(inst.knowledge_id.clone(), v);
        }
        index
            .questions
            .insert(inst.id.clone(), check(embedder.embed(&inst.question_text)?)?);
    }
    for bank in ds.banks.values_mut() {
        for d in &mut bank.demonstrations {
            d.embedding = Some(check(embedder.embed(&d.question_text)?)?);
        }
    }
    Ok(index)
}
