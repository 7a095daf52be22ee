//! Text embedders: a deterministic local hashing embedder for offline runs and
//! a client for remote embedding endpoints.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::http::{join_url, resolve_credential, HttpError, JsonClient, RetryPolicy};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("nothing to embed")]
    EmptyBatch,
    #[error("text {0} has no tokens; cannot normalize a zero vector")]
    ZeroVector(usize),
    #[error("embedder returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid embedder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Http(#[from] HttpError),
}

/// Dense, L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalize `raw` to unit length. Fails on an all-zero input.
    pub fn normalized(raw: &[f64]) -> Option<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(EmbeddingVector(raw.iter().map(|x| (x / norm) as f32).collect()))
    }

    /// Wrap values as-is. Callers are responsible for normalization.
    pub fn from_raw(values: Vec<f32>) -> Self {
        EmbeddingVector(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderBackend {
    Remote,
    LocalHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    pub model_name: String,
    pub dim: usize,
    /// Base URL; `/embeddings` is appended.
    pub endpoint: String,
    pub batch_size: usize,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Resolved credential; never written back out.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_inflight: usize,
    pub retry: RetryPolicy,
}

pub const DEFAULT_REMOTE_MODEL: &str = "text-embedding-3-large";
pub const DEFAULT_LOCAL_DIM: usize = 256;

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            backend: EmbedderBackend::LocalHash,
            model_name: DEFAULT_REMOTE_MODEL.into(),
            dim: DEFAULT_LOCAL_DIM,
            endpoint: "https://api.openai.com/v1".into(),
            batch_size: 128,
            api_key_env: "OPENAI_API_KEY".into(),
            api_key: None,
            max_inflight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn remote(model_name: &str, dim: usize, endpoint: &str) -> Self {
        EmbedderConfig {
            backend: EmbedderBackend::Remote,
            model_name: model_name.into(),
            dim,
            endpoint: endpoint.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.batch_size < 1 {
            return Err(EmbedError::Config("batch_size must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(EmbedError::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the embedding space; vectors from embedders with different
    /// fingerprints are not comparable.
    fn fingerprint(&self) -> String;

    /// One normalized vector per text, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

const HASH_SEED: u64 = 0x7472_6970_6d6f_6465;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lowercased whitespace tokens with surrounding punctuation trimmed.
/// Inner punctuation is kept, so `7:00`, `25-34` and `$100,000-$199,999` stay
/// single tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '"' | '\'')))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing of word tokens into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        LocalHashEmbedder { dim }
    }

    fn embed_text(&self, text: &str) -> Option<EmbeddingVector> {
        let mut acc = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            let h = fnv1a(HASH_SEED, token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if splitmix(h) >> 63 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        EmbeddingVector::normalized(&acc)
    }
}

impl Embedder for LocalHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("local-hash/fnv1a64/seed={HASH_SEED:016x}/dim={}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| self.embed_text(t).ok_or(EmbedError::ZeroVector(i)))
            .collect()
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

type ChunkSlot = Mutex<Option<Result<Vec<EmbeddingVector>, EmbedError>>>;

/// Client for endpoints speaking the common `POST /embeddings` contract.
/// A failure in any batch fails the whole call.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let bearer = resolve_credential(config.api_key.as_deref(), &config.api_key_env)?;
        let client = JsonClient::new(config.retry, bearer);
        Ok(RemoteEmbedder { config, client })
    }

    fn embed_chunk(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let url = join_url(&self.config.endpoint, "embeddings");
        let resp: EmbeddingResponse = self.client.post(
            &url,
            &EmbeddingRequest {
                model: &self.config.model_name,
                input: texts,
            },
        )?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: resp.data.len(),
            });
        }
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter()
            .enumerate()
            .map(|(i, d)| {
                if d.embedding.len() != self.config.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.config.dim,
                        got: d.embedding.len(),
                    });
                }
                EmbeddingVector::normalized(&d.embedding).ok_or(EmbedError::ZeroVector(i))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn fingerprint(&self) -> String {
        format!("remote/{}/dim={}", self.config.model_name, self.config.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let chunks: Vec<&[&str]> = texts.chunks(self.config.batch_size).collect();
        let results: Vec<ChunkSlot> = chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_inflight.clamp(1, chunks.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let r = self.embed_chunk(chunks[i]);
                    let failed = r.is_err();
                    *results[i].lock().expect("poisoned") = Some(r);
                    if failed {
                        // stop handing out further chunks
                        next.store(chunks.len(), Ordering::SeqCst);
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in results {
            match slot.into_inner().expect("poisoned") {
                Some(r) => out.extend(r?),
                None => continue,
            }
        }
        if out.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: out.len(),
            });
        }
        Ok(out)
    }
}

pub fn build_embedder(config: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    config.validate()?;
    Ok(match config.backend {
        EmbedderBackend::LocalHash => Box::new(LocalHashEmbedder::new(config.dim)),
        EmbedderBackend::Remote => Box::new(RemoteEmbedder::new(config.clone())?),
    })
}

/// Embed `texts` with the backend described by `config`.
pub fn embed_batch(texts: &[&str], config: &EmbedderConfig) -> Result<Vec<EmbeddingVector>, EmbedError> {
    build_embedder(config)?.embed_batch(texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testing::StubServer;
    use crate::serialization::serialize_trip;
    use crate::trip_data::fixtures::example_record;
    use crate::trip_data::Gender;

    fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum::<f64>()
            / (a.norm() * b.norm())
    }

    #[test]
    fn local_hash_is_deterministic_and_normalized() {
        let e = LocalHashEmbedder::new(256);
        let text = serialize_trip(&example_record(), false, "").unwrap().text;
        let a = e.embed_one(&text).unwrap();
        let b = e.embed_one(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 256);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn one_field_change_lowers_similarity() {
        let e = LocalHashEmbedder::new(256);
        let r = example_record();
        let mut other = r.clone();
        other.gender = Gender::Male;
        let a = e.embed_one(&serialize_trip(&r, false, "").unwrap().text).unwrap();
        let b = e.embed_one(&serialize_trip(&other, false, "").unwrap().text).unwrap();
        let sim = cosine(&a, &b);
        assert!(sim < 1.0 && sim > 0.5, "similarity {sim}");
    }

    #[test]
    fn token_multiset_determines_vector() {
        let e = LocalHashEmbedder::new(64);
        let a = e.embed_one("walk to the store").unwrap();
        let b = e.embed_one("Store the to WALK.").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_bucket_for_a_token() {
        // guards against accidental changes to the hashing scheme; the index
        // file format depends on it
        let e = LocalHashEmbedder::new(256);
        let v = e.embed_one("drive").unwrap();
        let nonzero: Vec<(usize, f32)> = v
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        assert_eq!(nonzero.len(), 1);
        let h = fnv1a(HASH_SEED, b"drive");
        assert_eq!(nonzero[0].0, (h % 256) as usize);
    }

    #[test]
    fn permuted_batch_gives_permuted_vectors() {
        let e = LocalHashEmbedder::new(128);
        let texts = ["alpha beta", "gamma", "delta epsilon zeta"];
        let fwd = e.embed_batch(&texts).unwrap();
        let rev = e.embed_batch(&[texts[2], texts[0], texts[1]]).unwrap();
        assert_eq!(fwd[2], rev[0]);
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[2]);
    }

    #[test]
    fn empty_inputs_rejected() {
        let e = LocalHashEmbedder::new(8);
        assert!(matches!(e.embed_batch(&[]), Err(EmbedError::EmptyBatch)));
        assert!(matches!(e.embed_batch(&["..."]), Err(EmbedError::ZeroVector(0))));
    }

    #[test]
    fn tokenizer_keeps_inner_punctuation() {
        let toks: Vec<_> = tokenize("Trip starts at 7:00. Income is $100,000-$199,999.").collect();
        assert_eq!(toks, ["trip", "starts", "at", "7:00", "income", "is", "$100,000-$199,999"]);
    }

    fn remote_config(url: &str, dim: usize, batch: usize) -> EmbedderConfig {
        EmbedderConfig {
            api_key_env: String::new(),
            batch_size: batch,
            max_inflight: 1,
            retry: RetryPolicy {
                max_attempts: 3,
                initial_backoff_ms: 1,
                timeout_secs: 5,
            },
            ..EmbedderConfig::remote("test-model", dim, url)
        }
    }

    #[test]
    fn remote_embedder_speaks_embeddings_contract() {
        let server = StubServer::start(2, |_, body| {
            let n = body["input"].as_array().unwrap().len();
            // reply out of order with explicit indices
            let data: Vec<_> = (0..n)
                .rev()
                .map(|i| serde_json::json!({"index": i, "embedding": [3.0, 4.0 + i as f64]}))
                .collect();
            (200, serde_json::json!({"data": data}).to_string())
        });
        let e = RemoteEmbedder::new(remote_config(&server.url, 2, 2)).unwrap();
        let out = e.embed_batch(&["a", "b", "c"]).unwrap();
        assert_eq!(out.len(), 3);
        assert!((out[0].values()[0] - 0.6).abs() < 1e-6);
        assert!((out[1].values()[1] - 5.0 / 34f32.sqrt()).abs() < 1e-6);
        for v in &out {
            assert!((v.norm() - 1.0).abs() <= 1e-6);
        }
        let reqs = server.captured();
        assert_eq!(reqs[0].path, "/embeddings");
        assert_eq!(reqs[0].body["model"], "test-model");
        assert_eq!(reqs[0].body["input"], serde_json::json!(["a", "b"]));
        assert_eq!(reqs[1].body["input"], serde_json::json!(["c"]));
    }

    #[test]
    fn remote_dimension_mismatch() {
        let server = StubServer::start(1, |_, _| {
            (200, r#"{"data":[{"embedding":[1.0,2.0,3.0]}]}"#.into())
        });
        let e = RemoteEmbedder::new(remote_config(&server.url, 2, 8)).unwrap();
        assert!(matches!(
            e.embed_batch(&["a"]),
            Err(EmbedError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn remote_requires_credential() {
        let cfg = EmbedderConfig {
            api_key_env: "TRIPMODE_TEST_DEFINITELY_UNSET".into(),
            ..EmbedderConfig::remote("m", 2, "http://127.0.0.1:9")
        };
        assert!(matches!(
            RemoteEmbedder::new(cfg),
            Err(EmbedError::Http(HttpError::MissingCredential(_)))
        ));
    }

    #[test]
    fn batch_size_must_be_positive() {
        let cfg = EmbedderConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(build_embedder(&cfg).is_err());
    }
}
