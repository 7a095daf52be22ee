//! Retrieval strategies over a [`VectorIndex`]: plain top-k, class-balanced
//! top-k, and two-stage variants of both that re-rank a wider candidate pool
//! with a [`Reranker`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::http::{join_url, resolve_credential, HttpError, JsonClient, RetryPolicy};
use crate::serialization::{parse_document, DocumentStore, SerializationError};
use crate::trip_data::{TripMode, TripRecord, NUM_MODES};
use crate::vector_index::{hit_order, Hit, IndexError, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("document {0} missing from the corpus")]
    MissingDocument(u64),
    #[error("re-ranker returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("re-ranker could not parse a document: {0}")]
    Parse(#[from] SerializationError),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("invalid strategy configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Basic,
    Balanced,
    Rerank,
    BalancedRerank,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Basic,
        Strategy::Balanced,
        Strategy::Rerank,
        Strategy::BalancedRerank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Basic => "basic",
            Strategy::Balanced => "balanced",
            Strategy::Rerank => "rerank",
            Strategy::BalancedRerank => "balanced_rerank",
        }
    }

    pub fn is_reranked(self) -> bool {
        matches!(self, Strategy::Rerank | Strategy::BalancedRerank)
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteRerankerConfig {
    /// Base URL; `/rerank` is appended.
    pub endpoint: String,
    pub model_name: String,
    pub api_key_env: String,
    /// Resolved credential; never written back out.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for RemoteRerankerConfig {
    fn default() -> Self {
        RemoteRerankerConfig {
            endpoint: "http://localhost:8080".into(),
            model_name: "cross-encoder".into(),
            api_key_env: String::new(),
            api_key: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Final number of context documents.
    pub k: usize,
    /// Candidate pool size for the re-ranked strategies.
    pub k_prime: usize,
    pub reranker: RerankerKind,
    pub remote_reranker: RemoteRerankerConfig,
    /// Top up a balanced result that fell short (an exhausted class) with the
    /// best remaining documents of any class.
    pub backfill: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            strategy: Strategy::Basic,
            k: 4,
            k_prime: 20,
            reranker: RerankerKind::Reference,
            remote_reranker: RemoteRerankerConfig::default(),
            backfill: false,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k < 1 {
            return Err(RetrievalError::Config("k must be >= 1".into()));
        }
        if self.k > self.k_prime {
            return Err(RetrievalError::Config(format!(
                "k ({}) must not exceed k_prime ({})",
                self.k, self.k_prime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub doc_id: u64,
    pub similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rerank_score: Option<f64>,
    pub mode: TripMode,
}

impl From<Hit> for RetrievedItem {
    fn from(h: Hit) -> Self {
        RetrievedItem {
            doc_id: h.doc_id,
            similarity: h.similarity,
            rerank_score: None,
            mode: h.mode,
        }
    }
}

/// Ordered retrieval set for one query. Items are sorted by the governing
/// score (re-rank score when present, else similarity) descending, ties by
/// ascending doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub strategy: Strategy,
    pub query_doc_id: u64,
    pub items: Vec<RetrievedItem>,
    /// Classes that could not supply their balanced quota.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shortfall: Vec<TripMode>,
}

impl RetrievalResult {
    pub fn doc_ids(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.doc_id).collect()
    }

    pub fn has_shortfall(&self) -> bool {
        !self.shortfall.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_MODES] {
        let mut c = [0; NUM_MODES];
        for i in &self.items {
            c[i.mode.index()] += 1;
        }
        c
    }
}

/// The query side of a retrieval: id (excluded from results), embedding and
/// label-free text (for re-ranking).
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub doc_id: u64,
    pub vector: &'a EmbeddingVector,
    pub text: &'a str,
}

/// A re-ranking candidate: label-stripped text plus its first-stage score.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub doc_id: u64,
    pub text: &'a str,
    pub similarity: f64,
}

/// Joint query-document relevance scorer; higher is more relevant.
pub trait Reranker: Send + Sync {
    fn name(&self) -> &str;

    /// One score per candidate, in candidate order.
    fn score_batch(&self, query_text: &str, candidates: &[Candidate<'_>]) -> Result<Vec<f64>, RetrievalError>;
}

/// Per-class quota for a balanced retrieval of `k` documents: `k / 4` each,
/// plus one for the first `k % 4` classes in canonical mode order.
pub fn class_quotas(k: usize) -> [usize; NUM_MODES] {
    let mut q = [k / NUM_MODES; NUM_MODES];
    for slot in q.iter_mut().take(k % NUM_MODES) {
        *slot += 1;
    }
    q
}

pub fn retrieve_basic(index: &VectorIndex, query: &Query<'_>, k: usize) -> Result<RetrievalResult, RetrievalError> {
    let hits = index.search_filtered(query.vector, k, |e| e.doc_id != query.doc_id)?;
    Ok(RetrievalResult {
        strategy: Strategy::Basic,
        query_doc_id: query.doc_id,
        items: hits.into_iter().map(RetrievedItem::from).collect(),
        shortfall: Vec::new(),
    })
}

/// Union of per-class top-k_j retrievals (quotas from [`class_quotas`]),
/// sorted by similarity. Exhausted classes contribute what they have and are
/// listed in `shortfall`; with `backfill` the gap is filled from the best
/// remaining documents of any class.
pub fn retrieve_balanced(
    index: &VectorIndex,
    query: &Query<'_>,
    k: usize,
    backfill: bool,
) -> Result<RetrievalResult, RetrievalError> {
    if k < 1 {
        return Err(IndexError::InvalidK.into());
    }
    let mut hits: Vec<Hit> = Vec::with_capacity(k);
    let mut shortfall = Vec::new();
    for (&class, quota) in TripMode::ALL.iter().zip(class_quotas(k)) {
        if quota == 0 {
            continue;
        }
        let found = index.search_filtered(query.vector, quota, |e| e.mode == class && e.doc_id != query.doc_id)?;
        if found.len() < quota {
            shortfall.push(class);
        }
        hits.extend(found);
    }
    if backfill && hits.len() < k {
        let taken: HashSet<u64> = hits.iter().map(|h| h.doc_id).collect();
        let extra = index.search_filtered(query.vector, k - hits.len(), |e| {
            e.doc_id != query.doc_id && !taken.contains(&e.doc_id)
        })?;
        hits.extend(extra);
    }
    hits.sort_by(hit_order);
    Ok(RetrievalResult {
        strategy: Strategy::Balanced,
        query_doc_id: query.doc_id,
        items: hits.into_iter().map(RetrievedItem::from).collect(),
        shortfall,
    })
}

/// Score every pool item with `reranker` and keep the best `final_k`
/// (fewer if the pool is smaller).
pub fn rerank(
    pool: &RetrievalResult,
    query_text: &str,
    reranker: &dyn Reranker,
    final_k: usize,
    docs: &DocumentStore,
) -> Result<RetrievalResult, RetrievalError> {
    let candidates = pool
        .items
        .iter()
        .map(|item| {
            let doc = docs.get(item.doc_id).ok_or(RetrievalError::MissingDocument(item.doc_id))?;
            Ok(Candidate {
                doc_id: item.doc_id,
                text: doc.unlabeled_text(),
                similarity: item.similarity,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let scores = if candidates.is_empty() {
        Vec::new()
    } else {
        reranker.score_batch(query_text, &candidates)?
    };
    if scores.len() != candidates.len() {
        return Err(RetrievalError::ScoreCount {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    let mut items: Vec<RetrievedItem> = pool
        .items
        .iter()
        .zip(scores)
        .map(|(item, s)| RetrievedItem {
            rerank_score: Some(s),
            ..item.clone()
        })
        .collect();
    items.sort_by(|a, b| {
        let (sa, sb) = (a.rerank_score.unwrap_or(f64::NEG_INFINITY), b.rerank_score.unwrap_or(f64::NEG_INFINITY));
        sb.total_cmp(&sa).then(a.doc_id.cmp(&b.doc_id))
    });
    items.truncate(final_k);
    Ok(RetrievalResult {
        strategy: pool.strategy,
        query_doc_id: pool.query_doc_id,
        items,
        shortfall: pool.shortfall.clone(),
    })
}

pub fn retrieve_rerank(
    index: &VectorIndex,
    query: &Query<'_>,
    k_prime: usize,
    final_k: usize,
    reranker: &dyn Reranker,
    docs: &DocumentStore,
) -> Result<RetrievalResult, RetrievalError> {
    if final_k > k_prime {
        return Err(RetrievalError::Config(format!("K ({final_k}) exceeds k_prime ({k_prime})")));
    }
    let pool = retrieve_basic(index, query, k_prime)?;
    let mut out = rerank(&pool, query.text, reranker, final_k, docs)?;
    out.strategy = Strategy::Rerank;
    Ok(out)
}

pub fn retrieve_balanced_rerank(
    index: &VectorIndex,
    query: &Query<'_>,
    k_prime: usize,
    final_k: usize,
    reranker: &dyn Reranker,
    docs: &DocumentStore,
    backfill: bool,
) -> Result<RetrievalResult, RetrievalError> {
    if final_k > k_prime {
        return Err(RetrievalError::Config(format!("K ({final_k}) exceeds k_prime ({k_prime})")));
    }
    let pool = retrieve_balanced(index, query, k_prime, backfill)?;
    let mut out = rerank(&pool, query.text, reranker, final_k, docs)?;
    out.strategy = Strategy::BalancedRerank;
    Ok(out)
}

/// Feature scales for numeric mismatches: the survey standard deviations of
/// trip distance (miles), start time (hours) and household vehicles.
pub const DISTANCE_SCALE: f64 = 2.33;
pub const START_TIME_SCALE: f64 = 4.32;
pub const VEHICLES_SCALE: f64 = 0.78;

/// Weighted field distance between two trips: 1 per mismatched categorical
/// field plus scaled absolute differences of the numeric fields. Labels are
/// ignored.
pub fn field_distance(a: &TripRecord, b: &TripRecord) -> f64 {
    let mismatches = [
        a.age_band != b.age_band,
        a.gender != b.gender,
        a.education != b.education,
        a.income_band != b.income_band,
        a.trip_purpose != b.trip_purpose,
    ]
    .iter()
    .filter(|&&m| m)
    .count() as f64;
    mismatches
        + (a.trip_distance_miles - b.trip_distance_miles).abs() / DISTANCE_SCALE
        + (a.start_time_hours - b.start_time_hours).abs() / START_TIME_SCALE
        + (a.household_vehicles - b.household_vehicles).abs() / VEHICLES_SCALE
}

/// Score of the reference re-ranker for two serialized trips: the negated
/// [`field_distance`]. Identical trips score 0, the maximum.
pub fn reference_rerank_score(query_text: &str, candidate_text: &str) -> Result<f64, RetrievalError> {
    let q = parse_document(0, query_text)?;
    let c = parse_document(0, candidate_text)?;
    Ok(-field_distance(&q, &c))
}

/// Deterministic structured-field scorer standing in for a trained
/// cross-encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceReranker;

impl Reranker for ReferenceReranker {
    fn name(&self) -> &str {
        "reference"
    }

    fn score_batch(&self, query_text: &str, candidates: &[Candidate<'_>]) -> Result<Vec<f64>, RetrievalError> {
        let q = parse_document(0, query_text)?;
        candidates
            .iter()
            .map(|c| Ok(-field_distance(&q, &parse_document(c.doc_id, c.text)?)))
            .collect()
    }
}

/// Scores each candidate by its first-stage similarity. Re-ranking with it
/// reproduces the first stage truncated to K.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn name(&self) -> &str {
        "identity"
    }

    fn score_batch(&self, _query_text: &str, candidates: &[Candidate<'_>]) -> Result<Vec<f64>, RetrievalError> {
        Ok(candidates.iter().map(|c| c.similarity).collect())
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    model: &'a str,
    query: &'a str,
    documents: Vec<&'a str>,
}

#[derive(Deserialize)]
struct RerankResponse {
    results: Vec<RerankScore>,
}

#[derive(Deserialize)]
struct RerankScore {
    index: usize,
    relevance_score: f64,
}

/// Client for a hosted cross-encoder speaking the common `POST /rerank`
/// contract: `{model, query, documents}` in, `{results: [{index,
/// relevance_score}]}` out.
pub struct RemoteReranker {
    config: RemoteRerankerConfig,
    client: JsonClient,
}

impl RemoteReranker {
    pub fn new(config: RemoteRerankerConfig) -> Result<Self, RetrievalError> {
        let bearer = resolve_credential(config.api_key.as_deref(), &config.api_key_env)?;
        let client = JsonClient::new(config.retry, bearer);
        Ok(RemoteReranker { config, client })
    }
}

impl Reranker for RemoteReranker {
    fn name(&self) -> &str {
        &self.config.model_name
    }

    fn score_batch(&self, query_text: &str, candidates: &[Candidate<'_>]) -> Result<Vec<f64>, RetrievalError> {
        let url = join_url(&self.config.endpoint, "rerank");
        let resp: RerankResponse = self.client.post(
            &url,
            &RerankRequest {
                model: &self.config.model_name,
                query: query_text,
                documents: candidates.iter().map(|c| c.text).collect(),
            },
        )?;
        let mut scores = vec![None; candidates.len()];
        for r in resp.results {
            if let Some(slot) = scores.get_mut(r.index) {
                *slot = Some(r.relevance_score);
            }
        }
        let got = scores.iter().filter(|s| s.is_some()).count();
        if got != candidates.len() {
            return Err(RetrievalError::ScoreCount {
                expected: candidates.len(),
                got,
            });
        }
        Ok(scores.into_iter().map(|s| s.expect("checked")).collect())
    }
}

pub fn build_reranker(config: &StrategyConfig) -> Result<Box<dyn Reranker>, RetrievalError> {
    Ok(match config.reranker {
        RerankerKind::Reference => Box::new(ReferenceReranker),
        RerankerKind::Remote => Box::new(RemoteReranker::new(config.remote_reranker.clone())?),
    })
}

/// A configured strategy bound to an index and its document corpus.
pub struct Retriever<'a> {
    pub index: &'a VectorIndex,
    pub docs: &'a DocumentStore,
    pub config: StrategyConfig,
    pub reranker: Box<dyn Reranker>,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a VectorIndex, docs: &'a DocumentStore, config: StrategyConfig) -> Result<Self, RetrievalError> {
        config.validate()?;
        let reranker = build_reranker(&config)?;
        Ok(Retriever {
            index,
            docs,
            config,
            reranker,
        })
    }

    pub fn with_reranker(mut self, reranker: Box<dyn Reranker>) -> Self {
        self.reranker = reranker;
        self
    }

    pub fn retrieve(&self, query: &Query<'_>) -> Result<RetrievalResult, RetrievalError> {
        let c = &self.config;
        let result = match c.strategy {
            Strategy::Basic => retrieve_basic(self.index, query, c.k),
            Strategy::Balanced => retrieve_balanced(self.index, query, c.k, c.backfill),
            Strategy::Rerank => retrieve_rerank(self.index, query, c.k_prime, c.k, self.reranker.as_ref(), self.docs),
            Strategy::BalancedRerank => retrieve_balanced_rerank(
                self.index,
                query,
                c.k_prime,
                c.k,
                self.reranker.as_ref(),
                self.docs,
                c.backfill,
            ),
        }?;
        debug_assert!(result.items.iter().all(|i| i.doc_id != query.doc_id));
        Ok(result)
    }
}
