//! End-to-end runs: data preparation, knowledge-base indexing, prediction
//! under each retrieval method, scoring and comparison. Every artifact of a
//! run lands in one output directory:
//!
//! ```text
//! <out>/config.json                  resolved configuration (no secrets)
//! <out>/index.bin                    vector index over the training trips
//! <out>/documents.jsonl              labeled knowledge-base documents
//! <out>/cache.jsonl                  LLM response cache (unless configured elsewhere)
//! <out>/predictions/<set>/<method>.jsonl
//! <out>/reports/<set>/<method>.json
//! <out>/reports/<set>/comparison.{txt,csv,json}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{build_embedder, EmbedError, Embedder, EmbedderBackend, EmbedderConfig, EmbeddingVector};
use crate::evaluation::{compare, score, ComparisonTable, EvalError, MetricsReport};
use crate::http::HttpError;
use crate::llm::{BackendKind, LlmBackendConfig, LlmError, LlmGateway, Prediction};
use crate::mnl::{MnlConfig, MnlError, MnlModel};
use crate::retrieval::{Query, RetrievalError, Retriever, Strategy, StrategyConfig};
use crate::serialization::{
    read_jsonl, serialize_trip, write_jsonl, Document, DocumentStore, SerializationError, TEMPLATE_VERSION,
};
use crate::trip_data::{
    generate_synthetic, load_csv, split, ColumnMap, DataError, Dataset, LabelTable, Profile, SplitOptions, TripMode,
};
use crate::vector_index::{IndexCompat, IndexEntry, IndexError, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("leakage guard: {0}")]
    Leakage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Serialization(#[from] SerializationError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mnl(#[from] MnlError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_DATA: i32 = 3;

impl ExperimentError {
    /// Process exit code: 1 configuration, 2 backend failure, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => EXIT_CONFIG,
            ExperimentError::Embed(EmbedError::Http(h))
            | ExperimentError::Retrieval(RetrievalError::Http(h))
            | ExperimentError::Llm(LlmError::Http(h)) => match h {
                HttpError::MissingCredential(_) => EXIT_CONFIG,
                _ => EXIT_BACKEND,
            },
            ExperimentError::Embed(EmbedError::Config(_))
            | ExperimentError::Retrieval(RetrievalError::Config(_))
            | ExperimentError::Llm(LlmError::Config(_))
            | ExperimentError::Mnl(MnlError::Config(_) | MnlError::NonFinite(_))
            | ExperimentError::Index(IndexError::Incompatible { .. }) => EXIT_CONFIG,
            ExperimentError::Embed(_) | ExperimentError::Llm(LlmError::MockMiss(_) | LlmError::EmptyResponse) => {
                EXIT_BACKEND
            }
            _ => EXIT_DATA,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A prediction method: the LLM alone or with one of the retrieval strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ZeroShot,
    Rag(Strategy),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ZeroShot,
        Method::Rag(Strategy::Basic),
        Method::Rag(Strategy::Balanced),
        Method::Rag(Strategy::Rerank),
        Method::Rag(Strategy::BalancedRerank),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Rag(s) => s.name(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "zero_shot" {
            return Ok(Method::ZeroShot);
        }
        s.parse::<Strategy>()
            .map(Method::Rag)
            .map_err(|_| format!("unknown strategy {s:?} (expected zero_shot, basic, balanced, rerank or balanced_rerank)"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub profile: Profile,
}

/// Where the trips come from. Exactly one source: a synthetic dataset, one
/// raw CSV to split, or a pre-split train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticConfig>,
    pub raw_csv: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub test_fraction: f64,
    pub stratified: bool,
    pub columns: ColumnMap,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: None,
            raw_csv: None,
            train_csv: None,
            test_csv: None,
            test_fraction: 0.2,
            stratified: false,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub strategy: StrategyConfig,
    pub llm: LlmBackendConfig,
    pub mnl: MnlConfig,
    pub out_dir: PathBuf,
    /// Drives the train/test split and the synthetic generator.
    pub seed: u64,
    /// Concurrent predictions in flight.
    pub max_inflight: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            embedder: EmbedderConfig::default(),
            strategy: StrategyConfig::default(),
            llm: LlmBackendConfig::default(),
            mnl: MnlConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 42,
            max_inflight: 4,
        }
    }
}

static ENV_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$").expect("valid env regex"));

/// Replace `"api_key": "${VAR}"` values with the variable's contents. Only
/// credential fields are interpolated, and they must be references: a literal
/// key in a config file is rejected.
fn interpolate_credentials(value: &mut serde_json::Value, path: &str) -> Result<(), ExperimentError> {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                let here = format!("{path}.{k}");
                if k == "api_key" {
                    match v {
                        serde_json::Value::Null => {}
                        serde_json::Value::String(s) => {
                            let var = ENV_REF
                                .captures(s)
                                .map(|c| c[1].to_string())
                                .ok_or_else(|| {
                                    ExperimentError::Config(format!(
                                        "{here} must reference an environment variable as \"${{NAME}}\""
                                    ))
                                })?;
                            let resolved = std::env::var(&var).map_err(|_| {
                                ExperimentError::Config(format!("{here}: environment variable {var} is not set"))
                            })?;
                            *v = serde_json::Value::String(resolved);
                        }
                        _ => return Err(ExperimentError::Config(format!("{here} must be a string"))),
                    }
                } else {
                    interpolate_credentials(v, &here)?;
                }
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                interpolate_credentials(v, &format!("{path}[{i}]"))?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ExperimentError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid config JSON: {e}")))?;
        interpolate_credentials(&mut value, "$")?;
        serde_json::from_value(value).map_err(|e| ExperimentError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.strategy.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.llm.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.embedder.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.max_inflight < 1 {
            return Err(ExperimentError::Config("max_inflight must be >= 1".into()));
        }
        let d = &self.data;
        let sources = [
            d.synthetic.is_some(),
            d.raw_csv.is_some(),
            d.train_csv.is_some() || d.test_csv.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(ExperimentError::Config(
                "data needs exactly one source: synthetic, raw_csv, or train_csv + test_csv".into(),
            ));
        }
        if d.train_csv.is_some() != d.test_csv.is_some() {
            return Err(ExperimentError::Config("train_csv and test_csv go together".into()));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(ExperimentError::Config(format!("test_fraction {} outside (0, 1)", d.test_fraction)));
        }
        for p in [&d.raw_csv, &d.train_csv, &d.test_csv].into_iter().flatten() {
            if !p.exists() {
                return Err(ExperimentError::Data(DataError::MissingFile(p.clone())));
            }
        }
        Ok(())
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            test_fraction: self.data.test_fraction,
            seed: self.seed,
            stratified: self.data.stratified,
        }
    }

    /// LLM response cache location.
    pub fn cache_path(&self) -> PathBuf {
        self.llm.cache_path.clone().unwrap_or_else(|| self.out_dir.join("cache.jsonl"))
    }

    pub fn index_path(&self) -> PathBuf {
        self.out_dir.join("index.bin")
    }

    pub fn documents_path(&self) -> PathBuf {
        self.out_dir.join("documents.jsonl")
    }

    pub fn predictions_path(&self, set: &str, method: &str) -> PathBuf {
        self.out_dir.join("predictions").join(set).join(format!("{method}.jsonl"))
    }

    pub fn reports_dir(&self, set: &str) -> PathBuf {
        self.out_dir.join("reports").join(set)
    }

    /// Write the resolved configuration into the run directory. Credentials
    /// are never serialized.
    pub fn write_snapshot(&self) -> Result<PathBuf, ExperimentError> {
        let path = self.out_dir.join("config.json");
        create_parent(&path)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}

fn create_parent(path: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

/// Masked query trips and their held-back labels.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub name: String,
    pub queries: Dataset,
    pub truth: LabelTable,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: QuerySet,
    pub dropped_train: usize,
}

/// Fail if any query id is also a knowledge-base id.
pub fn check_disjoint(kb_ids: &HashSet<u64>, query_ids: &HashSet<u64>) -> Result<(), ExperimentError> {
    let mut overlap: Vec<u64> = kb_ids.intersection(query_ids).copied().collect();
    if overlap.is_empty() {
        return Ok(());
    }
    overlap.sort_unstable();
    overlap.truncate(5);
    Err(ExperimentError::Leakage(format!(
        "query ids also present in the knowledge base (first: {overlap:?})"
    )))
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData, ExperimentError> {
    let d = &config.data;
    let (train, test, dropped_train, dropped_test) = if let Some(syn) = d.synthetic {
        let ds = generate_synthetic(syn.n, syn.profile, config.seed)?;
        let s = split(&ds, &config.split_options())?;
        (s.train, (s.test_queries, s.truth), 0, 0)
    } else if let Some(raw) = &d.raw_csv {
        let report = load_csv(raw, &d.columns)?;
        report.dataset.require_labels()?;
        let s = split(&report.dataset, &config.split_options())?;
        (s.train, (s.test_queries, s.truth), report.dropped_count(), 0)
    } else {
        let (Some(train_path), Some(test_path)) = (&d.train_csv, &d.test_csv) else {
            return Err(ExperimentError::Config("no data source configured".into()));
        };
        let train = load_csv(train_path, &d.columns)?;
        train.dataset.require_labels()?;
        let test = load_csv(test_path, &d.columns)?;
        let dropped = (train.dropped_count(), test.dropped_count());
        (train.dataset, test.dataset.mask_labels(), dropped.0, dropped.1)
    };
    check_disjoint(&train.ids(), &test.0.ids())?;
    Ok(PreparedData {
        train,
        test: QuerySet {
            name: "test".into(),
            queries: test.0,
            truth: test.1,
            dropped: dropped_test,
        },
        dropped_train,
    })
}

/// Load an external labeled CSV as a query set (labels masked).
pub fn load_query_set(path: &Path, columns: &ColumnMap) -> Result<QuerySet, ExperimentError> {
    let report = load_csv(path, columns)?;
    let dropped = report.dropped_count();
    let (queries, truth) = report.dataset.mask_labels();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    Ok(QuerySet {
        name,
        queries,
        truth,
        dropped,
    })
}

/// Labeled documents of the training trips and the index over them.
pub struct KnowledgeBase {
    pub documents: Vec<Document>,
    pub store: DocumentStore,
    pub index: VectorIndex,
}

impl KnowledgeBase {
    pub fn build(train: &Dataset, embedder: &dyn Embedder) -> Result<Self, ExperimentError> {
        train.require_labels()?;
        let documents = train
            .records()
            .iter()
            .map(|r| serialize_trip(r, true, &train.name))
            .collect::<Result<Vec<_>, _>>()?;
        let texts: Vec<&str> = documents.iter().map(|d| d.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        let entries = documents
            .iter()
            .zip(vectors)
            .map(|(d, v)| IndexEntry {
                doc_id: d.doc_id,
                mode: d.mode.expect("labeled document"),
                vector: v,
            })
            .collect();
        let index = VectorIndex::build(embedder.dim(), TEMPLATE_VERSION, embedder.fingerprint(), entries)?;
        Ok(KnowledgeBase {
            store: DocumentStore::new(documents.clone()),
            documents,
            index,
        })
    }

    pub fn save(&self, index_path: &Path, documents_path: &Path) -> Result<(), ExperimentError> {
        create_parent(index_path)?;
        create_parent(documents_path)?;
        self.index.save(index_path)?;
        let file = File::create(documents_path).map_err(io_err(documents_path))?;
        let mut w = BufWriter::new(file);
        write_jsonl(&self.documents, &mut w)?;
        w.flush().map_err(io_err(documents_path))?;
        Ok(())
    }

    /// Load a saved knowledge base, refusing one built with a different
    /// embedder or template.
    pub fn load(index_path: &Path, documents_path: &Path, expected: &IndexCompat) -> Result<Self, ExperimentError> {
        let index = VectorIndex::load_compatible(index_path, expected)?;
        let file = File::open(documents_path).map_err(io_err(documents_path))?;
        let documents = read_jsonl(BufReader::new(file))?;
        let doc_ids: HashSet<u64> = documents.iter().map(|d| d.doc_id).collect();
        if doc_ids != index.doc_ids() || doc_ids.len() != documents.len() {
            return Err(ExperimentError::Config(format!(
                "{} does not match {}",
                documents_path.display(),
                index_path.display()
            )));
        }
        Ok(KnowledgeBase {
            store: DocumentStore::new(documents.clone()),
            documents,
            index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFingerprint {
    #[serde(flatten)]
    pub compat: IndexCompat,
    pub entries: usize,
    pub class_histogram: [usize; crate::trip_data::NUM_MODES],
    pub sha256: String,
}

fn write_fingerprint(path: &Path, index_path: &Path, index: &VectorIndex) -> Result<(), ExperimentError> {
    let bytes = std::fs::read(index_path).map_err(io_err(index_path))?;
    let fp = IndexFingerprint {
        compat: index.compat(),
        entries: index.len(),
        class_histogram: index.class_histogram(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let text = serde_json::to_string_pretty(&fp).expect("fingerprint serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn expected_compat(embedder: &dyn Embedder) -> IndexCompat {
    IndexCompat {
        dim: embedder.dim(),
        template_version: TEMPLATE_VERSION.to_string(),
        embedder_fingerprint: embedder.fingerprint(),
    }
}

/// Serialized, embedded query trips.
pub struct EmbeddedQueries {
    pub documents: Vec<Document>,
    pub vectors: Vec<EmbeddingVector>,
}

impl EmbeddedQueries {
    pub fn build(queries: &Dataset, embedder: &dyn Embedder) -> Result<Self, ExperimentError> {
        let documents = queries
            .records()
            .iter()
            .map(|r| serialize_trip(&r.masked(), false, &queries.name))
            .collect::<Result<Vec<_>, _>>()?;
        let texts: Vec<&str> = documents.iter().map(|d| d.text.as_str()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&texts)?
        };
        Ok(EmbeddedQueries { documents, vectors })
    }

    pub fn ids(&self) -> HashSet<u64> {
        self.documents.iter().map(|d| d.doc_id).collect()
    }
}

/// Read completed predictions, tolerating a torn final line.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, ExperimentError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Prediction>(line) {
            Ok(p) => out.push(p),
            Err(_) if i + 1 == last => log::warn!("{}: ignoring partial last line", path.display()),
            Err(source) => {
                return Err(ExperimentError::Json {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
    }
    Ok(out)
}

fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        for p in predictions {
            serde_json::to_writer(&mut w, p).expect("prediction serializes");
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Everything a prediction pass needs.
pub struct PredictionRun<'a> {
    pub kb: &'a KnowledgeBase,
    pub queries: &'a EmbeddedQueries,
    pub gateway: &'a LlmGateway,
    pub strategy: &'a StrategyConfig,
    pub max_inflight: usize,
    /// Stop after this many new predictions (simulates an interrupted run).
    pub limit: Option<usize>,
}

impl PredictionRun<'_> {
    /// Predict every query under `method`, appending to `out` as results
    /// arrive. Ids already present in `out` are skipped, so an interrupted
    /// run resumes where it stopped. On completion the file is rewritten in
    /// query order.
    pub fn run(&self, method: Method, out: &Path) -> Result<Vec<Prediction>, ExperimentError> {
        let query_ids = self.queries.ids();
        check_disjoint(&self.kb.index.doc_ids(), &query_ids)?;
        let retriever = match method {
            Method::ZeroShot => None,
            Method::Rag(strategy) => Some(
                Retriever::new(
                    &self.kb.index,
                    &self.kb.store,
                    StrategyConfig {
                        strategy,
                        ..self.strategy.clone()
                    },
                )
                .map_err(|e| match e {
                    RetrievalError::Config(m) => ExperimentError::Config(m),
                    other => other.into(),
                })?,
            ),
        };

        create_parent(out)?;
        let mut done: HashMap<u64, Prediction> = HashMap::new();
        for p in read_predictions(out)? {
            if query_ids.contains(&p.query_doc_id) {
                done.insert(p.query_doc_id, p);
            }
        }
        // drop a torn tail before appending
        if !done.is_empty() || out.exists() {
            let mut kept: Vec<&Prediction> = done.values().collect();
            kept.sort_by_key(|p| p.query_doc_id);
            write_predictions(out, &kept.into_iter().cloned().collect::<Vec<_>>())?;
        }
        let pending: Vec<usize> = (0..self.queries.documents.len())
            .filter(|&i| !done.contains_key(&self.queries.documents[i].doc_id))
            .take(self.limit.unwrap_or(usize::MAX))
            .collect();
        if !done.is_empty() {
            log::info!("{method}: resuming with {} of {} done", done.len(), query_ids.len());
        }

        let appender = Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(out)
                .map_err(io_err(out))?,
        );
        let results = Mutex::new(Vec::with_capacity(pending.len()));
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let first_error: Mutex<Option<ExperimentError>> = Mutex::new(None);
        let workers = self.max_inflight.max(1).min(pending.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        return;
                    }
                    let slot = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = pending.get(slot) else {
                        return;
                    };
                    match self.predict(retriever.as_ref(), i) {
                        Ok(p) => {
                            let mut line = serde_json::to_string(&p).expect("prediction serializes");
                            line.push('\n');
                            let write = {
                                let mut f = appender.lock().expect("appender lock");
                                f.write_all(line.as_bytes()).and_then(|_| f.flush())
                            };
                            if let Err(e) = write {
                                failed.store(true, Ordering::Relaxed);
                                first_error.lock().expect("error lock").get_or_insert(io_err(out)(e));
                                return;
                            }
                            results.lock().expect("results lock").push(p);
                        }
                        Err(e) => {
                            failed.store(true, Ordering::Relaxed);
                            first_error.lock().expect("error lock").get_or_insert(e);
                            return;
                        }
                    }
                });
            }
        });

        if let Some(e) = first_error.into_inner().expect("error lock") {
            return Err(e);
        }
        for p in results.into_inner().expect("results lock") {
            done.insert(p.query_doc_id, p);
        }
        let ordered: Vec<Prediction> = self
            .queries
            .documents
            .iter()
            .filter_map(|d| done.remove(&d.doc_id))
            .collect();
        write_predictions(out, &ordered)?;
        Ok(ordered)
    }

    fn predict(&self, retriever: Option<&Retriever<'_>>, i: usize) -> Result<Prediction, ExperimentError> {
        let doc = &self.queries.documents[i];
        let retrieval = match retriever {
            None => None,
            Some(r) => {
                let result = r.retrieve(&Query {
                    doc_id: doc.doc_id,
                    vector: &self.queries.vectors[i],
                    text: doc.unlabeled_text(),
                })?;
                if result.items.iter().any(|it| it.doc_id == doc.doc_id) {
                    return Err(ExperimentError::Leakage(format!("query {} retrieved itself", doc.doc_id)));
                }
                Some(result)
            }
        };
        Ok(self.gateway.predict_one(doc, retrieval, &self.kb.store)?)
    }
}

/// Score and write `reports/<set>/<method>.json`.
pub fn write_report(dir: &Path, name: &str, report: &MetricsReport) -> Result<PathBuf, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn write_comparison(dir: &Path, table: &ComparisonTable) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (ext, body) in [
        ("txt", table.to_text()),
        ("csv", table.to_csv()?),
        ("json", table.to_json()? + "\n"),
    ] {
        let path = dir.join(format!("comparison.{ext}"));
        std::fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}

/// A prepared run: data, embedder and knowledge base ready for predictions.
pub struct Session {
    pub config: RunConfig,
    pub data: PreparedData,
    pub embedder: Box<dyn Embedder>,
    pub kb: KnowledgeBase,
}

impl Session {
    /// Prepare data and load the knowledge base from the run directory,
    /// building (and saving) it when absent.
    pub fn open(config: RunConfig) -> Result<Self, ExperimentError> {
        Self::open_with(config, true)
    }

    /// Like [`Session::open`], but the index must already exist in the run
    /// directory; it is loaded and never rebuilt.
    pub fn attach(config: RunConfig) -> Result<Self, ExperimentError> {
        Self::open_with(config, false)
    }

    fn open_with(mut config: RunConfig, build: bool) -> Result<Self, ExperimentError> {
        config.validate()?;
        let data = prepare_data(&config)?;
        if config.llm.majority_mode.is_none() {
            config.llm.majority_mode = data.train.majority_mode();
        }
        let embedder = build_embedder(&config.embedder)?;
        let kb = if build {
            Self::knowledge_base(&config, &data.train, embedder.as_ref())?
        } else {
            let (ip, dp) = (config.index_path(), config.documents_path());
            if !ip.exists() {
                return Err(ExperimentError::Config(format!(
                    "no index at {}; build it with the index command first",
                    ip.display()
                )));
            }
            KnowledgeBase::load(&ip, &dp, &expected_compat(embedder.as_ref()))?
        };
        check_disjoint(&kb.index.doc_ids(), &data.test.queries.ids())?;
        config.write_snapshot()?;
        Ok(Session {
            config,
            data,
            embedder,
            kb,
        })
    }

    fn knowledge_base(config: &RunConfig, train: &Dataset, embedder: &dyn Embedder) -> Result<KnowledgeBase, ExperimentError> {
        let (ip, dp) = (config.index_path(), config.documents_path());
        if ip.exists() && dp.exists() {
            let kb = KnowledgeBase::load(&ip, &dp, &expected_compat(embedder))?;
            if kb.index.doc_ids() == train.ids() {
                return Ok(kb);
            }
            log::info!("{}: training ids changed, rebuilding", ip.display());
        }
        let kb = KnowledgeBase::build(train, embedder)?;
        kb.save(&ip, &dp)?;
        write_fingerprint(&config.out_dir.join("index_fingerprint.json"), &ip, &kb.index)?;
        Ok(kb)
    }

    pub fn gateway(&self) -> Result<LlmGateway, ExperimentError> {
        let mut llm = self.config.llm.clone();
        llm.cache_path = Some(self.config.cache_path());
        Ok(LlmGateway::new(&llm)?)
    }

    pub fn embed(&self, set: &QuerySet) -> Result<EmbeddedQueries, ExperimentError> {
        EmbeddedQueries::build(&set.queries, self.embedder.as_ref())
    }

    /// Predict `set` under `method` (resuming any partial output) and
    /// return the predictions with the path they were written to.
    pub fn predict(
        &self,
        set: &QuerySet,
        queries: &EmbeddedQueries,
        gateway: &LlmGateway,
        method: Method,
        limit: Option<usize>,
    ) -> Result<(Vec<Prediction>, PathBuf), ExperimentError> {
        let out = self.config.predictions_path(&set.name, method.name());
        let preds = PredictionRun {
            kb: &self.kb,
            queries,
            gateway,
            strategy: &self.config.strategy,
            max_inflight: self.config.max_inflight,
            limit,
        }
        .run(method, &out)?;
        Ok((preds, out))
    }

    pub fn model_label(&self) -> String {
        self.config.llm.label()
    }
}

/// Score a saved predictions file against `truth` and write its report.
pub fn evaluate_file(
    predictions: &Path,
    truth: &LabelTable,
    reports_dir: &Path,
    name: &str,
) -> Result<MetricsReport, ExperimentError> {
    if !predictions.exists() {
        return Err(ExperimentError::Data(DataError::MissingFile(predictions.to_path_buf())));
    }
    let preds = read_predictions(predictions)?;
    let report = score(&preds, truth)?;
    write_report(reports_dir, name, &report)?;
    Ok(report)
}

/// Build a comparison table from every `<method>.json` report in `dir`.
/// The MNL report is labeled as its own model.
pub fn compare_dir(dir: &Path, model_label: &str) -> Result<ComparisonTable, ExperimentError> {
    let mut found = Vec::new();
    let listing = std::fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in listing {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("json") || stem == "comparison" {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|source| ExperimentError::Json { path: path.clone(), source })?;
        found.push((stem.to_string(), report));
    }
    let rank = |name: &str| {
        Method::ALL
            .iter()
            .position(|m| m.name() == name)
            .unwrap_or(Method::ALL.len())
    };
    found.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
    let rows: Vec<(String, String, MetricsReport)> = found
        .into_iter()
        .map(|(name, r)| {
            if name == "mnl" {
                ("mnl".to_string(), "-".to_string(), r)
            } else {
                (model_label.to_string(), name, r)
            }
        })
        .collect();
    let table = compare(&rows)?;
    write_comparison(dir, &table)?;
    Ok(table)
}

/// Outcome of [`run_all`].
pub struct RunSummary {
    pub reports: Vec<(String, String, MetricsReport)>,
    pub table: ComparisonTable,
}

/// Predict the test split under each method, score every run, fit the MNL
/// baseline when asked, and write the comparison table.
pub fn run_all(config: RunConfig, methods: &[Method], with_mnl: bool) -> Result<RunSummary, ExperimentError> {
    let session = Session::open(config)?;
    let gateway = session.gateway()?;
    let set = &session.data.test;
    let queries = session.embed(set)?;
    let reports_dir = session.config.reports_dir(&set.name);
    let mut reports = Vec::new();
    for &method in methods {
        let (preds, _) = session.predict(set, &queries, &gateway, method, None)?;
        let report = score(&preds, &set.truth)?;
        write_report(&reports_dir, method.name(), &report)?;
        log::info!("{method}: accuracy {:.3}", report.accuracy);
        reports.push((session.model_label(), method.name().to_string(), report));
    }
    if with_mnl {
        let report = run_mnl(&session.config, &session.data)?;
        reports.push(("mnl".to_string(), "-".to_string(), report));
    }
    let table = compare(&reports)?;
    write_comparison(&reports_dir, &table)?;
    Ok(RunSummary { reports, table })
}

/// Fit the MNL baseline on the training split, save it, and score it on the
/// test split.
pub fn run_mnl(config: &RunConfig, data: &PreparedData) -> Result<MetricsReport, ExperimentError> {
    let (model, fit) = MnlModel::fit(data.train.records(), config.mnl)?;
    log::info!(
        "mnl: {} epochs, converged {}, final gradient norm {:.3e}",
        fit.epochs,
        fit.converged,
        fit.final_grad_norm
    );
    let model_path = config.out_dir.join("mnl.json");
    create_parent(&model_path)?;
    model.save(&model_path)?;
    let preds: Vec<Prediction> = data
        .test
        .queries
        .records()
        .iter()
        .map(|r| {
            let mode = model.predict(r);
            Prediction {
                query_doc_id: r.record_id,
                mode,
                raw_output: mode.label().to_string(),
                backend: "mnl".into(),
                fallback_used: false,
                retrieval: None,
            }
        })
        .collect();
    let out = config.predictions_path(&data.test.name, "mnl");
    create_parent(&out)?;
    write_predictions(&out, &preds)?;
    let report = score(&preds, &data.test.truth)?;
    write_report(&config.reports_dir(&data.test.name), "mnl", &report)?;
    Ok(report)
}

/// True when running `method` with this configuration needs no network.
pub fn is_offline(config: &RunConfig, method: Method) -> bool {
    let embed_local = config.embedder.backend == EmbedderBackend::LocalHash;
    let llm_local = config.llm.backend != BackendKind::Remote;
    let rerank_local = match method {
        Method::Rag(s) if s.is_reranked() => config.strategy.reranker == crate::retrieval::RerankerKind::Reference,
        _ => true,
    };
    embed_local && llm_local && rerank_local
}

/// Modes of a label table in canonical order, for summaries.
pub fn truth_histogram(truth: &LabelTable) -> [usize; crate::trip_data::NUM_MODES] {
    let mut h = [0; crate::trip_data::NUM_MODES];
    for (_, m) in truth.iter() {
        h[m.index()] += 1;
    }
    h
}

pub fn format_histogram(hist: &[usize; crate::trip_data::NUM_MODES]) -> String {
    TripMode::ALL
        .iter()
        .zip(hist)
        .map(|(m, c)| format!("{m}={c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_config(dir: &Path, n: usize) -> RunConfig {
        RunConfig {
            data: DataConfig {
                synthetic: Some(SyntheticConfig {
                    n,
                    profile: Profile::Separable,
                }),
                ..DataConfig::default()
            },
            out_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bm25".parse::<Method>().is_err());
    }

    #[test]
    fn credentials_are_interpolated_only_from_references() {
        std::env::set_var("TRIPMODE_TEST_KEY_A", "sk-test");
        let cfg = RunConfig::from_json_str(r#"{"llm": {"api_key": "${TRIPMODE_TEST_KEY_A}"}, "out_dir": "${HOME}"}"#)
            .unwrap();
        assert_eq!(cfg.llm.api_key.as_deref(), Some("sk-test"));
        // non-credential fields are left alone
        assert_eq!(cfg.out_dir, PathBuf::from("${HOME}"));
        // secrets never reach the snapshot
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-test"));

        let literal = RunConfig::from_json_str(r#"{"llm": {"api_key": "sk-literal"}}"#).unwrap_err();
        assert_eq!(literal.exit_code(), EXIT_CONFIG);
        let unset = RunConfig::from_json_str(r#"{"embedder": {"api_key": "${TRIPMODE_TEST_UNSET_B}"}}"#).unwrap_err();
        assert!(unset.to_string().contains("TRIPMODE_TEST_UNSET_B"));
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let ok = synthetic_config(dir.path(), 100);
        ok.validate().unwrap();
        let mut two = ok.clone();
        two.data.raw_csv = Some(dir.path().join("x.csv"));
        assert_eq!(two.validate().unwrap_err().exit_code(), EXIT_CONFIG);
        let mut k = ok.clone();
        k.strategy.k = 30;
        assert_eq!(k.validate().unwrap_err().exit_code(), EXIT_CONFIG);
        let mut missing = RunConfig::default();
        missing.data.raw_csv = Some(dir.path().join("nope.csv"));
        assert_eq!(missing.validate().unwrap_err().exit_code(), EXIT_DATA);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let data = prepare_data(&synthetic_config(dir.path(), 2847)).unwrap();
        assert_eq!((data.train.len(), data.test.queries.len()), (2278, 569));
        assert!(data.train.ids().is_disjoint(&data.test.queries.ids()));
        assert!(data.test.queries.records().iter().all(|r| r.mode.is_none()));
        assert_eq!(data.test.truth.len(), 569);
    }

    #[test]
    fn overlapping_train_and_test_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(40, Profile::Marginal, 1).unwrap();
        let train = dir.path().join("train.csv");
        let test = dir.path().join("test.csv");
        crate::trip_data::write_csv(&ds, &train).unwrap();
        let overlap = Dataset::new("t", "t", ds.records()[30..].to_vec()).unwrap();
        crate::trip_data::write_csv(&overlap, &test).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.train_csv = Some(train);
        cfg.data.test_csv = Some(test);
        let err = prepare_data(&cfg).unwrap_err();
        assert!(matches!(err, ExperimentError::Leakage(_)));
        assert_eq!(err.exit_code(), EXIT_DATA);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_output() {
        let dir = tempfile::tempdir().unwrap();
        let full_dir = dir.path().join("full");
        let part_dir = dir.path().join("part");
        let session = Session::open(synthetic_config(&full_dir, 300)).unwrap();
        let gw = session.gateway().unwrap();
        let set = &session.data.test;
        let q = session.embed(set).unwrap();
        let method = Method::Rag(Strategy::BalancedRerank);
        let (full, full_path) = session.predict(set, &q, &gw, method, None).unwrap();
        assert_eq!(full.len(), 60);

        let session2 = Session::open(synthetic_config(&part_dir, 300)).unwrap();
        let gw2 = session2.gateway().unwrap();
        let (partial, part_path) = session2.predict(set, &q, &gw2, method, Some(25)).unwrap();
        assert_eq!(partial.len(), 25);
        // simulate a crash mid-write
        let mut f = OpenOptions::new().append(true).open(&part_path).unwrap();
        f.write_all(b"{\"query_doc_id\": 12, \"mo").unwrap();
        drop(f);
        let calls_before = gw2.backend_calls();
        let (resumed, _) = session2.predict(set, &q, &gw2, method, None).unwrap();
        assert_eq!(gw2.backend_calls() - calls_before, 35);
        assert_eq!(resumed, full);
        assert_eq!(std::fs::read(&full_path).unwrap(), std::fs::read(&part_path).unwrap());
    }

    #[test]
    fn zero_shot_predictions_carry_no_retrieval() {
        let dir = tempfile::tempdir().unwrap();
        let session = Session::open(synthetic_config(dir.path(), 120)).unwrap();
        let gw = session.gateway().unwrap();
        let q = session.embed(&session.data.test).unwrap();
        let (preds, _) = session.predict(&session.data.test, &q, &gw, Method::ZeroShot, None).unwrap();
        assert!(preds.iter().all(|p| p.retrieval.is_none()));
        let majority = session.data.train.majority_mode().unwrap();
        assert!(preds.iter().all(|p| p.mode == majority));
    }

    #[test]
    fn index_is_reused_and_fingerprint_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic_config(dir.path(), 100);
        Session::open(cfg.clone()).unwrap();
        let first = std::fs::read(cfg.index_path()).unwrap();
        Session::open(cfg.clone()).unwrap();
        assert_eq!(std::fs::read(cfg.index_path()).unwrap(), first);

        let mut other = cfg.clone();
        other.embedder.dim = 128;
        let err = Session::open(other).err().unwrap();
        assert!(matches!(err, ExperimentError::Index(IndexError::Incompatible { .. })));
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn offline_detection() {
        let cfg = RunConfig::default();
        assert!(is_offline(&cfg, Method::Rag(Strategy::Rerank)));
        let mut remote = cfg.clone();
        remote.llm.backend = BackendKind::Remote;
        assert!(!is_offline(&remote, Method::ZeroShot));
    }
}
