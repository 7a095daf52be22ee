use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tripmode_rag::experiment::{
    check_disjoint, compare_dir, evaluate_file, format_histogram, load_query_set, prepare_data, run_all, run_mnl,
    truth_histogram, ExperimentError, Method, QuerySet, RunConfig, Session, EXIT_CONFIG,
};
use tripmode_rag::llm::BackendKind;
use tripmode_rag::trip_data::{generate_synthetic_from, write_csv, Profile};

#[derive(Debug, Parser)]
#[command(name = "tripmode", version, about = "Travel mode choice prediction with retrieval-augmented LLMs")]
struct Cli {
    #[command(flatten)]
    opts: RunOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunOpts {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_method)]
    strategy: Option<Method>,
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long = "k-prime", global = true)]
    k_prime: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "max-inflight", global = true)]
    max_inflight: Option<usize>,
    /// Run directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled trip CSV.
    Synth {
        #[arg(long, default_value_t = 2847)]
        n: usize,
        #[arg(long, default_value = "separable")]
        profile: Profile,
        #[arg(long = "first-id", default_value_t = 1)]
        first_id: u64,
        /// Output CSV path.
        #[arg(long)]
        csv: PathBuf,
    },
    /// Load and split the configured data; write the splits to the run directory.
    Ingest,
    /// Build the vector index over the training split.
    Index,
    /// Predict the test split (or an external CSV) under one strategy.
    Predict {
        /// External labeled CSV scored against the existing index.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stop after this many new predictions.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score saved predictions.
    Evaluate {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Tabulate every report of a query set.
    Compare {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit and score the multinomial logit baseline.
    Mnl,
    /// Every strategy, zero-shot and the baseline, then the comparison.
    Run,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

impl RunOpts {
    fn resolve(&self) -> Result<RunConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(Method::Rag(s)) = self.strategy {
            c.strategy.strategy = s;
        }
        if let Some(b) = self.backend {
            c.llm.backend = b;
        }
        if let Some(m) = &self.model {
            c.llm.model_name = m.clone();
        }
        if let Some(k) = self.k {
            c.strategy.k = k;
        }
        if let Some(k) = self.k_prime {
            c.strategy.k_prime = k;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.max_inflight {
            c.max_inflight = n;
        }
        if let Some(out) = &self.out {
            c.out_dir = out.clone();
        }
        Ok(c)
    }

    fn method(&self, config: &RunConfig) -> Method {
        self.strategy.unwrap_or(Method::Rag(config.strategy.strategy))
    }
}

fn external_set(config: &RunConfig, input: &std::path::Path) -> Result<QuerySet, ExperimentError> {
    let set = load_query_set(input, &config.data.columns)?;
    println!(
        "{}: {} trips loaded, {} rows dropped",
        input.display(),
        set.queries.len(),
        set.dropped
    );
    Ok(set)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let opts = &cli.opts;
    match cli.command {
        Command::Synth {
            n,
            profile,
            first_id,
            csv,
        } => {
            let seed = opts.seed.unwrap_or(42);
            let ds = generate_synthetic_from(n, profile, seed, first_id)?;
            if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            write_csv(&ds, &csv)?;
            println!("wrote {} trips to {}", ds.len(), csv.display());
            println!("classes: {}", format_histogram(&ds.class_histogram()));
        }
        Command::Ingest => {
            let config = opts.resolve()?;
            config.validate()?;
            let data = prepare_data(&config)?;
            let dir = config.out_dir.join("data");
            std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
                path: dir.clone(),
                source,
            })?;
            write_csv(&data.train, &dir.join("train.csv"))?;
            write_csv(&data.test.queries, &dir.join("test_queries.csv"))?;
            data.test.truth.write_csv(&dir.join("test_labels.csv"))?;
            config.write_snapshot()?;
            println!(
                "train: {} trips ({} rows dropped)",
                data.train.len(),
                data.dropped_train
            );
            println!("classes: {}", format_histogram(&data.train.class_histogram()));
            println!("test: {} trips ({} rows dropped)", data.test.queries.len(), data.test.dropped);
            println!("classes: {}", format_histogram(&truth_histogram(&data.test.truth)));
        }
        Command::Index => {
            let session = Session::open(opts.resolve()?)?;
            let index = &session.kb.index;
            println!("indexed {} documents", index.len());
            println!("classes: {}", format_histogram(&index.class_histogram()));
            println!("embedder: {}", index.compat().embedder_fingerprint);
            println!("index: {}", session.config.index_path().display());
        }
        Command::Predict { input, limit } => {
            let config = opts.resolve()?;
            let method = opts.method(&config);
            let session = match input {
                Some(_) => Session::attach(config)?,
                None => Session::open(config)?,
            };
            let set = match &input {
                Some(path) => {
                    let set = external_set(&session.config, path)?;
                    check_disjoint(&session.kb.index.doc_ids(), &set.queries.ids())?;
                    set
                }
                None => session.data.test.clone(),
            };
            let gateway = session.gateway()?;
            let queries = session.embed(&set)?;
            let (preds, path) = session.predict(&set, &queries, &gateway, method, limit)?;
            let fallbacks = preds.iter().filter(|p| p.fallback_used).count();
            println!(
                "{method}: {} of {} predictions in {} ({} backend calls, {} cache hits, {} fallbacks)",
                preds.len(),
                set.queries.len(),
                path.display(),
                gateway.backend_calls(),
                gateway.cache_hits(),
                fallbacks
            );
        }
        Command::Evaluate { input } => {
            let config = opts.resolve()?;
            let method = opts.method(&config);
            let set = match &input {
                Some(path) => external_set(&config, path)?,
                None => {
                    config.validate()?;
                    prepare_data(&config)?.test
                }
            };
            let preds = config.predictions_path(&set.name, method.name());
            let report = evaluate_file(&preds, &set.truth, &config.reports_dir(&set.name), method.name())?;
            println!(
                "{method} on {}: n={} accuracy={:.4} weighted_f1={:.4} weighted_precision={:.4} weighted_recall={:.4} fallbacks={}",
                set.name,
                report.n,
                report.accuracy,
                report.weighted_f1,
                report.weighted_precision,
                report.weighted_recall,
                report.fallback_count
            );
        }
        Command::Compare { input } => {
            let config = opts.resolve()?;
            let set_name = match &input {
                Some(path) => load_query_set(path, &config.data.columns)?.name,
                None => "test".to_string(),
            };
            let table = compare_dir(&config.reports_dir(&set_name), &config.llm.label())?;
            print!("{}", table.to_text());
        }
        Command::Mnl => {
            let config = opts.resolve()?;
            config.validate()?;
            let data = prepare_data(&config)?;
            let report = run_mnl(&config, &data)?;
            println!(
                "mnl on {}: n={} accuracy={:.4} weighted_f1={:.4}",
                data.test.name, report.n, report.accuracy, report.weighted_f1
            );
        }
        Command::Run => {
            let config = opts.resolve()?;
            let methods: Vec<Method> = match opts.strategy {
                Some(m) => vec![m],
                None => Method::ALL.to_vec(),
            };
            let summary = run_all(config, &methods, true)?;
            print!("{}", summary.table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tripmode_rag::retrieval::Strategy;

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "tripmode", "predict", "--strategy", "rerank", "--k", "3", "--k-prime", "9", "--backend", "mock",
            "--model", "o3-mini", "--seed", "7", "--max-inflight", "2", "--out", "/tmp/x",
        ])
        .unwrap();
        let c = cli.opts.resolve().unwrap();
        assert_eq!(c.strategy.strategy, Strategy::Rerank);
        assert_eq!((c.strategy.k, c.strategy.k_prime), (3, 9));
        assert_eq!(c.llm.backend, BackendKind::Mock);
        assert_eq!(c.llm.model_name, "o3-mini");
        assert_eq!((c.seed, c.max_inflight), (7, 2));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn zero_shot_keeps_configured_strategy() {
        let cli = Cli::try_parse_from(["tripmode", "predict", "--strategy", "zero_shot"]).unwrap();
        let c = cli.opts.resolve().unwrap();
        assert_eq!(cli.opts.method(&c), Method::ZeroShot);
        assert_eq!(c.strategy.strategy, RunConfig::default().strategy.strategy);
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        assert!(Cli::try_parse_from(["tripmode", "predict", "--strategy", "bm25"]).is_err());
    }
}
