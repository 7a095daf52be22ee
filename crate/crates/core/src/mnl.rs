//! Multinomial logit baseline: one-hot categorical and standardized numeric
//! features, softmax over the four modes, trained by full-batch gradient
//! descent with L2 regularization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trip_data::{AgeBand, Education, Gender, IncomeBand, TripMode, TripPurpose, TripRecord, NUM_MODES};

#[derive(Debug, thiserror::Error)]
pub enum MnlError {
    #[error("training set is empty")]
    Empty,
    #[error("training record {0} has no mode label")]
    Unlabeled(u64),
    #[error("loss became non-finite at epoch {0}; lower the learning rate")]
    NonFinite(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("saved model does not match this build: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const NUMERIC_FIELDS: [&str; 3] = ["trip_distance_miles", "start_time_hours", "household_vehicles"];

fn labels<T: Copy>(all: &[T], label: impl Fn(T) -> &'static str) -> Vec<String> {
    all.iter().map(|&v| label(v).to_string()).collect()
}

/// Feature map: one block of one-hot columns per categorical field, then the
/// numeric fields standardized with training-set mean and SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub vocabularies: Vec<(String, Vec<String>)>,
    pub numeric_fields: Vec<String>,
    pub means: [f64; 3],
    pub sds: [f64; 3],
}

fn numerics(r: &TripRecord) -> [f64; 3] {
    [r.trip_distance_miles, r.start_time_hours, r.household_vehicles]
}

impl FeatureEncoder {
    fn current_vocabularies() -> Vec<(String, Vec<String>)> {
        vec![
            ("age_band".into(), labels(AgeBand::ALL, AgeBand::label)),
            ("gender".into(), labels(Gender::ALL, Gender::label)),
            ("education".into(), labels(Education::ALL, Education::label)),
            ("income_band".into(), labels(IncomeBand::ALL, IncomeBand::label)),
            ("trip_purpose".into(), labels(TripPurpose::ALL, TripPurpose::label)),
        ]
    }

    /// Standardization constants from `records` (population SD; a constant
    /// column gets SD 1).
    pub fn fit(records: &[TripRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut means = [0.0; 3];
        for r in records {
            for (m, x) in means.iter_mut().zip(numerics(r)) {
                *m += x / n;
            }
        }
        let mut vars = [0.0; 3];
        for r in records {
            for ((v, x), m) in vars.iter_mut().zip(numerics(r)).zip(means) {
                *v += (x - m).powi(2) / n;
            }
        }
        let sds = vars.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        FeatureEncoder {
            vocabularies: Self::current_vocabularies(),
            numeric_fields: NUMERIC_FIELDS.iter().map(|s| s.to_string()).collect(),
            means,
            sds,
        }
    }

    pub fn dim(&self) -> usize {
        self.vocabularies.iter().map(|(_, v)| v.len()).sum::<usize>() + self.numeric_fields.len()
    }

    pub fn encode(&self, r: &TripRecord) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let mut offset = 0;
        let hot = [
            (r.age_band.index(), AgeBand::ALL.len()),
            (r.gender.index(), Gender::ALL.len()),
            (r.education.index(), Education::ALL.len()),
            (r.income_band.index(), IncomeBand::ALL.len()),
            (r.trip_purpose.index(), TripPurpose::ALL.len()),
        ];
        for (i, width) in hot {
            x[offset + i] = 1.0;
            offset += width;
        }
        for (j, v) in numerics(r).into_iter().enumerate() {
            x[offset + j] = (v - self.means[j]) / self.sds[j];
        }
        x
    }

    fn check_compatible(&self) -> Result<(), MnlError> {
        if self.vocabularies != Self::current_vocabularies() {
            return Err(MnlError::Incompatible("categorical vocabularies differ".into()));
        }
        if self.numeric_fields != NUMERIC_FIELDS {
            return Err(MnlError::Incompatible("numeric fields differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnlConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls to this value.
    pub tolerance: f64,
}

impl Default for MnlConfig {
    fn default() -> Self {
        MnlConfig {
            learning_rate: 0.1,
            l2: 1e-4,
            max_epochs: 5000,
            tolerance: 1e-6,
        }
    }
}

/// Linear utilities `x·W[:, m] + b[m]` and their softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlModel {
    pub encoder: FeatureEncoder,
    /// Row-major `dim × 4`: `weights[f * 4 + m]`.
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_MODES],
    pub config: MnlConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    /// Objective before each update, then the final value.
    pub loss_history: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64; NUM_MODES]) -> [f64; NUM_MODES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|z| (z - max).exp());
    let total: f64 = exps.iter().sum();
    exps.map(|e| e / total)
}

/// Index of the largest probability; ties go to the earlier mode.
pub fn argmax(p: &[f64; NUM_MODES]) -> usize {
    let mut best = 0;
    for i in 1..NUM_MODES {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Parameters flattened as weights followed by bias.
fn logits(params: &[f64], dim: usize, x: &[f64]) -> [f64; NUM_MODES] {
    let mut z = [0.0; NUM_MODES];
    z.copy_from_slice(&params[dim * NUM_MODES..]);
    for (f, &xf) in x.iter().enumerate() {
        if xf != 0.0 {
            let row = &params[f * NUM_MODES..(f + 1) * NUM_MODES];
            for m in 0..NUM_MODES {
                z[m] += xf * row[m];
            }
        }
    }
    z
}

/// Mean cross-entropy plus `l2/2 · ||W||²` (bias unpenalized), and its
/// gradient in the flattened parameter layout.
pub fn objective(params: &[f64], features: &[Vec<f64>], labels: &[usize], l2: f64) -> (f64, Vec<f64>) {
    let dim = features.first().map_or(0, Vec::len);
    let n = features.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let p = softmax(&logits(params, dim, x));
        loss -= p[y].max(f64::MIN_POSITIVE).ln() / n;
        let mut resid = p;
        resid[y] -= 1.0;
        for (f, &xf) in x.iter().enumerate() {
            if xf != 0.0 {
                for m in 0..NUM_MODES {
                    grad[f * NUM_MODES + m] += xf * resid[m] / n;
                }
            }
        }
        for m in 0..NUM_MODES {
            grad[dim * NUM_MODES + m] += resid[m] / n;
        }
    }
    let w = &params[..dim * NUM_MODES];
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in grad.iter_mut().zip(w) {
        *g += l2 * v;
    }
    (loss, grad)
}

impl MnlModel {
    /// All-zero parameters: uniform probabilities.
    pub fn zeros(encoder: FeatureEncoder, config: MnlConfig) -> Self {
        let dim = encoder.dim();
        MnlModel {
            encoder,
            weights: vec![0.0; dim * NUM_MODES],
            bias: [0.0; NUM_MODES],
            config,
        }
    }

    /// Fit on labeled records, standardizing with their own statistics.
    pub fn fit(train: &[TripRecord], config: MnlConfig) -> Result<(MnlModel, FitReport), MnlError> {
        if train.is_empty() {
            return Err(MnlError::Empty);
        }
        if !(config.learning_rate > 0.0 && config.l2 >= 0.0 && config.tolerance >= 0.0) {
            return Err(MnlError::Config(format!("{config:?}")));
        }
        let labels = train
            .iter()
            .map(|r| r.mode.map(TripMode::index).ok_or(MnlError::Unlabeled(r.record_id)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut present = [false; NUM_MODES];
        for &y in &labels {
            present[y] = true;
        }
        for (m, seen) in TripMode::ALL.iter().zip(present) {
            if !seen {
                log::warn!("no training records with mode {m}; its utility is driven by regularization only");
            }
        }
        let encoder = FeatureEncoder::fit(train);
        let features: Vec<Vec<f64>> = train.iter().map(|r| encoder.encode(r)).collect();
        let dim = encoder.dim();
        let mut params = vec![0.0; (dim + 1) * NUM_MODES];
        let mut history = Vec::new();
        let mut report = FitReport {
            epochs: 0,
            converged: false,
            final_grad_norm: f64::INFINITY,
            loss_history: Vec::new(),
        };
        for epoch in 0..=config.max_epochs {
            let (loss, grad) = objective(&params, &features, &labels, config.l2);
            if !loss.is_finite() {
                return Err(MnlError::NonFinite(epoch));
            }
            history.push(loss);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            report.final_grad_norm = norm;
            report.epochs = epoch;
            if norm <= config.tolerance {
                report.converged = true;
                break;
            }
            if epoch == config.max_epochs {
                break;
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        report.loss_history = history;
        let mut model = MnlModel::zeros(encoder, config);
        model.weights.copy_from_slice(&params[..dim * NUM_MODES]);
        model.bias.copy_from_slice(&params[dim * NUM_MODES..]);
        Ok((model, report))
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn utilities(&self, record: &TripRecord) -> [f64; NUM_MODES] {
        logits(&self.params(), self.encoder.dim(), &self.encoder.encode(record))
    }

    pub fn predict_proba(&self, record: &TripRecord) -> [f64; NUM_MODES] {
        softmax(&self.utilities(record))
    }

    pub fn predict(&self, record: &TripRecord) -> TripMode {
        TripMode::ALL[argmax(&self.predict_proba(record))]
    }

    /// Share of labeled records predicted correctly.
    pub fn accuracy(&self, records: &[TripRecord]) -> f64 {
        let labeled: Vec<_> = records.iter().filter(|r| r.mode.is_some()).collect();
        if labeled.is_empty() {
            return 0.0;
        }
        let hits = labeled.iter().filter(|r| r.mode == Some(self.predict(r))).count();
        hits as f64 / labeled.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), MnlError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MnlError> {
        let model: MnlModel = serde_json::from_slice(&std::fs::read(path)?)?;
        model.encoder.check_compatible()?;
        if model.weights.len() != model.encoder.dim() * NUM_MODES {
            return Err(MnlError::Incompatible(format!(
                "{} weights for feature dimension {}",
                model.weights.len(),
                model.encoder.dim()
            )));
        }
        if !model.weights.iter().chain(&model.bias).all(|v| v.is_finite()) {
            return Err(MnlError::Incompatible("non-finite parameters".into()));
        }
        Ok(model)
    }
}
