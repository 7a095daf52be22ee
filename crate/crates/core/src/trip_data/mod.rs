//! Trip data model: records, datasets, label tables and their ingestion.

mod csv_io;
mod split;
mod synth;
mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv, ColumnMap, DroppedRow, LoadReport};
pub use split::{split, Split, SplitOptions};
pub use synth::{generate_synthetic, generate_synthetic_from, separable_rule, Profile};
pub use vocab::{
    AgeBand, Education, Gender, IncomeBand, TripMode, TripPurpose, UnknownValue, NUM_MODES,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("column {column:?} (for field {field}) missing from header")]
    MissingColumn { field: &'static str, column: String },
    #[error("zero valid rows in {0}")]
    ZeroValidRows(String),
    #[error("duplicate record_id {0}")]
    DuplicateId(u64),
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: u64, reason: String },
    #[error("split of {n} records at test fraction {fraction} leaves an empty side")]
    DegenerateSplit { n: usize, fraction: f64 },
    #[error("record {0} has no mode label")]
    Unlabeled(u64),
    #[error("synthetic dataset needs n >= 4, got {0}")]
    TooSmall(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One surveyed trip: traveler attributes, trip attributes and the (optional)
/// chosen mode.
///
/// Numeric fields live on a fixed grid: distance and vehicle counts in tenths,
/// start time in whole minutes. [`TripRecord::quantized`] snaps arbitrary
/// values onto it; the text serialization relies on that grid to round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub record_id: u64,
    pub age_band: AgeBand,
    pub gender: Gender,
    pub education: Education,
    pub income_band: IncomeBand,
    pub household_vehicles: f64,
    pub trip_distance_miles: f64,
    pub start_time_hours: f64,
    pub trip_purpose: TripPurpose,
    pub mode: Option<TripMode>,
}

/// Snap a non-negative quantity to one decimal place.
pub fn quantize_tenths(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Snap a clock time in hours to the nearest whole minute, wrapping at 24:00.
pub fn quantize_minutes(hours: f64) -> f64 {
    let minutes = ((hours * 60.0).round() as i64).rem_euclid(24 * 60);
    minutes as f64 / 60.0
}

impl TripRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: &str| DataError::InvalidRecord {
            id: self.record_id,
            reason: reason.to_string(),
        };
        if !(self.trip_distance_miles.is_finite() && self.trip_distance_miles >= 0.0) {
            return Err(invalid("trip distance must be a finite non-negative number"));
        }
        if !(self.household_vehicles.is_finite() && self.household_vehicles >= 0.0) {
            return Err(invalid("household vehicles must be a finite non-negative number"));
        }
        if !(self.start_time_hours >= 0.0 && self.start_time_hours < 24.0) {
            return Err(invalid("start time must lie in [0, 24)"));
        }
        Ok(())
    }

    /// Copy with numeric fields snapped onto the serialization grid.
    pub fn quantized(&self) -> TripRecord {
        TripRecord {
            household_vehicles: quantize_tenths(self.household_vehicles),
            trip_distance_miles: quantize_tenths(self.trip_distance_miles),
            start_time_hours: quantize_minutes(self.start_time_hours),
            ..self.clone()
        }
    }

    /// Copy with the mode label removed, as handed to the predictor.
    pub fn masked(&self) -> TripRecord {
        TripRecord {
            mode: None,
            ..self.clone()
        }
    }
}

/// An ordered, immutable collection of trip records with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub source: String,
    records: Vec<TripRecord>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        source: impl Into<String>,
        records: Vec<TripRecord>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.record_id) {
                return Err(DataError::DuplicateId(r.record_id));
            }
        }
        Ok(Dataset {
            name: name.into(),
            source: source.into(),
            records,
        })
    }

    pub fn records(&self) -> &[TripRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> HashSet<u64> {
        self.records.iter().map(|r| r.record_id).collect()
    }

    /// Records per mode in canonical order; unlabeled records are not counted.
    pub fn class_histogram(&self) -> [usize; NUM_MODES] {
        let mut hist = [0; NUM_MODES];
        for m in self.records.iter().filter_map(|r| r.mode) {
            hist[m.index()] += 1;
        }
        hist
    }

    /// Most frequent mode; ties go to the earlier mode in canonical order.
    pub fn majority_mode(&self) -> Option<TripMode> {
        majority_of_histogram(&self.class_histogram())
    }

    /// Split into masked queries and a separate ground-truth table.
    pub fn mask_labels(&self) -> (Dataset, LabelTable) {
        let truth = LabelTable::from_records(&self.records);
        let masked = Dataset {
            name: self.name.clone(),
            source: self.source.clone(),
            records: self.records.iter().map(TripRecord::masked).collect(),
        };
        (masked, truth)
    }

    pub fn require_labels(&self) -> Result<(), DataError> {
        match self.records.iter().find(|r| r.mode.is_none()) {
            Some(r) => Err(DataError::Unlabeled(r.record_id)),
            None => Ok(()),
        }
    }
}

pub(crate) fn majority_of_histogram(hist: &[usize; NUM_MODES]) -> Option<TripMode> {
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in hist.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, bc)| c > bc) {
            best = Some((i, c));
        }
    }
    best.and_then(|(i, _)| TripMode::from_index(i))
}

/// Held-back ground truth keyed by record id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable(BTreeMap<u64, TripMode>);

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    record_id: u64,
    mode: TripMode,
}

impl LabelTable {
    pub fn from_records(records: &[TripRecord]) -> Self {
        LabelTable(
            records
                .iter()
                .filter_map(|r| r.mode.map(|m| (r.record_id, m)))
                .collect(),
        )
    }

    pub fn get(&self, id: u64) -> Option<TripMode> {
        self.0.get(&id).copied()
    }

    pub fn insert(&mut self, id: u64, mode: TripMode) {
        self.0.insert(id, mode);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, TripMode)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Write as CSV with header `record_id,mode`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        for (record_id, mode) in self.iter() {
            w.serialize(LabelRow { record_id, mode })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self, DataError> {
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut table = LabelTable::default();
        for row in r.deserialize() {
            let row: LabelRow = row?;
            table.insert(row.record_id, row.mode);
        }
        Ok(table)
    }
}
