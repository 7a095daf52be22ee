use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, TripMode, TripRecord};

/// Maps each record field to the column that carries it in a survey export.
///
/// The defaults are the canonical header written by [`write_csv`]; other
/// exports (e.g. a national survey with different column names) only need a
/// different mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub record_id: String,
    pub age_band: String,
    pub gender: String,
    pub education: String,
    pub income_band: String,
    pub household_vehicles: String,
    pub trip_distance_miles: String,
    pub start_time_hours: String,
    pub trip_purpose: String,
    pub mode: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            record_id: "record_id".into(),
            age_band: "age_band".into(),
            gender: "gender".into(),
            education: "education".into(),
            income_band: "income_band".into(),
            household_vehicles: "household_vehicles".into(),
            trip_distance_miles: "trip_distance_miles".into(),
            start_time_hours: "start_time_hours".into(),
            trip_purpose: "trip_purpose".into(),
            mode: "mode".into(),
        }
    }
}

impl ColumnMap {
    fn required(&self) -> [(&'static str, &str); 9] {
        [
            ("record_id", &self.record_id),
            ("age_band", &self.age_band),
            ("gender", &self.gender),
            ("education", &self.education),
            ("income_band", &self.income_band),
            ("household_vehicles", &self.household_vehicles),
            ("trip_distance_miles", &self.trip_distance_miles),
            ("start_time_hours", &self.start_time_hours),
            ("trip_purpose", &self.trip_purpose),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub dropped: Vec<DroppedRow>,
}

impl LoadReport {
    pub fn dropped_count(&self) -> usize {
        self.dropped.len()
    }
}

struct Columns {
    idx: [usize; 9],
    mode: Option<usize>,
}

fn parse_number(field: &str, raw: &str) -> Result<f64, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(format!("missing {field}"));
    }
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("unparseable {field} {raw:?}"))
}

/// Accepts decimal hours (`7.5`) or a clock time (`7:30`).
fn parse_start_time(raw: &str) -> Result<f64, String> {
    let raw = raw.trim();
    if let Some((h, m)) = raw.split_once(':') {
        let h: u32 = h.parse().map_err(|_| format!("unparseable start time {raw:?}"))?;
        let m: u32 = m.parse().map_err(|_| format!("unparseable start time {raw:?}"))?;
        if h >= 24 || m >= 60 {
            return Err(format!("start time out of range {raw:?}"));
        }
        return Ok(f64::from(h * 60 + m) / 60.0);
    }
    parse_number("start time", raw)
}

fn parse_row(row: &csv::StringRecord, cols: &Columns) -> Result<TripRecord, String> {
    let cell = |i: usize| row.get(cols.idx[i]).unwrap_or("").trim();
    let categorical = |i: usize, field: &str| -> Result<&str, String> {
        let v = cell(i);
        if v.is_empty() {
            Err(format!("missing {field}"))
        } else {
            Ok(v)
        }
    };

    let record_id: u64 = {
        let v = categorical(0, "record_id")?;
        v.parse().map_err(|_| format!("unparseable record_id {v:?}"))?
    };
    let age_band = categorical(1, "age_band")?.parse().map_err(|e| format!("{e}"))?;
    let gender = categorical(2, "gender")?.parse().map_err(|e| format!("{e}"))?;
    let education = categorical(3, "education")?.parse().map_err(|e| format!("{e}"))?;
    let income_band = categorical(4, "income_band")?.parse().map_err(|e| format!("{e}"))?;
    let household_vehicles = parse_number("household_vehicles", cell(5))?;
    let trip_distance_miles = parse_number("trip_distance_miles", cell(6))?;
    let start_time_hours = {
        let v = cell(7);
        if v.is_empty() {
            return Err("missing start_time_hours".into());
        }
        parse_start_time(v)?
    };
    let trip_purpose = categorical(8, "trip_purpose")?.parse().map_err(|e| format!("{e}"))?;
    let mode = match cols.mode.map(|i| row.get(i).unwrap_or("").trim()) {
        None | Some("") => None,
        Some(v) => Some(v.parse::<TripMode>().map_err(|e| format!("{e}"))?),
    };

    let record = TripRecord {
        record_id,
        age_band,
        gender,
        education,
        income_band,
        household_vehicles,
        trip_distance_miles,
        start_time_hours,
        trip_purpose,
        mode,
    };
    record.validate().map_err(|e| e.to_string())?;
    Ok(record.quantized())
}

/// Load a survey extract.
///
/// Rows with a missing or unparseable key field (including categorical values
/// outside the closed vocabularies) are dropped and reported. An empty or
/// absent mode cell yields an unlabeled record.
pub fn load_csv(path: &Path, columns: &ColumnMap) -> Result<LoadReport, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();

    let mut idx = [0usize; 9];
    for (slot, (field, column)) in idx.iter_mut().zip(columns.required()) {
        *slot = *header.get(column).ok_or_else(|| DataError::MissingColumn {
            field,
            column: column.to_string(),
        })?;
    }
    let cols = Columns {
        idx,
        mode: header.get(&columns.mode).copied(),
    };

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                dropped.push(DroppedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&row, &cols) {
            Ok(r) if !seen.insert(r.record_id) => dropped.push(DroppedRow {
                line,
                reason: format!("duplicate record_id {}", r.record_id),
            }),
            Ok(r) => records.push(r),
            Err(reason) => dropped.push(DroppedRow { line, reason }),
        }
    }
    if records.is_empty() {
        return Err(DataError::ZeroValidRows(path.display().to_string()));
    }
    if !dropped.is_empty() {
        log::info!("{}: dropped {} rows", path.display(), dropped.len());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dataset = Dataset::new(name, path.display().to_string(), records)?;
    Ok(LoadReport { dataset, dropped })
}

pub(crate) fn format_tenths(x: f64) -> String {
    let t = (x * 10.0).round() as i64;
    if t % 10 == 0 {
        format!("{}", t / 10)
    } else {
        format!("{}.{}", t / 10, t % 10)
    }
}

pub(crate) fn format_clock(hours: f64) -> String {
    let minutes = (hours * 60.0).round() as i64;
    format!("{}:{:02}", minutes / 60, minutes % 60)
}

/// Write a dataset with the canonical header. Labels are written when present.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let c = ColumnMap::default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        &c.record_id,
        &c.age_band,
        &c.gender,
        &c.education,
        &c.income_band,
        &c.household_vehicles,
        &c.trip_distance_miles,
        &c.start_time_hours,
        &c.trip_purpose,
        &c.mode,
    ])?;
    for r in dataset.records() {
        w.write_record([
            r.record_id.to_string().as_str(),
            r.age_band.label(),
            r.gender.label(),
            r.education.label(),
            r.income_band.label(),
            &format_tenths(r.household_vehicles),
            &format_tenths(r.trip_distance_miles),
            &format_clock(r.start_time_hours),
            r.trip_purpose.label(),
            r.mode.map(TripMode::label).unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}
