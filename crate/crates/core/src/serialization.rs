//! Table-to-text rendering of trip records.
//!
//! A single frozen sentence template covers every field. Embeddings are
//! sensitive to wording, so any change to the template must bump
//! [`TEMPLATE_VERSION`]; persisted indexes record the version they were built
//! with and refuse to load under a different one.

use std::io::{BufRead, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::trip_data::{
    AgeBand, Education, Gender, IncomeBand, TripMode, TripPurpose, TripRecord,
};

pub const TEMPLATE_VERSION: &str = "trip-sentences/v1";

const LABEL_PREFIX: &str = " Trip mode is ";

#[derive(Debug, thiserror::Error)]
pub enum SerializationError {
    #[error("record {0} has no mode to render")]
    MissingLabel(u64),
    #[error("text does not match the trip template: {0}")]
    TemplateMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSONL line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// A serialized trip. Knowledge-base documents carry their mode (and the text
/// ends with the label sentence); query documents carry neither.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub text: String,
    pub mode: Option<TripMode>,
    pub source_dataset: String,
}

impl Document {
    /// Text without the trailing label sentence.
    pub fn unlabeled_text(&self) -> &str {
        strip_label(&self.text)
    }
}

/// Documents addressable by id (the knowledge base behind an index).
#[derive(Debug, Clone, Default)]
pub struct DocumentStore {
    docs: std::collections::HashMap<u64, Document>,
}

impl DocumentStore {
    pub fn new(docs: impl IntoIterator<Item = Document>) -> Self {
        DocumentStore {
            docs: docs.into_iter().map(|d| (d.doc_id, d)).collect(),
        }
    }

    pub fn get(&self, doc_id: u64) -> Option<&Document> {
        self.docs.get(&doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Remove a trailing " Trip mode is <mode>." sentence if present.
pub fn strip_label(text: &str) -> &str {
    match text.rfind(LABEL_PREFIX) {
        Some(pos) if text.ends_with('.') => &text[..pos],
        _ => text,
    }
}

fn purpose_phrase(p: TripPurpose) -> &'static str {
    match p {
        TripPurpose::Home => "home",
        TripPurpose::Work => "work",
        TripPurpose::SocialRecreation => "social/recreation",
        TripPurpose::Shopping => "shopping",
        TripPurpose::Meal => "meal",
        TripPurpose::BusinessErrand => "business/errand",
        TripPurpose::Escort => "escort",
        TripPurpose::Overnight => "overnight",
        TripPurpose::School => "school",
        TripPurpose::ChangeMode => "change mode",
    }
}

fn age_phrase(a: AgeBand) -> &'static str {
    match a {
        AgeBand::Age18To24 => "18-24 years old",
        AgeBand::Age25To34 => "25-34 years old",
        AgeBand::Age35To44 => "35-44 years old",
        AgeBand::Age45To54 => "45-54 years old",
        AgeBand::Age55To64 => "55-64 years old",
        AgeBand::Age65To74 => "65-74 years old",
        AgeBand::Age75Plus => "75 years old or older",
    }
}

fn gender_phrase(g: Gender) -> &'static str {
    match g {
        Gender::Male => "male",
        Gender::Female => "female",
        Gender::NonBinary => "non-binary",
    }
}

fn pronoun(g: Gender) -> &'static str {
    match g {
        Gender::Male => "His",
        Gender::Female => "Her",
        Gender::NonBinary => "Their",
    }
}

fn education_phrase(e: Education) -> &'static str {
    match e {
        Education::LessThanHighSchool => "less than a high school education",
        Education::HighSchool => "a high school diploma",
        Education::SomeCollege => "some college education",
        Education::Vocational => "vocational/technical training",
        Education::Associates => "an Associate's degree",
        Education::Bachelor => "a Bachelor's degree",
        Education::Graduate => "a Graduate degree",
    }
}

fn income_phrase(i: IncomeBand) -> &'static str {
    match i {
        IncomeBand::Under25k => "under $25,000",
        IncomeBand::From25kTo50k => "$25,000-$49,999",
        IncomeBand::From50kTo75k => "$50,000-$74,999",
        IncomeBand::From75kTo100k => "$75,000-$99,999",
        IncomeBand::From100kTo200k => "$100,000-$199,999",
        IncomeBand::Over200k => "$200,000 or more",
    }
}

fn quantity(value: f64, singular: &str, plural: &str) -> String {
    let t = (value * 10.0).round() as i64;
    let number = if t % 10 == 0 {
        format!("{}", t / 10)
    } else {
        format!("{}.{}", t / 10, t % 10)
    };
    let unit = if t == 10 { singular } else { plural };
    format!("{number} {unit}")
}

fn render(record: &TripRecord) -> String {
    let minutes = (record.start_time_hours * 60.0).round() as i64;
    format!(
        "The trip distance is {}, and trip purpose is {}. Trip starts at {}:{:02}. \
         Traveler is {}, {}, with {}. {} household owns {}, and the household income is {}.",
        quantity(record.trip_distance_miles, "mile", "miles"),
        purpose_phrase(record.trip_purpose),
        minutes / 60,
        minutes % 60,
        age_phrase(record.age_band),
        gender_phrase(record.gender),
        education_phrase(record.education),
        pronoun(record.gender),
        quantity(record.household_vehicles, "vehicle", "vehicles"),
        income_phrase(record.income_band),
    )
}

/// Render a record as a document.
///
/// With `include_label` the text gains exactly one trailing sentence,
/// `" Trip mode is <mode>."`; nothing else changes.
pub fn serialize_trip(
    record: &TripRecord,
    include_label: bool,
    source_dataset: &str,
) -> Result<Document, SerializationError> {
    let mut text = render(record);
    let mode = if include_label {
        let mode = record
            .mode
            .ok_or(SerializationError::MissingLabel(record.record_id))?;
        text.push_str(LABEL_PREFIX);
        text.push_str(mode.label());
        text.push('.');
        Some(mode)
    } else {
        None
    };
    Ok(Document {
        doc_id: record.record_id,
        text,
        mode,
        source_dataset: source_dataset.to_string(),
    })
}

static TEMPLATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"^The trip distance is (\d+(?:\.\d)?) miles?, and trip purpose is (.+?)\. ",
        r"Trip starts at (\d{1,2}):(\d{2})\. ",
        r"Traveler is (.+?), (male|female|non-binary), with (.+?)\. ",
        r"(?:His|Her|Their) household owns (\d+(?:\.\d)?) vehicles?, and the household income is (.+?)\.",
        r"(?: Trip mode is (.+)\.)?$",
    ))
    .expect("valid template regex")
});

fn lookup<T: Copy>(all: &[T], phrase: impl Fn(T) -> &'static str, s: &str, what: &str) -> Result<T, SerializationError> {
    all.iter()
        .copied()
        .find(|&v| phrase(v) == s)
        .ok_or_else(|| SerializationError::TemplateMismatch(format!("unknown {what} {s:?}")))
}

fn tenths(s: &str) -> f64 {
    match s.split_once('.') {
        Some((whole, frac)) => {
            let whole: i64 = whole.parse().unwrap_or(0);
            let frac: i64 = frac.parse().unwrap_or(0);
            (whole * 10 + frac) as f64 / 10.0
        }
        None => s.parse::<i64>().unwrap_or(0) as f64,
    }
}

/// Inverse of [`serialize_trip`]. The parsed record carries `doc_id` as its
/// record id; the label sentence, when present, populates `mode`.
pub fn parse_document(doc_id: u64, text: &str) -> Result<TripRecord, SerializationError> {
    let caps = TEMPLATE
        .captures(text)
        .ok_or_else(|| SerializationError::TemplateMismatch(truncate(text)))?;
    let hours: i64 = caps[3].parse().unwrap_or(99);
    let minutes: i64 = caps[4].parse().unwrap_or(99);
    if hours >= 24 || minutes >= 60 {
        return Err(SerializationError::TemplateMismatch(format!(
            "invalid clock time {}:{}",
            &caps[3], &caps[4]
        )));
    }
    let gender = lookup(Gender::ALL, gender_phrase, &caps[6], "gender")?;
    let mode = caps
        .get(10)
        .map(|m| {
            m.as_str()
                .parse::<TripMode>()
                .map_err(|e| SerializationError::TemplateMismatch(e.to_string()))
        })
        .transpose()?;
    let record = TripRecord {
        record_id: doc_id,
        age_band: lookup(AgeBand::ALL, age_phrase, &caps[5], "age band")?,
        gender,
        education: lookup(Education::ALL, education_phrase, &caps[7], "education")?,
        income_band: lookup(IncomeBand::ALL, income_phrase, &caps[9], "income band")?,
        household_vehicles: tenths(&caps[8]),
        trip_distance_miles: tenths(&caps[1]),
        start_time_hours: (hours * 60 + minutes) as f64 / 60.0,
        trip_purpose: lookup(TripPurpose::ALL, purpose_phrase, &caps[2], "trip purpose")?,
        mode,
    };
    // pronoun, singular/plural and zero-padding are only accepted in their
    // canonical spelling
    let canonical = serialize_trip(&record, mode.is_some(), "")?.text;
    if canonical != text {
        return Err(SerializationError::TemplateMismatch(truncate(text)));
    }
    Ok(record)
}

fn truncate(text: &str) -> String {
    text.chars().take(60).collect()
}

/// Write one JSON object per document.
pub fn write_jsonl<W: Write>(docs: &[Document], mut out: W) -> Result<(), SerializationError> {
    for d in docs {
        serde_json::to_writer(&mut out, d).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Document>, SerializationError> {
    let mut docs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(
            serde_json::from_str(&line).map_err(|source| SerializationError::Json { line: i + 1, source })?,
        );
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trip_data::fixtures::example_record;
    use crate::trip_data::{generate_synthetic, Profile};
    use proptest::prelude::*;

    const EXAMPLE: &str = "The trip distance is 5 miles, and trip purpose is work. Trip starts at 7:00. \
        Traveler is 25-34 years old, female, with a Bachelor's degree. Her household owns 1 vehicle, \
        and the household income is $100,000-$199,999.";

    #[test]
    fn worked_example_renders_verbatim() {
        let doc = serialize_trip(&example_record(), false, "seattle").unwrap();
        assert_eq!(doc.text, EXAMPLE);
        assert_eq!(doc.mode, None);
        assert_eq!(doc.doc_id, 1);
    }

    #[test]
    fn label_adds_one_sentence() {
        let mut r = example_record();
        r.mode = Some(TripMode::Drive);
        let doc = serialize_trip(&r, true, "seattle").unwrap();
        assert_eq!(doc.text, format!("{EXAMPLE} Trip mode is Drive."));
        assert_eq!(doc.unlabeled_text(), EXAMPLE);
        let unlabeled = serialize_trip(&r, false, "seattle").unwrap();
        assert_eq!(unlabeled.text, EXAMPLE);
    }

    #[test]
    fn missing_label_is_an_error() {
        let err = serialize_trip(&example_record(), true, "x").unwrap_err();
        assert!(matches!(err, SerializationError::MissingLabel(1)));
    }

    #[test]
    fn serialization_is_deterministic() {
        let r = example_record();
        assert_eq!(
            serialize_trip(&r, false, "a").unwrap().text,
            serialize_trip(&r, false, "a").unwrap().text
        );
    }

    #[test]
    fn example_round_trips() {
        let r = example_record();
        let doc = serialize_trip(&r, false, "").unwrap();
        assert_eq!(parse_document(1, &doc.text).unwrap(), r);
    }

    #[test]
    fn free_text_rejected() {
        assert!(matches!(
            parse_document(0, "hello world"),
            Err(SerializationError::TemplateMismatch(_))
        ));
        // wrong pronoun for the gender
        let bad = EXAMPLE.replace("Her household", "His household");
        assert!(parse_document(0, &bad).is_err());
        let bad = EXAMPLE.replace("1 vehicle", "1 vehicles");
        assert!(parse_document(0, &bad).is_err());
    }

    #[test]
    fn singular_and_plural_units() {
        let mut r = example_record();
        r.trip_distance_miles = 1.0;
        r.household_vehicles = 0.0;
        r.gender = Gender::NonBinary;
        r.age_band = AgeBand::Age75Plus;
        let text = serialize_trip(&r, false, "").unwrap().text;
        assert!(text.contains("is 1 mile,"));
        assert!(text.contains("Their household owns 0 vehicles"));
        assert!(text.contains("75 years old or older, non-binary"));
        r.trip_distance_miles = 0.4;
        r.start_time_hours = 16.0 + 5.0 / 60.0;
        let text = serialize_trip(&r, false, "").unwrap().text;
        assert!(text.contains("is 0.4 miles,"));
        assert!(text.contains("starts at 16:05."));
    }

    #[test]
    fn every_vocabulary_value_round_trips() {
        let base = example_record();
        for &p in TripPurpose::ALL {
            for &e in Education::ALL {
                let r = TripRecord { trip_purpose: p, education: e, ..base.clone() };
                let text = serialize_trip(&r, false, "").unwrap().text;
                assert_eq!(parse_document(1, &text).unwrap(), r);
            }
        }
        for &a in AgeBand::ALL {
            for &i in IncomeBand::ALL {
                for &g in Gender::ALL {
                    for &m in TripMode::ALL {
                        let r = TripRecord {
                            age_band: a,
                            income_band: i,
                            gender: g,
                            mode: Some(m),
                            ..base.clone()
                        };
                        let text = serialize_trip(&r, true, "").unwrap().text;
                        assert_eq!(parse_document(1, &text).unwrap(), r);
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_records_round_trip() {
        let ds = generate_synthetic(200, Profile::Marginal, 8).unwrap();
        for r in ds.records() {
            let doc = serialize_trip(r, true, "syn").unwrap();
            assert_eq!(&parse_document(r.record_id, &doc.text).unwrap(), r);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate_synthetic(5, Profile::Separable, 8).unwrap();
        let docs: Vec<_> = ds
            .records()
            .iter()
            .map(|r| serialize_trip(r, true, "syn").unwrap())
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&docs, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().starts_with("{\"doc_id\":1,\"text\":\"The trip"));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), docs);
    }

    proptest! {
        #[test]
        fn label_flag_changes_only_the_trailing_sentence(
            seed in 0u64..1000,
        ) {
            let ds = generate_synthetic(4, Profile::Marginal, seed).unwrap();
            for r in ds.records() {
                let with = serialize_trip(r, true, "").unwrap().text;
                let without = serialize_trip(r, false, "").unwrap().text;
                prop_assert!(with.starts_with(&without));
                prop_assert_eq!(with.matches("Trip mode is").count(), 1);
                prop_assert_eq!(without.matches("Trip mode is").count(), 0);
            }
        }
    }
}
