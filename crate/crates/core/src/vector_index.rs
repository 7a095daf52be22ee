//! Exact (flat) cosine index over labeled knowledge-base documents.
//!
//! Every query scans all entries. At the corpus sizes this crate targets
//! (a few thousand trips) that costs well under a millisecond per query and
//! keeps retrieval sets exact.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "TRIPIDX\0"
//! format version   u32
//! dim              u32
//! count            u64
//! template version u32 length + UTF-8 bytes
//! fingerprint      u32 length + UTF-8 bytes
//! table            count x (doc_id u64, mode u8)
//! vectors          count x dim x f32
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::trip_data::TripMode;

pub const MAGIC: &[u8; 8] = b"TRIPIDX\0";
pub const FORMAT_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("entry {0} is not L2-normalized")]
    NotNormalized(u64),
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(u64),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("incompatible index: {field} is {found:?}, expected {expected:?}")]
    Incompatible {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: u64,
    pub mode: TripMode,
    pub vector: EmbeddingVector,
}

/// A scored index entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub doc_id: u64,
    pub similarity: f64,
    pub mode: TripMode,
}

/// Descending similarity, ties by ascending doc id.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.doc_id.cmp(&b.doc_id))
}

/// Result of a per-class search.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHits {
    pub hits: Vec<Hit>,
    /// The class held fewer matching entries than requested.
    pub shortfall: bool,
}

/// What an index must agree on with the embedder that queries it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCompat {
    pub dim: usize,
    pub template_version: String,
    pub embedder_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    template_version: String,
    embedder_fingerprint: String,
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok((dot(a.values(), b.values()) / (na * nb)).clamp(-1.0, 1.0))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

impl VectorIndex {
    pub fn build(
        dim: usize,
        template_version: impl Into<String>,
        embedder_fingerprint: impl Into<String>,
        entries: Vec<IndexEntry>,
    ) -> Result<Self, IndexError> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.dim(),
                });
            }
            let n = e.vector.norm();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::NotNormalized(e.doc_id));
            }
            if !seen.insert(e.doc_id) {
                return Err(IndexError::DuplicateDocId(e.doc_id));
            }
            norms.push(n);
        }
        Ok(VectorIndex {
            dim,
            template_version: template_version.into(),
            embedder_fingerprint: embedder_fingerprint.into(),
            entries,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn template_version(&self) -> &str {
        &self.template_version
    }

    pub fn embedder_fingerprint(&self) -> &str {
        &self.embedder_fingerprint
    }

    pub fn compat(&self) -> IndexCompat {
        IndexCompat {
            dim: self.dim,
            template_version: self.template_version.clone(),
            embedder_fingerprint: self.embedder_fingerprint.clone(),
        }
    }

    pub fn doc_ids(&self) -> HashSet<u64> {
        self.entries.iter().map(|e| e.doc_id).collect()
    }

    pub fn class_histogram(&self) -> [usize; crate::trip_data::NUM_MODES] {
        let mut h = [0; crate::trip_data::NUM_MODES];
        for e in &self.entries {
            h[e.mode.index()] += 1;
        }
        h
    }

    /// Top-`k` entries passing `keep`, by cosine similarity.
    pub fn search_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(&IndexEntry) -> bool,
    ) -> Result<Vec<Hit>, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k < 1 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .zip(&self.norms)
            .filter(|(e, _)| keep(e))
            .map(|(e, &n)| Hit {
                doc_id: e.doc_id,
                similarity: dot(query.values(), e.vector.values()) / (qn * n),
                mode: e.mode,
            })
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        Ok(hits)
    }

    /// Exact top-`k` over the whole index; returns `min(k, len)` hits.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, IndexError> {
        self.search_filtered(query, k, |_| true)
    }

    /// Top-`k` among entries labeled `class`. A class with fewer than `k`
    /// entries (including none) yields what it has and sets `shortfall`.
    pub fn search_in_class(
        &self,
        query: &EmbeddingVector,
        class: TripMode,
        k: usize,
    ) -> Result<ClassHits, IndexError> {
        let hits = self.search_filtered(query, k, |e| e.mode == class)?;
        Ok(ClassHits {
            shortfall: hits.len() < k,
            hits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for s in [&self.template_version, &self.embedder_fingerprint] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        for e in &self.entries {
            w.write_all(&e.doc_id.to_le_bytes())?;
            w.write_all(&[e.mode.index() as u8])?;
        }
        for e in &self.entries {
            for x in e.vector.values() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load without compatibility checks.
    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Load and require the given dimension, template version and embedder.
    pub fn load_compatible(path: &Path, expected: &IndexCompat) -> Result<Self, IndexError> {
        let index = Self::load(path)?;
        index.check_compat(expected)?;
        Ok(index)
    }

    pub fn check_compat(&self, expected: &IndexCompat) -> Result<(), IndexError> {
        if self.dim != expected.dim {
            return Err(IndexError::Incompatible {
                field: "dim",
                expected: expected.dim.to_string(),
                found: self.dim.to_string(),
            });
        }
        if self.template_version != expected.template_version {
            return Err(IndexError::Incompatible {
                field: "template_version",
                expected: expected.template_version.clone(),
                found: self.template_version.clone(),
            });
        }
        if self.embedder_fingerprint != expected.embedder_fingerprint {
            return Err(IndexError::Incompatible {
                field: "embedder_fingerprint",
                expected: expected.embedder_fingerprint.clone(),
                found: self.embedder_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| IndexError::BadMagic)?;
        if &magic != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let template_version = read_string(r)?;
        let embedder_fingerprint = read_string(r)?;
        let mut table = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let doc_id = read_u64(r)?;
            let mut m = [0u8; 1];
            r.read_exact(&mut m).map_err(truncated)?;
            let mode = TripMode::from_index(m[0] as usize)
                .ok_or_else(|| IndexError::Corrupt(format!("mode byte {}", m[0])))?;
            table.push((doc_id, mode));
        }
        let mut entries = Vec::with_capacity(table.len());
        let mut buf = vec![0u8; dim * 4];
        for (doc_id, mode) in table {
            r.read_exact(&mut buf).map_err(truncated)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(IndexEntry {
                doc_id,
                mode,
                vector: EmbeddingVector::from_raw(values),
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        Self::build(dim, template_version, embedder_fingerprint, entries)
    }

    /// One JSON object per entry: `{doc_id, mode, vector}`.
    pub fn export_jsonl<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        #[derive(Serialize)]
        struct Row<'a> {
            doc_id: u64,
            mode: TripMode,
            vector: &'a [f32],
        }
        for e in &self.entries {
            serde_json::to_writer(
                &mut w,
                &Row {
                    doc_id: e.doc_id,
                    mode: e.mode,
                    vector: e.vector.values(),
                },
            )
            .map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn truncated(_: std::io::Error) -> IndexError {
    IndexError::Corrupt("unexpected end of file".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IndexError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(IndexError::Corrupt(format!("string length {len}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|e| IndexError::Corrupt(e.to_string()))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn unit(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(raw).unwrap()
    }

    /// Random normalized vectors with modes cycling through the canonical order.
    pub fn random_index(n: usize, dim: usize, seed: u64) -> VectorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| IndexEntry {
                doc_id: (i as u64) * 3 + 1,
                mode: TripMode::ALL[rng.random_range(0..4)],
                vector: unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()),
            })
            .collect();
        VectorIndex::build(dim, "t", "f", entries).unwrap()
    }

    pub fn random_query(dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingVector {
        unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(doc_id: u64, mode: TripMode, raw: &[f64]) -> IndexEntry {
        IndexEntry {
            doc_id,
            mode,
            vector: unit(raw),
        }
    }

    /// Independent scan: cosine from the definition, full sort.
    fn naive(index: &VectorIndex, q: &EmbeddingVector, k: usize, class: Option<TripMode>) -> Vec<u64> {
        let mut scored: Vec<(f64, u64)> = index
            .entries()
            .iter()
            .filter(|e| class.is_none_or(|c| c == e.mode))
            .map(|e| {
                let a = q.values();
                let b = e.vector.values();
                let mut num = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..a.len() {
                    num += f64::from(a[i]) * f64::from(b[i]);
                    na += f64::from(a[i]).powi(2);
                    nb += f64::from(b[i]).powi(2);
                }
                (num / (na.sqrt() * nb.sqrt()), e.doc_id)
            })
            .collect();
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn cosine_examples() {
        let v = unit(&[0.3, -0.2, 0.9]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let a = EmbeddingVector::from_raw(vec![1.0, 0.0]);
        let b = EmbeddingVector::from_raw(vec![0.0, 1.0]);
        let c = EmbeddingVector::from_raw(vec![1.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert!((cosine_similarity(&a, &c).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!((cosine_similarity(&a, &c).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        let a = EmbeddingVector::from_raw(vec![1.0, 0.0]);
        let z = EmbeddingVector::from_raw(vec![0.0, 0.0]);
        let d3 = EmbeddingVector::from_raw(vec![1.0, 0.0, 0.0]);
        assert!(matches!(cosine_similarity(&a, &z), Err(IndexError::ZeroVector)));
        assert!(matches!(
            cosine_similarity(&a, &d3),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hand_placed_vectors_order() {
        // similarities to [1,0]: doc 5 -> 1.0, doc 2 -> cos 45deg, doc 9 -> 0
        let index = VectorIndex::build(
            2,
            "t",
            "f",
            vec![
                entry(9, TripMode::Walk, &[0.0, 1.0]),
                entry(2, TripMode::Drive, &[1.0, 1.0]),
                entry(5, TripMode::Transit, &[1.0, 0.0]),
            ],
        )
        .unwrap();
        let q = unit(&[1.0, 0.0]);
        let hits = index.search(&q, 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(), [5, 2, 9]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(index.search(&q, 10).unwrap().len(), 3);
        assert_eq!(index.search(&q, 1).unwrap()[0].doc_id, 5);
    }

    #[test]
    fn ties_break_on_doc_id() {
        let index = VectorIndex::build(
            2,
            "t",
            "f",
            vec![
                entry(8, TripMode::Walk, &[1.0, 0.0]),
                entry(3, TripMode::Walk, &[1.0, 0.0]),
                entry(5, TripMode::Walk, &[1.0, 0.0]),
            ],
        )
        .unwrap();
        let hits = index.search(&unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(), [3, 5]);
    }

    #[test]
    fn search_errors() {
        let index = VectorIndex::build(2, "t", "f", vec![]).unwrap();
        assert!(matches!(index.search(&unit(&[1.0, 0.0]), 1), Err(IndexError::EmptyIndex)));
        let index = random_index(5, 4, 1);
        assert!(matches!(index.search(&unit(&[1.0, 0.0, 0.0, 0.0]), 0), Err(IndexError::InvalidK)));
        assert!(matches!(
            index.search(&unit(&[1.0, 0.0]), 1),
            Err(IndexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn build_rejects_unnormalized_and_duplicates() {
        let bad = IndexEntry {
            doc_id: 1,
            mode: TripMode::Drive,
            vector: EmbeddingVector::from_raw(vec![2.0, 0.0]),
        };
        assert!(matches!(
            VectorIndex::build(2, "t", "f", vec![bad]),
            Err(IndexError::NotNormalized(1))
        ));
        let dup = vec![entry(1, TripMode::Drive, &[1.0, 0.0]), entry(1, TripMode::Walk, &[0.0, 1.0])];
        assert!(matches!(
            VectorIndex::build(2, "t", "f", dup),
            Err(IndexError::DuplicateDocId(1))
        ));
    }

    #[test]
    fn class_search_exhaustion_and_absence() {
        let index = VectorIndex::build(
            2,
            "t",
            "f",
            vec![
                entry(1, TripMode::Drive, &[1.0, 0.0]),
                entry(2, TripMode::Drive, &[0.9, 0.1]),
                entry(3, TripMode::Walk, &[0.0, 1.0]),
                entry(4, TripMode::Walk, &[0.1, 0.9]),
            ],
        )
        .unwrap();
        let q = unit(&[1.0, 0.2]);
        let walk = index.search_in_class(&q, TripMode::Walk, 5).unwrap();
        let mut ids: Vec<_> = walk.hits.iter().map(|h| h.doc_id).collect();
        ids.sort();
        assert_eq!(ids, [3, 4]);
        assert!(walk.shortfall);
        let transit = index.search_in_class(&q, TripMode::Transit, 2).unwrap();
        assert!(transit.hits.is_empty());
        assert!(transit.shortfall);
        let drive = index.search_in_class(&q, TripMode::Drive, 1).unwrap();
        assert!(!drive.shortfall);
        assert_eq!(drive.hits[0].doc_id, 2);
    }

    #[test]
    fn class_search_matches_filter_then_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let index = random_index(60, 8, trial);
            let q = random_query(8, &mut rng);
            for &class in TripMode::ALL {
                let got: Vec<u64> = index
                    .search_in_class(&q, class, 7)
                    .unwrap()
                    .hits
                    .iter()
                    .map(|h| h.doc_id)
                    .collect();
                assert_eq!(got, naive(&index, &q, 7, Some(class)));
            }
        }
    }

    #[test]
    fn union_of_class_searches_is_whole_index() {
        let index = random_index(50, 6, 4);
        let q = unit(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut all: Vec<u64> = TripMode::ALL
            .iter()
            .flat_map(|&c| index.search_in_class(&q, c, usize::MAX).unwrap().hits)
            .map(|h| h.doc_id)
            .collect();
        all.sort();
        let mut expected: Vec<u64> = index.doc_ids().into_iter().collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn dot_and_cosine_rankings_agree() {
        let index = random_index(300, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_query(16, &mut rng);
        let by_cosine: Vec<u64> = index.search(&q, 300).unwrap().iter().map(|h| h.doc_id).collect();
        let mut by_dot: Vec<(f64, u64)> = index
            .entries()
            .iter()
            .map(|e| (dot(q.values(), e.vector.values()), e.doc_id))
            .collect();
        by_dot.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(by_cosine, by_dot.iter().map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_round_trip_and_compat() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let index = random_index(40, 12, 3);
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, index);
        for (a, b) in loaded.entries().iter().zip(index.entries()) {
            let bits_a: Vec<u32> = a.vector.values().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.vector.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert!(VectorIndex::load_compatible(&path, &index.compat()).is_ok());
        let wrong = IndexCompat {
            embedder_fingerprint: "other".into(),
            ..index.compat()
        };
        assert!(matches!(
            VectorIndex::load_compatible(&path, &wrong),
            Err(IndexError::Incompatible { field: "embedder_fingerprint", .. })
        ));
        let wrong = IndexCompat { dim: 13, ..index.compat() };
        assert!(matches!(
            VectorIndex::load_compatible(&path, &wrong),
            Err(IndexError::Incompatible { field: "dim", .. })
        ));
        let wrong = IndexCompat {
            template_version: "v0".into(),
            ..index.compat()
        };
        assert!(VectorIndex::load_compatible(&path, &wrong).is_err());
    }

    #[test]
    fn header_layout_is_stable() {
        let index = VectorIndex::build(2, "tv", "fp", vec![entry(7, TripMode::Transit, &[0.0, 1.0])]).unwrap();
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"TRIPIDX\0");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"tv");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"fp");
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.push(2);
        expected.extend_from_slice(&0f32.to_le_bytes());
        expected.extend_from_slice(&1f32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn corrupt_files_rejected() {
        let index = random_index(3, 4, 3);
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert!(matches!(
            VectorIndex::read_from(&mut &buf[..buf.len() - 1]),
            Err(IndexError::Corrupt(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(VectorIndex::read_from(&mut &bad[..]), Err(IndexError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(
            VectorIndex::read_from(&mut &bad[..]),
            Err(IndexError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn jsonl_export_has_one_line_per_entry() {
        let index = random_index(5, 3, 3);
        let mut buf = Vec::new();
        index.export_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["doc_id"], 1);
        assert_eq!(first["vector"].as_array().unwrap().len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn search_is_exact_and_sorted(seed in 0u64..10_000, n in 1usize..200, k in 1usize..50) {
            let index = random_index(n, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q = random_query(8, &mut rng);
            let hits = index.search(&q, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            prop_assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            prop_assert_eq!(hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(), naive(&index, &q, k, None));
        }
    }
}
