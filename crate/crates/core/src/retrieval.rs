//! Internal and external retrieval.
//!
//! The external retriever L2-normalizes definition embeddings and answers
//! queries with an exact flat inner-product search, so scores are cosine
//! similarities. The internal retriever ranks a question's own sentences by
//! externally supplied logits (or by [`HashedEmbedder`] cosine when no
//! trained scorer is available).
//!
//! Embedding sidecar files (`FEMB`) are little-endian:
//!
//! ```text
//! magic "FEMB" | version u32 | N u64 | d u32 | N*d f32 | N newline-terminated UTF-8 ids
//! ```

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("row `{id}` has zero norm")]
    ZeroVector { id: String },
    #[error("matrix or query is not L2-normalized")]
    NotNormalized,
    #[error("k = {k} outside 1..={size}")]
    BadK { k: usize, size: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("gold fact set is empty")]
    EmptyGold,
    #[error("empty input")]
    EmptyInput,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("definition {index}: {message}")]
    Definition { index: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, RetrievalError>;

const NORM_TOLERANCE: f64 = 1e-6;
const ZERO_NORM: f64 = 1e-12;

/// `N x d` row-major embeddings with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    dim: usize,
    ids: Vec<String>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(ids, dim, data)
    }

    pub fn from_flat(ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingMatrix {
            data,
            dim,
            ids,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.ids.len())
    }

    /// Reads a `FEMB` file.
    pub fn read_from(mut reader: impl BufRead) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != b"FEMB" {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = read_u32(&mut reader)?;
        if version != 1 {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let n = read_u64(&mut reader)? as usize;
        let dim = read_u32(&mut reader)? as usize;
        let mut buf = vec![0u8; n * dim * 4];
        reader.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(RetrievalError::Format(format!("expected {n} ids, found {}", ids.len())));
            }
            ids.push(line.trim_end_matches(['\n', '\r']).to_string());
        }
        Self::from_flat(ids, dim, data)
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<()> {
        writer.write_all(b"FEMB")?;
        writer.write_all(&1u32.to_le_bytes())?;
        writer.write_all(&(self.len() as u64).to_le_bytes())?;
        writer.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            writer.write_all(&(*v as f32).to_le_bytes())?;
        }
        for id in &self.ids {
            writer.write_all(id.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.clone();
    if m.dim > 0 {
        for (i, row) in out.data.chunks_mut(m.dim).enumerate() {
            let n = norm(row);
            if n < ZERO_NORM {
                return Err(RetrievalError::ZeroVector { id: m.ids[i].clone() });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Normalizes a single query vector.
pub fn normalize_vector(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n >= ZERO_NORM).then(|| v.iter().map(|x| x / n).collect())
}

/// Exact inner-product index over normalized rows.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    matrix: EmbeddingMatrix,
    payloads: Vec<String>,
}

pub fn build_index(m: EmbeddingMatrix) -> Result<FlatIndex> {
    FlatIndex::build(m)
}

impl FlatIndex {
    pub fn build(m: EmbeddingMatrix) -> Result<FlatIndex> {
        if !m.normalized {
            return Err(RetrievalError::NotNormalized);
        }
        let payloads = m.ids.clone();
        Ok(FlatIndex { matrix: m, payloads })
    }

    /// Attaches display text (definition summaries) to each row.
    pub fn with_payloads(mut self, payloads: Vec<String>) -> Result<FlatIndex> {
        if payloads.len() != self.matrix.len() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.matrix.len(),
                found: payloads.len(),
            });
        }
        self.payloads = payloads;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim
    }

    /// Top-`k` rows by inner product; ties go to the lower row index.
    pub fn search(&self, query: &[f64], k: usize) -> Result<RankedFacts> {
        if query.len() != self.matrix.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.matrix.dim,
                found: query.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(RetrievalError::BadK { k, size: self.len() });
        }
        if (norm(query) - 1.0).abs() > NORM_TOLERANCE {
            return Err(RetrievalError::NotNormalized);
        }
        let mut scored: Vec<(usize, f64)> = self
            .matrix
            .rows()
            .map(|row| dot(row, query))
            .enumerate()
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        let items = scored
            .into_iter()
            .map(|(i, score)| FactItem {
                id: self.matrix.ids[i].clone(),
                fact_id: self.matrix.ids[i].clone(),
                score,
                text: self.payloads[i].clone(),
                row_header: None,
            })
            .collect();
        Ok(RankedFacts {
            items,
            source: FactSource::External,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactSource {
    Internal,
    External,
}

/// A scored sentence or definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactItem {
    /// Unique item id (`text_3`, `table_2_1`, a definition term).
    pub id: String,
    /// Id used for gold comparison (`text_3`, `table_2`).
    pub fact_id: String,
    pub score: f64,
    pub text: String,
    /// Row header for linearized table cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_header: Option<String>,
}

impl FactItem {
    pub fn text(id: impl Into<String>, score: f64, text: impl Into<String>) -> FactItem {
        let id = id.into();
        FactItem {
            fact_id: id.clone(),
            id,
            score,
            text: text.into(),
            row_header: None,
        }
    }

    pub fn table_cell(
        id: impl Into<String>,
        fact_id: impl Into<String>,
        score: f64,
        text: impl Into<String>,
        row_header: impl Into<String>,
    ) -> FactItem {
        FactItem {
            id: id.into(),
            fact_id: fact_id.into(),
            score,
            text: text.into(),
            row_header: Some(row_header.into()),
        }
    }
}

/// Facts ordered by non-increasing score, ties by original position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedFacts {
    items: Vec<FactItem>,
    source: FactSource,
}

impl RankedFacts {
    /// Stable-sorts `items` by descending score. NaN scores sort last.
    pub fn new(mut items: Vec<FactItem>, source: FactSource) -> RankedFacts {
        let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
        items.sort_by(|a, b| key(b.score).total_cmp(&key(a.score)));
        RankedFacts { items, source }
    }

    pub fn empty(source: FactSource) -> RankedFacts {
        RankedFacts {
            items: Vec::new(),
            source,
        }
    }

    pub fn items(&self) -> &[FactItem] {
        &self.items
    }

    pub fn source(&self) -> FactSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncated(&self, k: usize) -> RankedFacts {
        RankedFacts {
            items: self.items.iter().take(k).cloned().collect(),
            source: self.source,
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.items.iter().map(|f| f.score).collect()
    }
}

/// Top-`k` sentences by logit (`score`), `k` capped at the candidate count.
pub fn rank_sentences(scored: Vec<FactItem>, k: usize) -> RankedFacts {
    RankedFacts::new(scored, FactSource::Internal).truncated(k.max(1))
}

/// `|top-k fact ids ∩ gold| / |gold|`.
pub fn recall_at_k(predicted: &RankedFacts, gold: &BTreeSet<String>, k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(RetrievalError::EmptyGold);
    }
    let hit: BTreeSet<&str> = predicted
        .items
        .iter()
        .take(k)
        .map(|f| f.fact_id.as_str())
        .filter(|id| gold.contains(*id))
        .collect();
    Ok(hit.len() as f64 / gold.len() as f64)
}

/// Macro-averaged recall over questions; questions with empty gold sets are
/// skipped. `None` when nothing was scored.
pub fn mean_recall_at_k<'a>(
    pairs: impl IntoIterator<Item = (&'a RankedFacts, &'a BTreeSet<String>)>,
    k: usize,
) -> Option<f64> {
    let values: Vec<f64> = pairs
        .into_iter()
        .filter_map(|(p, g)| recall_at_k(p, g, k).ok())
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryStats {
    pub median: f64,
    pub mean: f64,
}

pub fn summary_stats(scores: &[f64]) -> Result<SummaryStats> {
    if scores.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    Ok(SummaryStats { median, mean })
}

/// A `{term, summary}` entry of the definition corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitionEntry {
    pub term: String,
    pub summary: String,
}

pub fn load_definitions(path: impl AsRef<Path>) -> Result<Vec<DefinitionEntry>> {
    let text = std::fs::read_to_string(path)?;
    parse_definitions(&text)
}

pub fn parse_definitions(text: &str) -> Result<Vec<DefinitionEntry>> {
    let defs: Vec<DefinitionEntry> = serde_json::from_str(text)?;
    for (index, d) in defs.iter().enumerate() {
        if d.summary.trim().is_empty() {
            return Err(RetrievalError::Definition {
                index,
                message: format!("empty summary for `{}`", d.term),
            });
        }
    }
    Ok(defs)
}

/// Deterministic hashed bag-of-words embedder.
///
/// Each lowercase alphanumeric token is hashed (FNV-1a, seeded) to a bucket
/// and a sign. Stands in for a pretrained encoder in self-contained runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedEmbedder { dim, seed }
    }

    fn hash(&self, token: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // fmix64 so low bits are usable for both bucket and sign
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric() && c != '.' && c != '%')
            .map(|t| t.trim_matches('.').to_lowercase())
            .filter(|t| !t.is_empty())
    }

    /// Unnormalized embedding; the zero vector when `text` has no tokens.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in Self::tokens(text) {
            let h = self.hash(&tok);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        v
    }

    /// Unit-norm embedding, falling back to a fixed unit vector for empty text.
    pub fn embed_normalized(&self, text: &str) -> Vec<f64> {
        normalize_vector(&self.embed(text)).unwrap_or_else(|| {
            let mut v = vec![0.0; self.dim];
            v[0] = 1.0;
            v
        })
    }

    pub fn embed_all<'a>(&self, ids: Vec<String>, texts: impl IntoIterator<Item = &'a str>) -> Result<EmbeddingMatrix> {
        let rows = texts.into_iter().map(|t| self.embed_normalized(t)).collect();
        let mut m = EmbeddingMatrix::new(ids, rows)?;
        m.normalized = true;
        Ok(m)
    }
}

/// Scores sentences for the internal retriever.
pub trait SentenceScorer {
    fn score(&self, question: &str, sentence: &str) -> f64;
}

/// Cosine similarity between hashed embeddings of question and sentence.
impl SentenceScorer for HashedEmbedder {
    fn score(&self, question: &str, sentence: &str) -> f64 {
        dot(&self.embed_normalized(question), &self.embed_normalized(sentence))
    }
}

/// Scores every candidate with `scorer` and keeps the top `k`.
pub fn rank_with(scorer: &dyn SentenceScorer, question: &str, candidates: Vec<FactItem>, k: usize) -> RankedFacts {
    let scored = candidates
        .into_iter()
        .map(|mut c| {
            c.score = scorer.score(question, &c.text);
            c
        })
        .collect();
    rank_sentences(scored, k)
}
