//! Dataset ingestion, table linearization, number extraction and generator
//! input assembly.
//!
//! The dataset is a JSON array of records in the public FinQA layout:
//!
//! ```json
//! {
//!   "id": "ETR/2016/page_23.pdf-2",
//!   "pre_text": ["sentence", "..."],
//!   "post_text": ["..."],
//!   "table": [["", "2006"], ["risk-free interest rate", "5%"]],
//!   "qa": {
//!     "question": "...",
//!     "program": "divide(9413, 20.01), ...",
//!     "exe_ans": -399.73,
//!     "gold_inds": {"text_1": "...", "table_1": "..."}
//!   }
//! }
//! ```
//!
//! Text sentences are identified as `text_<i>` over `pre_text` followed by
//! `post_text`; table rows as `table_<r>` with the header at `r = 0`.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::dsl::{format_number, parse_program, Program};
use crate::executor::TableContext;
use crate::retrieval::{FactItem, RankedFacts};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {index}: missing or invalid field `{path}`")]
    Schema { index: usize, path: String },
    #[error("table is empty or has no data cells")]
    EmptyTable,
    #[error("table row {row} has {found} cells, header has {expected}")]
    RaggedTable {
        row: usize,
        expected: usize,
        found: usize,
    },
}

/// A number found in a sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedNumber {
    pub value: f64,
    pub sentence_id: String,
    /// Byte range of `raw` within the sentence.
    pub span: Range<usize>,
    pub raw: String,
}

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(\(\s*)?(-)?(\$\s?)?(\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+)(\s?%)?(\s*\))?",
    )
    .expect("valid number regex")
});

/// Parses one formatted number: optional `$`, thousands commas, `%` suffix
/// (value kept unscaled), leading `-` or accounting parentheses for negatives.
pub fn parse_formatted_number(raw: &str) -> Option<f64> {
    let mut s = raw.trim();
    let mut negative = false;
    if let Some(inner) = s.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
        negative = true;
        s = inner.trim();
    }
    if let Some(rest) = s.strip_prefix('-') {
        negative = !negative;
        s = rest;
    }
    s = s.strip_prefix('$').unwrap_or(s).trim_start();
    s = s.strip_suffix('%').unwrap_or(s).trim_end();
    let cleaned: String = s.chars().filter(|&c| c != ',').collect();
    let (int, frac) = match cleaned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (cleaned.as_str(), None),
    };
    let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
    let ok = match frac {
        Some(f) => (int.is_empty() || digits(int)) && digits(f),
        None => digits(int),
    };
    if !ok {
        return None;
    }
    let v: f64 = cleaned.parse().ok()?;
    Some(if negative { -v } else { v })
}

/// All numbers in `sentence`, ordered by span start.
pub fn extract_numbers(sentence: &str, sentence_id: &str) -> Vec<ExtractedNumber> {
    let mut out = Vec::new();
    for caps in NUMBER_RE.captures_iter(sentence) {
        let whole = caps.get(0).expect("match");
        let mut start = whole.start();
        let mut end = whole.end();
        let open = caps.get(1);
        let close = caps.get(6);
        match (open, close) {
            (Some(_), Some(_)) => {}
            (Some(o), None) => start = o.end(),
            (None, Some(c)) => end = c.start(),
            (None, None) => {}
        }
        if let Some(minus) = caps.get(2) {
            // A hyphen glued to a preceding word or number is a range or
            // compound, not a sign ("2015-2019", "10-k").
            let glued = sentence[..minus.start()]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
            if glued && start == minus.start() {
                start = minus.end();
            }
        }
        let raw = &sentence[start..end];
        if let Some(value) = parse_formatted_number(raw) {
            out.push(ExtractedNumber {
                value,
                sentence_id: sentence_id.to_string(),
                span: start..end,
                raw: raw.to_string(),
            });
        }
    }
    out
}

/// Sentence templates used by [`linearize_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableTemplates {
    /// Cell sentence with `{row}`, `{column}` and `{value}` placeholders.
    pub cell: String,
}

impl Default for TableTemplates {
    fn default() -> Self {
        TableTemplates {
            cell: "{row} of {column} is {value}.".to_string(),
        }
    }
}

impl TableTemplates {
    pub fn render(&self, row: &str, column: &str, value: &str) -> String {
        self.cell
            .replace("{row}", row)
            .replace("{column}", column)
            .replace("{value}", value)
    }
}

/// One linearized table cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSentence {
    /// Table row index (header row is 0).
    pub row: usize,
    pub column: usize,
    pub text: String,
    /// `None` when the header cell is empty.
    pub row_header: Option<String>,
}

impl TableSentence {
    pub fn id(&self) -> String {
        format!("table_{}_{}", self.row, self.column)
    }

    pub fn fact_id(&self) -> String {
        format!("table_{}", self.row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedTable {
    pub sentences: Vec<TableSentence>,
    pub context: TableContext,
}

/// Rewrites every data cell as a sentence and collects numeric row cells.
pub fn linearize_table(
    table: &[Vec<String>],
    templates: &TableTemplates,
) -> Result<LinearizedTable, PreprocessError> {
    let Some(header) = table.first() else {
        return Err(PreprocessError::EmptyTable);
    };
    if table.len() < 2 || header.len() < 2 {
        return Err(PreprocessError::EmptyTable);
    }
    let mut sentences = Vec::new();
    let mut context = TableContext::new();
    for (r, row) in table.iter().enumerate() {
        if row.len() != header.len() {
            return Err(PreprocessError::RaggedTable {
                row: r,
                expected: header.len(),
                found: row.len(),
            });
        }
        if r == 0 {
            continue;
        }
        let label = row[0].trim();
        let row_header = (!label.is_empty()).then(|| label.to_string());
        let shown = row_header.clone().unwrap_or_else(|| format!("row {r}"));
        let mut cells = Vec::new();
        for (c, cell) in row.iter().enumerate().skip(1) {
            let column = match header[c].trim() {
                "" => format!("column {c}"),
                h => h.to_string(),
            };
            let value = cell.trim();
            sentences.push(TableSentence {
                row: r,
                column: c,
                text: templates.render(&shown, &column, value),
                row_header: row_header.clone(),
            });
            if let Some(v) = parse_formatted_number(value) {
                cells.push(v);
            }
        }
        if let Some(h) = row_header {
            if !context.insert(h.clone(), cells) {
                log::warn!("duplicate table row header `{h}`; keeping the first row");
            }
        }
    }
    Ok(LinearizedTable { sentences, context })
}

/// One dataset entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    pub pre_text: Vec<String>,
    pub post_text: Vec<String>,
    pub table: Vec<Vec<String>>,
    pub gold_facts: BTreeSet<String>,
    pub gold_program_text: String,
    #[serde(skip)]
    pub gold_program: Program,
    pub gold_answer: String,
    pub metadata: serde_json::Map<String, Json>,
}

impl QARecord {
    /// Text sentences: `pre_text` followed by `post_text`.
    pub fn text_sentences(&self) -> impl Iterator<Item = &String> {
        self.pre_text.iter().chain(self.post_text.iter())
    }

    /// Linearized table, or an empty one when the record has no usable table.
    pub fn linearized_table(&self, templates: &TableTemplates) -> LinearizedTable {
        linearize_table(&self.table, templates).unwrap_or_else(|_| LinearizedTable {
            sentences: Vec::new(),
            context: TableContext::new(),
        })
    }

    pub fn table_context(&self) -> TableContext {
        self.linearized_table(&TableTemplates::default()).context
    }

    /// Every candidate fact: text sentences then linearized table cells, with
    /// zero scores.
    pub fn fact_candidates(&self, templates: &TableTemplates) -> Vec<FactItem> {
        let mut out: Vec<FactItem> = self
            .text_sentences()
            .enumerate()
            .map(|(i, s)| FactItem::text(format!("text_{i}"), 0.0, s.as_str()))
            .collect();
        for cell in self.linearized_table(templates).sentences {
            out.push(FactItem {
                id: cell.id(),
                fact_id: cell.fact_id(),
                score: 0.0,
                text: cell.text,
                row_header: cell.row_header,
            });
        }
        out
    }

    /// Whitespace token count of the question and the full context.
    pub fn context_tokens(&self) -> usize {
        let table_tokens: usize = self
            .table
            .iter()
            .flatten()
            .map(|c| count_tokens(c))
            .sum();
        count_tokens(&self.question)
            + self.text_sentences().map(|s| count_tokens(s)).sum::<usize>()
            + table_tokens
    }
}

/// Per-record problem found while loading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordFailure {
    pub index: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<QARecord>,
    /// Records dropped because their gold program or gold facts are invalid.
    pub failures: Vec<RecordFailure>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, PreprocessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PreprocessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Parses dataset JSON. Missing required fields abort with
/// [`PreprocessError::Schema`]; records whose gold program does not parse or
/// whose gold facts point nowhere are reported in [`Dataset::failures`].
pub fn parse_dataset(text: &str) -> Result<Dataset, PreprocessError> {
    let root: Json = serde_json::from_str(text)?;
    let Json::Array(items) = root else {
        return Err(PreprocessError::Schema {
            index: 0,
            path: "$".into(),
        });
    };
    let mut dataset = Dataset::default();
    for (index, item) in items.iter().enumerate() {
        let raw = RawRecord::from_json(index, item)?;
        let id = raw.id.clone();
        match raw.into_record() {
            Ok(record) => dataset.records.push(record),
            Err(message) => {
                log::warn!("record {index} ({id}): {message}");
                dataset.failures.push(RecordFailure {
                    index,
                    id: Some(id),
                    message,
                });
            }
        }
    }
    Ok(dataset)
}

struct RawRecord {
    id: String,
    question: String,
    pre_text: Vec<String>,
    post_text: Vec<String>,
    table: Vec<Vec<String>>,
    gold_facts: BTreeSet<String>,
    program: String,
    answer: String,
    metadata: serde_json::Map<String, Json>,
}

impl RawRecord {
    fn from_json(index: usize, item: &Json) -> Result<RawRecord, PreprocessError> {
        let schema = |path: &str| PreprocessError::Schema {
            index,
            path: path.to_string(),
        };
        let obj = item.as_object().ok_or_else(|| schema("$"))?;
        let string = |v: Option<&Json>, path: &str| -> Result<String, PreprocessError> {
            v.and_then(Json::as_str).map(str::to_string).ok_or_else(|| schema(path))
        };
        let strings = |v: Option<&Json>, path: &str| -> Result<Vec<String>, PreprocessError> {
            let arr = v.and_then(Json::as_array).ok_or_else(|| schema(path))?;
            arr.iter()
                .enumerate()
                .map(|(i, s)| s.as_str().map(str::to_string).ok_or_else(|| schema(&format!("{path}[{i}]"))))
                .collect()
        };
        let id = string(obj.get("id"), "id")?;
        let pre_text = strings(obj.get("pre_text"), "pre_text")?;
        let post_text = strings(obj.get("post_text"), "post_text")?;
        let table_rows = obj.get("table").and_then(Json::as_array).ok_or_else(|| schema("table"))?;
        let table = table_rows
            .iter()
            .enumerate()
            .map(|(r, row)| strings(Some(row), &format!("table[{r}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let qa = obj.get("qa").and_then(Json::as_object).ok_or_else(|| schema("qa"))?;
        let question = string(qa.get("question"), "qa.question")?;
        let program = string(qa.get("program"), "qa.program")?;
        let answer = match qa.get("exe_ans") {
            Some(Json::Number(n)) => format_number(n.as_f64().ok_or_else(|| schema("qa.exe_ans"))?),
            Some(Json::String(s)) => s.clone(),
            _ => return Err(schema("qa.exe_ans")),
        };
        let gold_facts = match qa.get("gold_inds") {
            None | Some(Json::Null) => BTreeSet::new(),
            Some(Json::Object(m)) => m.keys().cloned().collect(),
            Some(Json::Array(a)) => a
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| schema("qa.gold_inds")))
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(schema("qa.gold_inds")),
        };
        let metadata = obj
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "id" | "pre_text" | "post_text" | "table" | "qa"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(RawRecord {
            id,
            question,
            pre_text,
            post_text,
            table,
            gold_facts,
            program,
            answer,
            metadata,
        })
    }

    fn into_record(self) -> Result<QARecord, String> {
        let gold_program =
            parse_program(&self.program).map_err(|e| format!("gold program `{}`: {e}", self.program))?;
        let n_text = self.pre_text.len() + self.post_text.len();
        for fact in &self.gold_facts {
            let valid = match fact.split_once('_') {
                Some(("text", i)) => i.parse::<usize>().is_ok_and(|i| i < n_text),
                Some(("table", r)) => r.parse::<usize>().is_ok_and(|r| r < self.table.len()),
                _ => false,
            };
            if !valid {
                return Err(format!("gold fact `{fact}` does not reference a sentence or row"));
            }
        }
        Ok(QARecord {
            id: self.id,
            question: self.question,
            pre_text: self.pre_text,
            post_text: self.post_text,
            table: self.table,
            gold_facts: self.gold_facts,
            gold_program_text: self.program,
            gold_program,
            gold_answer: self.answer,
            metadata: self.metadata,
        })
    }
}

/// Whitespace token count.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Question,
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputSentence {
    pub id: String,
    pub source: InputSource,
    pub text: String,
}

/// Ordered generator input: question, internal facts, external definitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorInput {
    pub record_id: String,
    pub sentences: Vec<InputSentence>,
    pub truncated: bool,
}

impl GeneratorInput {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| count_tokens(&s.text)).sum()
    }

    pub fn question(&self) -> Option<&str> {
        self.sentences
            .iter()
            .find(|s| s.source == InputSource::Question)
            .map(|s| s.text.as_str())
    }

    /// Fact sentences after the question, in order.
    pub fn context(&self) -> impl Iterator<Item = &InputSentence> {
        self.sentences.iter().filter(|s| s.source != InputSource::Question)
    }
}

/// Concatenates question, internal facts and external facts in rank order,
/// then enforces `budget` whitespace tokens: whole trailing sentences are
/// dropped first, and a lone remaining sentence is cut to the budget.
pub fn make_generator_input(
    record: &QARecord,
    internal: &RankedFacts,
    external: &RankedFacts,
    budget: usize,
) -> GeneratorInput {
    let mut sentences = vec![InputSentence {
        id: "question".into(),
        source: InputSource::Question,
        text: record.question.clone(),
    }];
    for (facts, source) in [(internal, InputSource::Internal), (external, InputSource::External)] {
        sentences.extend(facts.items().iter().map(|f| InputSentence {
            id: f.id.clone(),
            source,
            text: f.text.clone(),
        }));
    }
    let mut total: usize = sentences.iter().map(|s| count_tokens(&s.text)).sum();
    let mut truncated = false;
    while total > budget && sentences.len() > 1 {
        let dropped = sentences.pop().expect("non-empty");
        total -= count_tokens(&dropped.text);
        truncated = true;
    }
    if total > budget {
        let last = sentences.last_mut().expect("question is always present");
        last.text = last
            .text
            .split_whitespace()
            .take(budget)
            .collect::<Vec<_>>()
            .join(" ");
        truncated = true;
    }
    GeneratorInput {
        record_id: record.id.clone(),
        sentences,
        truncated,
    }
}
