//! Execution and program accuracy, sub-dataset breakdowns and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Operand, Program};
use crate::executor::{execute_program, Value};
use crate::llmgen::{answers_match, parse_answer, LlmError, NormalizedAnswer};
use crate::preprocess::QARecord;

/// Relative tolerance for numeric literals in program comparison.
pub const LITERAL_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A per-record problem; evaluation continues past it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub record_id: String,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn new(record_id: impl Into<String>, kind: impl Into<String>, message: impl Into<String>) -> Failure {
        Failure {
            record_id: record_id.into(),
            kind: kind.into(),
            message: message.into(),
        }
    }
}

/// What a generator produced for one record.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Program(Program),
    Answer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub matches: usize,
    pub total: usize,
}

impl Accuracy {
    /// `None` for an empty denominator.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matches as f64 / self.total as f64)
    }
}

pub fn value_answer(v: Value) -> NormalizedAnswer {
    match v {
        Value::Number(value) => NormalizedAnswer::Number {
            value,
            was_percent: false,
        },
        Value::Bool(value) => NormalizedAnswer::YesNo { value },
    }
}

/// Outcome of checking one prediction's answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionVerdict {
    pub correct: bool,
    /// Rendered predicted answer, when one was obtained.
    pub answer: Option<String>,
    pub failure: Option<Failure>,
}

/// Executes (or parses) the prediction and compares it with the gold answer.
pub fn judge_execution(record: &QARecord, prediction: &Prediction, epsilon: f64) -> ExecutionVerdict {
    let wrong = |answer: Option<String>, kind: &str, message: String| ExecutionVerdict {
        correct: false,
        answer,
        failure: Some(Failure::new(&record.id, kind, message)),
    };
    let (answer, rendered) = match prediction {
        Prediction::Program(p) => match execute_program(p, &record.table_context()) {
            Ok(r) => (value_answer(r.value), r.value.to_string()),
            Err(e) => return wrong(None, &format!("execution:{}", e.kind()), e.to_string()),
        },
        Prediction::Answer(text) => {
            let parsed = parse_answer(text);
            if let NormalizedAnswer::Unparseable { raw } = &parsed {
                return wrong(Some(text.clone()), "unparseable_answer", format!("`{raw}`"));
            }
            (parsed, text.clone())
        }
    };
    match answers_match(&answer, &record.gold_answer, epsilon) {
        Ok(correct) => ExecutionVerdict {
            correct,
            answer: Some(rendered),
            failure: None,
        },
        Err(e @ LlmError::BadGold(_)) => wrong(Some(rendered), "bad_gold", e.to_string()),
        Err(e) => wrong(Some(rendered), "config", e.to_string()),
    }
}

/// Fraction of predictions whose answer matches gold; failures are wrong.
pub fn execution_accuracy(preds: &[(&QARecord, Prediction)], epsilon: f64) -> (Accuracy, Vec<Failure>) {
    let mut acc = Accuracy { matches: 0, total: 0 };
    let mut failures = Vec::new();
    for (record, pred) in preds {
        let v = judge_execution(record, pred, epsilon);
        acc.total += 1;
        acc.matches += v.correct as usize;
        failures.extend(v.failure);
    }
    (acc, failures)
}

fn literal_eq(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= LITERAL_REL_TOL * a.abs().max(b.abs())
}

fn operand_eq(a: &Operand, b: &Operand) -> bool {
    match (a, b) {
        (Operand::Literal(x), Operand::Literal(y)) => literal_eq(*x, *y),
        (Operand::Row(x), Operand::Row(y)) => x.trim().eq_ignore_ascii_case(y.trim()),
        _ => a == b,
    }
}

/// Step-for-step equality; no commutative reordering.
pub fn program_matches(pred: &Program, gold: &Program) -> bool {
    pred.len() == gold.len()
        && pred.steps().iter().zip(gold.steps()).all(|(p, g)| {
            p.op() == g.op() && p.args().iter().zip(g.args()).all(|(a, b)| operand_eq(a, b))
        })
}

pub fn program_accuracy(preds: &[(&QARecord, &Program)]) -> Accuracy {
    Accuracy {
        matches: preds
            .iter()
            .filter(|(r, p)| program_matches(p, &r.gold_program))
            .count(),
        total: preds.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityFacts {
    Gold,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetRules {
    pub long_context_token_threshold: usize,
    pub step_threshold: usize,
    pub modality_facts: ModalityFacts,
}

impl Default for SubsetRules {
    fn default() -> Self {
        SubsetRules {
            long_context_token_threshold: 687,
            step_threshold: 1,
            modality_facts: ModalityFacts::Gold,
        }
    }
}

pub const MODALITY: &str = "modality";
pub const CONTEXT_LENGTH: &str = "context_length";
pub const REASONING_STEPS: &str = "reasoning_steps";

/// Dimension -> subset -> record ids, plus records left out of every
/// breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SubsetSplit {
    pub breakdowns: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub excluded: Vec<Failure>,
}

impl SubsetSplit {
    pub fn subset_of(&self, dimension: &str, record_id: &str) -> Option<&str> {
        self.breakdowns
            .get(dimension)?
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == record_id))
            .map(|(name, _)| name.as_str())
    }
}

pub fn modality(facts: &BTreeSet<String>) -> Option<&'static str> {
    if facts.is_empty() {
        return None;
    }
    let table = facts.iter().filter(|f| f.starts_with("table_")).count();
    Some(match table {
        0 => "text_only",
        t if t == facts.len() => "table_only",
        _ => "table_text_mixed",
    })
}

/// Splits by gold facts. See [`split_subsets_by`] for other fact sources.
pub fn split_subsets(records: &[QARecord], rules: &SubsetRules) -> SubsetSplit {
    split_subsets_by(records, rules, |r| &r.gold_facts)
}

pub fn split_subsets_by<'a>(
    records: &'a [QARecord],
    rules: &SubsetRules,
    facts: impl Fn(&'a QARecord) -> &'a BTreeSet<String>,
) -> SubsetSplit {
    let mut split = SubsetSplit::default();
    let dims: [(&str, &[&str]); 3] = [
        (MODALITY, &["table_only", "text_only", "table_text_mixed"]),
        (CONTEXT_LENGTH, &["long_context", "short_context"]),
        (REASONING_STEPS, &["single_step", "multi_step"]),
    ];
    for (dim, names) in dims {
        let entry = split.breakdowns.entry(dim.to_string()).or_default();
        for name in names {
            entry.insert(name.to_string(), Vec::new());
        }
    }
    for record in records {
        let Some(m) = modality(facts(record)) else {
            log::warn!("record {}: no supporting facts, left out of subsets", record.id);
            split.excluded.push(Failure::new(&record.id, "missing_gold", "no supporting facts"));
            continue;
        };
        let length = if record.context_tokens() > rules.long_context_token_threshold {
            "long_context"
        } else {
            "short_context"
        };
        let steps = if record.gold_program.len() <= rules.step_threshold {
            "single_step"
        } else {
            "multi_step"
        };
        for (dim, name) in [(MODALITY, m), (CONTEXT_LENGTH, length), (REASONING_STEPS, steps)] {
            split.breakdowns.get_mut(dim).expect("initialised")
                .get_mut(name)
                .expect("initialised")
                .push(record.id.clone());
        }
    }
    split
}

/// Per-record result fed into [`build_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordVerdict {
    pub record_id: String,
    pub execution_correct: bool,
    /// `None` for generators that do not produce programs.
    pub program_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    pub execution_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub evaluated: usize,
    pub execution_correct: usize,
    pub execution_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program_correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program_accuracy: Option<f64>,
    /// Dimension -> subset -> stats.
    pub per_subset: BTreeMap<String, BTreeMap<String, SubsetStats>>,
    pub config_echo: BTreeMap<String, serde_json::Value>,
    pub failures: Vec<Failure>,
}

fn stats<'a>(verdicts: impl Iterator<Item = &'a RecordVerdict>) -> SubsetStats {
    let mut count = 0;
    let mut exec = 0;
    let mut prog = 0;
    let mut has_prog = true;
    for v in verdicts {
        count += 1;
        exec += v.execution_correct as usize;
        match v.program_correct {
            Some(p) => prog += p as usize,
            None => has_prog = false,
        }
    }
    let ratio = |n: usize| (count > 0).then(|| n as f64 / count as f64);
    SubsetStats {
        count,
        execution_accuracy: ratio(exec),
        program_accuracy: if has_prog { ratio(prog) } else { None },
    }
}

/// Aggregates verdicts in record-id order.
pub fn build_report(
    verdicts: &[RecordVerdict],
    split: &SubsetSplit,
    config_echo: BTreeMap<String, serde_json::Value>,
    mut failures: Vec<Failure>,
) -> EvalReport {
    let by_id: BTreeMap<&str, &RecordVerdict> = verdicts.iter().map(|v| (v.record_id.as_str(), v)).collect();
    let overall = stats(by_id.values().copied());
    let with_programs = !verdicts.is_empty() && verdicts.iter().all(|v| v.program_correct.is_some());
    let per_subset = split
        .breakdowns
        .iter()
        .map(|(dim, subsets)| {
            let inner = subsets
                .iter()
                .map(|(name, ids)| {
                    let members = ids.iter().filter_map(|id| by_id.get(id.as_str()).copied());
                    (name.clone(), stats(members))
                })
                .collect();
            (dim.clone(), inner)
        })
        .collect();
    failures.extend(split.excluded.iter().cloned());
    failures.sort();
    failures.dedup();
    EvalReport {
        evaluated: overall.count,
        execution_correct: by_id.values().filter(|v| v.execution_correct).count(),
        execution_accuracy: overall.execution_accuracy,
        program_correct: with_programs.then(|| {
            by_id
                .values()
                .filter(|v| v.program_correct == Some(true))
                .count()
        }),
        program_accuracy: if with_programs { overall.program_accuracy } else { None },
        per_subset,
        config_echo,
        failures,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Pretty JSON of the whole report.
pub fn report_json(report: &EvalReport) -> Result<String, EvalError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// One overall row followed by one row per subset. The overall row carries
/// the config echo as compact JSON.
pub fn write_report_csv(report: &EvalReport, w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dimension", "subset", "count", "execution_accuracy", "program_accuracy", "config"])?;
    out.write_record([
        "overall".to_string(),
        "all".to_string(),
        report.evaluated.to_string(),
        fmt_opt(report.execution_accuracy),
        fmt_opt(report.program_accuracy),
        serde_json::to_string(&report.config_echo)?,
    ])?;
    for (dim, subsets) in &report.per_subset {
        for (name, s) in subsets {
            out.write_record([
                dim.clone(),
                name.clone(),
                s.count.to_string(),
                fmt_opt(s.execution_accuracy),
                fmt_opt(s.program_accuracy),
                String::new(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let file = std::fs::File::create(path)?;
    match format {
        ReportFormat::Json => {
            let mut w = std::io::BufWriter::new(file);
            w.write_all(report_json(report)?.as_bytes())?;
            w.flush()?;
        }
        ReportFormat::Csv => write_report_csv(report, std::io::BufWriter::new(file))?,
    }
    Ok(())
}
