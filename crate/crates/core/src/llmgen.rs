//! Prompt construction, answer normalization and a small HTTP client for
//! external text generators.
//!
//! Wire protocol: `POST {"prompt": ...}` answered by `200 {"text": ...}`.

use std::sync::LazyLock;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::GeneratorInput;

pub mod stub;

/// Instruction appended after every question.
pub const INSTRUCTION: &str = "given the contexts, your generated response to the above question must only be a single numerical number only (without any symbols nor texts), or a numerical number with a percentage sign only, or just yes/no, whichever applicable.";

/// Separator placed between context sentences and before the question.
pub const CONTEXT_SEPARATOR: &str = " ; ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("few-shot mode needs at least one example")]
    MissingExamples,
    #[error("zero-shot mode takes no examples")]
    UnexpectedExamples,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("gold answer `{0}` is not a number or yes/no")]
    BadGold(String),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("generator timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed generator response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    /// Context sentences and question, already joined.
    pub context_question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub few_shot_examples: Vec<FewShotExample>,
    pub instruction: String,
}

impl PromptConfig {
    pub fn zero_shot() -> Self {
        PromptConfig {
            mode: PromptMode::ZeroShot,
            few_shot_examples: Vec::new(),
            instruction: INSTRUCTION.to_string(),
        }
    }

    /// The two reference examples: a percentage change and a yes/no
    /// comparison.
    pub fn few_shot() -> Self {
        PromptConfig {
            mode: PromptMode::FewShot,
            few_shot_examples: default_examples(),
            instruction: INSTRUCTION.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match (self.mode, self.few_shot_examples.is_empty()) {
            (PromptMode::FewShot, true) => Err(LlmError::MissingExamples),
            (PromptMode::ZeroShot, false) => Err(LlmError::UnexpectedExamples),
            _ => Ok(()),
        }
    }
}

fn default_examples() -> Vec<FewShotExample> {
    vec![
        FewShotExample {
            context_question: "as of and for the years ended december 31 , the operating income of 2003 is 1039 ; the operating income of 2002 ( 1 ) is 695 ; the operating income of 2001 ( 1 ) is 1717 ; what was the percentage change in operating income for entities in which the company has the ability to exercise significant influence but does not control and that are accounted for using the equity method between 2002 and 2003?".into(),
            answer: "0.4949".into(),
        },
        FewShotExample {
            context_question: "in millions except for per share data the diluted-as reported of 2005 is $ 4.55 ; in millions except for per share data the diluted-pro forma of 2005 is 4.52 ; was diluted-as reported net income per share greater than diluted-pro forma net income per share?".into(),
            answer: "Yes".into(),
        },
    ]
}

/// `ex_1 \n\n ... ex_n \n\n ctx_1 ; ... ; ctx_m ; question instruction`.
/// Each example is rendered as `context+question instruction answer.`.
pub fn build_prompt<'a>(
    context: impl IntoIterator<Item = &'a str>,
    question: &str,
    config: &PromptConfig,
) -> Result<String, LlmError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(LlmError::EmptyQuestion);
    }
    let mut blocks: Vec<String> = config
        .few_shot_examples
        .iter()
        .map(|ex| format!("{} {} {}.", ex.context_question, config.instruction, ex.answer))
        .collect();
    let mut query: Vec<&str> = context.into_iter().collect();
    query.push(question);
    blocks.push(format!("{} {}", query.join(CONTEXT_SEPARATOR), config.instruction));
    Ok(blocks.join("\n\n"))
}

/// [`build_prompt`] over a budgeted generator input.
pub fn prompt_for(input: &GeneratorInput, config: &PromptConfig) -> Result<String, LlmError> {
    let question = input.question().ok_or(LlmError::EmptyQuestion)?;
    build_prompt(input.context().map(|s| s.text.as_str()), question, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalizedAnswer {
    /// Percentages are stored divided by 100.
    Number { value: f64, was_percent: bool },
    YesNo { value: bool },
    Unparseable { raw: String },
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?(\d+(\.\d*)?|\.\d+)$").expect("valid regex"));

pub fn parse_answer(raw: &str) -> NormalizedAnswer {
    let unparseable = || NormalizedAnswer::Unparseable { raw: raw.to_string() };
    let text = raw.trim();
    let text = text.strip_suffix('.').unwrap_or(text).trim();
    match text.to_lowercase().as_str() {
        "yes" | "true" => return NormalizedAnswer::YesNo { value: true },
        "no" | "false" => return NormalizedAnswer::YesNo { value: false },
        _ => {}
    }
    let (body, was_percent) = match text.strip_suffix('%') {
        Some(rest) => (rest, true),
        None => (text, false),
    };
    let cleaned: String = body.chars().filter(|c| !matches!(c, '$' | ',') && !c.is_whitespace()).collect();
    if !NUMBER.is_match(&cleaned) {
        return unparseable();
    }
    match cleaned.parse::<f64>() {
        Ok(v) if v.is_finite() => NormalizedAnswer::Number {
            value: if was_percent { v / 100.0 } else { v },
            was_percent,
        },
        _ => unparseable(),
    }
}

/// Default relative tolerance for answer comparison.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Numeric answers match when any of `v`, `v/100`, `100v` lies within
/// `epsilon * max(1, |gold|)` of the gold value.
pub fn answers_match(pred: &NormalizedAnswer, gold: &str, epsilon: f64) -> Result<bool, LlmError> {
    if !(epsilon > 0.0) {
        return Err(LlmError::BadEpsilon(epsilon));
    }
    let gold_parsed = parse_answer(gold);
    let ok = match (&gold_parsed, pred) {
        (NormalizedAnswer::Unparseable { .. }, _) => return Err(LlmError::BadGold(gold.to_string())),
        (NormalizedAnswer::YesNo { value: g }, NormalizedAnswer::YesNo { value: p }) => g == p,
        (NormalizedAnswer::Number { value: g, .. }, NormalizedAnswer::Number { value: v, .. }) => {
            let tol = epsilon * g.abs().max(1.0);
            [*v, v / 100.0, v * 100.0].iter().any(|c| (c - g).abs() <= tol)
        }
        _ => false,
    };
    Ok(ok)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 100,
        }
    }
}

#[derive(Serialize)]
struct PromptRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Blocking client; every request gets its own timeout.
#[derive(Debug, Clone)]
pub struct GeneratorClient {
    endpoint: String,
    config: ClientConfig,
    agent: ureq::Agent,
}

impl GeneratorClient {
    pub fn new(endpoint: impl Into<String>, config: ClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        GeneratorClient {
            endpoint: endpoint.into(),
            config,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, prompt: &str) -> Result<String, LlmError> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(PromptRequest { prompt })
            .map_err(classify)?;
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| match classify(e) {
                LlmError::Timeout => LlmError::Timeout,
                other => LlmError::MalformedResponse(other.to_string()),
            })?;
        serde_json::from_str::<TextResponse>(&body)
            .map(|r| r.text)
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))
    }

    /// Sends `prompt`, retrying timeouts and transport failures with
    /// exponential backoff.
    pub fn generate(&self, prompt: &str) -> Result<String, LlmError> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Err(e @ (LlmError::Timeout | LlmError::Transport(_))) if attempt < self.config.retries => {
                    log::warn!("generator request failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn classify(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            LlmError::Timeout
        }
        ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
            LlmError::MalformedResponse(format!("HTTP status {code}"))
        }
        other => LlmError::Transport(other.to_string()),
    }
}

pub fn call_generator(endpoint: &str, prompt: &str, timeout: Duration) -> Result<String, LlmError> {
    let config = ClientConfig {
        timeout_ms: timeout.as_millis().max(1) as u64,
        ..ClientConfig::default()
    };
    GeneratorClient::new(endpoint, config).generate(prompt)
}
