//! End-to-end run: internal ranking, optional definition retrieval, budgeted
//! generator input, generation and evaluation, with a JSONL trace.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::checkpoint::load_checkpoint;
use crate::decoder::features::featurize;
use crate::decoder::{self, DecoderExample, DecoderParams, EpochStats, TrainConfig, TrainOutcome};
use crate::eval::{
    build_report, judge_execution, program_matches, split_subsets, split_subsets_by, EvalReport, Failure,
    ModalityFacts, Prediction, RecordVerdict, SubsetRules, LITERAL_REL_TOL,
};
use crate::llmgen::{prompt_for, ClientConfig, GeneratorClient, PromptConfig, PromptMode, DEFAULT_EPSILON};
use crate::preprocess::{load_dataset, make_generator_input, Dataset, PreprocessError, QARecord, TableTemplates};
use crate::retrieval::{
    l2_normalize, load_definitions, mean_recall_at_k, normalize_vector, rank_with, EmbeddingMatrix, FactSource,
    FlatIndex, HashedEmbedder, RankedFacts, RetrievalError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] PreprocessError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Replays the dataset's own gold programs.
    Gold,
    /// Toy decoder checkpoint.
    Decoder,
    /// External text generator over HTTP.
    Endpoint,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gold" => Ok(Backend::Gold),
            "decoder" => Ok(Backend::Decoder),
            "endpoint" => Ok(Backend::Endpoint),
            other => Err(format!("unknown backend `{other}` (gold, decoder, endpoint)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backend: Backend,
    pub top_k_internal: usize,
    pub top_k_external: usize,
    pub epsilon: f64,
    pub token_budget: usize,
    /// Definition corpus (`[{term, summary}]`); no external retrieval without it.
    pub definitions: Option<PathBuf>,
    /// Precomputed embeddings for definitions (by term) and queries
    /// (`query:<record id>`).
    pub embeddings: Option<PathBuf>,
    /// Precomputed internal scores: `{record id: {fact id: logit}}`.
    pub internal_scores: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub prompt_mode: PromptMode,
    pub client: ClientConfig,
    pub subsets: SubsetRules,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    pub max_decode_steps: usize,
    pub trace: Option<PathBuf>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: Backend::Gold,
            top_k_internal: 5,
            top_k_external: 3,
            epsilon: DEFAULT_EPSILON,
            token_budget: 512,
            definitions: None,
            embeddings: None,
            internal_scores: None,
            checkpoint: None,
            endpoint: None,
            prompt_mode: PromptMode::ZeroShot,
            client: ClientConfig::default(),
            subsets: SubsetRules::default(),
            encoder_dim: 64,
            encoder_seed: 0,
            max_decode_steps: decoder::DEFAULT_MAX_STEPS,
            trace: None,
            seed: 0,
            train: TrainConfig::toy(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.top_k_internal == 0 {
            return bad("top_k_internal must be at least 1");
        }
        if self.top_k_external == 0 {
            return bad("top_k_external must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.token_budget == 0 {
            return bad("token_budget must be at least 1");
        }
        if self.encoder_dim == 0 {
            return bad("encoder_dim must be at least 1");
        }
        if self.subsets.long_context_token_threshold == 0 {
            return bad("long_context_token_threshold must be positive");
        }
        match self.backend {
            Backend::Endpoint if self.endpoint.is_none() => bad("endpoint backend needs `endpoint`"),
            _ => Ok(()),
        }
    }

    /// Tolerances and thresholds copied into every report.
    pub fn echo(&self) -> BTreeMap<String, serde_json::Value> {
        use serde_json::json;
        let mut m = BTreeMap::new();
        m.insert("backend".into(), json!(self.backend));
        m.insert("epsilon".into(), json!(self.epsilon));
        m.insert("top_k_internal".into(), json!(self.top_k_internal));
        m.insert("top_k_external".into(), json!(self.top_k_external));
        m.insert("external_retrieval".into(), json!(self.definitions.is_some()));
        m.insert("token_budget".into(), json!(self.token_budget));
        m.insert("long_context_token_threshold".into(), json!(self.subsets.long_context_token_threshold));
        m.insert("step_threshold".into(), json!(self.subsets.step_threshold));
        m.insert("modality_facts".into(), json!(self.subsets.modality_facts));
        m.insert("program_literal_rel_tol".into(), json!(LITERAL_REL_TOL));
        m.insert("prompt_mode".into(), json!(self.prompt_mode));
        m.insert("encoder".into(), json!({"kind": "hashed", "dim": self.encoder_dim, "seed": self.encoder_seed}));
        m.insert("seed".into(), json!(self.seed));
        m
    }

    pub fn encoder(&self) -> HashedEmbedder {
        HashedEmbedder::new(self.encoder_dim, self.encoder_seed)
    }
}

/// One line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub record_id: String,
    pub internal_ids: Vec<String>,
    pub external_ids: Vec<String>,
    pub input_tokens: usize,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    pub prediction: Option<String>,
    pub execution_correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub program_correct: Option<bool>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub trace: Vec<TraceRecord>,
}

impl PipelineOutput {
    pub fn write_trace(&self, w: impl Write) -> Result<()> {
        write_trace(&self.trace, w)
    }
}

pub fn write_trace(trace: &[TraceRecord], mut w: impl Write) -> Result<()> {
    for t in trace {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

struct ExternalRetriever {
    index: FlatIndex,
    queries: Option<EmbeddingMatrix>,
}

enum Generator {
    Gold,
    Decoder(DecoderParams),
    Endpoint(GeneratorClient, PromptConfig),
}

pub struct Pipeline {
    config: PipelineConfig,
    encoder: HashedEmbedder,
    templates: TableTemplates,
    internal_scores: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    external: Option<ExternalRetriever>,
    generator: Generator,
}

impl Pipeline {
    /// Loads every resource named in `config`.
    pub fn new(config: PipelineConfig) -> Result<Pipeline> {
        config.validate()?;
        let generator = match config.backend {
            Backend::Gold => Generator::Gold,
            Backend::Decoder => {
                let path = config
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("decoder backend needs `checkpoint`".into()))?;
                let (params, header) = load_checkpoint(path)?;
                if params.dim() != config.encoder_dim {
                    return Err(PipelineError::Config(format!(
                        "checkpoint dimension {} differs from encoder_dim {}",
                        params.dim(),
                        config.encoder_dim
                    )));
                }
                if let Some(seed) = header.config.pointer("/encoder/seed").and_then(|v| v.as_u64()) {
                    if seed != config.encoder_seed {
                        log::warn!("checkpoint was trained with encoder seed {seed}, running with {}", config.encoder_seed);
                    }
                }
                Generator::Decoder(params)
            }
            Backend::Endpoint => {
                let endpoint = config.endpoint.clone().expect("validated");
                let prompt = match config.prompt_mode {
                    PromptMode::ZeroShot => PromptConfig::zero_shot(),
                    PromptMode::FewShot => PromptConfig::few_shot(),
                };
                Generator::Endpoint(GeneratorClient::new(endpoint, config.client.clone()), prompt)
            }
        };
        let mut pipeline = Self::bare(config, generator)?;
        pipeline.load_resources()?;
        Ok(pipeline)
    }

    /// Decoder backend from in-memory parameters.
    pub fn with_decoder(config: PipelineConfig, params: DecoderParams) -> Result<Pipeline> {
        let config = PipelineConfig {
            backend: Backend::Decoder,
            ..config
        };
        config.validate()?;
        let mut pipeline = Self::bare(config, Generator::Decoder(params))?;
        pipeline.load_resources()?;
        Ok(pipeline)
    }

    fn bare(config: PipelineConfig, generator: Generator) -> Result<Pipeline> {
        Ok(Pipeline {
            encoder: config.encoder(),
            templates: TableTemplates::default(),
            internal_scores: None,
            external: None,
            generator,
            config,
        })
    }

    fn load_resources(&mut self) -> Result<()> {
        if let Some(path) = &self.config.internal_scores {
            let text = std::fs::read_to_string(path)?;
            self.internal_scores = Some(serde_json::from_str(&text)?);
        }
        if let Some(path) = &self.config.definitions {
            let defs = load_definitions(path)?;
            let texts: Vec<String> = defs.iter().map(|d| format!("{}: {}", d.term, d.summary)).collect();
            let ids: Vec<String> = defs.iter().map(|d| d.term.clone()).collect();
            let (matrix, queries) = match &self.config.embeddings {
                Some(emb_path) => {
                    let all = l2_normalize(&EmbeddingMatrix::load(emb_path)?)?;
                    let rows = ids
                        .iter()
                        .map(|id| {
                            all.row_by_id(id).map(<[f64]>::to_vec).ok_or_else(|| {
                                PipelineError::Config(format!("no embedding for definition `{id}`"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (l2_normalize(&EmbeddingMatrix::new(ids, rows)?)?, Some(all))
                }
                None => (self.encoder.embed_all(ids, texts.iter().map(String::as_str))?, None),
            };
            let index = FlatIndex::build(matrix)?.with_payloads(texts)?;
            self.external = Some(ExternalRetriever { index, queries });
        }
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Full internal ranking (all candidates, best first).
    fn rank_internal(&self, record: &QARecord) -> RankedFacts {
        let candidates = record.fact_candidates(&self.templates);
        match self.internal_scores.as_ref().and_then(|m| m.get(&record.id)) {
            Some(scores) => {
                let scored = candidates
                    .into_iter()
                    .map(|mut c| {
                        c.score = scores
                            .get(&c.id)
                            .or_else(|| scores.get(&c.fact_id))
                            .copied()
                            .unwrap_or(f64::NEG_INFINITY);
                        c
                    })
                    .collect();
                RankedFacts::new(scored, FactSource::Internal)
            }
            None => rank_with(&self.encoder, &record.question, candidates, usize::MAX),
        }
    }

    pub fn retrieve_internal(&self, record: &QARecord) -> RankedFacts {
        self.rank_internal(record).truncated(self.config.top_k_internal)
    }

    pub fn retrieve_external(&self, record: &QARecord) -> std::result::Result<RankedFacts, Failure> {
        let Some(ext) = &self.external else {
            return Ok(RankedFacts::empty(FactSource::External));
        };
        let query = match &ext.queries {
            Some(q) => {
                let key = format!("query:{}", record.id);
                q.row_by_id(&key)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Failure::new(&record.id, "external_retrieval", format!("no vector `{key}`")))?
            }
            None => normalize_vector(&self.encoder.embed(&record.question)).ok_or_else(|| {
                Failure::new(&record.id, "external_retrieval", "question has no embeddable tokens")
            })?,
        };
        let k = self.config.top_k_external.min(ext.index.len());
        if k == 0 {
            return Ok(RankedFacts::empty(FactSource::External));
        }
        ext.index
            .search(&query, k)
            .map_err(|e| Failure::new(&record.id, "external_retrieval", e.to_string()))
    }

    /// Decoder training example built exactly as inference sees the record.
    pub fn decoder_example(&self, record: &QARecord) -> std::result::Result<DecoderExample, Failure> {
        let facts = self.retrieve_internal(record);
        let inputs = featurize(&self.encoder, &record.question, &facts)
            .map_err(|e| Failure::new(&record.id, "featurize", e.to_string()))?;
        DecoderExample::new(&record.id, inputs, &record.gold_program)
            .map_err(|e| Failure::new(&record.id, "gold_unreachable", e.to_string()))
    }

    pub fn run_record(&self, record: &QARecord) -> (TraceRecord, RecordVerdict) {
        let mut failures = Vec::new();
        let internal = self.retrieve_internal(record);
        let external = self.retrieve_external(record).unwrap_or_else(|f| {
            failures.push(f);
            RankedFacts::empty(FactSource::External)
        });
        let input = make_generator_input(record, &internal, &external, self.config.token_budget);
        let mut trace = TraceRecord {
            record_id: record.id.clone(),
            internal_ids: internal.items().iter().map(|f| f.id.clone()).collect(),
            external_ids: external.items().iter().map(|f| f.id.clone()).collect(),
            input_tokens: input.token_count(),
            truncated: input.truncated,
            prompt: None,
            program: None,
            prediction: None,
            execution_correct: false,
            program_correct: None,
            failures: Vec::new(),
        };
        let prediction = match &self.generator {
            Generator::Gold => Ok(Prediction::Program(record.gold_program.clone())),
            Generator::Decoder(params) => featurize(&self.encoder, &record.question, &internal)
                .and_then(|inputs| decoder::generate(params, &inputs, self.config.max_decode_steps))
                .map(Prediction::Program)
                .map_err(|e| Failure::new(&record.id, "generation", e.to_string())),
            Generator::Endpoint(client, prompt_config) => match prompt_for(&input, prompt_config) {
                Ok(prompt) => {
                    trace.prompt = Some(prompt.clone());
                    client
                        .generate(&prompt)
                        .map(Prediction::Answer)
                        .map_err(|e| Failure::new(&record.id, "generator", e.to_string()))
                }
                Err(e) => Err(Failure::new(&record.id, "prompt", e.to_string())),
            },
        };
        let produces_programs = !matches!(self.generator, Generator::Endpoint(..));
        let mut verdict = RecordVerdict {
            record_id: record.id.clone(),
            execution_correct: false,
            program_correct: produces_programs.then_some(false),
        };
        match prediction {
            Ok(pred) => {
                if let Prediction::Program(p) = &pred {
                    trace.program = Some(p.to_string());
                    verdict.program_correct = Some(program_matches(p, &record.gold_program));
                }
                let judged = judge_execution(record, &pred, self.config.epsilon);
                verdict.execution_correct = judged.correct;
                trace.prediction = judged.answer;
                failures.extend(judged.failure);
            }
            Err(f) => failures.push(f),
        }
        trace.execution_correct = verdict.execution_correct;
        trace.program_correct = verdict.program_correct;
        trace.failures = failures;
        (trace, verdict)
    }

    /// Evaluates every record; per-record problems become report failures.
    pub fn run(&self, dataset: &Dataset) -> PipelineOutput {
        let mut records: Vec<&QARecord> = dataset.records.iter().collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut trace = Vec::with_capacity(records.len());
        let mut verdicts = Vec::with_capacity(records.len());
        for record in records {
            let (t, v) = self.run_record(record);
            trace.push(t);
            verdicts.push(v);
        }
        let mut failures: Vec<Failure> = trace.iter().flat_map(|t| t.failures.iter().cloned()).collect();
        failures.extend(dataset.failures.iter().map(|f| {
            Failure::new(
                f.id.clone().unwrap_or_else(|| format!("#{}", f.index)),
                "load",
                f.message.clone(),
            )
        }));
        let split = match self.config.subsets.modality_facts {
            ModalityFacts::Gold => split_subsets(&dataset.records, &self.config.subsets),
            ModalityFacts::Retrieved => {
                let retrieved: BTreeMap<&str, BTreeSet<String>> = trace
                    .iter()
                    .map(|t| {
                        let facts = dataset
                            .records
                            .iter()
                            .find(|r| r.id == t.record_id)
                            .map(|r| {
                                let ranked = self.retrieve_internal(r);
                                ranked.items().iter().map(|f| f.fact_id.clone()).collect()
                            })
                            .unwrap_or_default();
                        (t.record_id.as_str(), facts)
                    })
                    .collect();
                static EMPTY: BTreeSet<String> = BTreeSet::new();
                split_subsets_by(&dataset.records, &self.config.subsets, |r| {
                    retrieved.get(r.id.as_str()).unwrap_or(&EMPTY)
                })
            }
        };
        let mut echo = self.config.echo();
        let pairs: Vec<(RankedFacts, &BTreeSet<String>)> = dataset
            .records
            .iter()
            .filter(|r| !r.gold_facts.is_empty())
            .map(|r| (self.rank_internal(r), &r.gold_facts))
            .collect();
        let recall = mean_recall_at_k(pairs.iter().map(|(p, g)| (p, *g)), self.config.top_k_internal);
        echo.insert("internal_recall_at_k".into(), serde_json::json!(recall));
        PipelineOutput {
            report: build_report(&verdicts, &split, echo, failures),
            trace,
        }
    }
}

/// Loads the dataset, runs the configured backend and writes the trace when
/// `config.trace` is set.
pub fn run_pipeline(dataset_path: impl AsRef<Path>, config: PipelineConfig) -> Result<PipelineOutput> {
    let dataset = load_dataset(dataset_path)?;
    let trace_path = config.trace.clone();
    let output = Pipeline::new(config)?.run(&dataset);
    if let Some(path) = trace_path {
        output.write_trace(std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    Ok(output)
}

/// Builds decoder examples for every record whose gold program is reachable
/// from its retrieved facts and trains on them.
pub fn train_decoder(
    records: &[QARecord],
    config: &PipelineConfig,
    on_epoch: impl FnMut(&EpochStats, &DecoderParams) -> std::ops::ControlFlow<()>,
) -> Result<(TrainOutcome, Vec<Failure>)> {
    let pipeline = Pipeline::bare(config.clone(), Generator::Gold)?;
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    for record in records {
        match pipeline.decoder_example(record) {
            Ok(ex) => examples.push(ex),
            Err(f) => failures.push(f),
        }
    }
    let params = DecoderParams::new(config.encoder_dim, config.seed);
    let outcome = decoder::train_with(params, &examples, &config.train, on_epoch)?;
    Ok((outcome, failures))
}

/// Checkpoint header config for a decoder trained under `config`.
pub fn checkpoint_config(config: &PipelineConfig) -> serde_json::Value {
    serde_json::json!({
        "train": config.train,
        "encoder": {"kind": "hashed", "dim": config.encoder_dim, "seed": config.encoder_seed},
        "top_k_internal": config.top_k_internal,
        "seed": config.seed,
    })
}
