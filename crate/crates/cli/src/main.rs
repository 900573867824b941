use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use finqa_core::decoder::checkpoint::{save_checkpoint, write_loss_csv};
use finqa_core::dsl::parse_program;
use finqa_core::eval::{emit_report, report_json, write_report_csv, EvalReport, ReportFormat};
use finqa_core::executor::{execute_program, TableContext};
use finqa_core::pipeline::{checkpoint_config, train_decoder, Backend, Pipeline, PipelineConfig};
use finqa_core::preprocess::{load_dataset, make_generator_input, Dataset, QARecord, TableTemplates};
use finqa_core::retrieval::{
    load_definitions, normalize_vector, recall_at_k, summary_stats, EmbeddingMatrix, FactSource, RankedFacts,
};
use finqa_core::synthetic::synthetic_records;
use serde_json::json;

#[derive(Parser)]
#[command(name = "finqa", version, about = "Retrieval, program generation and evaluation for financial QA")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args)]
struct Overrides {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// JSON array of {term, summary} used for external retrieval.
    #[arg(long, global = true)]
    definitions: Option<PathBuf>,
    /// Embedding file with definition vectors and optional `query:<id>` rows.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    top_k_internal: Option<usize>,
    #[arg(long, global = true)]
    top_k_external: Option<usize>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    token_budget: Option<usize>,
    /// gold, decoder or endpoint.
    #[arg(long, global = true)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// json or csv.
    #[arg(long, global = true, default_value = "json")]
    report: ReportFormat,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Decoder checkpoint to read (decoder backend) or write (train-decoder).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Per-record JSON lines trace.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Population {
    /// Best score of every query.
    Top1,
    /// Every retrieved score.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and list records that failed to load.
    Ingest,
    /// Print each record's table sentences as JSON lines.
    Linearize {
        #[arg(long)]
        record: Option<String>,
    },
    /// Embed the definition corpus, plus dataset questions when given.
    IndexBuild {
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print retrieved facts and generator inputs as JSON lines.
    Retrieve {
        /// Score population for the similarity summary on stderr.
        #[arg(long, value_enum, default_value = "top1")]
        stats: Population,
    },
    /// Execute a program, against a record's table when `--record` is set.
    Execute {
        program: String,
        #[arg(long)]
        record: Option<String>,
    },
    /// Train the decoder and write a checkpoint.
    TrainDecoder {
        /// Train on N generated synthetic records instead of `--dataset`.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Stop once greedy decoding reproduces every training program.
        #[arg(long)]
        until_solved: bool,
    },
    /// Run the generator and write the trace (stdout unless `--trace`).
    Generate,
    /// Run the full pipeline and write the report.
    Evaluate {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Re-emit a saved JSON report in the `--report` format.
    Report {
        input: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

impl Overrides {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone().into(); })*
            };
        }
        set!(top_k_internal => top_k_internal, top_k_external => top_k_external, epsilon => epsilon,
            token_budget => token_budget, backend => backend);
        set!(definitions => definitions, embeddings => embeddings, endpoint => endpoint,
            checkpoint => checkpoint, trace => trace);
        if let Some(seed) = self.seed {
            c.seed = seed;
            c.train.seed = seed;
        }
        Ok(c)
    }

    fn dataset(&self) -> Result<Dataset> {
        let Some(path) = &self.dataset else {
            bail!("--dataset is required for this command");
        };
        load_dataset(path).with_context(|| format!("loading {}", path.display()))
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn find<'a>(data: &'a Dataset, id: &str) -> Result<&'a QARecord> {
    data.records
        .iter()
        .find(|r| r.id == id)
        .with_context(|| format!("no record `{id}` in dataset"))
}

fn ingest(opts: &Overrides) -> Result<()> {
    let data = opts.dataset()?;
    let summary = json!({
        "records": data.records.len(),
        "ids": data.records.iter().map(|r| &r.id).collect::<Vec<_>>(),
        "failures": data.failures,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn linearize(opts: &Overrides, record: Option<&str>) -> Result<()> {
    let data = opts.dataset()?;
    let templates = TableTemplates::default();
    let mut out = output(None)?;
    for r in &data.records {
        if record.is_some_and(|id| id != r.id) {
            continue;
        }
        let table = r.linearized_table(&templates);
        let line = json!({"record_id": r.id, "sentences": table.sentences});
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn index_build(opts: &Overrides, path: &Path) -> Result<()> {
    let config = opts.pipeline_config()?;
    let Some(defs_path) = &config.definitions else {
        bail!("--definitions is required for index-build");
    };
    let defs = load_definitions(defs_path)?;
    let encoder = config.encoder();
    let mut ids: Vec<String> = defs.iter().map(|d| d.term.clone()).collect();
    let texts: Vec<String> = defs.iter().map(|d| format!("{}: {}", d.term, d.summary)).collect();
    let defs_matrix = encoder.embed_all(ids.clone(), texts.iter().map(String::as_str))?;
    let mut rows: Vec<Vec<f64>> = defs_matrix.rows().map(<[f64]>::to_vec).collect();
    if opts.dataset.is_some() {
        for r in &opts.dataset()?.records {
            match normalize_vector(&encoder.embed(&r.question)) {
                Some(v) => {
                    ids.push(format!("query:{}", r.id));
                    rows.push(v);
                }
                None => log::warn!("record {}: question has no embeddable tokens", r.id),
            }
        }
    }
    let matrix = EmbeddingMatrix::new(ids, rows)?;
    matrix.save(path)?;
    eprintln!("wrote {} vectors of dimension {} to {}", matrix.len(), matrix.dim(), path.display());
    Ok(())
}

fn retrieve(opts: &Overrides, population: Population) -> Result<()> {
    let config = opts.pipeline_config()?;
    let data = opts.dataset()?;
    let pipeline = Pipeline::new(config.clone())?;
    let mut out = output(None)?;
    let mut scores = Vec::new();
    for r in &data.records {
        let internal = pipeline.retrieve_internal(r);
        let (external, error) = match pipeline.retrieve_external(r) {
            Ok(e) => (e, None),
            Err(f) => (RankedFacts::empty(FactSource::External), Some(f)),
        };
        match population {
            Population::Top1 => scores.extend(internal.scores().first()),
            Population::All => scores.extend(internal.scores()),
        }
        let recall = (!r.gold_facts.is_empty())
            .then(|| recall_at_k(&internal, &r.gold_facts, config.top_k_internal))
            .transpose()?;
        let input = make_generator_input(r, &internal, &external, config.token_budget);
        let line = json!({
            "record_id": r.id,
            "internal": internal.items(),
            "external": external.items(),
            "recall_at_k": recall,
            "generator_input": input,
            "failure": error,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    if let Ok(stats) = summary_stats(&scores) {
        let label = match population {
            Population::Top1 => "top1",
            Population::All => "all",
        };
        let summary = json!({"population": label, "count": scores.len(), "median": stats.median, "mean": stats.mean});
        eprintln!("{summary}");
    }
    Ok(())
}

fn execute(opts: &Overrides, program: &str, record: Option<&str>) -> Result<()> {
    let program = parse_program(program)?;
    let table = match record {
        Some(id) => find(&opts.dataset()?, id)?.table_context(),
        None => TableContext::new(),
    };
    let result = execute_program(&program, &table)?;
    let line = json!({"program": program.to_string(), "value": result.value, "step_values": result.step_values});
    println!("{line}");
    Ok(())
}

fn train(
    opts: &Overrides,
    synthetic: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    loss_csv: Option<&Path>,
    until_solved: bool,
) -> Result<()> {
    let mut config = opts.pipeline_config()?;
    let Some(path) = config.checkpoint.clone() else {
        bail!("--checkpoint is required for train-decoder");
    };
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = learning_rate {
        config.train.learning_rate = lr;
    }
    let dataset = match synthetic {
        Some(n) => Dataset {
            records: synthetic_records(n, config.seed),
            failures: Vec::new(),
        },
        None => opts.dataset()?,
    };
    let probe_config = config.clone();
    let (outcome, failures) = train_decoder(&dataset.records, &config, |stats, params| {
        log::info!("epoch {} loss {:.6} lr {:.3e}", stats.epoch + 1, stats.mean_loss, stats.learning_rate);
        if !until_solved {
            return ControlFlow::Continue(());
        }
        let solved = Pipeline::with_decoder(probe_config.clone(), params.clone())
            .map(|p| p.run(&dataset).report.program_accuracy == Some(1.0))
            .unwrap_or(false);
        if solved {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    for f in &failures {
        log::warn!("record {} skipped: {}", f.record_id, f.message);
    }
    save_checkpoint(&path, &outcome.params, checkpoint_config(&config))?;
    if let Some(csv_path) = loss_csv {
        write_loss_csv(output(Some(csv_path))?, &outcome.curve)?;
    }
    let summary = json!({
        "examples": dataset.records.len() - failures.len(),
        "skipped": failures.len(),
        "epochs": outcome.curve.len(),
        "initial_loss": outcome.curve.first().map(|s| s.mean_loss),
        "final_loss": outcome.curve.last().map(|s| s.mean_loss),
        "checkpoint": path,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn generate(opts: &Overrides) -> Result<()> {
    let config = opts.pipeline_config()?;
    let data = opts.dataset()?;
    let out = Pipeline::new(config.clone())?.run(&data);
    out.write_trace(output(config.trace.as_deref())?)?;
    Ok(())
}

fn write_report(report: &EvalReport, format: ReportFormat, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => emit_report(report, format, p)?,
        None => {
            let mut out = output(None)?;
            match format {
                ReportFormat::Json => out.write_all(report_json(report)?.as_bytes())?,
                ReportFormat::Csv => write_report_csv(report, &mut out)?,
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn evaluate(opts: &Overrides, path: Option<&Path>) -> Result<()> {
    let config = opts.pipeline_config()?;
    let data = opts.dataset()?;
    let out = Pipeline::new(config.clone())?.run(&data);
    if let Some(trace) = &config.trace {
        out.write_trace(output(Some(trace))?)?;
    }
    write_report(&out.report, opts.report, path)
}

fn report(opts: &Overrides, input: &Path, path: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report: EvalReport = serde_json::from_str(&text).context("parsing report")?;
    write_report(&report, opts.report, path)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = &cli.opts;
    match &cli.command {
        Command::Ingest => ingest(opts),
        Command::Linearize { record } => linearize(opts, record.as_deref()),
        Command::IndexBuild { output } => index_build(opts, output),
        Command::Retrieve { stats } => retrieve(opts, *stats),
        Command::Execute { program, record } => execute(opts, program, record.as_deref()),
        Command::TrainDecoder {
            synthetic,
            epochs,
            learning_rate,
            loss_csv,
            until_solved,
        } => train(opts, *synthetic, *epochs, *learning_rate, loss_csv.as_deref(), *until_solved),
        Command::Generate => generate(opts),
        Command::Evaluate { output } => evaluate(opts, output.as_deref()),
        Command::Report { input, output } => report(opts, input, output.as_deref()),
    }
}
