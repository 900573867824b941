//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use common::{fixture, oracle_execute, random_context, random_program, OracleError, OracleValue};
use finqa_core::decoder::features::make_example;
use finqa_core::decoder::{gradient_check, DecoderParams, TrainConfig};
use finqa_core::dsl::{build_vocabulary, parse_program, valid_next_tokens, OpToken};
use finqa_core::eval::{execution_accuracy, program_matches, Prediction};
use finqa_core::executor::{execute_program, ExecError, TableContext, Value};
use finqa_core::llmgen::{answers_match, build_prompt, parse_answer, PromptConfig, DEFAULT_EPSILON, INSTRUCTION};
use finqa_core::pipeline::{Pipeline, PipelineConfig};
use finqa_core::preprocess::{load_dataset, Dataset, TableTemplates};
use finqa_core::retrieval::{
    l2_normalize, recall_at_k, EmbeddingMatrix, FactItem, FactSource, FlatIndex, HashedEmbedder, RankedFacts,
};
use finqa_core::synthetic::synthetic_records;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn number_of(program: &str) -> Result<f64, String> {
    let p = parse_program(program).map_err(|e| e.to_string())?;
    match execute_program(&p, &TableContext::new()).map_err(|e| e.to_string())?.value {
        Value::Number(v) => Ok(v),
        other => Err(format!("{program}: {other:?}")),
    }
}

fn worked_examples() -> Outcome {
    const OPTIONS_TOL: f64 = 0.5;
    const CASE_ONE_TOL: f64 = 0.01;
    let options = number_of("divide(9413, 20.01), divide(8249, 9.48), subtract(#0, #1)")?;
    check((options - -399.73).abs() <= OPTIONS_TOL, || format!("options program gave {options}"))?;
    let one = number_of("divide(18, const_100), divide(1.3, #0)")?;
    check((one - 7.2222).abs() <= CASE_ONE_TOL, || format!("unit conversion gave {one}"))?;
    let two = number_of("multiply(45, const_4), add(#0, 44), divide(#1, const_5)")?;
    check(two == 44.8, || format!("average amortization gave {two}"))?;
    Ok(format!("{options:.4} / {one:.4} / {two}"))
}

fn epsilon_comparison() -> Outcome {
    let right = answers_match(&parse_answer("94.17%"), "0.942", DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    let wrong = answers_match(&parse_answer("84.37%"), "0.6142", DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    check(right, || "94.17% rejected against 0.942".into())?;
    check(!wrong, || "84.37% accepted against 0.6142".into())?;
    Ok(format!("eps = {DEFAULT_EPSILON}"))
}

fn executor_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errors = 0;
    for _ in 0..1000 {
        let ctx = random_context(&mut rng);
        let program = random_program(&mut rng, &ctx);
        let ours = execute_program(&program, &ctx.table);
        let agree = match (&ours, oracle_execute(&program, &ctx.table)) {
            (Ok(r), Ok(OracleValue::Num(v))) => r.value == Value::Number(v),
            (Ok(r), Ok(OracleValue::Bool(b))) => r.value == Value::Bool(b),
            (Err(e), Err((step, kind))) => {
                errors += 1;
                match (e, kind) {
                    (ExecError::DivisionByZero { step: s }, OracleError::DivisionByZero)
                    | (ExecError::MissingRow { step: s, .. }, OracleError::MissingRow)
                    | (ExecError::TypeMismatch { step: s }, OracleError::TypeMismatch)
                    | (ExecError::Overflow { step: s }, OracleError::Overflow) => *s == step,
                    _ => false,
                }
            }
            _ => false,
        };
        check(agree, || format!("disagreement on {program}: {ours:?}"))?;
    }
    Ok(format!("1000 programs, {errors} agreed errors"))
}

fn mask_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for walk in 0..1000 {
        let ctx = random_context(&mut rng);
        let vocab = ctx.vocabulary();
        let mut prefix = vec![OpToken::Go.index()];
        loop {
            let next = valid_next_tokens(&vocab, &prefix).map_err(|e| e.to_string())?;
            match next.choose(&mut rng) {
                Some(&t) => prefix.push(t),
                None => break,
            }
        }
        let program = vocab.decode_program(&prefix).map_err(|e| format!("walk {walk}: {e}"))?;
        let reparsed = parse_program(&program.to_string()).map_err(|e| format!("walk {walk}: {e}"))?;
        check(reparsed == program, || format!("walk {walk} did not round-trip"))?;
    }
    let data = load_dataset(fixture("dataset.json")).map_err(|e| e.to_string())?;
    for record in &data.records {
        let facts = RankedFacts::new(record.fact_candidates(&TableTemplates::default()), FactSource::Internal);
        let vocab = build_vocabulary(&facts);
        let gold = vocab.encode_program(&record.gold_program);
        check(!gold.contains(&OpToken::Unk.index()), || format!("{}: gold not encodable", record.id))?;
        for t in 1..gold.len() {
            let valid = valid_next_tokens(&vocab, &gold[..t]).map_err(|e| e.to_string())?;
            check(valid.contains(&gold[t]), || format!("{}: gold leaves mask at {t}", record.id))?;
        }
    }
    Ok(format!("1000 walks, {} gold programs", data.records.len()))
}

fn retrieval_exactness() -> Outcome {
    const SCORE_TOL: f64 = 1e-9;
    const SELF_TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 32;
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ids: Vec<String> = (0..200).map(|i| format!("v{i}")).collect();
    let m = l2_normalize(&EmbeddingMatrix::new(ids, rows).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let index = FlatIndex::build(m.clone()).map_err(|e| e.to_string())?;
    for qi in 0..1000 {
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q: Vec<f64> = raw.iter().map(|x| x / norm).collect();
        let k = 1 + qi % 10;
        let mut scan: Vec<(usize, f64)> =
            (0..m.len()).map(|i| (i, m.row(i).iter().zip(&q).map(|(a, b)| a * b).sum())).collect();
        scan.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = index.search(&q, k).map_err(|e| e.to_string())?;
        check(got.len() == k, || format!("query {qi}: {} results", got.len()))?;
        for (item, (i, s)) in got.items().iter().zip(&scan) {
            check(item.id == m.ids()[*i] && (item.score - s).abs() <= SCORE_TOL, || {
                format!("query {qi}: {} {} vs {} {}", item.id, item.score, m.ids()[*i], s)
            })?;
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..m.len() {
        let top = index.search(m.row(i), 1).map_err(|e| e.to_string())?;
        worst = worst.max((top.items()[0].score - 1.0).abs());
    }
    check(worst <= SELF_TOL, || format!("self score off by {worst}"))?;
    Ok(format!("200 x 1000, self-score error {worst:.1e}"))
}

#[derive(serde::Deserialize)]
struct RecallCase {
    id: String,
    items: Vec<FactItem>,
    gold: BTreeSet<String>,
    recall_at_3: f64,
    recall_at_5: f64,
}

fn recall_contract() -> Outcome {
    let text = std::fs::read_to_string(fixture("recall.json")).map_err(|e| e.to_string())?;
    let cases: Vec<RecallCase> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    check(cases.len() == 10, || format!("{} fixture questions", cases.len()))?;
    for c in cases {
        let ranked = RankedFacts::new(c.items, FactSource::Internal);
        let r3 = recall_at_k(&ranked, &c.gold, 3).map_err(|e| e.to_string())?;
        let r5 = recall_at_k(&ranked, &c.gold, 5).map_err(|e| e.to_string())?;
        check(r3 == c.recall_at_3 && r5 == c.recall_at_5, || format!("{}: {r3}/{r5}", c.id))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..1000 {
        let items: Vec<FactItem> = (0..rng.random_range(1..12))
            .map(|i| FactItem::text(format!("f{}", rng.random_range(0..8)), rng.random_range(0.0..1.0), format!("s{i}")))
            .collect();
        let gold: BTreeSet<String> = (0..rng.random_range(1..4)).map(|_| format!("f{}", rng.random_range(0..8))).collect();
        let ranked = RankedFacts::new(items, FactSource::Internal);
        let r3 = recall_at_k(&ranked, &gold, 3).map_err(|e| e.to_string())?;
        let r5 = recall_at_k(&ranked, &gold, 5).map_err(|e| e.to_string())?;
        check(r5 >= r3, || format!("trial {trial}: recall@5 {r5} < recall@3 {r3}"))?;
    }
    Ok("10 fixture questions, 1000 random trials".into())
}

fn gradient_fidelity() -> Outcome {
    const MAX_REL: f64 = 1e-4;
    const FD_STEP: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let synthetic = synthetic_records(5, 3);
    for seed in 0..10u64 {
        let dim = 4 + (seed as usize % 5);
        let enc = HashedEmbedder::new(dim, seed);
        let example = if seed % 2 == 0 {
            let rec = &synthetic[seed as usize / 2];
            let facts = RankedFacts::new(
                rec.pre_text
                    .iter()
                    .enumerate()
                    .map(|(i, s)| FactItem::text(format!("text_{i}"), 0.0, s.as_str()))
                    .collect(),
                FactSource::Internal,
            );
            make_example(&enc, &rec.id, &rec.question, &facts, &rec.gold_program)
        } else {
            let facts = RankedFacts::new(
                vec![
                    FactItem::table_cell("table_1_1", "table_1", 0.0, "revenue of 2019 is 12.", "revenue"),
                    FactItem::table_cell("table_2_1", "table_2", 0.0, "cost of 2019 is 5.", "cost"),
                    FactItem::text("text_0", 0.0, "there were 2 segments and 3 regions ."),
                ],
                FactSource::Internal,
            );
            let program = parse_program("table_sum(revenue, none), divide(#0, 2), greater(#1, 3)").unwrap();
            make_example(&enc, "table", "what is the mean revenue per segment ?", &facts, &program)
        }
        .map_err(|e| e.to_string())?;
        let report = gradient_check(&DecoderParams::new(dim, seed), &example, FD_STEP).map_err(|e| e.to_string())?;
        let err = report.max_rel_error();
        check(err < MAX_REL, || format!("seed {seed} (d={dim}): {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max relative error {worst:.2e}"))
}

struct LearnRun {
    solved_at: Option<usize>,
    curve: Vec<f64>,
    params: DecoderParams,
}

fn learn_once(dataset: &Dataset, config: &PipelineConfig) -> Result<LearnRun, String> {
    let mut solved_at = None;
    let (outcome, failures) = finqa_core::pipeline::train_decoder(&dataset.records, config, |stats, params| {
        let probe = Pipeline::with_decoder(config.clone(), params.clone()).expect("valid config");
        let report = probe.run(dataset).report;
        if report.program_accuracy == Some(1.0) {
            solved_at = Some(stats.epoch + 1);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(|e| e.to_string())?;
    check(failures.is_empty(), || format!("unusable examples: {failures:?}"))?;
    Ok(LearnRun {
        solved_at,
        curve: outcome.curve.iter().map(|s| s.mean_loss).collect(),
        params: outcome.params,
    })
}

fn learnability() -> Outcome {
    let config = PipelineConfig {
        encoder_dim: 64,
        train: TrainConfig::toy(),
        ..PipelineConfig::default()
    };
    let dataset = Dataset {
        records: synthetic_records(50, 0),
        failures: Vec::new(),
    };
    let a = learn_once(&dataset, &config)?;
    let epoch = a.solved_at.ok_or_else(|| format!("not solved in {} epochs", config.train.epochs))?;
    let (first, last) = (a.curve[0], *a.curve.last().unwrap());
    check(last < first, || format!("loss rose from {first} to {last}"))?;
    let b = learn_once(&dataset, &config)?;
    check(a.curve == b.curve && a.params == b.params && a.solved_at == b.solved_at, || {
        "seeded rerun differs".into()
    })?;
    Ok(format!("100% at epoch {epoch}, loss {first:.3} -> {last:.4}, rerun identical"))
}

fn pipeline_consistency() -> Outcome {
    const MIN_ACCURACY: f64 = 0.99;
    let data = load_dataset(fixture("dataset.json")).map_err(|e| e.to_string())?;
    let out = Pipeline::new(PipelineConfig::default()).map_err(|e| e.to_string())?.run(&data);
    let acc = out.report.execution_accuracy.unwrap_or(0.0);
    check(acc >= MIN_ACCURACY, || format!("gold replay accuracy {acc}"))?;
    for f in &data.failures {
        let id = f.id.clone().unwrap_or_default();
        check(out.report.failures.iter().any(|r| r.record_id == id), || format!("{id} not itemized"))?;
    }
    for t in &out.trace {
        check(t.failures.is_empty() || !t.execution_correct, || format!("{} correct with failures", t.record_id))?;
    }
    // a perturbed prediction set must keep program matches inside execution matches
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for record in &data.records {
        let pred = if rng.random_bool(0.5) {
            record.gold_program.clone()
        } else {
            parse_program("add(2, 3), divide(#0, 5)").unwrap()
        };
        if program_matches(&pred, &record.gold_program) {
            let (exec, _) = execution_accuracy(&[(record, Prediction::Program(pred))], DEFAULT_EPSILON);
            check(exec.matches == 1, || format!("{}: program match without execution match", record.id))?;
        }
    }
    Ok(format!("execution accuracy {acc}, {} failures itemized", out.report.failures.len()))
}

fn prompt_fidelity() -> Outcome {
    const FIRST: &str = "as of and for the years ended december 31 , the operating income of 2003 is 1039 ; the operating income of 2002 ( 1 ) is 695 ; the operating income of 2001 ( 1 ) is 1717 ; what was the percentage change in operating income for entities in which the company has the ability to exercise significant influence but does not control and that are accounted for using the equity method between 2002 and 2003? given the contexts, your generated response to the above question must only be a single numerical number only (without any symbols nor texts), or a numerical number with a percentage sign only, or just yes/no, whichever applicable. 0.4949.";
    const SECOND: &str = "in millions except for per share data the diluted-as reported of 2005 is $ 4.55 ; in millions except for per share data the diluted-pro forma of 2005 is 4.52 ; was diluted-as reported net income per share greater than diluted-pro forma net income per share? given the contexts, your generated response to the above question must only be a single numerical number only (without any symbols nor texts), or a numerical number with a percentage sign only, or just yes/no, whichever applicable. Yes.";
    const ENDING: &str = "given the contexts, your generated response to the above question must only be a single numerical number only (without any symbols nor texts), or a numerical number with a percentage sign only, or just yes/no, whichever applicable.";
    let prompt = build_prompt(
        ["2012: 720", "thereafter: 4717", "total debt: $7680"],
        "what percentage of total debt is due after 2012?",
        &PromptConfig::few_shot(),
    )
    .map_err(|e| e.to_string())?;
    check(prompt.contains(FIRST), || "first example missing".into())?;
    check(prompt.contains(SECOND), || "second example missing".into())?;
    check(prompt.ends_with(ENDING) && INSTRUCTION == ENDING, || "prompt does not end with the instruction".into())?;
    Ok(format!("{} bytes", prompt.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);
    let criteria: [Criterion; 10] = [
        ("executor worked examples", worked_examples, Some(Duration::from_secs(1))),
        ("epsilon comparison", epsilon_comparison, Some(Duration::from_secs(1))),
        ("executor-oracle equivalence", executor_oracle, Some(Duration::from_secs(10))),
        ("mask soundness and completeness", mask_soundness, Some(Duration::from_secs(10))),
        ("retrieval exactness", retrieval_exactness, Some(Duration::from_secs(30))),
        ("recall contract", recall_contract, None),
        ("decoder gradient fidelity", gradient_fidelity, Some(Duration::from_secs(60))),
        ("decoder learnability", learnability, Some(Duration::from_secs(300))),
        ("pipeline self-consistency", pipeline_consistency, Some(Duration::from_secs(30))),
        ("prompt fidelity", prompt_fidelity, None),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut result = run();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&result, limit) {
            if elapsed > limit {
                result = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("criterion {} {name} ... PASS ({detail}; {elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name} ... FAIL ({why}; {elapsed:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
