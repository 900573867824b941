mod common;

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use common::fixture;
use finqa_core::dsl::parse_program;
use finqa_core::eval::{
    build_report, execution_accuracy, program_accuracy, program_matches, report_json, split_subsets,
    write_report_csv, EvalReport, Prediction, RecordVerdict, SubsetRules, CONTEXT_LENGTH, MODALITY, REASONING_STEPS,
};
use finqa_core::llmgen::stub::StubServer;
use finqa_core::pipeline::{train_decoder, Backend, Pipeline, PipelineConfig};
use finqa_core::preprocess::{load_dataset, Dataset};
use finqa_core::synthetic::synthetic_records;

fn ids(split: &finqa_core::eval::SubsetSplit, dim: &str, name: &str) -> Vec<String> {
    split.breakdowns[dim][name].clone()
}

#[test]
fn fixture_subsets_match_hand_labels() {
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let split = split_subsets(&data.records, &SubsetRules::default());
    let count = |dim, name| ids(&split, dim, name).len();
    assert_eq!(count(MODALITY, "table_only"), 4);
    assert_eq!(count(MODALITY, "text_only"), 7);
    assert_eq!(count(MODALITY, "table_text_mixed"), 1);
    assert_eq!(ids(&split, CONTEXT_LENGTH, "long_context"), ["interest-income-growth"]);
    assert_eq!(count(CONTEXT_LENGTH, "short_context"), 11);
    assert_eq!(count(REASONING_STEPS, "single_step"), 8);
    assert_eq!(count(REASONING_STEPS, "multi_step"), 4);
    assert_eq!(ids(&split, MODALITY, "table_text_mixed"), ["backlog-change"]);
    assert_eq!(split.excluded.len(), 1);
    assert_eq!(split.excluded[0].record_id, "unlabelled-facts");
    // each dimension partitions the labelled records
    for subsets in split.breakdowns.values() {
        let mut all: Vec<&String> = subsets.values().flatten().collect();
        all.sort();
        let before = all.len();
        all.dedup();
        assert_eq!(all.len(), before);
        assert_eq!(all.len(), 12);
    }
}

#[test]
fn gold_replay_scores_every_loadable_record() {
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let out = Pipeline::new(PipelineConfig::default()).unwrap().run(&data);
    let r = &out.report;
    assert_eq!(r.evaluated, 13);
    assert!(r.execution_accuracy.unwrap() >= 0.99, "{r:?}");
    assert_eq!(r.program_accuracy, Some(1.0));
    let kinds: Vec<(&str, &str)> = r.failures.iter().map(|f| (f.record_id.as_str(), f.kind.as_str())).collect();
    assert_eq!(kinds, [("broken-program", "load"), ("unlabelled-facts", "missing_gold")]);
    assert!(r.config_echo.contains_key("internal_recall_at_k"));
}

#[test]
fn program_matches_imply_execution_matches() {
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let preds: Vec<_> = data
        .records
        .iter()
        .map(|r| {
            let p = if r.gold_program.len() > 1 {
                r.gold_program.clone()
            } else {
                parse_program("add(1, 2)").unwrap()
            };
            (r, p)
        })
        .collect();
    let prog = program_accuracy(&preds.iter().map(|(r, p)| (*r, p)).collect::<Vec<_>>());
    let exec_pairs: Vec<_> = preds.iter().map(|(r, p)| (*r, Prediction::Program(p.clone()))).collect();
    let (exec, _) = execution_accuracy(&exec_pairs, 1e-3);
    assert_eq!(prog.total, exec.total);
    assert!(prog.matches <= exec.matches);
    for (r, p) in &preds {
        if program_matches(p, &r.gold_program) {
            let (e, _) = execution_accuracy(&[(*r, Prediction::Program(p.clone()))], 1e-3);
            assert_eq!(e.matches, 1, "{}", r.id);
        }
    }
}

#[test]
fn empty_prediction_set_has_no_accuracy() {
    let (acc, failures) = execution_accuracy(&[], 1e-3);
    assert_eq!(acc.value(), None);
    assert!(failures.is_empty());
    let report = build_report(&[], &Default::default(), BTreeMap::new(), Vec::new());
    assert_eq!(report.execution_accuracy, None);
}

#[test]
fn operand_order_and_literal_formatting() {
    let a = parse_program("add(2, 3)").unwrap();
    let b = parse_program("add(3, 2)").unwrap();
    assert!(!program_matches(&a, &b));
    let c = parse_program("divide(9413, 20.010)").unwrap();
    let d = parse_program("divide(9413, 20.01)").unwrap();
    assert!(program_matches(&c, &d));
    let e = parse_program("table_max(Revenue , none)").unwrap();
    let f = parse_program("table_max(revenue, none)").unwrap();
    assert!(program_matches(&e, &f));
}

fn sample_report() -> EvalReport {
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let split = split_subsets(&data.records, &SubsetRules::default());
    let verdicts: Vec<RecordVerdict> = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| RecordVerdict {
            record_id: r.id.clone(),
            execution_correct: i % 3 != 0,
            program_correct: Some(i % 2 == 0 && i % 3 != 0),
        })
        .collect();
    build_report(&verdicts, &split, PipelineConfig::default().echo(), Vec::new())
}

#[test]
fn report_is_byte_stable_and_round_trips() {
    let a = report_json(&sample_report()).unwrap();
    let b = report_json(&sample_report()).unwrap();
    assert_eq!(a, b);
    let back: EvalReport = serde_json::from_str(&a).unwrap();
    assert_eq!(back, sample_report());

    let mut csv_a = Vec::new();
    write_report_csv(&sample_report(), &mut csv_a).unwrap();
    let mut csv_b = Vec::new();
    write_report_csv(&sample_report(), &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    let mut reader = csv::Reader::from_reader(csv_a.as_slice());
    assert_eq!(reader.records().count(), 1 + 7);
}

#[test]
fn subset_accuracy_is_recomputable_from_verdicts() {
    let report = sample_report();
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let split = split_subsets(&data.records, &SubsetRules::default());
    let order: Vec<&str> = data.records.iter().map(|r| r.id.as_str()).collect();
    for (dim, subsets) in &split.breakdowns {
        for (name, members) in subsets {
            let stats = &report.per_subset[dim][name];
            assert_eq!(stats.count, members.len());
            let correct = members
                .iter()
                .filter(|id| order.iter().position(|o| o == id).unwrap() % 3 != 0)
                .count();
            let expected = (!members.is_empty()).then(|| correct as f64 / members.len() as f64);
            assert_eq!(stats.execution_accuracy, expected, "{dim}/{name}");
        }
    }
}

#[test]
fn junk_endpoint_answers_are_unparseable() {
    let server = StubServer::fixed("I cannot say").unwrap();
    let config = PipelineConfig {
        backend: Backend::Endpoint,
        endpoint: Some(server.url()),
        ..PipelineConfig::default()
    };
    let data = load_dataset(fixture("dataset.json")).unwrap();
    let out = Pipeline::new(config).unwrap().run(&data);
    assert_eq!(out.report.execution_accuracy, Some(0.0));
    assert_eq!(out.report.program_accuracy, None);
    let unparseable = out.report.failures.iter().filter(|f| f.kind == "unparseable_answer").count();
    assert_eq!(unparseable, 13);
    assert_eq!(server.request_count(), 13);
    assert!(out.trace.iter().all(|t| t.prompt.is_some()));
}

#[test]
fn trained_decoder_solves_synthetic_task() {
    let records = synthetic_records(40, 11);
    let config = PipelineConfig::default();
    let mut config = config;
    config.train.epochs = 120;
    let probe = records.clone();
    let probe_config = config.clone();
    let (outcome, failures) = train_decoder(&records, &config, |stats, params| {
        if stats.epoch % 5 != 4 {
            return ControlFlow::Continue(());
        }
        let p = Pipeline::with_decoder(probe_config.clone(), params.clone()).unwrap();
        let out = p.run(&Dataset {
            records: probe.clone(),
            failures: Vec::new(),
        });
        if out.report.program_accuracy == Some(1.0) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert!(failures.is_empty());
    let pipeline = Pipeline::with_decoder(config, outcome.params).unwrap();
    let out = pipeline.run(&Dataset {
        records: records.clone(),
        failures: Vec::new(),
    });
    assert_eq!(out.report.execution_accuracy, Some(1.0), "{:?}", out.report.failures);
    assert_eq!(out.report.program_accuracy, Some(1.0));
}
