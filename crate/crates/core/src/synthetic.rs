//! Seeded toy records whose gold program is a fixed function of the question
//! template and of which sentence carries which role.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsl::{format_number, parse_program};
use crate::executor::{execute_program, TableContext};
use crate::preprocess::QARecord;

const ROLES: [(&str, &str); 4] = [
    ("revenue", "revenue was"),
    ("cost", "cost was"),
    ("tax", "tax was"),
    ("assets", "assets were"),
];

struct Template {
    question: &'static str,
    program: &'static str,
    roles: &'static [&'static str],
}

const TEMPLATES: [Template; 3] = [
    Template {
        question: "what is the gross profit ?",
        program: "subtract({revenue}, {cost})",
        roles: &["revenue", "cost"],
    },
    Template {
        question: "what is the total of cost and tax ?",
        program: "add({cost}, {tax})",
        roles: &["cost", "tax"],
    },
    Template {
        question: "what is revenue as a percentage of assets ?",
        program: "divide({revenue}, {assets}), multiply(#0, const_100)",
        roles: &["revenue", "assets"],
    },
];

/// `n` records cycling through the question templates. Role values are
/// distinct integers and sentence order is shuffled per record.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<QARecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let template = &TEMPLATES[i % TEMPLATES.len()];
            let mut values: Vec<u32> = Vec::with_capacity(ROLES.len());
            while values.len() < ROLES.len() {
                let v = rng.random_range(10..1000);
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            let mut order: Vec<usize> = (0..ROLES.len()).collect();
            order.shuffle(&mut rng);
            let pre_text: Vec<String> = order
                .iter()
                .map(|&r| format!("{} {} .", ROLES[r].1, values[r]))
                .collect();
            let mut program = template.program.to_string();
            for (r, (role, _)) in ROLES.iter().enumerate() {
                program = program.replace(&format!("{{{role}}}"), &values[r].to_string());
            }
            let gold_facts: BTreeSet<String> = template
                .roles
                .iter()
                .map(|role| {
                    let r = ROLES.iter().position(|(name, _)| name == role).expect("known role");
                    let pos = order.iter().position(|&o| o == r).expect("every role placed");
                    format!("text_{pos}")
                })
                .collect();
            let gold_program = parse_program(&program).expect("templates are valid programs");
            let answer = execute_program(&gold_program, &TableContext::new())
                .expect("distinct non-zero values")
                .value;
            let gold_answer = match answer.as_number() {
                Some(v) => format_number((v * 1e4).round() / 1e4),
                None => answer.to_string(),
            };
            QARecord {
                id: format!("synthetic-{i}"),
                question: template.question.to_string(),
                pre_text,
                post_text: Vec::new(),
                table: Vec::new(),
                gold_facts,
                gold_program_text: program,
                gold_program,
                gold_answer,
                metadata: serde_json::Map::new(),
            }
        })
        .collect()
}
