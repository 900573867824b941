#![allow(dead_code)]

use std::path::PathBuf;

use finqa_core::dsl::{ConstToken, OpToken, Operand, Program, ProgramStep, ProgramVocabulary, StepRef};
use finqa_core::executor::TableContext;
use finqa_core::preprocess::ExtractedNumber;
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn number(value: f64, i: usize) -> ExtractedNumber {
    let raw = format!("{value}");
    ExtractedNumber {
        value,
        sentence_id: format!("text_{i}"),
        span: 0..raw.len(),
        raw,
    }
}

/// Random context: a few numbers and, half the time, table rows.
pub struct RandomContext {
    pub numbers: Vec<f64>,
    pub table: TableContext,
    pub rows: Vec<String>,
}

impl RandomContext {
    pub fn vocabulary(&self) -> ProgramVocabulary {
        ProgramVocabulary::new(
            self.numbers.iter().enumerate().map(|(i, &v)| number(v, i)).collect(),
            self.rows.clone(),
        )
    }
}

pub fn random_context(rng: &mut impl Rng) -> RandomContext {
    let n = rng.random_range(1..6);
    let numbers: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(-50i32..50) as f64,
            _ => (rng.random_range(-1e5..1e5f64) * 100.0).round() / 100.0,
        })
        .collect();
    let mut table = TableContext::new();
    let mut rows = Vec::new();
    if rng.random_bool(0.5) {
        for r in 0..rng.random_range(1..4) {
            let name = format!("row {r}");
            let cells = (0..rng.random_range(0..4)).map(|_| rng.random_range(-100.0..100.0f64)).collect();
            table.insert(name.clone(), cells);
            rows.push(name);
        }
    }
    RandomContext { numbers, table, rows }
}

/// A valid program over `ctx`, possibly one that fails at run time.
pub fn random_program(rng: &mut impl Rng, ctx: &RandomContext) -> Program {
    let len = rng.random_range(1..=11);
    let mut steps = Vec::with_capacity(len);
    for i in 0..len {
        let table_op = !ctx.rows.is_empty() && rng.random_bool(0.2);
        if table_op {
            let op = *[OpToken::TableSum, OpToken::TableAverage, OpToken::TableMax, OpToken::TableMin]
                .choose(rng)
                .unwrap();
            let row = if rng.random_bool(0.9) {
                ctx.rows.choose(rng).unwrap().clone()
            } else {
                "missing row".to_string()
            };
            steps.push(ProgramStep::new(op, Operand::Row(row), Operand::Placeholder));
            continue;
        }
        let op = *[
            OpToken::Add,
            OpToken::Subtract,
            OpToken::Multiply,
            OpToken::Divide,
            OpToken::Exp,
            OpToken::Greater,
        ]
        .choose(rng)
        .unwrap();
        let mut operand = || match rng.random_range(0..3) {
            0 if i > 0 => Operand::Step(StepRef::new(rng.random_range(0..i)).unwrap()),
            1 => Operand::Constant(*ConstToken::ALL.choose(rng).unwrap()),
            _ => Operand::Literal(*ctx.numbers.choose(rng).unwrap()),
        };
        let (a, b) = (operand(), operand());
        steps.push(ProgramStep::new(op, a, b));
    }
    Program::new(steps).expect("generated programs are well formed")
}

/// Expression tree with step references inlined.
#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Row(String),
    Nothing,
    Apply(&'static str, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleValue {
    Num(f64),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleError {
    DivisionByZero,
    MissingRow,
    TypeMismatch,
    Overflow,
}

fn constant_value(name: &str) -> f64 {
    match name.to_ascii_lowercase().as_str() {
        "const_m1" => -1.0,
        other => {
            let digits = &other["const_".len()..];
            digits.parse().expect("numeric constant")
        }
    }
}

/// Builds the tree for `step` from the serialized text of each operand, so
/// the oracle never touches the crate's resolution code.
pub fn to_tree(program: &Program, step: usize) -> Expr {
    let s = &program.steps()[step];
    let op: &'static str = s.op().as_str();
    let arg = |o: &Operand| match o {
        Operand::Literal(v) => Expr::Num(*v),
        Operand::Constant(c) => Expr::Num(constant_value(c.as_str())),
        Operand::Step(r) => to_tree(program, r.get()),
        Operand::Row(name) => Expr::Row(name.clone()),
        Operand::Placeholder => Expr::Nothing,
    };
    let [a, b] = s.args();
    Expr::Apply(op, Box::new(arg(a)), Box::new(arg(b)))
}

pub fn eval_tree(e: &Expr, table: &TableContext) -> Result<OracleValue, OracleError> {
    use OracleError::*;
    let Expr::Apply(op, a, b) = e else {
        return match e {
            Expr::Num(v) => Ok(OracleValue::Num(*v)),
            _ => Err(TypeMismatch),
        };
    };
    if op.starts_with("table_") {
        let Expr::Row(name) = a.as_ref() else {
            return Err(TypeMismatch);
        };
        let cells = table.get(name).ok_or(MissingRow)?;
        let v = match *op {
            "table_sum(" => cells.iter().fold(0.0, |s, x| s + x),
            "table_average(" => cells.iter().fold(0.0, |s, x| s + x) / cells.len() as f64,
            "table_max(" => cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            "table_min(" => cells.iter().cloned().fold(f64::INFINITY, f64::min),
            _ => unreachable!(),
        };
        return if v.is_finite() { Ok(OracleValue::Num(v)) } else { Err(Overflow) };
    }
    let num = |x: &Expr| match eval_tree(x, table)? {
        OracleValue::Num(v) => Ok(v),
        OracleValue::Bool(_) => Err(TypeMismatch),
    };
    let (x, y) = (num(a)?, num(b)?);
    let v = match *op {
        "add(" => x + y,
        "subtract(" => x - y,
        "multiply(" => x * y,
        "divide(" if y == 0.0 => return Err(DivisionByZero),
        "divide(" => x / y,
        "exp(" => x.powf(y),
        "greater(" => return Ok(OracleValue::Bool(x > y)),
        _ => unreachable!(),
    };
    if v.is_finite() {
        Ok(OracleValue::Num(v))
    } else {
        Err(Overflow)
    }
}

/// Evaluates every step's tree in order; the first failing step wins.
pub fn oracle_execute(program: &Program, table: &TableContext) -> Result<OracleValue, (usize, OracleError)> {
    let mut last = None;
    for i in 0..program.len() {
        last = Some(eval_tree(&to_tree(program, i), table).map_err(|e| (i, e))?);
    }
    Ok(last.expect("non-empty program"))
}
