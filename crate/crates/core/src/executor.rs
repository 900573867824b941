//! Program evaluation: step memory, table aggregates and the constant table.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{ConstToken, OpToken, Operand, Program};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("step {step}: division by zero")]
    DivisionByZero { step: usize },
    #[error("step {step}: row `{row}` not found in table")]
    MissingRow { step: usize, row: String },
    #[error("step {step}: boolean result used as a numeric operand")]
    TypeMismatch { step: usize },
    #[error("step {step}: result is not finite")]
    Overflow { step: usize },
}

impl ExecError {
    /// Short machine-readable label used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ExecError::DivisionByZero { .. } => "division_by_zero",
            ExecError::MissingRow { .. } => "missing_row",
            ExecError::TypeMismatch { .. } => "type_mismatch",
            ExecError::Overflow { .. } => "overflow",
        }
    }
}

/// Result of a single step or of a whole program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Bool(bool),
}

impl Value {
    pub fn as_number(self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(v),
            Value::Bool(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Bool(true) => f.write_str("yes"),
            Value::Bool(false) => f.write_str("no"),
        }
    }
}

/// Row header to numeric cells, in table order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableContext {
    rows: Vec<(String, Vec<f64>)>,
}

impl TableContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a row. Returns `false` (and keeps the existing row) when the header
    /// is already present.
    pub fn insert(&mut self, header: impl Into<String>, cells: Vec<f64>) -> bool {
        let header = header.into();
        if self.get(&header).is_some() {
            return false;
        }
        self.rows.push((header, cells));
        true
    }

    /// Exact header match first, then a trimmed case-insensitive match.
    pub fn get(&self, header: &str) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(h, _)| h == header)
            .or_else(|| {
                let wanted = header.trim().to_lowercase();
                self.rows.iter().find(|(h, _)| h.trim().to_lowercase() == wanted)
            })
            .map(|(_, cells)| cells.as_slice())
    }

    pub fn headers(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(h, _)| h.as_str())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl<S: Into<String>> FromIterator<(S, Vec<f64>)> for TableContext {
    fn from_iter<I: IntoIterator<Item = (S, Vec<f64>)>>(iter: I) -> Self {
        let mut table = TableContext::new();
        for (h, cells) in iter {
            table.insert(h, cells);
        }
        table
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionResult {
    pub value: Value,
    pub step_values: Vec<Value>,
}

/// An operand after step references and constants have been substituted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Value(Value),
    Row(&'a str),
    Placeholder,
}

pub fn resolve_constant(c: ConstToken) -> f64 {
    c.value()
}

pub fn execute_program(program: &Program, table: &TableContext) -> Result<ExecutionResult, ExecError> {
    let mut memory: Vec<Value> = Vec::with_capacity(program.len());
    for (i, step) in program.steps().iter().enumerate() {
        let [a, b] = step.args().each_ref().map(|arg| resolve(arg, &memory));
        let value = eval_step_at(i, step.op(), a, b, table)?;
        memory.push(value);
    }
    let value = *memory.last().expect("programs have at least one step");
    Ok(ExecutionResult {
        value,
        step_values: memory,
    })
}

fn resolve<'a>(operand: &'a Operand, memory: &[Value]) -> Resolved<'a> {
    match operand {
        Operand::Literal(v) => Resolved::Value(Value::Number(*v)),
        Operand::Constant(c) => Resolved::Value(Value::Number(resolve_constant(*c))),
        // Program construction rules out forward references.
        Operand::Step(s) => Resolved::Value(memory[s.get()]),
        Operand::Row(name) => Resolved::Row(name),
        Operand::Placeholder => Resolved::Placeholder,
    }
}

/// Evaluates one operation. `b` is ignored by table operations.
pub fn eval_step(op: OpToken, a: Resolved<'_>, b: Resolved<'_>, table: &TableContext) -> Result<Value, ExecError> {
    eval_step_at(0, op, a, b, table)
}

fn eval_step_at(
    step: usize,
    op: OpToken,
    a: Resolved<'_>,
    b: Resolved<'_>,
    table: &TableContext,
) -> Result<Value, ExecError> {
    let number = |r: Resolved<'_>| match r {
        Resolved::Value(Value::Number(v)) => Ok(v),
        _ => Err(ExecError::TypeMismatch { step }),
    };
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(Value::Number(v))
        } else {
            Err(ExecError::Overflow { step })
        }
    };
    if op.is_table() {
        let Resolved::Row(name) = a else {
            return Err(ExecError::TypeMismatch { step });
        };
        let cells = table.get(name).ok_or_else(|| ExecError::MissingRow {
            step,
            row: name.to_string(),
        })?;
        let v = match op {
            OpToken::TableSum => cells.iter().sum(),
            OpToken::TableAverage => cells.iter().sum::<f64>() / cells.len() as f64,
            OpToken::TableMax => cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            OpToken::TableMin => cells.iter().copied().fold(f64::INFINITY, f64::min),
            _ => unreachable!(),
        };
        return finite(v);
    }
    let (x, y) = (number(a)?, number(b)?);
    match op {
        OpToken::Add => finite(x + y),
        OpToken::Subtract => finite(x - y),
        OpToken::Multiply => finite(x * y),
        OpToken::Divide => {
            if y == 0.0 {
                Err(ExecError::DivisionByZero { step })
            } else {
                finite(x / y)
            }
        }
        OpToken::Exp => finite(x.powf(y)),
        OpToken::Greater => Ok(Value::Bool(x > y)),
        _ => Err(ExecError::TypeMismatch { step }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_program;

    fn run(text: &str) -> Result<ExecutionResult, ExecError> {
        execute_program(&parse_program(text).unwrap(), &TableContext::new())
    }

    #[test]
    fn options_program() {
        let r = run("divide(9413, 20.01), divide(8249, 9.48), subtract(#0, #1)").unwrap();
        let v = r.value.as_number().unwrap();
        assert!((v - -399.73).abs() < 0.01, "{v}");
        assert_eq!(r.step_values.len(), 3);
    }

    #[test]
    fn unit_conversion_chain() {
        let v = run("divide(18, 100), divide(1.3, #0)").unwrap().value.as_number().unwrap();
        assert!((v - 7.2222).abs() < 1e-4);
    }

    #[test]
    fn amortization_average_is_exact() {
        let r = run("multiply(45, 4), add(#0, 44), divide(#1, 5)").unwrap();
        assert_eq!(r.value, Value::Number(44.8));
    }

    #[test]
    fn basic_ops() {
        let t = TableContext::new();
        let n = |v| Resolved::Value(Value::Number(v));
        assert_eq!(eval_step(OpToken::Exp, n(2.0), n(3.0), &t), Ok(Value::Number(8.0)));
        assert_eq!(eval_step(OpToken::Greater, n(5.0), n(5.0), &t), Ok(Value::Bool(false)));
        assert_eq!(eval_step(OpToken::Greater, n(6.0), n(5.0), &t), Ok(Value::Bool(true)));
        assert_eq!(Value::Bool(false).to_string(), "no");
    }

    #[test]
    fn table_aggregates() {
        let t: TableContext = [("revenue", vec![1.0, 2.0, 3.0])].into_iter().collect();
        let row = Resolved::Row("revenue");
        let p = Resolved::Placeholder;
        assert_eq!(eval_step(OpToken::TableAverage, row, p, &t), Ok(Value::Number(2.0)));
        assert_eq!(eval_step(OpToken::TableSum, row, p, &t), Ok(Value::Number(6.0)));
        assert_eq!(eval_step(OpToken::TableMax, row, p, &t), Ok(Value::Number(3.0)));
        assert_eq!(eval_step(OpToken::TableMin, Resolved::Row(" Revenue "), p, &t), Ok(Value::Number(1.0)));
        assert!(matches!(
            eval_step(OpToken::TableMax, Resolved::Row("cost"), p, &t),
            Err(ExecError::MissingRow { .. })
        ));
    }

    #[test]
    fn empty_numeric_row_average_is_overflow() {
        let t: TableContext = [("notes", vec![])].into_iter().collect();
        let r = execute_program(&parse_program("table_average(notes, none)").unwrap(), &t);
        assert_eq!(r, Err(ExecError::Overflow { step: 0 }));
    }

    #[test]
    fn constants() {
        assert_eq!(resolve_constant(ConstToken::Hundred), 100.0);
        assert_eq!(resolve_constant(ConstToken::MinusOne), -1.0);
        assert_eq!(resolve_constant(ConstToken::Billion), 1e9);
    }

    #[test]
    fn errors() {
        assert_eq!(run("divide(1, 0)"), Err(ExecError::DivisionByZero { step: 0 }));
        assert_eq!(
            run("greater(2, 1), add(#0, 1)"),
            Err(ExecError::TypeMismatch { step: 1 })
        );
        assert_eq!(run("exp(10, 400)"), Err(ExecError::Overflow { step: 0 }));
        assert_eq!(run("exp(-8, 0.5)"), Err(ExecError::Overflow { step: 0 }));
    }

    #[test]
    fn boolean_final_answer() {
        assert_eq!(run("greater(4.55, 4.52)").unwrap().value, Value::Bool(true));
    }
}
