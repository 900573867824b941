//! The arithmetic program language.
//!
//! A program is a comma separated list of binary steps. The result of step
//! `n` is addressable by later steps as `#n`.
//!
//! ```text
//! program  := step ("," step)*
//! step     := OP "(" operand "," operand ")"
//! OP       := "add" | "subtract" | "multiply" | "divide" | "exp" | "greater"
//!           | "table_sum" | "table_average" | "table_max" | "table_min"
//! operand  := number | constant | "#" digit+ | row_name | "none"
//! number   := "-"? digit+ ("." digit+)?
//! constant := "const_" ("1" .. "10" | "100" | "1000" | ... | "1000000000" | "m1")
//! ```
//!
//! Table operations take a row header as first operand and the placeholder
//! `none` as second operand. Whitespace between tokens is ignored.
//!
//! The decoder sees programs as token index sequences over a
//! [`ProgramVocabulary`]; [`StructuralMask`] tracks which indices keep a
//! partial sequence well formed.

use std::fmt;

use thiserror::Error;

use crate::preprocess::{extract_numbers, ExtractedNumber};
use crate::retrieval::RankedFacts;

/// Maximum number of steps in one program (bounded by `#0` .. `#10`).
pub const MAX_STEPS: usize = 11;

/// Number of step memory tokens.
pub const STEP_TOKENS: usize = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("step {step} references #{index}, which is not an earlier step")]
    Reference { step: usize, index: usize },
    #[error("step {step} has {found} operands, expected 2")]
    Arity { step: usize, found: usize },
    #[error("step {step}: {message}")]
    Operand { step: usize, message: String },
    #[error("program has {0} steps, expected between 1 and {MAX_STEPS}")]
    Length(usize),
    #[error("vocabulary index {index} out of range for vocabulary of size {size}")]
    Index { index: usize, size: usize },
    #[error("invalid prefix at position {position}: {message}")]
    InvalidPrefix { position: usize, message: String },
}

/// Operation and structural tokens, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpToken {
    Eof,
    Unk,
    Go,
    Close,
    Add,
    Subtract,
    Multiply,
    Divide,
    Exp,
    Greater,
    TableSum,
    TableAverage,
    TableMax,
    TableMin,
}

impl OpToken {
    pub const ALL: [OpToken; 14] = [
        OpToken::Eof,
        OpToken::Unk,
        OpToken::Go,
        OpToken::Close,
        OpToken::Add,
        OpToken::Subtract,
        OpToken::Multiply,
        OpToken::Divide,
        OpToken::Exp,
        OpToken::Greater,
        OpToken::TableSum,
        OpToken::TableAverage,
        OpToken::TableMax,
        OpToken::TableMin,
    ];

    pub const CALLABLE: [OpToken; 10] = [
        OpToken::Add,
        OpToken::Subtract,
        OpToken::Multiply,
        OpToken::Divide,
        OpToken::Exp,
        OpToken::Greater,
        OpToken::TableSum,
        OpToken::TableAverage,
        OpToken::TableMax,
        OpToken::TableMin,
    ];

    /// Token text as it appears in the vocabulary (`"add("`, `")"`, `"EOF"`).
    pub fn as_str(self) -> &'static str {
        match self {
            OpToken::Eof => "EOF",
            OpToken::Unk => "UNK",
            OpToken::Go => "GO",
            OpToken::Close => ")",
            OpToken::Add => "add(",
            OpToken::Subtract => "subtract(",
            OpToken::Multiply => "multiply(",
            OpToken::Divide => "divide(",
            OpToken::Exp => "exp(",
            OpToken::Greater => "greater(",
            OpToken::TableSum => "table_sum(",
            OpToken::TableAverage => "table_average(",
            OpToken::TableMax => "table_max(",
            OpToken::TableMin => "table_min(",
        }
    }

    /// Looks up a callable operation by its bare name (`"add"`).
    pub fn from_name(name: &str) -> Option<OpToken> {
        Self::CALLABLE
            .iter()
            .copied()
            .find(|op| op.as_str().trim_end_matches('(') == name)
    }

    pub fn is_callable(self) -> bool {
        !matches!(
            self,
            OpToken::Eof | OpToken::Unk | OpToken::Go | OpToken::Close
        )
    }

    pub fn is_table(self) -> bool {
        matches!(
            self,
            OpToken::TableSum | OpToken::TableAverage | OpToken::TableMax | OpToken::TableMin
        )
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OpToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Predeclared numeric constants, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstToken {
    Two,
    One,
    Three,
    Four,
    Five,
    Six,
    Seven,
    Eight,
    Nine,
    Ten,
    Hundred,
    Thousand,
    TenThousand,
    HundredThousand,
    Million,
    TenMillion,
    Billion,
    MinusOne,
}

impl ConstToken {
    pub const ALL: [ConstToken; 18] = [
        ConstToken::Two,
        ConstToken::One,
        ConstToken::Three,
        ConstToken::Four,
        ConstToken::Five,
        ConstToken::Six,
        ConstToken::Seven,
        ConstToken::Eight,
        ConstToken::Nine,
        ConstToken::Ten,
        ConstToken::Hundred,
        ConstToken::Thousand,
        ConstToken::TenThousand,
        ConstToken::HundredThousand,
        ConstToken::Million,
        ConstToken::TenMillion,
        ConstToken::Billion,
        ConstToken::MinusOne,
    ];

    /// Program-string form, e.g. `const_100`.
    pub fn as_str(self) -> &'static str {
        match self {
            ConstToken::Two => "const_2",
            ConstToken::One => "const_1",
            ConstToken::Three => "const_3",
            ConstToken::Four => "const_4",
            ConstToken::Five => "const_5",
            ConstToken::Six => "const_6",
            ConstToken::Seven => "const_7",
            ConstToken::Eight => "const_8",
            ConstToken::Nine => "const_9",
            ConstToken::Ten => "const_10",
            ConstToken::Hundred => "const_100",
            ConstToken::Thousand => "const_1000",
            ConstToken::TenThousand => "const_10000",
            ConstToken::HundredThousand => "const_100000",
            ConstToken::Million => "const_1000000",
            ConstToken::TenMillion => "const_10000000",
            ConstToken::Billion => "const_1000000000",
            ConstToken::MinusOne => "const_m1",
        }
    }

    /// Case-insensitive lookup, so both `CONST_100` and `const_100` resolve.
    pub fn from_name(name: &str) -> Option<ConstToken> {
        let lower = name.to_ascii_lowercase();
        Self::ALL.iter().copied().find(|c| c.as_str() == lower)
    }

    pub fn value(self) -> f64 {
        match self {
            ConstToken::Two => 2.0,
            ConstToken::One => 1.0,
            ConstToken::Three => 3.0,
            ConstToken::Four => 4.0,
            ConstToken::Five => 5.0,
            ConstToken::Six => 6.0,
            ConstToken::Seven => 7.0,
            ConstToken::Eight => 8.0,
            ConstToken::Nine => 9.0,
            ConstToken::Ten => 10.0,
            ConstToken::Hundred => 100.0,
            ConstToken::Thousand => 1_000.0,
            ConstToken::TenThousand => 10_000.0,
            ConstToken::HundredThousand => 100_000.0,
            ConstToken::Million => 1_000_000.0,
            ConstToken::TenMillion => 10_000_000.0,
            ConstToken::Billion => 1_000_000_000.0,
            ConstToken::MinusOne => -1.0,
        }
    }

    pub fn index(self) -> usize {
        OpToken::ALL.len() + self as usize
    }
}

impl fmt::Display for ConstToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference `#n` to the result of step `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepRef(u8);

impl StepRef {
    pub fn new(index: usize) -> Option<StepRef> {
        (index < STEP_TOKENS).then_some(StepRef(index as u8))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn vocab_index(self) -> usize {
        OpToken::ALL.len() + ConstToken::ALL.len() + self.get()
    }
}

impl fmt::Display for StepRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Literal(f64),
    Constant(ConstToken),
    Step(StepRef),
    /// Row header, first operand of table operations.
    Row(String),
    /// The `none` second operand of table operations.
    Placeholder,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Literal(v) => f.write_str(&format_number(*v)),
            Operand::Constant(c) => f.write_str(c.as_str()),
            Operand::Step(s) => write!(f, "{s}"),
            Operand::Row(name) => f.write_str(name),
            Operand::Placeholder => f.write_str("none"),
        }
    }
}

/// Shortest decimal rendering that parses back to the same `f64`.
pub fn format_number(value: f64) -> String {
    // `Display` for f64 is shortest-round-trip and never uses exponents.
    format!("{value}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramStep {
    op: OpToken,
    args: [Operand; 2],
}

impl ProgramStep {
    /// Builds a step; the operand rules are checked when the step is placed
    /// into a [`Program`].
    pub fn new(op: OpToken, a: Operand, b: Operand) -> ProgramStep {
        ProgramStep { op, args: [a, b] }
    }

    pub fn op(&self) -> OpToken {
        self.op
    }

    pub fn args(&self) -> &[Operand; 2] {
        &self.args
    }

    fn validate(&self, step: usize) -> Result<(), DslError> {
        if !self.op.is_callable() {
            return Err(DslError::Operand {
                step,
                message: format!("{} is not a callable operation", self.op),
            });
        }
        if self.op.is_table() {
            match &self.args {
                [Operand::Row(name), Operand::Placeholder] if !name.trim().is_empty() => Ok(()),
                _ => Err(DslError::Operand {
                    step,
                    message: format!("{} expects (row name, none)", self.op),
                }),
            }
        } else {
            for arg in &self.args {
                match arg {
                    Operand::Row(_) | Operand::Placeholder => {
                        return Err(DslError::Operand {
                            step,
                            message: format!("{} does not accept row operands", self.op),
                        })
                    }
                    Operand::Step(s) if s.get() >= step => {
                        return Err(DslError::Reference {
                            step,
                            index: s.get(),
                        })
                    }
                    Operand::Literal(v) if !v.is_finite() => {
                        return Err(DslError::Operand {
                            step,
                            message: "non-finite literal".into(),
                        })
                    }
                    _ => {}
                }
            }
            Ok(())
        }
    }
}

impl fmt::Display for ProgramStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}, {})", self.op.as_str(), self.args[0], self.args[1])
    }
}

/// A well-formed program: 1..=11 steps, no forward references.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    steps: Vec<ProgramStep>,
}

impl Program {
    pub fn new(steps: Vec<ProgramStep>) -> Result<Program, DslError> {
        if steps.is_empty() || steps.len() > MAX_STEPS {
            return Err(DslError::Length(steps.len()));
        }
        for (i, step) in steps.iter().enumerate() {
            step.validate(i)?;
        }
        Ok(Program { steps })
    }

    pub fn steps(&self) -> &[ProgramStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{step}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Program {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_program(s)
    }
}

/// Canonical string form: `op(a, b)` steps joined by `", "`.
pub fn serialize_program(program: &Program) -> String {
    program.to_string()
}

pub fn parse_program(text: &str) -> Result<Program, DslError> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    let mut steps = Vec::new();

    loop {
        pos = skip_ws(bytes, pos);
        if pos >= bytes.len() {
            return Err(syntax(pos, "expected an operation"));
        }
        let name_start = pos;
        while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
            pos += 1;
        }
        let name = &text[name_start..pos];
        if name.is_empty() {
            return Err(syntax(pos, "expected an operation name"));
        }
        let op = OpToken::from_name(&name.to_ascii_lowercase())
            .ok_or_else(|| syntax(name_start, format!("unknown operation `{name}`")))?;
        pos = skip_ws(bytes, pos);
        if bytes.get(pos) != Some(&b'(') {
            return Err(syntax(pos, "expected `(`"));
        }
        let open = pos;
        let close = matching_paren(bytes, open).ok_or_else(|| syntax(open, "unbalanced parenthesis"))?;
        let step_index = steps.len();
        let content = &text[open + 1..close];
        let args = split_args(content, op.is_table());
        if args.len() != 2 {
            return Err(DslError::Arity {
                step: step_index,
                found: args.len(),
            });
        }
        let a = parse_operand(args[0], op, 0, step_index, open + 1)?;
        let b = parse_operand(args[1], op, 1, step_index, open + 1)?;
        let step = ProgramStep::new(op, a, b);
        step.validate(step_index)?;
        steps.push(step);

        pos = skip_ws(bytes, close + 1);
        match bytes.get(pos) {
            None => break,
            Some(b',') => pos += 1,
            Some(_) => return Err(syntax(pos, "expected `,` between steps")),
        }
    }
    Program::new(steps)
}

fn syntax(offset: usize, message: impl Into<String>) -> DslError {
    DslError::Syntax {
        offset,
        message: message.into(),
    }
}

fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

fn matching_paren(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Splits on top-level commas. Table operations split only at the last one so
/// that row headers may contain commas.
fn split_args(content: &str, table: bool) -> Vec<&str> {
    let mut cuts = Vec::new();
    let mut depth = 0i32;
    for (i, c) in content.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => cuts.push(i),
            _ => {}
        }
    }
    if content.trim().is_empty() {
        return Vec::new();
    }
    if table {
        return match cuts.last() {
            Some(&c) => vec![&content[..c], &content[c + 1..]],
            None => vec![content],
        };
    }
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for c in cuts {
        out.push(&content[start..c]);
        start = c + 1;
    }
    out.push(&content[start..]);
    out
}

fn parse_operand(
    raw: &str,
    op: OpToken,
    position: usize,
    step: usize,
    offset: usize,
) -> Result<Operand, DslError> {
    let tok = raw.trim();
    if tok.is_empty() {
        return Err(syntax(offset, "empty operand"));
    }
    if op.is_table() {
        return if position == 0 {
            Ok(Operand::Row(tok.to_string()))
        } else if tok.eq_ignore_ascii_case("none") {
            Ok(Operand::Placeholder)
        } else {
            Err(DslError::Operand {
                step,
                message: format!("second operand of {op} must be `none`, found `{tok}`"),
            })
        };
    }
    if tok.contains('(') || tok.contains(')') {
        return Err(syntax(
            offset,
            format!("nested operation `{tok}`; use step references instead"),
        ));
    }
    if let Some(digits) = tok.strip_prefix('#') {
        let index: usize = digits
            .parse()
            .map_err(|_| syntax(offset, format!("malformed step reference `{tok}`")))?;
        if index >= step || index >= STEP_TOKENS {
            return Err(DslError::Reference { step, index });
        }
        return Ok(Operand::Step(StepRef(index as u8)));
    }
    if tok.len() > 6 && tok[..6].eq_ignore_ascii_case("const_") {
        return ConstToken::from_name(tok)
            .map(Operand::Constant)
            .ok_or_else(|| syntax(offset, format!("unknown constant `{tok}`")));
    }
    parse_literal(tok)
        .map(Operand::Literal)
        .ok_or_else(|| syntax(offset, format!("malformed number `{tok}`")))
}

fn parse_literal(tok: &str) -> Option<f64> {
    let body = tok.strip_prefix('-').unwrap_or(tok);
    let mut parts = body.splitn(2, '.');
    let int = parts.next()?;
    let frac = parts.next();
    let digits_ok = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let well_formed = match frac {
        Some(f) => (digits_ok(int) || int.is_empty()) && digits_ok(f),
        None => digits_ok(int),
    };
    if !well_formed {
        return None;
    }
    tok.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// One entry of a [`ProgramVocabulary`].
#[derive(Debug, Clone, PartialEq)]
pub enum VocabToken {
    Op(OpToken),
    Const(ConstToken),
    Step(StepRef),
    /// A number occurrence in the retrieved context.
    Number(ExtractedNumber),
    /// A table row header available to table operations.
    Row(String),
    Placeholder,
}

impl fmt::Display for VocabToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabToken::Op(op) => f.write_str(op.as_str()),
            VocabToken::Const(c) => f.write_str(c.as_str()),
            VocabToken::Step(s) => write!(f, "{s}"),
            VocabToken::Number(n) => f.write_str(&format_number(n.value)),
            VocabToken::Row(name) => f.write_str(name),
            VocabToken::Placeholder => f.write_str("none"),
        }
    }
}

/// Index space the decoder chooses from ("program ids").
///
/// Layout: 14 operation tokens, 18 constants, `#0`..`#10`, then context
/// numbers in sentence/span order, then distinct row headers, then the `none`
/// placeholder (only when at least one row header is present).
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramVocabulary {
    entries: Vec<VocabToken>,
    numbers: usize,
    rows: usize,
}

/// Count of the fixed special tokens at the start of every vocabulary.
pub const SPECIAL_TOKENS: usize = 14 + 18 + STEP_TOKENS;

impl ProgramVocabulary {
    /// Builds a vocabulary from extracted numbers and row headers directly.
    pub fn new(numbers: Vec<ExtractedNumber>, rows: Vec<String>) -> ProgramVocabulary {
        let mut entries: Vec<VocabToken> = OpToken::ALL.iter().map(|&o| VocabToken::Op(o)).collect();
        entries.extend(ConstToken::ALL.iter().map(|&c| VocabToken::Const(c)));
        entries.extend((0..STEP_TOKENS).map(|i| VocabToken::Step(StepRef(i as u8))));
        let n_numbers = numbers.len();
        entries.extend(numbers.into_iter().map(VocabToken::Number));
        let mut seen: Vec<String> = Vec::new();
        for row in rows {
            if !seen.contains(&row) {
                seen.push(row);
            }
        }
        let n_rows = seen.len();
        entries.extend(seen.into_iter().map(VocabToken::Row));
        if n_rows > 0 {
            entries.push(VocabToken::Placeholder);
        }
        ProgramVocabulary {
            entries,
            numbers: n_numbers,
            rows: n_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabToken] {
        &self.entries
    }

    pub fn numbers(&self) -> impl Iterator<Item = (usize, &ExtractedNumber)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                VocabToken::Number(n) => Some((i, n)),
                _ => None,
            })
    }

    pub fn number_range(&self) -> std::ops::Range<usize> {
        SPECIAL_TOKENS..SPECIAL_TOKENS + self.numbers
    }

    pub fn row_range(&self) -> std::ops::Range<usize> {
        let start = SPECIAL_TOKENS + self.numbers;
        start..start + self.rows
    }

    pub fn placeholder_index(&self) -> Option<usize> {
        (self.rows > 0).then(|| SPECIAL_TOKENS + self.numbers + self.rows)
    }

    pub fn token_at(&self, index: usize) -> Result<&VocabToken, DslError> {
        self.entries.get(index).ok_or(DslError::Index {
            index,
            size: self.entries.len(),
        })
    }

    /// First index holding `token`. Numbers compare by value and position.
    pub fn index_of(&self, token: &VocabToken) -> Option<usize> {
        match token {
            VocabToken::Op(op) => Some(op.index()),
            VocabToken::Const(c) => Some(c.index()),
            VocabToken::Step(s) => Some(s.vocab_index()),
            _ => self.entries.iter().position(|e| e == token),
        }
    }

    /// First context-number entry whose value equals `value`.
    pub fn index_of_value(&self, value: f64) -> Option<usize> {
        self.numbers().find(|(_, n)| n.value == value).map(|(i, _)| i)
    }

    pub fn index_of_row(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        let range = self.row_range();
        self.entries[range.clone()]
            .iter()
            .position(|e| matches!(e, VocabToken::Row(r) if r.trim() == name))
            .map(|p| range.start + p)
    }

    /// Maps an operand to its vocabulary index, `None` if it has no entry.
    pub fn operand_index(&self, operand: &Operand) -> Option<usize> {
        match operand {
            Operand::Literal(v) => self.index_of_value(*v),
            Operand::Constant(c) => Some(c.index()),
            Operand::Step(s) => Some(s.vocab_index()),
            Operand::Row(name) => self.index_of_row(name),
            Operand::Placeholder => self.placeholder_index(),
        }
    }

    /// Token sequence `GO (op a b ")")* EOF` for `program`. Operands without a
    /// vocabulary entry map to `UNK`.
    pub fn encode_program(&self, program: &Program) -> Vec<usize> {
        let mut out = Vec::with_capacity(program.len() * 4 + 2);
        out.push(OpToken::Go.index());
        for step in program.steps() {
            out.push(step.op().index());
            for arg in step.args() {
                out.push(self.operand_index(arg).unwrap_or(OpToken::Unk.index()));
            }
            out.push(OpToken::Close.index());
        }
        out.push(OpToken::Eof.index());
        out
    }

    /// Rebuilds a program from a complete token sequence (leading `GO`
    /// optional, trailing `EOF` required).
    pub fn decode_program(&self, indices: &[usize]) -> Result<Program, DslError> {
        let body = match indices.first() {
            Some(&i) if i == OpToken::Go.index() => &indices[1..],
            _ => indices,
        };
        let mut mask = StructuralMask::new(self);
        let mut steps = Vec::new();
        let mut current: Option<(OpToken, Vec<Operand>)> = None;
        for (pos, &idx) in body.iter().enumerate() {
            mask.advance(idx).map_err(|e| match e {
                DslError::InvalidPrefix { message, .. } => DslError::InvalidPrefix {
                    position: pos + 1,
                    message,
                },
                other => other,
            })?;
            match self.token_at(idx)? {
                VocabToken::Op(OpToken::Eof) => break,
                VocabToken::Op(OpToken::Close) => {
                    let (op, args) = current.take().expect("mask guarantees an open step");
                    let [a, b]: [Operand; 2] = args.try_into().expect("mask guarantees two operands");
                    steps.push(ProgramStep::new(op, a, b));
                }
                VocabToken::Op(op) => current = Some((*op, Vec::with_capacity(2))),
                tok => {
                    let operand = match tok {
                        VocabToken::Const(c) => Operand::Constant(*c),
                        VocabToken::Step(s) => Operand::Step(*s),
                        VocabToken::Number(n) => Operand::Literal(n.value),
                        VocabToken::Row(r) => Operand::Row(r.clone()),
                        VocabToken::Placeholder => Operand::Placeholder,
                        VocabToken::Op(_) => unreachable!(),
                    };
                    current.as_mut().expect("mask guarantees an open step").1.push(operand);
                }
            }
        }
        if !mask.is_complete() {
            return Err(DslError::InvalidPrefix {
                position: body.len(),
                message: "sequence does not end with EOF".into(),
            });
        }
        Program::new(steps)
    }
}

/// Numbers (sentence order, then span order) and row headers of the
/// retrieved facts.
pub fn build_vocabulary(retrieved: &RankedFacts) -> ProgramVocabulary {
    let mut numbers = Vec::new();
    let mut rows = Vec::new();
    for item in retrieved.items() {
        numbers.extend(extract_numbers(&item.text, &item.id));
        if let Some(header) = &item.row_header {
            rows.push(header.clone());
        }
    }
    ProgramVocabulary::new(numbers, rows)
}

pub fn token_at(vocab: &ProgramVocabulary, index: usize) -> Result<&VocabToken, DslError> {
    vocab.token_at(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    StepStart,
    FirstOperand(OpToken),
    SecondOperand(OpToken),
    Close,
    Done,
}

/// Incremental grammar automaton over vocabulary indices. Starts in the state
/// right after `GO`.
#[derive(Debug, Clone)]
pub struct StructuralMask<'a> {
    vocab: &'a ProgramVocabulary,
    phase: Phase,
    completed: usize,
}

impl<'a> StructuralMask<'a> {
    pub fn new(vocab: &'a ProgramVocabulary) -> Self {
        StructuralMask {
            vocab,
            phase: Phase::StepStart,
            completed: 0,
        }
    }

    pub fn completed_steps(&self) -> usize {
        self.completed
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn is_allowed(&self, index: usize) -> bool {
        let Some(token) = self.vocab.entries.get(index) else {
            return false;
        };
        match self.phase {
            Phase::StepStart => match token {
                VocabToken::Op(OpToken::Eof) => self.completed >= 1,
                VocabToken::Op(op) if op.is_callable() => {
                    self.completed < MAX_STEPS && (!op.is_table() || self.vocab.rows > 0)
                }
                _ => false,
            },
            Phase::FirstOperand(op) if op.is_table() => matches!(token, VocabToken::Row(_)),
            Phase::SecondOperand(op) if op.is_table() => matches!(token, VocabToken::Placeholder),
            Phase::FirstOperand(_) | Phase::SecondOperand(_) => match token {
                VocabToken::Number(_) | VocabToken::Const(_) => true,
                VocabToken::Step(s) => s.get() < self.completed,
                _ => false,
            },
            Phase::Close => matches!(token, VocabToken::Op(OpToken::Close)),
            Phase::Done => false,
        }
    }

    /// All currently valid indices, ascending.
    pub fn allowed(&self) -> Vec<usize> {
        (0..self.vocab.len()).filter(|&i| self.is_allowed(i)).collect()
    }

    pub fn allowed_mask(&self) -> Vec<bool> {
        (0..self.vocab.len()).map(|i| self.is_allowed(i)).collect()
    }

    pub fn advance(&mut self, index: usize) -> Result<(), DslError> {
        if !self.is_allowed(index) {
            let shown = self
                .vocab
                .entries
                .get(index)
                .map(|t| format!("`{t}`"))
                .unwrap_or_else(|| format!("index {index}"));
            return Err(DslError::InvalidPrefix {
                position: 0,
                message: format!("{shown} not allowed in state {:?}", self.phase),
            });
        }
        self.phase = match (self.phase, &self.vocab.entries[index]) {
            (Phase::StepStart, VocabToken::Op(OpToken::Eof)) => Phase::Done,
            (Phase::StepStart, VocabToken::Op(op)) => Phase::FirstOperand(*op),
            (Phase::FirstOperand(op), _) => Phase::SecondOperand(op),
            (Phase::SecondOperand(_), _) => Phase::Close,
            (Phase::Close, _) => {
                self.completed += 1;
                Phase::StepStart
            }
            (phase, _) => phase,
        };
        Ok(())
    }
}

/// Indices that extend `prefix` (which must start with `GO`) to a still valid
/// partial program.
pub fn valid_next_tokens(vocab: &ProgramVocabulary, prefix: &[usize]) -> Result<Vec<usize>, DslError> {
    match prefix.first() {
        Some(&i) if i == OpToken::Go.index() => {}
        _ => {
            return Err(DslError::InvalidPrefix {
                position: 0,
                message: "prefix must start with GO".into(),
            })
        }
    }
    let mut mask = StructuralMask::new(vocab);
    for (pos, &idx) in prefix.iter().enumerate().skip(1) {
        mask.advance(idx).map_err(|e| match e {
            DslError::InvalidPrefix { message, .. } => DslError::InvalidPrefix {
                position: pos,
                message,
            },
            other => other,
        })?;
    }
    Ok(mask.allowed())
}
