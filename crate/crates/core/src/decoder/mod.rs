//! Desk-scale neural symbolic program generator.
//!
//! The candidate matrix stacks one row per vocabulary entry: learned
//! embeddings for operation, constant and step-memory tokens followed by
//! encoder embeddings of the context entries. An LSTM decoder reads the
//! embedding of the previously chosen token. At every step its hidden state
//! `h` drives three bilinear attentions (input sequence, decoder history and
//! a second "reasoning" attention over the input sequence):
//!
//! ```text
//! c   = W_c [att_i; att_h; h]
//! H_T = W_h [H; H ∘ att_r]        (att_r broadcast over rows of H)
//! w   = softmax(H_T · c)          (invalid entries masked to -inf)
//! ```
//!
//! Gradients are derived by hand; [`gradient_check`] compares them with
//! central finite differences.

mod backward;
pub mod checkpoint;
pub mod features;
mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{DslError, OpToken, Program, ProgramVocabulary, StructuralMask, SPECIAL_TOKENS};

pub use train::{
    gradient_check, train, train_with, BlockReport, EpochStats, GradCheckReport, PlateauConfig,
    PlateauScheduler, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("mask allows no token")]
    EmptyMask,
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("gold sequence leaves the valid token set at position {position}")]
    InvalidGold { position: usize },
    #[error("loss became non-finite in epoch {epoch} (example `{example}`)")]
    NonFiniteLoss { epoch: usize, example: String },
    #[error("no EOF within {max_steps} decoding steps")]
    LengthExceeded { max_steps: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

/// Default decoding budget: 11 steps of four tokens plus EOF.
pub const DEFAULT_MAX_STEPS: usize = crate::dsl::MAX_STEPS * 4 + 1;

/// Every trainable weight of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    dim: usize,
    /// `h^o`: 14 x d.
    pub op_embeddings: Array2<f64>,
    /// `h^c`: 18 x d.
    pub const_embeddings: Array2<f64>,
    /// `h^s`: 11 x d.
    pub step_embeddings: Array2<f64>,
    /// 4d x d, gate order (input, forget, cell, output).
    pub lstm_input: Array2<f64>,
    /// 4d x d.
    pub lstm_hidden: Array2<f64>,
    /// 4d.
    pub lstm_bias: Array1<f64>,
    /// d x d bilinear weights of the input attention.
    pub att_input: Array2<f64>,
    /// d x d bilinear weights of the history attention.
    pub att_history: Array2<f64>,
    /// d x d bilinear weights of the reasoning attention.
    pub att_reason: Array2<f64>,
    /// `W_c`: d x 3d.
    pub w_context: Array2<f64>,
    /// `W_h`: d x 2d.
    pub w_reason: Array2<f64>,
}

pub(crate) const BLOCK_NAMES: [&str; 11] = [
    "op_embeddings",
    "const_embeddings",
    "step_embeddings",
    "lstm_input",
    "lstm_hidden",
    "lstm_bias",
    "att_input",
    "att_history",
    "att_reason",
    "w_context",
    "w_reason",
];

impl DecoderParams {
    pub fn zeros(dim: usize) -> Self {
        let z = |r, c| Array2::zeros((r, c));
        DecoderParams {
            dim,
            op_embeddings: z(OpToken::ALL.len(), dim),
            const_embeddings: z(crate::dsl::ConstToken::ALL.len(), dim),
            step_embeddings: z(crate::dsl::STEP_TOKENS, dim),
            lstm_input: z(4 * dim, dim),
            lstm_hidden: z(4 * dim, dim),
            lstm_bias: Array1::zeros(4 * dim),
            att_input: z(dim, dim),
            att_history: z(dim, dim),
            att_reason: z(dim, dim),
            w_context: z(dim, 3 * dim),
            w_reason: z(dim, 2 * dim),
        }
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) weights, forget-gate bias 1.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim);
        let scale = 1.0 / (dim as f64).sqrt();
        for (name, block) in p.blocks_mut() {
            if name == "lstm_bias" {
                continue;
            }
            block.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
        }
        p.lstm_bias.slice_mut(s![dim..2 * dim]).fill(1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim)
    }

    /// Named flat views of every block, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let views: [&[f64]; 11] = [
            self.op_embeddings.as_slice().expect("standard layout"),
            self.const_embeddings.as_slice().expect("standard layout"),
            self.step_embeddings.as_slice().expect("standard layout"),
            self.lstm_input.as_slice().expect("standard layout"),
            self.lstm_hidden.as_slice().expect("standard layout"),
            self.lstm_bias.as_slice().expect("standard layout"),
            self.att_input.as_slice().expect("standard layout"),
            self.att_history.as_slice().expect("standard layout"),
            self.att_reason.as_slice().expect("standard layout"),
            self.w_context.as_slice().expect("standard layout"),
            self.w_reason.as_slice().expect("standard layout"),
        ];
        BLOCK_NAMES.into_iter().zip(views).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let views: [&mut [f64]; 11] = [
            self.op_embeddings.as_slice_mut().expect("standard layout"),
            self.const_embeddings.as_slice_mut().expect("standard layout"),
            self.step_embeddings.as_slice_mut().expect("standard layout"),
            self.lstm_input.as_slice_mut().expect("standard layout"),
            self.lstm_hidden.as_slice_mut().expect("standard layout"),
            self.lstm_bias.as_slice_mut().expect("standard layout"),
            self.att_input.as_slice_mut().expect("standard layout"),
            self.att_history.as_slice_mut().expect("standard layout"),
            self.att_reason.as_slice_mut().expect("standard layout"),
            self.w_context.as_slice_mut().expect("standard layout"),
            self.w_reason.as_slice_mut().expect("standard layout"),
        ];
        BLOCK_NAMES.into_iter().zip(views).collect()
    }

    /// `(rows, cols)` of each block, matching [`DecoderParams::blocks`].
    pub fn block_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let d = self.dim;
        let shapes = [
            (OpToken::ALL.len(), d),
            (crate::dsl::ConstToken::ALL.len(), d),
            (crate::dsl::STEP_TOKENS, d),
            (4 * d, d),
            (4 * d, d),
            (1, 4 * d),
            (d, d),
            (d, d),
            (d, d),
            (d, 3 * d),
            (d, 2 * d),
        ];
        BLOCK_NAMES
            .into_iter()
            .zip(shapes)
            .map(|(n, (r, c))| (n, r, c))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub(crate) fn add_scaled(&mut self, other: &DecoderParams, scale: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub(crate) fn scale(&mut self, k: f64) {
        for (_, a) in self.blocks_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub(crate) fn squared_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum()
    }
}

/// Per-question inputs: vocabulary, encoded input sequence (`h^i`) and the
/// encoder embeddings of the vocabulary's context entries.
#[derive(Debug, Clone)]
pub struct DecoderInputs {
    pub vocab: ProgramVocabulary,
    /// L x d encoded input sequence.
    pub inputs: Array2<f64>,
    /// (|vocab| - 43) x d embeddings for numbers, row headers and `none`.
    pub context_rows: Array2<f64>,
}

impl DecoderInputs {
    pub fn new(vocab: ProgramVocabulary, inputs: Array2<f64>, context_rows: Array2<f64>) -> Result<Self> {
        let expected = vocab.len() - SPECIAL_TOKENS;
        if context_rows.nrows() != expected {
            return Err(DecoderError::DimensionMismatch {
                what: "context rows",
                expected,
                found: context_rows.nrows(),
            });
        }
        if inputs.nrows() == 0 {
            return Err(DecoderError::DimensionMismatch {
                what: "input sequence length",
                expected: 1,
                found: 0,
            });
        }
        if inputs.ncols() != context_rows.ncols() && expected > 0 {
            return Err(DecoderError::DimensionMismatch {
                what: "context row width",
                expected: inputs.ncols(),
                found: context_rows.ncols(),
            });
        }
        Ok(DecoderInputs {
            vocab,
            inputs,
            context_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// `H = [h^o; h^c; h^s; h^i]` in vocabulary order.
    pub fn candidates(&self, params: &DecoderParams) -> Result<Array2<f64>> {
        if self.dim() != params.dim {
            return Err(DecoderError::DimensionMismatch {
                what: "input embedding",
                expected: params.dim,
                found: self.dim(),
            });
        }
        let context = if self.context_rows.nrows() == 0 {
            Array2::zeros((0, params.dim))
        } else {
            self.context_rows.clone()
        };
        Ok(concatenate(
            Axis(0),
            &[
                params.op_embeddings.view(),
                params.const_embeddings.view(),
                params.step_embeddings.view(),
                context.view(),
            ],
        )
        .expect("matching widths"))
    }
}

/// A training example: inputs plus the gold token sequence `GO .. EOF`.
#[derive(Debug, Clone)]
pub struct DecoderExample {
    pub id: String,
    pub inputs: DecoderInputs,
    pub gold: Vec<usize>,
}

impl DecoderExample {
    /// Encodes `program` against the example vocabulary and checks it is
    /// mask compatible.
    pub fn new(id: impl Into<String>, inputs: DecoderInputs, program: &Program) -> Result<Self> {
        let gold = inputs.vocab.encode_program(program);
        validate_gold(&inputs.vocab, &gold)?;
        Ok(DecoderExample {
            id: id.into(),
            inputs,
            gold,
        })
    }
}

fn validate_gold(vocab: &ProgramVocabulary, gold: &[usize]) -> Result<()> {
    if gold.first() != Some(&OpToken::Go.index()) {
        return Err(DecoderError::InvalidGold { position: 0 });
    }
    let mut mask = StructuralMask::new(vocab);
    for (pos, &idx) in gold.iter().enumerate().skip(1) {
        mask.advance(idx).map_err(|_| DecoderError::InvalidGold { position: pos })?;
    }
    if !mask.is_complete() {
        return Err(DecoderError::InvalidGold { position: gold.len() });
    }
    Ok(())
}

/// Recurrent decoder state after consuming `emitted`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// Current hidden state `h_T`.
    pub h: Array1<f64>,
    pub cell: Array1<f64>,
    /// Hidden states produced so far; the last entry is `h`.
    pub history: Vec<Array1<f64>>,
    pub emitted: Vec<usize>,
}

impl DecoderState {
    /// State after the LSTM has consumed `GO`.
    pub fn start(params: &DecoderParams, candidates: &Array2<f64>) -> DecoderState {
        let zero = Array1::zeros(params.dim);
        let x = candidates.row(OpToken::Go.index()).to_owned();
        let step = lstm_forward(params, &x, &zero, &zero);
        DecoderState {
            history: vec![step.h.clone()],
            h: step.h,
            cell: step.c,
            emitted: vec![OpToken::Go.index()],
        }
    }
}

pub(crate) struct LstmStep {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
    pub h: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn lstm_forward(p: &DecoderParams, x: &Array1<f64>, h_prev: &Array1<f64>, c_prev: &Array1<f64>) -> LstmStep {
    let d = p.dim;
    let z = p.lstm_input.dot(x) + p.lstm_hidden.dot(h_prev) + &p.lstm_bias;
    let i = z.slice(s![0..d]).mapv(sigmoid);
    let f = z.slice(s![d..2 * d]).mapv(sigmoid);
    let g = z.slice(s![2 * d..3 * d]).mapv(f64::tanh);
    let o = z.slice(s![3 * d..4 * d]).mapv(sigmoid);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    LstmStep {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        h,
    }
}

fn softmax_in_place(scores: &mut Array1<f64>) {
    let max = scores.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    scores.mapv_inplace(|x| (x - max).exp());
    let sum = scores.sum();
    scores.mapv_inplace(|x| x / sum);
}

/// Bilinear attention: `s_j = query · (weights · key_j)`, returns
/// `(Σ_j softmax(s)_j key_j, softmax(s))`.
pub fn attend(
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let d = query.len();
    if keys.nrows() == 0 {
        return Err(DecoderError::DimensionMismatch {
            what: "attention keys",
            expected: 1,
            found: 0,
        });
    }
    if weights.nrows() != d {
        return Err(DecoderError::DimensionMismatch {
            what: "attention weight rows",
            expected: d,
            found: weights.nrows(),
        });
    }
    if weights.ncols() != keys.ncols() {
        return Err(DecoderError::DimensionMismatch {
            what: "attention key width",
            expected: weights.ncols(),
            found: keys.ncols(),
        });
    }
    Ok(attend_unchecked(query, keys, weights))
}

fn attend_unchecked(
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
) -> (Array1<f64>, Array1<f64>) {
    let projected = weights.t().dot(&query);
    let mut dist = keys.dot(&projected);
    softmax_in_place(&mut dist);
    let context = keys.t().dot(&dist);
    (context, dist)
}

/// Cached forward quantities of one output step.
pub(crate) struct Head {
    pub query: Array1<f64>,
    pub history: Array2<f64>,
    pub input_dist: Array1<f64>,
    pub hist_dist: Array1<f64>,
    pub reason_dist: Array1<f64>,
    pub reason_ctx: Array1<f64>,
    pub mixed: Array1<f64>,
    pub context: Array1<f64>,
    pub u: Array1<f64>,
    pub q: Array1<f64>,
    pub probs: Array1<f64>,
}

pub(crate) fn head_forward(
    p: &DecoderParams,
    query: &Array1<f64>,
    history: &[Array1<f64>],
    inputs: &Array2<f64>,
    candidates: &Array2<f64>,
    mask: &[bool],
) -> Result<Head> {
    let d = p.dim;
    if mask.len() != candidates.nrows() {
        return Err(DecoderError::DimensionMismatch {
            what: "mask length",
            expected: candidates.nrows(),
            found: mask.len(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(DecoderError::EmptyMask);
    }
    let history = if history.is_empty() {
        query.clone().insert_axis(Axis(0))
    } else {
        let views: Vec<_> = history.iter().map(|h| h.view().insert_axis(Axis(0))).collect();
        concatenate(Axis(0), &views).expect("equal widths")
    };
    let (input_ctx, input_dist) = attend_unchecked(query.view(), inputs.view(), p.att_input.view());
    let (hist_ctx, hist_dist) = attend_unchecked(query.view(), history.view(), p.att_history.view());
    let (reason_ctx, reason_dist) = attend_unchecked(query.view(), inputs.view(), p.att_reason.view());
    let mixed = concatenate(Axis(0), &[input_ctx.view(), hist_ctx.view(), query.view()]).expect("1-d");
    let context = p.w_context.dot(&mixed);
    // H_T · c = [H, H∘r] W_h^T c = H (u1 + r ∘ u2)
    let u = p.w_reason.t().dot(&context);
    let q = &u.slice(s![0..d]) + &(&reason_ctx * &u.slice(s![d..2 * d]));
    let logits = candidates.dot(&q);
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
    let mut probs = Array1::zeros(logits.len());
    let mut sum = 0.0;
    for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            let e = (l - max).exp();
            probs[i] = e;
            sum += e;
        }
    }
    probs.mapv_inplace(|x| x / sum);
    Ok(Head {
        query: query.clone(),
        history,
        input_dist,
        hist_dist,
        reason_dist,
        reason_ctx,
        mixed,
        context,
        u,
        q,
        probs,
    })
}

/// Reasoning matrix `H_T = W_h [H; H ∘ att_r]`, one row per candidate.
pub fn reasoning_matrix(params: &DecoderParams, candidates: &Array2<f64>, reason_ctx: &Array1<f64>) -> Array2<f64> {
    let gated = candidates * &reason_ctx.view().insert_axis(Axis(0));
    let stacked = concatenate(Axis(1), &[candidates.view(), gated.view()]).expect("equal rows");
    stacked.dot(&params.w_reason.t())
}

/// Output of one [`decode_step`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub index: usize,
    /// `w_T`; entries outside the mask are exactly zero.
    pub probs: Array1<f64>,
    pub state: DecoderState,
}

/// One decoding step. `forced` selects the token under teacher forcing;
/// otherwise the most probable valid index is taken (lowest index on ties).
pub fn decode_step(
    params: &DecoderParams,
    state: &DecoderState,
    inputs: &Array2<f64>,
    candidates: &Array2<f64>,
    mask: &[bool],
    forced: Option<usize>,
) -> Result<StepOutput> {
    if inputs.ncols() != params.dim || candidates.ncols() != params.dim {
        return Err(DecoderError::DimensionMismatch {
            what: "decoder inputs",
            expected: params.dim,
            found: if inputs.ncols() != params.dim {
                inputs.ncols()
            } else {
                candidates.ncols()
            },
        });
    }
    let head = head_forward(params, &state.h, &state.history, inputs, candidates, mask)?;
    let index = match forced {
        Some(i) if mask.get(i).copied().unwrap_or(false) => i,
        Some(i) => return Err(DecoderError::InvalidGold { position: i }),
        None => argmax_masked(&head.probs, mask),
    };
    let x = candidates.row(index).to_owned();
    let step = lstm_forward(params, &x, &state.h, &state.cell);
    let mut next = state.clone();
    next.history.push(step.h.clone());
    next.h = step.h;
    next.cell = step.c;
    next.emitted.push(index);
    Ok(StepOutput {
        index,
        probs: head.probs,
        state: next,
    })
}

fn argmax_masked(probs: &Array1<f64>, mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

/// Greedy masked decoding from `GO` to `EOF`.
pub fn generate(params: &DecoderParams, inputs: &DecoderInputs, max_steps: usize) -> Result<Program> {
    let indices = generate_indices(params, inputs, max_steps)?;
    Ok(inputs.vocab.decode_program(&indices)?)
}

/// Like [`generate`] but returns the emitted index sequence, `GO` first.
pub fn generate_indices(params: &DecoderParams, inputs: &DecoderInputs, max_steps: usize) -> Result<Vec<usize>> {
    let candidates = inputs.candidates(params)?;
    let mut state = DecoderState::start(params, &candidates);
    let mut mask = StructuralMask::new(&inputs.vocab);
    for _ in 0..max_steps {
        let allowed = mask.allowed_mask();
        let out = decode_step(params, &state, &inputs.inputs, &candidates, &allowed, None)?;
        mask.advance(out.index)?;
        state = out.state;
        if mask.is_complete() {
            return Ok(state.emitted);
        }
    }
    Err(DecoderError::LengthExceeded { max_steps })
}

/// Forward pass over a gold sequence with everything needed for backprop.
pub(crate) struct Tape {
    pub candidates: Array2<f64>,
    pub lstm: Vec<LstmStep>,
    pub dropout: Vec<Option<Array1<f64>>>,
    pub heads: Vec<Head>,
    pub loss: f64,
}

/// Inverted dropout on LSTM inputs: `(rate, rng)`.
pub(crate) type Dropout<'a> = Option<(f64, &'a mut ChaCha8Rng)>;

pub(crate) fn forward_teacher(p: &DecoderParams, ex: &DecoderExample, mut dropout: Dropout<'_>) -> Result<Tape> {
    let candidates = ex.inputs.candidates(p)?;
    let inputs = &ex.inputs.inputs;
    let gold = &ex.gold;
    validate_gold(&ex.inputs.vocab, gold)?;

    let mut lstm = Vec::with_capacity(gold.len());
    let mut masks = Vec::with_capacity(gold.len());
    let mut heads = Vec::with_capacity(gold.len());
    let mut apply_lstm = |token: usize, h: &Array1<f64>, c: &Array1<f64>, lstm: &mut Vec<LstmStep>| {
        let mut x = candidates.row(token).to_owned();
        let mask = match dropout.as_mut() {
            Some((rate, rng)) if *rate > 0.0 => {
                let keep = 1.0 - *rate;
                let m: Array1<f64> = (0..p.dim)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x *= &m;
                Some(m)
            }
            _ => None,
        };
        lstm.push(lstm_forward(p, &x, h, c));
        mask
    };

    let zero = Array1::zeros(p.dim);
    masks.push(apply_lstm(gold[0], &zero, &zero, &mut lstm));
    let mut history = vec![lstm[0].h.clone()];
    let mut mask = StructuralMask::new(&ex.inputs.vocab);
    let mut loss = 0.0;
    let n = gold.len() - 1;
    for t in 1..=n {
        let allowed = mask.allowed_mask();
        let y = gold[t];
        let h = history.last().expect("non-empty").clone();
        let head = head_forward(p, &h, &history, inputs, &candidates, &allowed)?;
        loss -= head.probs[y].ln();
        heads.push(head);
        mask.advance(y).map_err(|_| DecoderError::InvalidGold { position: t })?;
        if t < n {
            let last = lstm.last().expect("non-empty");
            let (h_prev, c_prev) = (last.h.clone(), last.c.clone());
            masks.push(apply_lstm(y, &h_prev, &c_prev, &mut lstm));
            history.push(lstm.last().expect("pushed").h.clone());
        }
    }
    Ok(Tape {
        candidates,
        lstm,
        dropout: masks,
        heads,
        loss: loss / n as f64,
    })
}

/// Mean teacher-forced cross-entropy of the gold sequence (no dropout).
pub fn sequence_loss(params: &DecoderParams, example: &DecoderExample) -> Result<f64> {
    Ok(forward_teacher(params, example, None)?.loss)
}

/// Loss and analytic gradient of [`sequence_loss`].
pub fn sequence_loss_and_grad(params: &DecoderParams, example: &DecoderExample) -> Result<(f64, DecoderParams)> {
    let tape = forward_teacher(params, example, None)?;
    let grads = backward::backward(params, example, &tape);
    Ok((tape.loss, grads))
}

pub(crate) fn loss_and_grad_with_dropout(
    params: &DecoderParams,
    example: &DecoderExample,
    dropout: Dropout<'_>,
) -> Result<(f64, DecoderParams)> {
    let tape = forward_teacher(params, example, dropout)?;
    let grads = backward::backward(params, example, &tape);
    Ok((tape.loss, grads))
}
