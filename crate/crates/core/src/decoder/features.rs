//! Turns a question and its retrieved facts into [`DecoderInputs`].

use ndarray::Array2;

use super::{DecoderError, DecoderExample, DecoderInputs, Result};
use crate::dsl::{build_vocabulary, Program, VocabToken};
use crate::retrieval::{HashedEmbedder, RankedFacts};

/// Words of left context used to embed a number.
pub const NUMBER_WINDOW: usize = 3;

/// Sentence encoder producing `h^i` rows.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

impl TextEncoder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.embed_normalized(text)
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect()).expect("rows of width dim")
}

fn number_window(sentence: &str, start: usize) -> String {
    let left: Vec<&str> = sentence[..start].split_whitespace().collect();
    left[left.len().saturating_sub(NUMBER_WINDOW)..].join(" ")
}

/// Input sequence: the question followed by each retrieved fact. Context
/// numbers are embedded by the words just before them; row headers and the
/// placeholder by their own text.
pub fn featurize(encoder: &dyn TextEncoder, question: &str, facts: &RankedFacts) -> Result<DecoderInputs> {
    let dim = encoder.dim();
    let vocab = build_vocabulary(facts);
    let mut inputs = vec![encoder.encode(question)];
    inputs.extend(facts.items().iter().map(|f| encoder.encode(&f.text)));

    let context: Vec<Vec<f64>> = vocab
        .entries()
        .iter()
        .filter_map(|entry| match entry {
            VocabToken::Number(n) => {
                let text = facts
                    .items()
                    .iter()
                    .find(|f| f.id == n.sentence_id)
                    .map(|f| number_window(&f.text, n.span.start))
                    .unwrap_or_default();
                Some(encoder.encode(&text))
            }
            VocabToken::Row(name) => Some(encoder.encode(name)),
            VocabToken::Placeholder => Some(encoder.encode("none")),
            _ => None,
        })
        .collect();
    for row in inputs.iter().chain(&context) {
        if row.len() != dim {
            return Err(DecoderError::DimensionMismatch {
                what: "encoder output",
                expected: dim,
                found: row.len(),
            });
        }
    }
    DecoderInputs::new(vocab, to_matrix(inputs, dim), to_matrix(context, dim))
}

/// [`featurize`] plus gold encoding.
pub fn make_example(
    encoder: &dyn TextEncoder,
    id: &str,
    question: &str,
    facts: &RankedFacts,
    gold: &Program,
) -> Result<DecoderExample> {
    DecoderExample::new(id, featurize(encoder, question, facts)?, gold)
}
