mod common;

use common::{fixture, random_context, random_program};
use finqa_core::dsl::{build_vocabulary, parse_program, serialize_program, valid_next_tokens, OpToken};
use finqa_core::preprocess::{load_dataset, TableTemplates};
use finqa_core::retrieval::{FactSource, RankedFacts};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn serialize_parse_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_context(&mut rng);
        let program = random_program(&mut rng, &ctx);
        let text = serialize_program(&program);
        let back = parse_program(&text).unwrap();
        prop_assert_eq!(&back, &program);
        prop_assert_eq!(serialize_program(&back), text);
    }

    #[test]
    fn vocabulary_encoding_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_context(&mut rng);
        let vocab = ctx.vocabulary();
        let program = random_program(&mut rng, &ctx);
        let encoded = vocab.encode_program(&program);
        if !encoded.contains(&OpToken::Unk.index()) {
            prop_assert_eq!(vocab.decode_program(&encoded).unwrap(), program);
        }
    }
}

#[test]
fn random_walks_always_parse() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let ctx = random_context(&mut rng);
        let vocab = ctx.vocabulary();
        let mut prefix = vec![OpToken::Go.index()];
        loop {
            let next = valid_next_tokens(&vocab, &prefix).unwrap();
            if next.is_empty() {
                break;
            }
            prefix.push(*next.choose(&mut rng).unwrap());
        }
        assert_eq!(*prefix.last().unwrap(), OpToken::Eof.index());
        let program = vocab.decode_program(&prefix).unwrap();
        assert_eq!(parse_program(&program.to_string()).unwrap(), program);
    }
}

#[test]
fn gold_programs_never_leave_the_mask() {
    let data = load_dataset(fixture("dataset.json")).unwrap();
    for record in &data.records {
        let facts = RankedFacts::new(record.fact_candidates(&TableTemplates::default()), FactSource::Internal);
        let vocab = build_vocabulary(&facts);
        let gold = vocab.encode_program(&record.gold_program);
        assert!(!gold.contains(&OpToken::Unk.index()), "{}: {gold:?}", record.id);
        for t in 1..gold.len() {
            let valid = valid_next_tokens(&vocab, &gold[..t]).unwrap();
            assert!(valid.contains(&gold[t]), "{} step {t}", record.id);
        }
    }
}
