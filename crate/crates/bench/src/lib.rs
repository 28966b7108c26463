//! Shared fixtures for the benchmarks: a desk-scale model over a generated
//! corpus.

use apifill_core::corpus::make_prompted_examples;
use apifill_core::synth::desk_corpus;
use apifill_core::{Example, ModelConfig, Params, QueryApiPair, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub pairs: Vec<QueryApiPair>,
    pub vocab: Vocab,
    pub params: Params<f32>,
    pub examples: Vec<Example>,
}

pub fn corpus_texts(pairs: &[QueryApiPair]) -> Vec<&str> {
    pairs.iter().flat_map(|p| [p.query.as_str(), p.api.as_str()]).collect()
}

/// `pairs` generated pairs, a vocabulary trained on them, an untrained
/// default-size model and three prompted examples per pair.
pub fn fixture(pairs: usize) -> Fixture {
    let pairs = desk_corpus(pairs, 1);
    let vocab = Vocab::train(&corpus_texts(&pairs), 8000).expect("vocab trains");
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let params = Params::init(&config).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let examples = pairs
        .iter()
        .flat_map(|p| make_prompted_examples(p, &mut rng, 3))
        .map(|ex| Example {
            input: vocab.encode(&ex.input_text, config.max_input_len),
            target: vocab.encode_target(&ex.target_text, config.max_output_len),
        })
        .collect();
    Fixture {
        pairs,
        vocab,
        params,
        examples,
    }
}
