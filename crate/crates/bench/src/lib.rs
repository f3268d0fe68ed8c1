//! Shared fixtures for the benchmarks: a desk-size model and one corpus
//! utterance with its training layout.

use streamdec::corpus::{gen_corpus, CorpusConfig, Utterance};
use streamdec::model::{init_params, ModelConfig, ModelParams};
use streamdec::seqlayout::{build_bti_layout, DeltaPolicy, LayoutSequence, TextPositionMode};
use streamdec::VocabSpec;

pub struct Fixture {
    pub params: ModelParams<f32>,
    pub utterance: Utterance,
    pub layout: LayoutSequence,
    pub vocab: VocabSpec,
}

/// The longest of the first 50 training utterances of the default corpus.
pub fn fixture() -> Fixture {
    let corpus = gen_corpus(&CorpusConfig { n_train: 50, n_test: 1, ..Default::default() }).expect("corpus");
    let vocab = corpus.vocab();
    let utterance = corpus.train.iter().max_by_key(|u| u.num_frames()).cloned().expect("non-empty");
    let params = init_params(&ModelConfig::desk(vocab), 1).expect("params");
    let layout =
        build_bti_layout(&utterance, DeltaPolicy::Dynamic, TextPositionMode::StreamPoint, &vocab).expect("layout");
    Fixture { params, utterance, layout, vocab }
}
