//! Shared fixtures for the benchmarks: a distilled student on the default corpus.

use veilscan_core::{distill_student, generate_corpus, Corpus, CorpusSpec, DistillOutcome, TrainConfig};

pub struct Fixture {
    pub corpus: Corpus,
    pub outcome: DistillOutcome,
}

pub fn fixture() -> Fixture {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).expect("default corpus");
    let cfg = TrainConfig { seed: spec.seed, ..TrainConfig::default() };
    let outcome = distill_student(&spec.teacher, &corpus.train, &corpus.test, &cfg).expect("distill");
    Fixture { corpus, outcome }
}
