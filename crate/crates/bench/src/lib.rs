//! Shared fixtures for the criterion benches.

use omitopics::objective::{InputTransform, TrainingData};
use omitopics::synthgen::{generate, SynthOutput, SynthSpec};
use omitopics::ModelHyper;

/// The `citeseq` preset at the model size used for acceptance runs.
pub fn citeseq(seed: u64) -> (SynthOutput, ModelHyper) {
    let spec = SynthSpec::preset("citeseq", seed).expect("preset exists");
    let out = generate(&spec).expect("preset is valid");
    let hyper = ModelHyper { n_topics: spec.n_topics, seed, ..ModelHyper::default() };
    (out, hyper)
}

pub fn prepared(out: &SynthOutput, knn_k: usize) -> TrainingData {
    TrainingData::prepare(&out.dataset, InputTransform::default(), Some(knn_k)).expect("dataset prepares")
}
