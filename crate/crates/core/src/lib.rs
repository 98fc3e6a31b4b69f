//! Vocabulary-swap transfer of small masked language models between
//! languages: tokenizer training, a BERT-style encoder with its own autodiff
//! engine, pre-training and fine-tuning, structural probes, forgetting
//! measurements, and a resumable experiment pipeline.

pub mod corpus;
pub mod engine;
pub mod forgetting;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod rng;
pub mod training;
pub mod transfer;
pub mod tokenizer;

/// Any error the library can return, for callers that do not care which
/// module raised it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Transfer(#[from] transfer::TransferError),
    #[error(transparent)]
    Probe(#[from] probing::ProbeError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Forgetting(#[from] forgetting::ForgettingError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
}
