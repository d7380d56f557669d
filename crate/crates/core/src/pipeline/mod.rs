//! Manifests, configuration, the synthetic corpus and the experiment runner.

pub mod config;
pub mod experiment;
pub mod export;
pub mod manifest;
pub mod synth;

pub use config::Config;
pub use experiment::{
    load_features, run_experiment, score_ivectors, train_models, extract_ivectors, Backend, BackendSpec,
    AcousticModels, BackendModel, CovarianceSource, ExperimentConfig, ExperimentReport, IVectorSet, RunLog,
};
pub use export::export_ivectors_csv;
pub use manifest::{Manifest, ManifestRow, Split};
pub use synth::{generate_synthetic_corpus, phrase_transcript, SynthConfig};
