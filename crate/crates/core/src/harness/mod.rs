//! Synthetic continuous-token language, its oracle evaluator and the staged
//! experiment pipeline built on top of them.

mod config;
mod dataset;
mod language;
mod oracle;
mod pipeline;

pub use config::{BlockSize, ExperimentConfig};
pub use dataset::{gen_dataset, Dataset, SynthUtterance};
pub use language::LanguageSpec;
pub use oracle::{corpus_ser, cosine, estimate_offset, oracle_transcribe, symbol_error_rate, symbol_errors};
pub use pipeline::{
    ae_metrics, block_size_sweep, load_ae, load_ardit, load_latents, run_chain, run_stage, Artifacts, ArditModel,
    EvalReport, LatentSet, Metrics, Stage,
};
