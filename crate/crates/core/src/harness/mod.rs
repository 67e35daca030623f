//! Synthetic data, dataset I/O, metrics, inference, benchmarking and
//! experiment configuration.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod inference;
pub mod metrics;
pub mod shapes;

pub use bench::{benchmark_decode, to_csv, BenchRow, BenchSpec};
pub use config::{EvalConfig, ExperimentConfig};
pub use dataset::{load_dataset, save_dataset, LoadOptions, LoadedDataset};
pub use inference::{evaluate, run_inference, score_predictions, EvalReport, InferenceOptions, Metrics, ScenePrediction};
pub use metrics::bleu4;
pub use shapes::{generate_dataset, generate_scene, DatasetRecord, ShapeKind, ShapesWorldConfig, Split};
