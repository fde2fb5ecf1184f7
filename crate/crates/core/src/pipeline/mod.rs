//! Dataset I/O, training, evaluation and inference.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod infer;
pub mod model;
pub mod render;
pub mod train;

pub use config::{ModelConfig, Precision, RunConfig, TrainConfig};
pub use dataset::{open_dataset, Frame, Sequence, SequenceMeta, Split};
pub use eval::{evaluate, evaluate_oracle, EvalResult};
pub use gradsuite::{gradient_suite, GradCase};
pub use infer::infer_sequence;
pub use model::{Model, Prediction, Runner};
pub use render::{render_dataset, RenderOptions};
pub use train::{load_chunks, train, Chunk, TrainReport};
