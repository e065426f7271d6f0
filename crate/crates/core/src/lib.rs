//! Unlearning workbench: negative preference optimization on LoRA-augmented
//! tiny transformers, with KL regularization computed by toggling the adapters.

pub mod config;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod provenance;
pub mod trainer;

pub use config::RunConfig;
pub use corpus::{Corpus, CorpusSpec, DocType, Sample, Split, TaskType};
pub use diff::{Eager, Exec, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use evaluator::{EvalConfig, ScoreReport};
pub use losses::{LossBreakdown, LossConfig};
pub use model::{Checkpoint, ModelConfig, ModelState, Projection};
pub use provenance::Provenance;
pub use trainer::{MemorizeConfig, RunLog, TrainConfig};
