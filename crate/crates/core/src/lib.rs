pub mod error;
pub mod grounding;
pub mod harness;
pub mod langrep;
pub mod model;
pub mod shapeworld;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use harness::{evaluate, run_experiment, EvalReport, ExperimentSpec};
pub use model::{Model, ModelKind, ModelSpec};
pub use tensor::{ParamId, ParamSet, Tape, Tensor, Var};
pub use training::{Checkpoint, Supervision, TrainConfig};
