//! Run configuration and model persistence.

pub mod config;
pub mod model_file;

pub use config::{ChoiceName, DataSection, GridSection, ModelSection, OutputSection, RunConfig, TaskKind};
pub use model_file::{load_compiled, load_model, save_compiled, save_model};
