//! Data-aware initialisation, optimisation and model selection.

pub mod ablation;
mod grid;
mod init;
mod loss;
mod qhadam;
mod trainer;

pub use grid::{grid_search, search_cells, CellResult, GridCell, GridResult, GridSpace};
pub use init::{data_aware_init, INIT_MARGIN, TAU_FLOOR};
pub use loss::{loss_value, metric, record_loss, CrossEntropy, Mse};
pub use qhadam::{QhAdam, QhAdamConfig};
pub use trainer::{fit, train, train_with, HistoryRecord, TrainConfig, TrainData, TrainOutcome};
