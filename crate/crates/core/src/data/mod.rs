//! Dataset ingestion and preprocessing.

mod dataset;
pub mod loo;
mod preprocess;
pub mod quantile;
mod split;
pub mod synthetic;

pub use dataset::{load_csv, read_csv, ColumnData, ColumnKind, ColumnMeta, CsvSchema, Dataset, Split, Target, TrainPartition};
pub use loo::{fit_apply_loo, LooEncoderState};
pub use preprocess::{FeatureColumn, FeatureTransform, PreprocessConfig, Preprocessor, TargetTransform};
pub use quantile::{fit_quantile_transform, QuantileTransformState, DEFAULT_QUANTILES};
pub use split::{batches, split_train_val};
