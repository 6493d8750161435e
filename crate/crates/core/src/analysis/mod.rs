//! Post-training artifacts: compiled inference and model inspection.

mod compiled;
mod importance;

pub use compiled::{compile, CompiledLayer, CompiledModel, SparsityReport};
pub use importance::{
    all_features, feature_name, importance_report, importance_report_by_layer, permutation_importance,
    permuted_metric, tree_contributions, BinReport, FeatureRef, ImportanceRecord, TreeContribution,
};
