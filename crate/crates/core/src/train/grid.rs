//! Exhaustive search over layer count, tree budget, depth and tree output dim.

use serde::{Deserialize, Serialize};

use super::trainer::{fit, TrainConfig, TrainData, TrainOutcome};
use crate::choice::ChoiceKind;
use crate::error::{NodeError, Result};
use crate::model::{ArchConfig, NodeModel, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub num_layers: Vec<usize>,
    /// Trees across all layers; each layer gets `total / num_layers`.
    pub total_trees: Vec<usize>,
    pub depth: Vec<usize>,
    pub tree_dim: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            num_layers: vec![2, 4, 8],
            total_trees: vec![1024, 2048],
            depth: vec![6, 8],
            tree_dim: vec![2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub num_layers: usize,
    pub total_trees: usize,
    pub depth: usize,
    pub tree_dim: usize,
}

impl GridCell {
    pub fn arch(&self, choice: ChoiceKind) -> ArchConfig {
        ArchConfig {
            num_layers: self.num_layers,
            trees_per_layer: self.total_trees / self.num_layers.max(1),
            depth: self.depth,
            tree_dim: self.tree_dim,
            choice,
        }
    }
}

impl GridSpace {
    /// Cells in grid order: layers outermost, then trees, depth, tree dim.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &num_layers in &self.num_layers {
            for &total_trees in &self.total_trees {
                for &depth in &self.depth {
                    for &tree_dim in &self.tree_dim {
                        out.push(GridCell {
                            num_layers,
                            total_trees,
                            depth,
                            tree_dim,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_layers", &self.num_layers),
            ("total_trees", &self.total_trees),
            ("depth", &self.depth),
            ("tree_dim", &self.tree_dim),
        ] {
            if v.is_empty() {
                errs.push(format!("grid.{name} must not be empty"));
            }
            if v.contains(&0) {
                errs.push(format!("grid.{name} entries must be positive"));
            }
        }
        errs
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub cell: GridCell,
    /// Best validation metric, `None` when the cell failed.
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct GridResult<T> {
    pub cells: Vec<CellResult>,
    /// Index into `cells` of the winner.
    pub best: usize,
    pub best_value: T,
}

/// Runs `run` on every cell in grid order and keeps the lowest metric.
/// Ties go to the earlier cell; failing cells are recorded and skipped.
pub fn search_cells<T, F>(cells: &[GridCell], mut run: F) -> Result<GridResult<T>>
where
    F: FnMut(&GridCell) -> Result<(f64, T)>,
{
    if cells.is_empty() {
        return Err(NodeError::InvalidArgument("grid has no cells".into()));
    }
    let mut results = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, f64, T)> = None;
    for (i, cell) in cells.iter().enumerate() {
        match run(cell) {
            Ok((metric, value)) if !metric.is_nan() => {
                if best.as_ref().is_none_or(|(_, b, _)| metric < *b) {
                    best = Some((i, metric, value));
                }
                results.push(CellResult {
                    cell: *cell,
                    metric: Some(metric),
                    error: None,
                });
            }
            Ok(_) => results.push(CellResult {
                cell: *cell,
                metric: None,
                error: Some("validation metric is NaN".into()),
            }),
            Err(e) => {
                log::warn!("grid cell {cell:?} failed: {e}");
                results.push(CellResult {
                    cell: *cell,
                    metric: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (best, _, best_value) =
        best.ok_or_else(|| NodeError::InvalidArgument("every grid cell failed".into()))?;
    Ok(GridResult {
        cells: results,
        best,
        best_value,
    })
}

/// Trains one model per cell and returns the best trained outcome.
pub fn grid_search(
    task: Task,
    data: &TrainData,
    choice: &ChoiceKind,
    grid: &GridSpace,
    config: &TrainConfig,
) -> Result<GridResult<TrainOutcome>> {
    let errs = grid.validate();
    if !errs.is_empty() {
        return Err(NodeError::Config(errs));
    }
    let input_dim = data.x_train.dim(1);
    search_cells(&grid.cells(), |cell| {
        let model = NodeModel::new(task, input_dim, &cell.arch(choice.clone()))?;
        let out = fit(model, data, config)?;
        Ok((out.best_metric, out))
    })
}
