//! Choice-function comparison across tasks and depths of the stack.

use std::fmt::Write;

use serde::Serialize;

use super::trainer::{fit, TrainConfig, TrainData};
use crate::choice::{ChoiceKind, TemperatureSchedule};
use crate::data::{split_train_val, synthetic, Dataset, PreprocessConfig};
use crate::error::Result;
use crate::model::{ArchConfig, NodeModel, Task};

/// A prepared classification or regression problem.
#[derive(Clone, Debug)]
pub struct AblationTask {
    pub name: String,
    pub task: Task,
    pub data: TrainData,
}

impl AblationTask {
    pub fn from_dataset(name: &str, dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<Self> {
        let split = split_train_val(dataset, val_fraction, seed, true)?;
        let (pre, data) = TrainData::prepare(&split, PreprocessConfig::default())?;
        let task = match pre.classes() {
            Some(c) => Task::Classification { classes: c.len() },
            None => Task::Regression,
        };
        Ok(AblationTask {
            name: name.to_string(),
            task,
            data,
        })
    }
}

/// Single-split and XOR classification tasks.
pub fn synthetic_suite(rows: usize, seed: u64) -> Result<Vec<AblationTask>> {
    Ok(vec![
        AblationTask::from_dataset("single_split", &synthetic::single_split(rows, 5, seed)?, 0.2, seed)?,
        AblationTask::from_dataset("xor", &synthetic::xor(rows, seed)?, 0.2, seed)?,
    ])
}

/// Softmax, Gumbel-softmax (annealed), sparsemax and 1.5-entmax.
pub fn default_choices() -> Vec<ChoiceKind> {
    vec![
        ChoiceKind::Softmax,
        ChoiceKind::GumbelSoftmax(TemperatureSchedule::default()),
        ChoiceKind::Sparsemax,
        ChoiceKind::entmax15(),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub task: String,
    pub choice: String,
    pub layers: usize,
    /// Best validation metric; `None` if training failed.
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub choices: Vec<ChoiceKind>,
    pub layers: Vec<usize>,
    pub trees_per_layer: usize,
    pub depth: usize,
    pub train: TrainConfig,
}

/// Rows generated per task by [`AblationPlan::standard`] runs.
pub const STANDARD_ROWS: usize = 4000;

impl AblationPlan {
    /// Every default choice at 1 and 4 layers of 16 depth-2 trees, trained
    /// until early stopping with a budget every run converges within.
    pub fn standard(seed: u64) -> Self {
        AblationPlan {
            choices: default_choices(),
            layers: vec![1, 4],
            trees_per_layer: 16,
            depth: 2,
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 128,
                max_steps: 3000,
                eval_interval: 100,
                patience: 10,
                seed,
                ..TrainConfig::default()
            },
        }
    }
}

/// Trains every `(task, layers, choice)` combination.
pub fn run_ablation(tasks: &[AblationTask], plan: &AblationPlan) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for t in tasks {
        for &layers in &plan.layers {
            for choice in &plan.choices {
                let arch = ArchConfig {
                    num_layers: layers,
                    trees_per_layer: plan.trees_per_layer,
                    depth: plan.depth,
                    tree_dim: t.task.head_dim(),
                    choice: choice.clone(),
                };
                let result = NodeModel::new(t.task, t.data.x_train.dim(1), &arch)
                    .and_then(|m| fit(m, &t.data, &plan.train));
                let (metric, error) = match result {
                    Ok(out) => (Some(out.best_metric), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                rows.push(AblationRow {
                    task: t.name.clone(),
                    choice: choice.name(),
                    layers,
                    metric,
                    error,
                });
            }
        }
    }
    rows
}

/// Plain-text table: one row per choice function, one column per (task, layers).
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut columns: Vec<(String, usize)> = Vec::new();
    let mut choices: Vec<String> = Vec::new();
    for r in rows {
        if !columns.contains(&(r.task.clone(), r.layers)) {
            columns.push((r.task.clone(), r.layers));
        }
        if !choices.contains(&r.choice) {
            choices.push(r.choice.clone());
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<18}", "choice");
    for (task, layers) in &columns {
        let _ = write!(out, " {:>18}", format!("{task}/{layers}L"));
    }
    out.push('\n');
    for c in &choices {
        let _ = write!(out, "{c:<18}");
        for (task, layers) in &columns {
            let cell = rows
                .iter()
                .find(|r| &r.choice == c && &r.task == task && r.layers == *layers)
                .map_or("-".to_string(), |r| match r.metric {
                    Some(m) => format!("{m:.4}"),
                    None => "failed".to_string(),
                });
            let _ = write!(out, " {cell:>18}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_line_per_choice() {
        let rows = vec![
            AblationRow {
                task: "xor".into(),
                choice: "softmax".into(),
                layers: 1,
                metric: Some(0.5),
                error: None,
            },
            AblationRow {
                task: "xor".into(),
                choice: "entmax1.5".into(),
                layers: 1,
                metric: None,
                error: Some("x".into()),
            },
        ];
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("0.5000"));
        assert!(t.contains("failed"));
    }

    #[test]
    fn tiny_plan_runs_every_combination() {
        let tasks = synthetic_suite(120, 1).unwrap();
        let plan = AblationPlan {
            choices: default_choices(),
            layers: vec![1],
            trees_per_layer: 2,
            depth: 2,
            train: TrainConfig {
                batch_size: 32,
                max_steps: 4,
                eval_interval: 2,
                ..TrainConfig::default()
            },
        };
        let rows = run_ablation(&tasks, &plan);
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.metric.is_some()), "{rows:?}");
    }
}
