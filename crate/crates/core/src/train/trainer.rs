//! Mini-batch training with checkpoint averaging and early stopping.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::init::data_aware_init;
use super::loss::{metric, record_loss};
use super::qhadam::{QhAdam, QhAdamConfig};
use crate::autodiff::Tape;
use crate::choice::Sampler;
use crate::data::{batches, Dataset, PreprocessConfig, Preprocessor, Split};
use crate::error::{NodeError, Result};
use crate::model::NodeModel;
use crate::tensor::Tensor;
use crate::{rng_from_seed, NodeRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Steps between validation evaluations (and parameter snapshots).
    pub eval_interval: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Number of most recent snapshots averaged before each evaluation.
    pub average_window: usize,
    pub seed: u64,
    pub qhadam: QhAdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 512,
            max_steps: 10_000,
            eval_interval: 200,
            patience: 10,
            average_window: 5,
            seed: 0,
            qhadam: QhAdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            errs.push(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_steps == 0 {
            errs.push("train.max_steps must be at least 1".into());
        }
        if self.eval_interval == 0 {
            errs.push("train.eval_interval must be at least 1".into());
        }
        if self.patience == 0 {
            errs.push("train.patience must be at least 1".into());
        }
        if self.average_window == 0 {
            errs.push("train.average_window must be at least 1".into());
        }
        if i64::try_from(self.seed).is_err() {
            errs.push(format!("train.seed must be at most {}, got {}", i64::MAX, self.seed));
        }
        errs.extend(self.qhadam.validate());
        errs
    }
}

/// One evaluation, emitted as a JSON line by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    /// Validation metric of the averaged parameters.
    pub val_metric: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

/// Preprocessed training and validation matrices with encoded targets.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x_train: Tensor,
    pub y_train: Vec<f64>,
    pub x_val: Tensor,
    pub y_val: Vec<f64>,
}

impl TrainData {
    /// Fits preprocessing on the rows tagged train and encodes the
    /// train and validation rows.
    pub fn prepare(dataset: &Dataset, config: PreprocessConfig) -> Result<(Preprocessor, TrainData)> {
        let (pre, x_train, y_train) = Preprocessor::fit(&dataset.train_partition(), config)?;
        let val = dataset.partition(Split::Val);
        if val.rows() == 0 {
            return Err(NodeError::InvalidArgument("dataset has no validation rows".into()));
        }
        let x_val = pre.transform_features(&val)?;
        let y_val = pre.encode_targets(&val)?;
        Ok((
            pre,
            TrainData {
                x_train,
                y_train,
                x_val,
                y_val,
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best averaged parameter set.
    pub model: NodeModel,
    pub history: Vec<HistoryRecord>,
    pub best_metric: f64,
    pub best_step: u64,
    /// Optimizer steps actually taken.
    pub steps: u64,
}

fn select(y: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| y[i]).collect()
}

/// Initialises `model` from the first training batch, then trains it.
pub fn fit(mut model: NodeModel, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(NodeError::Config(errs));
    }
    let first = batches(data.x_train.dim(0), config.batch_size, config.seed, 0)?;
    let mut rng = init_rng(config.seed);
    data_aware_init(&mut model, &data.x_train.select_rows(&first[0]), &mut rng)?;
    train(model, data, config)
}

/// Generator streams for data-aware init and Gumbel noise. Batch order uses
/// stream `epoch`, so these sit at the top of the range.
const INIT_STREAM: u64 = u64::MAX;
const NOISE_STREAM: u64 = u64::MAX - 1;

fn init_rng(seed: u64) -> NodeRng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// Trains an initialised model, scoring averaged snapshots on the validation split.
pub fn train(model: NodeModel, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    let task = model.task;
    let (x_val, y_val) = (data.x_val.clone(), data.y_val.clone());
    train_with(model, data, config, move |m| Ok(metric(task, &m.forward(&x_val)?, &y_val)))
}

/// Like [`train`] with a custom validation metric (lower is better).
pub fn train_with<E>(mut model: NodeModel, data: &TrainData, config: &TrainConfig, mut evaluate: E) -> Result<TrainOutcome>
where
    E: FnMut(&NodeModel) -> Result<f64>,
{
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(NodeError::Config(errs));
    }
    let rows = data.x_train.dim(0);
    if data.y_train.len() != rows {
        return Err(crate::error::shape_err("train", rows, data.y_train.len()));
    }
    let start = Instant::now();
    let mut opt = QhAdam::new(config.qhadam, model.parameters());
    let mut noise_rng = rng_from_seed(config.seed);
    noise_rng.set_stream(NOISE_STREAM);

    let mut history = Vec::new();
    let mut snapshots: VecDeque<Vec<Tensor>> = VecDeque::with_capacity(config.average_window);
    let mut best: Option<(f64, u64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut step = 0u64;
    let mut epoch = 0u64;

    'outer: loop {
        for idx in batches(rows, config.batch_size, config.seed, epoch)? {
            let xb = data.x_train.select_rows(&idx);
            let yb = select(&data.y_train, &idx);
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let head = {
                let mut sampler = Sampler {
                    rng: &mut noise_rng,
                    step,
                };
                let sampler = model.choice().is_stochastic().then_some(&mut sampler);
                model.record(&mut tape, xv, sampler)?
            };
            let loss = record_loss(&mut tape, model.task, head, &yb)?;
            loss_sum += tape.value(loss).item()?;
            loss_count += 1;
            tape.backward(loss)?.assign(model.parameters_mut())?;
            opt.step(model.parameters_mut(), config.learning_rate)?;
            step += 1;

            if step.is_multiple_of(config.eval_interval) || step == config.max_steps {
                if snapshots.len() == config.average_window {
                    snapshots.pop_front();
                }
                snapshots.push_back(model.parameters().iter().map(|p| p.value.clone()).collect());
                let averaged = average(&snapshots);
                let mut candidate = model.clone();
                load_values(&mut candidate, &averaged);
                let val = evaluate(&candidate)?;
                history.push(HistoryRecord {
                    step,
                    train_loss: loss_sum / loss_count as f64,
                    val_metric: val,
                    wall_time: start.elapsed().as_secs_f64(),
                });
                (loss_sum, loss_count) = (0.0, 0);
                log::info!("step {step}: val metric {val:.6}");
                if val.is_nan() {
                    return Err(NodeError::Diverged { step, history });
                }
                match &best {
                    Some((b, _, _)) if val >= *b => since_best += 1,
                    _ => {
                        best = Some((val, step, averaged));
                        since_best = 0;
                    }
                }
                if since_best >= config.patience {
                    break 'outer;
                }
            }
            if step >= config.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let (best_metric, best_step, values) = best.expect("at least one evaluation runs before stopping");
    load_values(&mut model, &values);
    model.metadata.seed = config.seed;
    model.metadata.val_metric = best_metric;
    model.metadata.steps = step;
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    Ok(TrainOutcome {
        model,
        history,
        best_metric,
        best_step,
        steps: step,
    })
}

/// Elementwise mean of snapshots; a single snapshot is returned unchanged.
fn average(snapshots: &VecDeque<Vec<Tensor>>) -> Vec<Tensor> {
    let mut acc = snapshots[0].clone();
    if snapshots.len() == 1 {
        return acc;
    }
    for snap in snapshots.iter().skip(1) {
        for (a, s) in acc.iter_mut().zip(snap) {
            a.add_assign(s);
        }
    }
    let k = snapshots.len() as f64;
    acc.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v /= k));
    acc
}

fn load_values(model: &mut NodeModel, values: &[Tensor]) {
    for (p, v) in model.parameters_mut().into_iter().zip(values) {
        p.value = v.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::ChoiceKind;
    use crate::data::{split_train_val, synthetic};
    use crate::model::{ArchConfig, Task};
    use std::cell::Cell;

    fn small_problem() -> (NodeModel, TrainData) {
        let ds = synthetic::single_split(300, 5, 1).unwrap();
        let ds = split_train_val(&ds, 0.2, 1, true).unwrap();
        let (pre, data) = TrainData::prepare(&ds, PreprocessConfig::default()).unwrap();
        let mut model = NodeModel::new(
            Task::Classification { classes: 2 },
            pre.input_dim(),
            &ArchConfig {
                num_layers: 1,
                trees_per_layer: 4,
                depth: 2,
                tree_dim: 2,
                choice: ChoiceKind::entmax15(),
            },
        )
        .unwrap();
        model.preprocessor = Some(pre);
        (model, data)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 64,
            max_steps: 40,
            eval_interval: 10,
            patience: 100,
            average_window: 3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stops_after_patience_when_metric_only_worsens() {
        let (model, data) = small_problem();
        let calls = Cell::new(0.0);
        let cfg = TrainConfig {
            patience: 1,
            max_steps: 1000,
            ..config()
        };
        let out = train_with(model, &data, &cfg, |_| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        })
        .unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_step, 10);
        assert_eq!(out.steps, 20);
    }

    #[test]
    fn window_of_one_returns_the_best_snapshot_exactly() {
        let (model, data) = small_problem();
        let cfg = TrainConfig {
            average_window: 1,
            max_steps: 30,
            ..config()
        };
        let snaps = std::cell::RefCell::new(Vec::new());
        let out = train_with(model, &data, &cfg, |m| {
            snaps.borrow_mut().push(m.clone());
            // second evaluation is best
            Ok(if snaps.borrow().len() == 2 { 0.0 } else { 1.0 })
        })
        .unwrap();
        assert_eq!(out.best_step, 20);
        let best = &snaps.borrow()[1];
        for (a, b) in out.model.parameters().iter().zip(best.parameters()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn evaluation_sees_the_mean_of_recent_snapshots() {
        let (model, data) = small_problem();
        let capture = |window: usize| {
            let cfg = TrainConfig {
                average_window: window,
                max_steps: 20,
                ..config()
            };
            let seen = std::cell::RefCell::new(Vec::new());
            train_with(model.clone(), &data, &cfg, |m| {
                seen.borrow_mut().push(m.parameters()[3].value.clone());
                Ok(1.0)
            })
            .unwrap();
            seen.into_inner()
        };
        let raw = capture(1);
        let avg = capture(2);
        assert_eq!(avg[0], raw[0]);
        for ((a, r0), r1) in avg[1].data().iter().zip(raw[0].data()).zip(raw[1].data()) {
            assert!((a - 0.5 * (r0 + r1)).abs() < 1e-15);
        }
    }

    #[test]
    fn diverging_metric_aborts_with_history() {
        let (model, data) = small_problem();
        let err = train_with(model, &data, &config(), |_| Ok(f64::NAN)).unwrap_err();
        match err {
            NodeError::Diverged { step, history } => {
                assert_eq!(step, 10);
                assert_eq!(history.len(), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_runs_agree() {
        let (model, data) = small_problem();
        let a = fit(model.clone(), &data, &config()).unwrap();
        let b = fit(model, &data, &config()).unwrap();
        assert_eq!(a.best_metric, b.best_metric);
        assert_eq!(a.model.layers, b.model.layers);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let (model, data) = small_problem();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 0,
            ..config()
        };
        match fit(model, &data, &cfg) {
            Err(NodeError::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
