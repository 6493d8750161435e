use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use node_core::analysis::{all_features, compile as compile_model, permutation_importance, CompiledModel, FeatureRef};
use node_core::data::{load_csv, split_train_val, CsvSchema, Dataset, Preprocessor, Split, Target};
use node_core::io::model_file::{from_bytes, COMPILED_MAGIC};
use node_core::io::{load_compiled, save_compiled, save_model, RunConfig, TaskKind};
use node_core::model::{NodeModel, Task};
use node_core::tensor::Tensor;
use node_core::train::ablation::{format_table, run_ablation, synthetic_suite, AblationPlan};
use node_core::train::{fit, grid_search, metric, TrainData};
use node_core::NodeError;

use crate::error::CliError;
use crate::{ApplyArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

/// File name of the effective configuration written next to the outputs.
pub const EFFECTIVE_CONFIG: &str = "run-config.toml";

/// A model read from disk in either format.
enum Loaded {
    Dense(NodeModel),
    Compiled(CompiledModel),
}

impl Loaded {
    fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(COMPILED_MAGIC) {
            Ok(Loaded::Compiled(load_compiled(path)?))
        } else {
            Ok(Loaded::Dense(from_bytes(&bytes)?))
        }
    }

    fn task(&self) -> Task {
        match self {
            Loaded::Dense(m) => m.task,
            Loaded::Compiled(m) => m.task,
        }
    }

    fn preprocessor(&self) -> Result<&Preprocessor> {
        let pre = match self {
            Loaded::Dense(m) => m.preprocessor.as_ref(),
            Loaded::Compiled(m) => m.preprocessor.as_ref(),
        };
        Ok(pre.ok_or(NodeError::Unfitted("model file has no preprocessing state"))?)
    }

    fn predict(&self, data: &Dataset) -> Result<Tensor> {
        Ok(match self {
            Loaded::Dense(m) => m.predict(data)?,
            Loaded::Compiled(m) => m.predict(data)?,
        })
    }

    fn digest(&self) -> Option<&str> {
        match self {
            Loaded::Dense(m) => Some(&m.metadata.config_digest),
            Loaded::Compiled(_) => None,
        }
    }
}

fn metric_name(task: Task) -> &'static str {
    if task.is_classification() {
        "error_rate"
    } else {
        "mse"
    }
}

fn task_name(task: Task) -> &'static str {
    if task.is_classification() {
        "classification"
    } else {
        "regression"
    }
}

/// Classification error or raw-scale MSE of `predictions` against the targets of `data`.
fn score(task: Task, pre: &Preprocessor, predictions: &Tensor, data: &Dataset) -> Result<f64> {
    match task {
        Task::Classification { .. } => Ok(metric(task, predictions, &pre.encode_targets(data)?)),
        Task::Regression => match &data.target {
            Some(Target::Values(y)) => {
                let sse: f64 = predictions.data().iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
                Ok(sse / y.len() as f64)
            }
            Some(Target::Labels(_)) => Err(NodeError::Schema("regression target must be numeric".into()).into()),
            None => Err(NodeError::MissingColumn(pre.target_name.clone()).into()),
        },
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `lines` to `out`, or standard output when absent.
fn emit(out: Option<&Path>, lines: &[serde_json::Value]) -> Result<()> {
    match out {
        Some(p) => write_jsonl(p, lines),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for l in lines {
                writeln!(lock, "{l}")?;
            }
            Ok(())
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

struct Plan {
    config: RunConfig,
    train_csv: PathBuf,
    test_csv: Option<PathBuf>,
    out_dir: PathBuf,
    model_path: PathBuf,
}

/// Loads the configuration and applies command-line overrides. Paths in
/// the document are relative to its directory; paths on the command line
/// are relative to the working directory.
fn plan(args: &TrainArgs) -> Result<Plan> {
    let (mut config, base) = match &args.config {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (RunConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.grid {
        config.grid.enabled = true;
    }
    let train_csv = match &args.data {
        Some(d) => {
            config.data.train = Some(d.clone());
            Some(d.clone())
        }
        None => config.data.train.as_ref().map(|p| base.join(p)),
    };
    let mut errs = config.validate();
    if train_csv.is_none() {
        errs.push("data.train is required (or pass --data)".into());
    }
    if !errs.is_empty() {
        return Err(NodeError::Config(errs).into());
    }
    let test_csv = config.data.test.as_ref().map(|p| base.join(p));
    let out_dir = args.out.clone().unwrap_or_else(|| base.join(&config.output.dir));
    let model_path = args.model.clone().unwrap_or_else(|| out_dir.join(&config.output.model));
    Ok(Plan {
        train_csv: train_csv.expect("checked above"),
        test_csv,
        out_dir,
        model_path,
        config,
    })
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let Plan {
        config,
        train_csv,
        test_csv,
        out_dir,
        model_path,
    } = plan(args)?;
    let schema = config.csv_schema();
    let classification = config.data.task == TaskKind::Classification;
    let dataset = load_csv(&train_csv, &schema)?;
    let test = test_csv.map(|p| load_csv(p, &schema)).transpose()?;
    let split = split_train_val(
        &dataset,
        config.data.val_fraction,
        config.train.seed,
        config.data.stratify && classification,
    )?;
    let (pre, data) = TrainData::prepare(&split, config.preprocess())?;
    let task = match pre.classes() {
        Some(c) => Task::Classification { classes: c.len() },
        None => Task::Regression,
    };

    std::fs::create_dir_all(&out_dir)?;
    ensure_parent(&model_path)?;
    let history_path = out_dir.join(&config.output.history);
    let metrics_path = out_dir.join(&config.output.metrics);

    let mut records: Vec<serde_json::Value> = Vec::new();
    let result = if config.grid.enabled {
        grid_search(task, &data, &config.model.choice_kind(), &config.grid.space(), &config.train).map(|g| {
            for c in &g.cells {
                records.push(json!({ "record": "grid_cell", "cell": c.cell, "metric": c.metric, "error": c.error }));
            }
            log::info!("best grid cell: {:?}", g.cells[g.best].cell);
            g.best_value
        })
    } else {
        NodeModel::new(task, pre.input_dim(), &config.model.arch(task.head_dim()))
            .and_then(|m| fit(m, &data, &config.train))
    };
    let outcome = match result {
        Ok(o) => o,
        Err(NodeError::Diverged { step, history }) => {
            write_jsonl(&history_path, &history)?;
            return Err(NodeError::Diverged { step, history }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let mut model = outcome.model;
    model.preprocessor = Some(pre);
    model.metadata.config_digest = config.digest();
    save_model(&model, &model_path)?;
    write_jsonl(&history_path, &outcome.history)?;
    std::fs::write(out_dir.join(EFFECTIVE_CONFIG), config.to_toml())?;

    let pre = model.preprocessor.as_ref().expect("attached above");
    let eval = |ds: &Dataset| -> Result<f64> { score(task, pre, &model.predict(ds)?, ds) };
    let train_metric = eval(&split.partition(Split::Train))?;
    let val_metric = eval(&split.partition(Split::Val))?;
    let test_metric = test.as_ref().map(eval).transpose()?;
    let summary = json!({
        "record": "train",
        "task": task_name(task),
        "metric": metric_name(task),
        "train": train_metric,
        "val": val_metric,
        "test": test_metric,
        "wall_time": start.elapsed().as_secs_f64(),
        "parameters": model.parameter_count(),
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "seed": config.train.seed,
        "config_digest": model.metadata.config_digest,
        "model": model_path,
    });
    records.push(summary.clone());
    write_jsonl(&metrics_path, &records)?;
    println!("{summary}");
    Ok(())
}

/// Loads a model and the CSV it is applied to, checking the optional config digest.
fn open(args: &ApplyArgs, target_required: bool) -> Result<(Loaded, Dataset)> {
    let loaded = Loaded::read(&args.model)?;
    let mut delimiter = b',';
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        let digest = cfg.digest();
        match loaded.digest() {
            Some(d) if d != digest => {
                return Err(CliError::ConfigMismatch {
                    model: d.to_string(),
                    config: digest,
                })
            }
            _ => {}
        }
        delimiter = cfg.data.delimiter as u8;
    }
    let pre = loaded.preprocessor()?;
    let mut schema = CsvSchema::new(pre.target_name.clone(), loaded.task().is_classification());
    schema.target_required = target_required;
    schema.delimiter = delimiter;
    schema.kinds = pre.features.iter().map(|f| (f.name.clone(), f.kind())).collect();
    let data = load_csv(&args.data, &schema)?;
    Ok((loaded, data))
}

pub fn evaluate(args: &ApplyArgs) -> Result<()> {
    let (loaded, data) = open(args, true)?;
    let task = loaded.task();
    let value = score(task, loaded.preprocessor()?, &loaded.predict(&data)?, &data)?;
    let record = json!({
        "record": "evaluate",
        "metric": metric_name(task),
        "value": value,
        "rows": data.rows(),
        "compiled": matches!(loaded, Loaded::Compiled(_)),
    });
    emit(args.out.as_deref(), &[record])
}

pub fn predict(args: &ApplyArgs) -> Result<()> {
    let (loaded, data) = open(args, false)?;
    let pred = loaded.predict(&data)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(sink));
    match loaded.preprocessor()?.classes() {
        Some(classes) => {
            let mut header: Vec<String> = classes.iter().map(|c| format!("p_{c}")).collect();
            header.push("prediction".into());
            w.write_record(&header)?;
            for r in 0..pred.dim(0) {
                let row = pred.row(r);
                let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
                rec.push(classes[node_core::choice::argmax(row)].clone());
                w.write_record(&rec)?;
            }
        }
        None => {
            w.write_record(["prediction"])?;
            for v in pred.data() {
                w.write_record([v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn importance(args: &ApplyArgs, seed: u64, repeats: usize, learned: bool) -> Result<()> {
    let (loaded, data) = open(args, true)?;
    let Loaded::Dense(model) = loaded else {
        return Err(NodeError::InvalidArgument("importance needs a dense model file".into()).into());
    };
    let pre = model.preprocessor.as_ref().expect("checked by open");
    let x = pre.transform_features(&data)?;
    let y = pre.encode_targets(&data)?;
    let features: Vec<FeatureRef> = if learned {
        all_features(&model)
    } else {
        (0..model.input_dim).map(|column| FeatureRef::Raw { column }).collect()
    };
    // report regression importance on the raw target scale
    let scale = if model.task.is_classification() { 1.0 } else { pre.mse_scale() };
    let records: Vec<serde_json::Value> = permutation_importance(&model, &x, &y, &features, repeats, seed)?
        .into_iter()
        .map(|r| {
            json!({
                "record": "importance",
                "name": r.name,
                "feature": r.feature,
                "metric": metric_name(model.task),
                "importance": r.importance * scale,
                "std": r.std * scale,
            })
        })
        .collect();
    emit(args.out.as_deref(), &records)
}

pub fn compile(model_path: &Path, out: &Path) -> Result<()> {
    let model = match Loaded::read(model_path)? {
        Loaded::Dense(m) => m,
        Loaded::Compiled(_) => {
            return Err(NodeError::InvalidArgument("model file is already compiled".into()).into());
        }
    };
    let compiled = compile_model(&model)?;
    ensure_parent(out)?;
    save_compiled(&compiled, out)?;
    let s = compiled.sparsity();
    let record = json!({
        "record": "compile",
        "trees": compiled.total_trees(),
        "total_weights": s.total_weights,
        "stored_weights": s.stored_weights,
        "dropped_fraction": s.dropped_fraction,
        "out": out,
    });
    println!("{record}");
    Ok(())
}

pub fn ablation(seed: u64, rows: usize, out: Option<&Path>) -> Result<()> {
    let tasks = synthetic_suite(rows, seed)?;
    let plan = AblationPlan::standard(seed);
    let results = run_ablation(&tasks, &plan);
    print!("{}", format_table(&results));
    if let Some(p) = out {
        write_jsonl(p, &results)?;
    }
    Ok(())
}

