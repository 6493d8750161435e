//! Binary model files.
//!
//! Layout, little-endian throughout: magic `NODEv1`, `u32` version, task,
//! head and layer headers, then per layer the tensors `F`, `b`, raw `τ`,
//! `R` as `u32` rank, `u64` dims and row-major `f64` data, followed by the
//! preprocessing state and training metadata. Strings are `u32` length
//! plus UTF-8 bytes. Map-valued state is written in key order, so a
//! save → load → save round trip is byte-identical.
//!
//! Compiled models use magic `NODEc1` and store sparse selectors instead
//! of selection logits.

use std::collections::BTreeMap;
use std::path::Path;

use crate::analysis::{CompiledLayer, CompiledModel};
use crate::choice::{ChoiceKind, TemperatureSchedule};
use crate::data::{
    FeatureColumn, FeatureTransform, LooEncoderState, Preprocessor, QuantileTransformState, TargetTransform,
};
use crate::error::{NodeError, Result};
use crate::model::{ModelMetadata, NodeModel, Task};
use crate::odt::{LayerConfig, OdtLayer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"NODEv1";
pub const COMPILED_MAGIC: &[u8; 6] = b"NODEc1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        t.shape().iter().for_each(|&d| self.usize(d));
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NodeError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| NodeError::Format("length overflows usize".into()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(NodeError::Format(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NodeError::Format("invalid UTF-8 string".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(NodeError::Format(format!("tensor rank {rank} is implausible")));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos);
        let n = n.ok_or_else(|| NodeError::Format("tensor larger than file".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(NodeError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(r: &mut Reader, magic: &[u8; 6]) -> Result<()> {
    if r.take(6).ok() != Some(&magic[..]) {
        return Err(NodeError::Format(format!(
            "missing magic {:?}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NodeError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn write_task(w: &mut Writer, task: Task) {
    match task {
        Task::Classification { classes } => {
            w.u8(0);
            w.u32(classes as u32);
        }
        Task::Regression => {
            w.u8(1);
            w.u32(1);
        }
    }
}

fn read_task(r: &mut Reader) -> Result<Task> {
    let tag = r.u8()?;
    let classes = r.u32()? as usize;
    match tag {
        0 => Ok(Task::Classification { classes }),
        1 => Ok(Task::Regression),
        t => Err(NodeError::Format(format!("unknown task tag {t}"))),
    }
}

fn write_choice(w: &mut Writer, c: &ChoiceKind) {
    match c {
        ChoiceKind::Softmax => w.u8(0),
        ChoiceKind::Sparsemax => w.u8(1),
        ChoiceKind::Entmax { alpha } => {
            w.u8(2);
            w.f64(*alpha);
        }
        ChoiceKind::GumbelSoftmax(TemperatureSchedule::Constant { t0 }) => {
            w.u8(3);
            w.f64(*t0);
        }
        ChoiceKind::GumbelSoftmax(TemperatureSchedule::Annealed { t0, decay, floor }) => {
            w.u8(4);
            w.f64(*t0);
            w.f64(*decay);
            w.f64(*floor);
        }
    }
}

fn read_choice(r: &mut Reader) -> Result<ChoiceKind> {
    Ok(match r.u8()? {
        0 => ChoiceKind::Softmax,
        1 => ChoiceKind::Sparsemax,
        2 => ChoiceKind::Entmax { alpha: r.f64()? },
        3 => ChoiceKind::GumbelSoftmax(TemperatureSchedule::Constant { t0: r.f64()? }),
        4 => ChoiceKind::GumbelSoftmax(TemperatureSchedule::Annealed {
            t0: r.f64()?,
            decay: r.f64()?,
            floor: r.f64()?,
        }),
        t => return Err(NodeError::Format(format!("unknown choice tag {t}"))),
    })
}

fn write_preprocessor(w: &mut Writer, p: &Option<Preprocessor>) {
    let Some(p) = p else {
        w.u8(0);
        return;
    };
    w.u8(1);
    w.u32(p.features.len() as u32);
    for f in &p.features {
        w.str(&f.name);
        match &f.transform {
            FeatureTransform::Numeric { median, quantile } => {
                w.u8(0);
                w.f64(*median);
                w.f64s(&quantile.references);
            }
            FeatureTransform::Categorical { loo, quantile } => {
                w.u8(1);
                w.usize(loo.categories.len());
                for (k, &(sum, count)) in &loo.categories {
                    w.str(k);
                    w.f64(sum);
                    w.u64(count);
                }
                w.f64(loo.global_mean);
                w.f64s(&quantile.references);
            }
        }
    }
    w.str(&p.target_name);
    match &p.target {
        TargetTransform::Classes(c) => {
            w.u8(0);
            w.u32(c.len() as u32);
            c.iter().for_each(|s| w.str(s));
        }
        TargetTransform::Standardize { mean, std } => {
            w.u8(1);
            w.f64(*mean);
            w.f64(*std);
        }
        TargetTransform::Identity => w.u8(2),
    }
}

fn read_preprocessor(r: &mut Reader) -> Result<Option<Preprocessor>> {
    match r.u8()? {
        0 => return Ok(None),
        1 => {}
        t => return Err(NodeError::Format(format!("bad preprocessing flag {t}"))),
    }
    let n = r.u32()? as usize;
    let mut features = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.str()?;
        let transform = match r.u8()? {
            0 => FeatureTransform::Numeric {
                median: r.f64()?,
                quantile: QuantileTransformState { references: r.f64s()? },
            },
            1 => {
                let k = r.len(20)?;
                let mut categories = BTreeMap::new();
                for _ in 0..k {
                    let key = r.str()?;
                    let sum = r.f64()?;
                    let count = r.u64()?;
                    categories.insert(key, (sum, count));
                }
                let loo = LooEncoderState {
                    categories,
                    global_mean: r.f64()?,
                };
                FeatureTransform::Categorical {
                    loo,
                    quantile: QuantileTransformState { references: r.f64s()? },
                }
            }
            t => return Err(NodeError::Format(format!("unknown feature transform tag {t}"))),
        };
        features.push(FeatureColumn { name, transform });
    }
    let target_name = r.str()?;
    let target = match r.u8()? {
        0 => {
            let k = r.u32()? as usize;
            TargetTransform::Classes((0..k).map(|_| r.str()).collect::<Result<_>>()?)
        }
        1 => TargetTransform::Standardize {
            mean: r.f64()?,
            std: r.f64()?,
        },
        2 => TargetTransform::Identity,
        t => return Err(NodeError::Format(format!("unknown target transform tag {t}"))),
    };
    Ok(Some(Preprocessor {
        features,
        target_name,
        target,
    }))
}

/// Serialises a model to bytes.
pub fn to_bytes(model: &NodeModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    write_task(&mut w, model.task);
    w.u32(model.input_dim as u32);
    w.u32(model.tree_dim as u32);
    w.u32(model.layers.len() as u32);
    for layer in &model.layers {
        let c = &layer.config;
        w.u32(c.trees as u32);
        w.u32(c.depth as u32);
        w.u32(c.tree_dim as u32);
        w.u32(c.input_dim as u32);
        write_choice(&mut w, &c.choice);
        for p in layer.parameters() {
            w.tensor(&p.value);
        }
    }
    write_preprocessor(&mut w, &model.preprocessor);
    let m = &model.metadata;
    w.u64(m.seed);
    w.str(&m.config_digest);
    w.f64(m.val_metric);
    w.u64(m.steps);
    w.0
}

/// Parses a model, validating every layer's shapes.
pub fn from_bytes(bytes: &[u8]) -> Result<NodeModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r, MAGIC)?;
    let task = read_task(&mut r)?;
    let input_dim = r.u32()? as usize;
    let tree_dim = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for i in 0..n_layers {
        let config = LayerConfig {
            trees: r.u32()? as usize,
            depth: r.u32()? as usize,
            tree_dim: r.u32()? as usize,
            input_dim: r.u32()? as usize,
            choice: read_choice(&mut r)?,
        };
        config.validate()?;
        let mut layer = OdtLayer::zeros(config, &format!("layer{i}"))?;
        for p in layer.parameters_mut() {
            let t = r.tensor()?;
            if t.shape() != p.value.shape() {
                return Err(NodeError::Format(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.grad = Tensor::zeros(t.shape());
            p.value = t;
        }
        layers.push(layer);
    }
    let preprocessor = read_preprocessor(&mut r)?;
    let metadata = ModelMetadata {
        seed: r.u64()?,
        config_digest: r.str()?,
        val_metric: r.f64()?,
        steps: r.u64()?,
    };
    r.finish()?;
    let model = NodeModel {
        task,
        input_dim,
        tree_dim,
        layers,
        preprocessor,
        metadata,
    };
    check_structure(&model)?;
    Ok(model)
}

fn check_structure(model: &NodeModel) -> Result<()> {
    if model.layers.is_empty() {
        return Err(NodeError::Format("model has no layers".into()));
    }
    let trees: Vec<usize> = model.layers.iter().map(|l| l.config.trees).collect();
    let dims = crate::model::layer_input_dims(model.input_dim, &trees, model.tree_dim);
    for (l, d) in model.layers.iter().zip(dims) {
        if l.config.input_dim != d || l.config.tree_dim != model.tree_dim {
            return Err(NodeError::Format("layer widths violate dense connectivity".into()));
        }
    }
    if model.tree_dim < model.task.head_dim() {
        return Err(NodeError::Format("tree output dim smaller than head".into()));
    }
    Ok(())
}

pub fn save_model(model: &NodeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NodeModel> {
    from_bytes(&std::fs::read(path)?)
}

pub fn compiled_to_bytes(model: &CompiledModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(COMPILED_MAGIC);
    w.u32(FORMAT_VERSION);
    write_task(&mut w, model.task);
    w.u32(model.input_dim as u32);
    w.u32(model.tree_dim as u32);
    write_choice(&mut w, &model.choice);
    w.u32(model.layers.len() as u32);
    for l in &model.layers {
        w.u32(l.trees as u32);
        w.u32(l.depth as u32);
        w.u32(l.input_dim as u32);
        for s in &l.selectors {
            w.u32(s.len() as u32);
            for &(j, v) in s {
                w.u32(j);
                w.f64(v);
            }
        }
        w.f64s(&l.thresholds);
        w.f64s(&l.scales);
        w.f64s(&l.response);
    }
    write_preprocessor(&mut w, &model.preprocessor);
    w.0
}

pub fn compiled_from_bytes(bytes: &[u8]) -> Result<CompiledModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r, COMPILED_MAGIC)?;
    let task = read_task(&mut r)?;
    let input_dim = r.u32()? as usize;
    let tree_dim = r.u32()? as usize;
    let choice = read_choice(&mut r)?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    let mut width = input_dim;
    for _ in 0..n_layers {
        let trees = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let layer_input = r.u32()? as usize;
        if layer_input != width || depth == 0 || depth > crate::odt::MAX_DEPTH {
            return Err(NodeError::Format("inconsistent compiled layer header".into()));
        }
        let k = trees.checked_mul(depth).filter(|&k| k <= bytes.len());
        let k = k.ok_or_else(|| NodeError::Format("implausible tree count".into()))?;
        let mut selectors = Vec::with_capacity(k);
        for _ in 0..k {
            let n = r.u32()? as usize;
            let mut s = Vec::with_capacity(n.min(layer_input));
            for _ in 0..n {
                let j = r.u32()?;
                if j as usize >= layer_input {
                    return Err(NodeError::Format(format!("selector index {j} out of range")));
                }
                s.push((j, r.f64()?));
            }
            selectors.push(s);
        }
        let thresholds = r.f64s()?;
        let scales = r.f64s()?;
        let response = r.f64s()?;
        if thresholds.len() != k || scales.len() != k || response.len() != trees * (1 << depth) * tree_dim {
            return Err(NodeError::Format("compiled layer tensors have wrong sizes".into()));
        }
        layers.push(CompiledLayer {
            trees,
            depth,
            input_dim: layer_input,
            selectors,
            thresholds,
            scales,
            response,
        });
        width += trees * tree_dim;
    }
    let preprocessor = read_preprocessor(&mut r)?;
    r.finish()?;
    if layers.is_empty() || tree_dim < task.head_dim() {
        return Err(NodeError::Format("compiled model has no usable head".into()));
    }
    Ok(CompiledModel {
        task,
        input_dim,
        tree_dim,
        choice,
        layers,
        preprocessor,
    })
}

pub fn save_compiled(model: &CompiledModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, compiled_to_bytes(model))?;
    Ok(())
}

pub fn load_compiled(path: impl AsRef<Path>) -> Result<CompiledModel> {
    compiled_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::compile;
    use crate::data::{read_csv, CsvSchema, PreprocessConfig};
    use crate::model::LayerSpec;
    use crate::rng_from_seed;
    use rand::Rng;

    fn fitted_model() -> NodeModel {
        let csv = "a,city,y\n1.5,x,no\n2,y,yes\n0.3,x,no\n4,z,yes\n5,y,no\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::new("y", true)).unwrap();
        let (pre, _, _) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        let specs = [LayerSpec { trees: 3, depth: 2 }, LayerSpec { trees: 2, depth: 3 }];
        let mut m = NodeModel::from_specs(Task::Classification { classes: 2 }, 2, &specs, 2, ChoiceKind::entmax15()).unwrap();
        let mut rng = rng_from_seed(1);
        for p in m.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        m.preprocessor = Some(pre);
        m.metadata = ModelMetadata {
            seed: 9,
            config_digest: "abc".into(),
            val_metric: 0.25,
            steps: 100,
        };
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = fitted_model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn starts_with_magic_and_version() {
        let bytes = to_bytes(&fitted_model());
        assert_eq!(&bytes[..6], b"NODEv1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&fitted_model());
        bytes[6] = 2;
        assert!(matches!(
            from_bytes(&bytes),
            Err(NodeError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&fitted_model());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(NodeError::Format(_))));
        assert!(matches!(from_bytes(b"garbage!!!"), Err(NodeError::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(NodeError::Format(_))));
    }

    #[test]
    fn compiled_round_trip() {
        let c = compile(&fitted_model()).unwrap();
        let bytes = compiled_to_bytes(&c);
        let back = compiled_from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(compiled_to_bytes(&back), bytes);
        assert!(from_bytes(&bytes).is_err());
    }
}
