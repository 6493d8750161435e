//! Fitted preprocessing: per-column transforms plus target encoding.

use super::dataset::{ColumnData, ColumnKind, Dataset, Target, TrainPartition};
use super::loo::{fit_apply_loo, LooEncoderState};
use super::quantile::{fit_quantile_transform, QuantileTransformState, DEFAULT_QUANTILES};
use crate::error::{NodeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureTransform {
    /// Missing values are replaced by the training median before the quantile map.
    Numeric {
        median: f64,
        quantile: QuantileTransformState,
    },
    /// Leave-one-out encoding followed by the quantile map.
    Categorical {
        loo: LooEncoderState,
        quantile: QuantileTransformState,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub transform: FeatureTransform,
}

impl FeatureColumn {
    pub fn kind(&self) -> ColumnKind {
        match self.transform {
            FeatureTransform::Numeric { .. } => ColumnKind::Numeric,
            FeatureTransform::Categorical { .. } => ColumnKind::Categorical,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetTransform {
    /// Class labels in index order.
    Classes(Vec<String>),
    /// Regression targets standardised as `(y − mean) / std` for training.
    Standardize { mean: f64, std: f64 },
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub quantiles: usize,
    pub normalize_target: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            quantiles: DEFAULT_QUANTILES,
            normalize_target: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub features: Vec<FeatureColumn>,
    pub target_name: String,
    pub target: TargetTransform,
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sorted distinct labels; numeric order when every label parses as a number.
fn class_labels(labels: &[String]) -> Vec<String> {
    let mut uniq: Vec<String> = labels.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.iter().all(|l| l.parse::<f64>().is_ok()) {
        uniq.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    uniq
}

impl Preprocessor {
    /// Fits every transform on the training partition and returns the
    /// encoded training matrix and targets alongside the fitted state.
    pub fn fit(train: &TrainPartition, config: PreprocessConfig) -> Result<(Self, Tensor, Vec<f64>)> {
        let ds = train.dataset();
        let rows = ds.rows();
        if rows == 0 {
            return Err(NodeError::NoDataRows);
        }
        let target = ds
            .target
            .as_ref()
            .ok_or_else(|| NodeError::MissingColumn(ds.target_name.clone()))?;
        let (target_tf, y) = match target {
            Target::Labels(labels) => {
                let classes = class_labels(labels);
                let y = labels
                    .iter()
                    .map(|l| classes.iter().position(|c| c == l).unwrap() as f64)
                    .collect();
                (TargetTransform::Classes(classes), y)
            }
            Target::Values(v) => {
                if config.normalize_target {
                    let mean = v.iter().sum::<f64>() / rows as f64;
                    let var = v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / rows as f64;
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    let y = v.iter().map(|y| (y - mean) / std).collect();
                    (TargetTransform::Standardize { mean, std }, y)
                } else {
                    (TargetTransform::Identity, v.clone())
                }
            }
        };

        let cols = ds.columns.len();
        let mut x = vec![0.0; rows * cols];
        let mut features = Vec::with_capacity(cols);
        for (j, (meta, data)) in ds.columns.iter().zip(&ds.data).enumerate() {
            let (encoded, transform) = match data {
                ColumnData::Numeric(v) => {
                    let med = median(v);
                    let filled: Vec<f64> = v.iter().map(|&a| if a.is_nan() { med } else { a }).collect();
                    let q = fit_quantile_transform(&filled, config.quantiles);
                    (
                        q.apply_all(&filled),
                        FeatureTransform::Numeric {
                            median: med,
                            quantile: q,
                        },
                    )
                }
                ColumnData::Categorical(v) => {
                    let (enc, loo) = fit_apply_loo(v, &y);
                    let q = fit_quantile_transform(&enc, config.quantiles);
                    (q.apply_all(&enc), FeatureTransform::Categorical { loo, quantile: q })
                }
            };
            for (r, e) in encoded.into_iter().enumerate() {
                x[r * cols + j] = e;
            }
            features.push(FeatureColumn {
                name: meta.name.clone(),
                transform,
            });
        }
        let pre = Preprocessor {
            features,
            target_name: ds.target_name.clone(),
            target: target_tf,
        };
        Ok((pre, Tensor::new(vec![rows, cols], x)?, y))
    }

    pub fn input_dim(&self) -> usize {
        self.features.len()
    }

    pub fn classes(&self) -> Option<&[String]> {
        match &self.target {
            TargetTransform::Classes(c) => Some(c),
            _ => None,
        }
    }

    /// Applies the fitted transforms to rows outside the training fit.
    /// Columns are matched by name; extra columns are ignored.
    pub fn transform_features(&self, data: &Dataset) -> Result<Tensor> {
        let rows = data.rows();
        let cols = self.features.len();
        let mut x = vec![0.0; rows * cols];
        for (j, f) in self.features.iter().enumerate() {
            let idx = data
                .column_index(&f.name)
                .ok_or_else(|| NodeError::Schema(format!("column \"{}\" is missing", f.name)))?;
            let encoded: Vec<f64> = match (&f.transform, &data.data[idx]) {
                (FeatureTransform::Numeric { median, quantile }, ColumnData::Numeric(v)) => v
                    .iter()
                    .map(|&a| quantile.apply(if a.is_nan() { *median } else { a }))
                    .collect(),
                (FeatureTransform::Categorical { loo, quantile }, ColumnData::Categorical(v)) => {
                    v.iter().map(|c| quantile.apply(loo.apply(c))).collect()
                }
                (FeatureTransform::Categorical { loo, quantile }, ColumnData::Numeric(v)) => {
                    // numeric-looking categories parsed as numbers
                    v.iter()
                        .map(|a| quantile.apply(loo.apply(&format_number(*a))))
                        .collect()
                }
                (FeatureTransform::Numeric { .. }, ColumnData::Categorical(_)) => {
                    return Err(NodeError::Schema(format!(
                        "column \"{}\" must be numeric",
                        f.name
                    )))
                }
            };
            for (r, e) in encoded.into_iter().enumerate() {
                x[r * cols + j] = e;
            }
        }
        Tensor::new(vec![rows, cols], x)
    }

    /// Encoded targets: class indices, or (standardised) regression values.
    pub fn encode_targets(&self, data: &Dataset) -> Result<Vec<f64>> {
        let target = data
            .target
            .as_ref()
            .ok_or_else(|| NodeError::MissingColumn(self.target_name.clone()))?;
        match (&self.target, target) {
            (TargetTransform::Classes(classes), Target::Labels(labels)) => labels
                .iter()
                .map(|l| {
                    classes
                        .iter()
                        .position(|c| c == l)
                        .map(|i| i as f64)
                        .ok_or_else(|| NodeError::Schema(format!("unknown class label \"{l}\"")))
                })
                .collect(),
            (TargetTransform::Standardize { mean, std }, Target::Values(v)) => {
                Ok(v.iter().map(|y| (y - mean) / std).collect())
            }
            (TargetTransform::Identity, Target::Values(v)) => Ok(v.clone()),
            _ => Err(NodeError::Schema("target kind does not match the model task".into())),
        }
    }

    /// Maps a model-scale regression output back to the target's scale.
    pub fn decode_value(&self, v: f64) -> f64 {
        match self.target {
            TargetTransform::Standardize { mean, std } => v * std + mean,
            _ => v,
        }
    }

    /// Squared scale factor between model-scale and raw-scale MSE.
    pub fn mse_scale(&self) -> f64 {
        match self.target {
            TargetTransform::Standardize { std, .. } => std * std,
            _ => 1.0,
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_csv, split_train_val, CsvSchema, Split};

    #[test]
    fn fit_uses_only_training_rows() {
        let x = Tensor::new(vec![10, 1], (0..10).map(f64::from).collect()).unwrap();
        let t = Target::Values((0..10).map(f64::from).collect());
        let mut ds = Dataset::from_matrix(&x, None, "y", Some(t)).unwrap();
        // last row is validation with an extreme value
        ds.split[9] = Split::Val;
        if let ColumnData::Numeric(v) = &mut ds.data[0] {
            v[9] = 1e6;
        }
        let (pre, _, _) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        let val = pre.transform_features(&ds.partition(Split::Val)).unwrap();
        let top = pre.transform_features(&ds.subset(&[8])).unwrap();
        assert_eq!(val.data()[0], top.data()[0]);
    }

    #[test]
    fn classification_labels_become_indices() {
        let csv = "a,c,y\n1,u,no\n2,v,yes\n3,u,no\n4,v,yes\n5,u,yes\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::new("y", true)).unwrap();
        let (pre, x, y) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        assert_eq!(pre.classes().unwrap(), &["no".to_string(), "yes".to_string()]);
        assert_eq!(y, vec![0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(x.shape(), &[5, 2]);
        assert!(x.is_finite());
        assert_eq!(pre.encode_targets(&ds).unwrap(), y);
    }

    #[test]
    fn missing_numeric_uses_train_median() {
        let csv = "a,y\n1,0\n2,1\nNA,0\n10,1\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::new("y", true)).unwrap();
        let (pre, x, _) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        match &pre.features[0].transform {
            FeatureTransform::Numeric { median, .. } => assert_eq!(*median, 2.0),
            _ => panic!(),
        }
        assert_eq!(x.data()[2], x.data()[1]);
    }

    #[test]
    fn regression_targets_round_trip_through_standardisation() {
        let x = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let ds = Dataset::from_matrix(&x, None, "y", Some(Target::Values(vec![10.0, 12.0, 14.0, 20.0]))).unwrap();
        let (pre, _, y) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        assert!((y.iter().sum::<f64>()).abs() < 1e-12);
        assert!((pre.decode_value(y[3]) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn missing_feature_column_is_a_schema_error() {
        let csv = "a,b,y\n1,2,0\n2,3,1\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::new("y", true)).unwrap();
        let ds = split_train_val(&ds, 0.0, 0, false).unwrap();
        let (pre, _, _) = Preprocessor::fit(&ds.train_partition(), PreprocessConfig::default()).unwrap();
        let other = read_csv("a,y\n1,0\n".as_bytes(), &CsvSchema::new("y", true)).unwrap();
        assert!(matches!(pre.transform_features(&other), Err(NodeError::Schema(_))));
    }
}
