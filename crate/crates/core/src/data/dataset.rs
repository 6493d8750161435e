use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NodeError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// Raw column values. Missing numeric cells are stored as NaN.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Class labels as read from the file.
    Labels(Vec<String>),
    Values(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Labels(v) => v.len(),
            Target::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Target {
        match self {
            Target::Labels(v) => Target::Labels(rows.iter().map(|&r| v[r].clone()).collect()),
            Target::Values(v) => Target::Values(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub columns: Vec<ColumnMeta>,
    pub data: Vec<ColumnData>,
    pub target_name: String,
    /// `None` when the file carried no target column (prediction input).
    pub target: Option<Target>,
    pub split: Vec<Split>,
}

/// Rows tagged [`Split::Train`]. Preprocessing can only be fitted on this
/// type, which is obtainable only through [`Dataset::train_partition`].
#[derive(Clone, Debug)]
pub struct TrainPartition(Dataset);

impl TrainPartition {
    pub fn dataset(&self) -> &Dataset {
        &self.0
    }
}

impl Dataset {
    /// Builds an all-numeric dataset from a `(rows, cols)` matrix.
    pub fn from_matrix(x: &Tensor, names: Option<Vec<String>>, target_name: &str, target: Option<Target>) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(crate::error::shape_err("Dataset::from_matrix", "(rows, cols)", x.shape()));
        }
        let (rows, cols) = (x.dim(0), x.dim(1));
        let names = names.unwrap_or_else(|| (0..cols).map(|j| format!("f{j}")).collect());
        if names.len() != cols {
            return Err(NodeError::InvalidArgument(format!("{} names for {cols} columns", names.len())));
        }
        if let Some(t) = &target {
            if t.len() != rows {
                return Err(NodeError::InvalidArgument(format!("{} targets for {rows} rows", t.len())));
            }
        }
        let data = (0..cols)
            .map(|j| ColumnData::Numeric((0..rows).map(|r| x.data()[r * cols + j]).collect()))
            .collect();
        Ok(Dataset {
            columns: names
                .into_iter()
                .map(|name| ColumnMeta {
                    name,
                    kind: ColumnKind::Numeric,
                })
                .collect(),
            data,
            target_name: target_name.to_string(),
            target,
            split: vec![Split::Train; rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.split.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows by index, keeping their split tags.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            data: self.data.iter().map(|c| c.select(rows)).collect(),
            target_name: self.target_name.clone(),
            target: self.target.as_ref().map(|t| t.select(rows)),
            split: rows.iter().map(|&r| self.split[r]).collect(),
        }
    }

    pub fn partition(&self, split: Split) -> Dataset {
        self.subset(&self.indices(split))
    }

    pub fn train_partition(&self) -> TrainPartition {
        TrainPartition(self.partition(Split::Train))
    }

    /// Replaces every split tag.
    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split.iter_mut().for_each(|s| *s = split);
        self
    }

    /// Appends the rows of `other`, which must share this dataset's schema.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.columns != other.columns || self.target_name != other.target_name {
            return Err(NodeError::Schema("datasets have different columns".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| match (a, b) {
                (ColumnData::Numeric(x), ColumnData::Numeric(y)) => ColumnData::Numeric([x.clone(), y.clone()].concat()),
                (ColumnData::Categorical(x), ColumnData::Categorical(y)) => {
                    ColumnData::Categorical([x.clone(), y.clone()].concat())
                }
                _ => unreachable!("column kinds compared above"),
            })
            .collect();
        let target = match (&self.target, &other.target) {
            (Some(Target::Labels(a)), Some(Target::Labels(b))) => Some(Target::Labels([a.clone(), b.clone()].concat())),
            (Some(Target::Values(a)), Some(Target::Values(b))) => Some(Target::Values([a.clone(), b.clone()].concat())),
            (None, None) => None,
            _ => return Err(NodeError::Schema("datasets have different target kinds".into())),
        };
        Ok(Dataset {
            columns: self.columns.clone(),
            data,
            target_name: self.target_name.clone(),
            target,
            split: [self.split.clone(), other.split.clone()].concat(),
        })
    }
}

/// How to read a CSV file.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub target: String,
    /// Whether a missing target column is an error.
    pub target_required: bool,
    /// Targets are class labels (otherwise real values).
    pub classification: bool,
    pub delimiter: u8,
    /// Explicit column kinds; unlisted columns are inferred (numeric when
    /// every cell parses as a float or is missing).
    pub kinds: BTreeMap<String, ColumnKind>,
}

impl CsvSchema {
    pub fn new(target: impl Into<String>, classification: bool) -> Self {
        CsvSchema {
            target: target.into(),
            target_required: true,
            classification,
            delimiter: b',',
            kinds: BTreeMap::new(),
        }
    }
}

const MISSING_TOKENS: [&str; 6] = ["", "NA", "NaN", "nan", "null", "?"];

/// Label used for missing categorical cells.
pub const MISSING_CATEGORY: &str = "__missing__";

fn parse_numeric(cell: &str) -> Option<f64> {
    let t = cell.trim();
    if MISSING_TOKENS.contains(&t) {
        return Some(f64::NAN);
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(_) => return Err(NodeError::NoDataRows),
    };
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (j, col) in cells.iter_mut().enumerate() {
            col.push(rec.get(j).unwrap_or("").to_string());
        }
    }
    let rows = cells.first().map_or(0, Vec::len);
    if rows == 0 {
        return Err(NodeError::NoDataRows);
    }

    let target_pos = headers.iter().position(|h| *h == schema.target);
    if target_pos.is_none() && schema.target_required {
        return Err(NodeError::MissingColumn(schema.target.clone()));
    }

    let mut columns = Vec::new();
    let mut data = Vec::new();
    let mut target = None;
    for (j, (name, col)) in headers.iter().zip(cells).enumerate() {
        if Some(j) == target_pos {
            target = Some(if schema.classification {
                Target::Labels(col.into_iter().map(|c| c.trim().to_string()).collect())
            } else {
                let mut v = Vec::with_capacity(rows);
                for (r, c) in col.iter().enumerate() {
                    match c.trim().parse::<f64>() {
                        Ok(x) if x.is_finite() => v.push(x),
                        _ => {
                            return Err(NodeError::Parse {
                                row: r + 1,
                                column: name.clone(),
                                message: format!("target \"{c}\" is not a number"),
                            })
                        }
                    }
                }
                Target::Values(v)
            });
            continue;
        }
        let kind = match schema.kinds.get(name) {
            Some(k) => *k,
            None if col.iter().all(|c| parse_numeric(c).is_some()) => ColumnKind::Numeric,
            None => ColumnKind::Categorical,
        };
        let values = match kind {
            ColumnKind::Numeric => {
                let mut v = Vec::with_capacity(rows);
                for (r, c) in col.iter().enumerate() {
                    match parse_numeric(c) {
                        Some(x) => v.push(x),
                        None => {
                            return Err(NodeError::Parse {
                                row: r + 1,
                                column: name.clone(),
                                message: format!("\"{c}\" is not a number"),
                            })
                        }
                    }
                }
                ColumnData::Numeric(v)
            }
            ColumnKind::Categorical => ColumnData::Categorical(
                col.into_iter()
                    .map(|c| {
                        let t = c.trim();
                        if t.is_empty() {
                            MISSING_CATEGORY.to_string()
                        } else {
                            t.to_string()
                        }
                    })
                    .collect(),
            ),
        };
        debug_assert_eq!(values.len(), rows);
        columns.push(ColumnMeta {
            name: name.clone(),
            kind,
        });
        data.push(values);
    }
    Ok(Dataset {
        columns,
        data,
        target_name: schema.target.clone(),
        target,
        split: vec![Split::Train; rows],
    })
}
