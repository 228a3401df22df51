//! Datasets: CSV ingestion, seeded synthetic generators, standardization and
//! train/query splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Target, Task};
use crate::seed;

/// Per-column affine standardization `z = (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Regression targets only.
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
}

impl Standardization {
    pub fn standardize_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn unstandardize_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }

    pub fn unstandardize_target(&self, t: f64) -> f64 {
        match (self.target_mean, self.target_std) {
            (Some(m), Some(s)) => t * s + m,
            _ => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub task: Task,
    pub feature_dim: usize,
    /// Class count for classification.
    pub num_classes: Option<usize>,
    pub stats: Option<Standardization>,
}

impl Dataset {
    /// Validates widths and targets.
    pub fn new(examples: Vec<Example>, task: Task, num_classes: Option<usize>) -> Result<Self> {
        let feature_dim = examples
            .first()
            .map(|e| e.x.len())
            .ok_or_else(|| Error::Empty("dataset has no examples".into()))?;
        if feature_dim == 0 {
            return Err(Error::invalid("examples need at least one feature"));
        }
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != feature_dim {
                return Err(Error::dim(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    e.x.len()
                )));
            }
            match (task, e.t, num_classes) {
                (Task::Regression, Target::Value(_), _) => {}
                (Task::Classification, Target::Class(c), Some(k)) if c < k => {}
                (Task::Classification, Target::Class(c), Some(k)) => {
                    return Err(Error::invalid(format!(
                        "example {i}: class {c} ≥ class count {k}"
                    )))
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "example {i}: target does not fit a {task} task"
                    )))
                }
            }
        }
        if task == Task::Classification && num_classes.is_none() {
            return Err(Error::invalid("classification dataset needs a class count"));
        }
        Ok(Dataset {
            examples,
            task,
            feature_dim,
            num_classes,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Output width a model needs for this dataset.
    pub fn output_dim(&self) -> usize {
        self.num_classes.unwrap_or(1)
    }

    /// Standardizes features (and regression targets) in place using this
    /// dataset's own column statistics. Constant columns keep std = 1.
    pub fn standardize(&mut self) -> &Standardization {
        let n = self.examples.len() as f64;
        let d = self.feature_dim;
        let mut mean = vec![0.0; d];
        for e in &self.examples {
            for (m, &v) in mean.iter_mut().zip(&e.x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for e in &self.examples {
            for ((s, &m), &v) in std.iter_mut().zip(&mean).zip(&e.x) {
                *s += (v - m) * (v - m);
            }
        }
        for (j, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                log::warn!("feature column {j} is constant; leaving its scale at 1");
                *s = 1.0;
            }
        }
        let (target_mean, target_std) = if self.task == Task::Regression {
            let ts: Vec<f64> = self.examples.iter().map(|e| e.t.as_f64()).collect();
            let m = ts.iter().sum::<f64>() / n;
            let mut s = (ts.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n).sqrt();
            if !(s > 0.0) {
                log::warn!("regression target is constant; leaving its scale at 1");
                s = 1.0;
            }
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let stats = Standardization {
            feature_mean: mean,
            feature_std: std,
            target_mean,
            target_std,
        };
        for e in &mut self.examples {
            e.x = stats.standardize_features(&e.x);
            if let (Target::Value(t), Some(m), Some(s)) = (e.t, target_mean, target_std) {
                e.t = Target::Value((t - m) / s);
            }
        }
        self.stats.insert(stats)
    }

    /// Applies this dataset's stored statistics to foreign examples.
    pub fn apply_stats(&self, examples: &[Example]) -> Vec<Example> {
        match &self.stats {
            None => examples.to_vec(),
            Some(s) => examples
                .iter()
                .map(|e| Example {
                    x: s.standardize_features(&e.x),
                    t: match (e.t, s.target_mean, s.target_std) {
                        (Target::Value(t), Some(m), Some(sd)) => Target::Value((t - m) / sd),
                        (t, _, _) => t,
                    },
                })
                .collect(),
        }
    }
}

/// Loads a numeric CSV with a header row and standardizes it.
pub fn load_csv(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let mut ds = load_csv_raw(path, target_column, task)?;
    ds.standardize();
    Ok(ds)
}

/// Loads a numeric CSV with a header row as-is.
pub fn load_csv_raw(path: &Path, target_column: &str, task: Task) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Format {
            what: "csv",
            detail: format!("{}: no column named {target_column:?}", path.display()),
        })?;
    let mut examples = Vec::new();
    let mut max_class = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // row numbers are 1-based and count the header
        let line = row + 2;
        let mut x = Vec::with_capacity(record.len().saturating_sub(1));
        let mut target = None;
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Format {
                what: "csv",
                detail: format!(
                    "{}: non-numeric cell {cell:?} at row {line}, column {} ({})",
                    path.display(),
                    col + 1,
                    &headers[col]
                ),
            })?;
            if col == target_idx {
                target = Some(v);
            } else {
                x.push(v);
            }
        }
        let v = target.ok_or_else(|| Error::Format {
            what: "csv",
            detail: format!("{}: row {line} is missing the target cell", path.display()),
        })?;
        let t = match task {
            Task::Regression => Target::Value(v),
            Task::Classification => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Format {
                        what: "csv",
                        detail: format!(
                            "{}: row {line}: class label {v} is not a non-negative integer",
                            path.display()
                        ),
                    });
                }
                max_class = max_class.max(v as usize);
                Target::Class(v as usize)
            }
        };
        examples.push(Example { x, t });
    }
    if examples.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    let classes = (task == Task::Classification).then_some(max_class + 1);
    Dataset::new(examples, task, classes)
}

/// Writes features as `x0..x{d-1}` columns followed by a `target` column.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.feature_dim).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    w.write_record(&header).map_err(csv_err)?;
    for e in &dataset.examples {
        let mut row: Vec<String> = e.x.iter().map(|v| v.to_string()).collect();
        row.push(match e.t {
            Target::Value(v) => v.to_string(),
            Target::Class(c) => c.to_string(),
        });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The planted regression weights used by [`synth_regression`] for `(d, seed)`.
pub fn planted_weights(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed, &[0x5eed_0001]);
    let scale = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect()
}

/// `x ~ N(0, I_d)`, `t = wᵀx + ε` with `ε ~ N(0, noise_std²)` and planted `w`.
pub fn synth_regression(n: usize, d: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || d < 1 {
        return Err(Error::invalid(format!(
            "synthetic regression needs n ≥ 2 and d ≥ 1, got n={n}, d={d}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid(format!(
            "noise_std must be finite and ≥ 0, got {noise_std}"
        )));
    }
    let w = planted_weights(d, seed);
    let mut rng = seed::rng(seed, &[0x5eed_0002]);
    let examples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: f64 = StandardNormal.sample(&mut rng);
            let t = crate::linalg::dot(&w, &x) + noise_std * eps;
            Example::regression(x, t)
        })
        .collect();
    Dataset::new(examples, Task::Regression, None)
}

/// Gaussian class clusters: class means are `margin` times seeded unit
/// vectors, points are `mean + N(0, I_d)`, labels uniform over classes.
pub fn synth_classification(
    n: usize,
    d: usize,
    classes: usize,
    margin: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 || d < 1 || classes < 2 {
        return Err(Error::invalid(format!(
            "synthetic classification needs n ≥ 2, d ≥ 1, classes ≥ 2, got n={n}, d={d}, classes={classes}"
        )));
    }
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::invalid(format!(
            "margin must be finite and ≥ 0, got {margin}"
        )));
    }
    let mut rng = seed::rng(seed, &[0x5eed_0003]);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nu = crate::linalg::norm(&u).max(f64::MIN_POSITIVE);
            u.into_iter().map(|v| margin * v / nu).collect()
        })
        .collect();
    let mut rng = seed::rng(seed, &[0x5eed_0004]);
    let examples = (0..n)
        .map(|_| {
            let c = rng.random_range(0..classes);
            let x = means[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            Example::classification(x, c)
        })
        .collect();
    Dataset::new(examples, Task::Classification, Some(classes))
}

/// Relabels a seeded `fraction` of the examples with a uniformly drawn class.
/// Returns the relabeled indices in ascending order.
pub fn corrupt_labels(dataset: &mut Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let classes = dataset
        .num_classes
        .ok_or_else(|| Error::invalid("label corruption needs a classification dataset"))?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let n = dataset.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut rng = seed::rng(seed, &[0x5eed_0005]);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        dataset.examples[i].t = Target::Class(rng.random_range(0..classes));
    }
    Ok(chosen)
}

/// Seeded disjoint split into a training set and `n_query` held-out queries.
/// Training examples keep their original relative order.
pub fn split(dataset: &Dataset, n_query: usize, seed: u64) -> Result<(Dataset, Vec<Example>)> {
    if n_query >= dataset.len() {
        return Err(Error::invalid(format!(
            "cannot hold out {n_query} queries from {} examples",
            dataset.len()
        )));
    }
    let (train_idx, query_idx) = split_indices(dataset.len(), n_query, seed);
    let mut train = dataset.clone();
    train.examples = train_idx
        .iter()
        .map(|&i| dataset.examples[i].clone())
        .collect();
    let queries = query_idx
        .iter()
        .map(|&i| dataset.examples[i].clone())
        .collect();
    Ok((train, queries))
}

/// Index sets behind [`split`]: (train ascending, queries in draw order).
pub fn split_indices(n: usize, n_query: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, &[0x5eed_0006]));
    let queries = perm[..n_query].to_vec();
    let mut train = perm[n_query..].to_vec();
    train.sort_unstable();
    (train, queries)
}

/// JSON description of a dataset artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub task: Task,
    pub n: usize,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standardization: Option<Standardization>,
}

impl DatasetManifest {
    pub fn describe(
        dataset: &Dataset,
        kind: impl Into<String>,
        seed: Option<u64>,
        source_path: Option<PathBuf>,
    ) -> Self {
        DatasetManifest {
            kind: kind.into(),
            task: dataset.task,
            n: dataset.len(),
            d: dataset.feature_dim,
            classes: dataset.num_classes,
            seed,
            source_path,
            standardization: dataset.stats.clone(),
        }
    }
}
