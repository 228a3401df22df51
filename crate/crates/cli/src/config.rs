//! Sectioned `key = value` experiment configuration.
//!
//! Unknown sections and keys are rejected so typos surface as errors. The
//! canonical rendering ([`ExperimentConfig::to_ini`]) lists every resolved
//! value and is what the run-directory hash is taken over.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use astra_tda::ihvp::{InitMode, LrDecay, SolverConfig};
use astra_tda::model::Task;
use astra_tda::trainer::{LrSchedule, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

const SECTIONS: [&str; 8] = [
    "experiment",
    "data",
    "model",
    "train",
    "solver",
    "source",
    "eval",
    "neumann",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Key/value pairs of one section, consumed as they are read.
struct Section {
    name: &'static str,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                CliError::config(
                    self.key(key),
                    format!("line {}: cannot parse {:?}: {err}", e.line, e.value),
                )
            }),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| CliError::config(self.key(key), "required key is missing"))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(e) = self.entries.remove(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|err| {
                    CliError::config(
                        self.key(key),
                        format!("line {}: cannot parse {:?}: {err}", e.line, s.trim()),
                    )
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(CliError::config(
                format!("{}.{k}", self.name),
                format!("line {}: unknown key", e.line),
            )),
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<&'static str, Section>> {
    let mut sections: BTreeMap<&'static str, Section> = SECTIONS
        .iter()
        .map(|&name| {
            (
                name,
                Section {
                    name,
                    entries: BTreeMap::new(),
                },
            )
        })
        .collect();
    let mut current: Option<&'static str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| {
                    CliError::config(
                        format!("line {line_no}"),
                        format!("malformed section header {line:?}"),
                    )
                })?
                .trim();
            let known = SECTIONS.iter().find(|&&s| s == name).ok_or_else(|| {
                CliError::config(name, format!("line {line_no}: unknown section"))
            })?;
            current = Some(known);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::config(
                format!("line {line_no}"),
                format!("expected `key = value`, got {line:?}"),
            )
        })?;
        let (key, value) = (key.trim(), value.trim());
        let section = current.ok_or_else(|| {
            CliError::config(key, format!("line {line_no}: key outside any section"))
        })?;
        if key.is_empty() {
            return Err(CliError::config(format!("line {line_no}"), "empty key"));
        }
        let entries = &mut sections.get_mut(section).expect("known section").entries;
        let entry = Entry {
            value: value.to_string(),
            line: line_no,
        };
        if let Some(prev) = entries.insert(key.to_string(), entry) {
            return Err(CliError::config(
                format!("{section}.{key}"),
                format!(
                    "line {line_no}: duplicate key (first set on line {})",
                    prev.line
                ),
            ));
        }
    }
    Ok(sections)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Regression {
        n: usize,
        d: usize,
        noise: f64,
    },
    Classification {
        n: usize,
        d: usize,
        classes: usize,
        margin: f64,
    },
    Csv {
        path: PathBuf,
        target: String,
        task: Task,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Held-out query count.
    pub queries: usize,
    /// Fraction of training labels replaced at random (classification only).
    pub corrupt: f64,
}

impl DataConfig {
    pub fn task(&self) -> Task {
        match &self.source {
            DataSource::Regression { .. } => Task::Regression,
            DataSource::Classification { .. } => Task::Classification,
            DataSource::Csv { task, .. } => *task,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay: Option<(f64, usize)>,
    pub checkpoint_stride: Option<usize>,
}

impl TrainSection {
    pub fn train_config(&self, init_seed: u64, batch_seed: u64) -> TrainConfig {
        let schedule = match self.decay {
            None => LrSchedule::Constant { lr: self.lr },
            Some((factor, every_epochs)) => LrSchedule::StepDecay {
                lr: self.lr,
                factor,
                every_epochs,
            },
        };
        TrainConfig {
            schedule,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            init_seed,
            batch_seed,
            checkpoint_stride: self.checkpoint_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSection {
    /// Explicit damping; absent means the trajectory-implied value.
    pub damping: Option<f64>,
    /// Preconditioned step size as a multiple of the damping.
    pub lr_ratio: f64,
    pub iterations: usize,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub repeats: usize,
    /// Step size of the unpreconditioned solver.
    pub sni_lr: Option<f64>,
}

impl SolverSection {
    /// Preconditioned solver settings at damping `damping`.
    pub fn astra(&self, damping: f64, seed: u64) -> SolverConfig {
        SolverConfig {
            lr: self.lr_ratio * damping,
            damping,
            precond_damping: None,
            batch_size: self.batch_size,
            iterations: self.iterations,
            momentum: self.momentum,
            lr_decay: Some(LrDecay {
                factor: self.decay_factor,
                every: self.decay_every,
            }),
            repeats: self.repeats,
            seed,
            init: InitMode::PreconditionedQueryGradient,
            full_objective_every: None,
            snapshot_every: None,
        }
    }

    /// Plain Neumann settings; `lr` overrides `sni_lr`.
    pub fn sni(&self, damping: f64, seed: u64, lr: Option<f64>) -> Result<SolverConfig> {
        let lr = lr
            .or(self.sni_lr)
            .ok_or_else(|| CliError::config("solver.sni_lr", "required for the sni solver"))?;
        Ok(SolverConfig {
            lr,
            damping,
            precond_damping: None,
            batch_size: self.batch_size,
            iterations: self.iterations,
            momentum: 0.0,
            lr_decay: None,
            repeats: self.repeats,
            seed,
            init: InitMode::QueryGradient,
            full_objective_every: None,
            snapshot_every: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub masks: usize,
    pub beta: f64,
    pub repeats: usize,
    pub null_trials: usize,
    /// Strictly descending eigenvalue thresholds.
    pub bins: Vec<f64>,
    pub scan_damping: f64,
    pub scan_iterations: usize,
    pub scan_stride: usize,
    pub scan_queries: usize,
    pub scan_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeumannSection {
    pub alpha: f64,
    pub damping: f64,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub segments: usize,
    pub eval: EvalSection,
    pub neumann: NeumannSection,
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn check(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(key, message()))
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file; relative CSV paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut take = |name: &str| sections.remove(name).expect("known section");

        let mut s = take("experiment");
        let seed = s.or("seed", 0u64)?;
        s.finish()?;

        let mut s = take("data");
        let kind: String = s.req("kind")?;
        let source = match kind.as_str() {
            "regression" => DataSource::Regression {
                n: s.req("n")?,
                d: s.req("d")?,
                noise: s.or("noise", 0.1)?,
            },
            "classification" => DataSource::Classification {
                n: s.req("n")?,
                d: s.req("d")?,
                classes: s.or("classes", 3)?,
                margin: s.or("margin", 2.0)?,
            },
            "csv" => {
                let raw: PathBuf = s.req("path")?;
                let joined = if raw.is_absolute() {
                    raw
                } else {
                    base_dir.join(raw)
                };
                let path = std::path::absolute(&joined).map_err(|e| CliError::io(&joined, e))?;
                DataSource::Csv {
                    path,
                    target: s.or("target", "target".to_string())?,
                    task: s.req("task")?,
                }
            }
            other => {
                return Err(CliError::config(
                    "data.kind",
                    format!("unknown kind {other:?} (expected regression, classification or csv)"),
                ))
            }
        };
        let data = DataConfig {
            source,
            queries: s.req("queries")?,
            corrupt: s.or("corrupt", 0.0)?,
        };
        s.finish()?;

        let mut s = take("model");
        let hidden = s
            .list("hidden")?
            .ok_or_else(|| CliError::config("model.hidden", "required key is missing"))?;
        s.finish()?;

        let mut s = take("train");
        let decay_factor: Option<f64> = s.get("decay_factor")?;
        let decay_every: Option<usize> = s.get("decay_every")?;
        let decay = match (decay_factor, decay_every) {
            (None, None) => None,
            (Some(f), Some(e)) => Some((f, e)),
            (Some(_), None) => {
                return Err(CliError::config(
                    "train.decay_every",
                    "required when train.decay_factor is set",
                ))
            }
            (None, Some(_)) => {
                return Err(CliError::config(
                    "train.decay_factor",
                    "required when train.decay_every is set",
                ))
            }
        };
        let train = TrainSection {
            lr: s.req("lr")?,
            momentum: s.or("momentum", 0.9)?,
            weight_decay: s.or("weight_decay", 0.0)?,
            batch_size: s.or("batch_size", 32)?,
            epochs: s.req("epochs")?,
            decay,
            checkpoint_stride: s.get("checkpoint_stride")?,
        };
        s.finish()?;

        let mut s = take("solver");
        let batch: String = s.or("batch_size", "256".to_string())?;
        let batch_size = if batch == "full" {
            None
        } else {
            Some(batch.parse().map_err(|_| {
                CliError::config(
                    "solver.batch_size",
                    format!("expected an integer or `full`, got {batch:?}"),
                )
            })?)
        };
        let solver = SolverSection {
            damping: s.get("damping")?,
            lr_ratio: s.or("lr_ratio", 0.1)?,
            iterations: s.or("iterations", 200)?,
            batch_size,
            momentum: s.or("momentum", 0.9)?,
            decay_factor: s.or("decay_factor", 0.5)?,
            decay_every: s.or("decay_every", 50)?,
            repeats: s.or("repeats", 1)?,
            sni_lr: s.get("sni_lr")?,
        };
        s.finish()?;

        let mut s = take("source");
        let segments = s.or("segments", 3)?;
        s.finish()?;

        let mut s = take("eval");
        let eval = EvalSection {
            masks: s.or("masks", 50)?,
            beta: s.or("beta", 0.5)?,
            repeats: s.or("repeats", 5)?,
            null_trials: s.or("null_trials", 100)?,
            bins: s
                .list("bins")?
                .unwrap_or_else(|| astra_tda::evaluation::DEFAULT_BIN_THRESHOLDS.to_vec()),
            scan_damping: s.or("scan_damping", 1e-4)?,
            scan_iterations: s.or("scan_iterations", 1000)?,
            scan_stride: s.or("scan_stride", 10)?,
            scan_queries: s.or("scan_queries", 4)?,
            scan_lr: s.or("scan_lr", 0.1)?,
        };
        s.finish()?;

        let mut s = take("neumann");
        let neumann = NeumannSection {
            alpha: s.or("alpha", 0.1)?,
            damping: s.or("damping", 1e-3)?,
            iterations: s
                .list("iterations")?
                .unwrap_or_else(|| vec![1, 10, 100, 1000]),
        };
        s.finish()?;

        let config = ExperimentConfig {
            seed,
            data,
            hidden,
            train,
            solver,
            segments,
            eval,
            neumann,
        };
        config.validate()?;
        Ok(config)
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            check(v > 0.0 && v.is_finite(), key, || {
                format!("must be positive and finite, got {v}")
            })
        };
        let n = match &self.data.source {
            DataSource::Regression { n, d, noise } => {
                check(*d >= 1, "data.d", || "must be at least 1".into())?;
                check(*noise >= 0.0 && noise.is_finite(), "data.noise", || {
                    format!("must be non-negative, got {noise}")
                })?;
                Some(*n)
            }
            DataSource::Classification {
                n,
                d,
                classes,
                margin,
            } => {
                check(*d >= 1, "data.d", || "must be at least 1".into())?;
                check(*classes >= 2, "data.classes", || {
                    format!("classification needs at least 2 classes, got {classes}")
                })?;
                positive("data.margin", *margin)?;
                Some(*n)
            }
            DataSource::Csv { .. } => None,
        };
        check(self.data.queries >= 1, "data.queries", || {
            "must be at least 1".into()
        })?;
        if let Some(n) = n {
            check(self.data.queries + 2 <= n, "data.queries", || {
                format!(
                    "{} queries leave fewer than 2 training examples out of {n}",
                    self.data.queries
                )
            })?;
        }
        check(
            (0.0..1.0).contains(&self.data.corrupt),
            "data.corrupt",
            || format!("must lie in [0, 1), got {}", self.data.corrupt),
        )?;
        check(
            self.data.corrupt == 0.0 || self.data.task() == Task::Classification,
            "data.corrupt",
            || "label corruption needs a classification task".into(),
        )?;

        check(!self.hidden.is_empty(), "model.hidden", || {
            "at least one hidden layer is required".into()
        })?;
        check(self.hidden.iter().all(|&w| w > 0), "model.hidden", || {
            format!("widths must be positive, got {}", join(&self.hidden))
        })?;

        positive("train.lr", self.train.lr)?;
        check(self.train.epochs >= 1, "train.epochs", || {
            "must be at least 1".into()
        })?;
        self.train
            .train_config(0, 0)
            .validate()
            .map_err(|e| CliError::config("train", e.to_string()))?;

        if let Some(d) = self.solver.damping {
            positive("solver.damping", d)?;
        }
        positive("solver.lr_ratio", self.solver.lr_ratio)?;
        check(self.solver.iterations >= 1, "solver.iterations", || {
            "must be at least 1".into()
        })?;
        if let Some(lr) = self.solver.sni_lr {
            positive("solver.sni_lr", lr)?;
        }
        self.solver
            .astra(1.0, 0)
            .validate()
            .map_err(|e| CliError::config("solver", e.to_string()))?;

        check(self.segments >= 1, "source.segments", || {
            "must be at least 1".into()
        })?;
        if self.train.checkpoint_stride.is_none() {
            check(
                self.segments <= self.train.epochs,
                "source.segments",
                || {
                    format!(
                        "{} segments but only {} per-epoch checkpoints",
                        self.segments, self.train.epochs
                    )
                },
            )?;
        }

        let e = &self.eval;
        check(e.masks >= 2, "eval.masks", || {
            "at least 2 masks are needed for a rank correlation".into()
        })?;
        check(e.beta > 0.0 && e.beta < 1.0, "eval.beta", || {
            format!("must lie in (0, 1), got {}", e.beta)
        })?;
        check(e.repeats >= 1, "eval.repeats", || {
            "must be at least 1".into()
        })?;
        check(e.null_trials >= 2, "eval.null_trials", || {
            "must be at least 2".into()
        })?;
        check(
            e.bins.iter().all(|&t| t > 0.0) && e.bins.windows(2).all(|w| w[0] > w[1]),
            "eval.bins",
            || {
                format!(
                    "thresholds must be positive and strictly descending, got {}",
                    join(&e.bins)
                )
            },
        )?;
        positive("eval.scan_damping", e.scan_damping)?;
        positive("eval.scan_lr", e.scan_lr)?;
        check(e.scan_iterations >= 1, "eval.scan_iterations", || {
            "must be at least 1".into()
        })?;
        check(e.scan_stride >= 1, "eval.scan_stride", || {
            "must be at least 1".into()
        })?;
        check(
            e.scan_queries >= 1 && e.scan_queries <= self.data.queries,
            "eval.scan_queries",
            || format!("must lie in 1..={} (data.queries)", self.data.queries),
        )?;

        positive("neumann.alpha", self.neumann.alpha)?;
        positive("neumann.damping", self.neumann.damping)?;
        check(
            !self.neumann.iterations.is_empty() && self.neumann.iterations.iter().all(|&j| j >= 1),
            "neumann.iterations",
            || "needs at least one positive iteration count".into(),
        )?;
        Ok(())
    }

    /// Every resolved value in a fixed order.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut w = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        w("[experiment]".into());
        w(format!("seed = {}", self.seed));
        w(String::new());
        w("[data]".into());
        match &self.data.source {
            DataSource::Regression { n, d, noise } => {
                w("kind = regression".into());
                w(format!("n = {n}"));
                w(format!("d = {d}"));
                w(format!("noise = {noise}"));
            }
            DataSource::Classification {
                n,
                d,
                classes,
                margin,
            } => {
                w("kind = classification".into());
                w(format!("n = {n}"));
                w(format!("d = {d}"));
                w(format!("classes = {classes}"));
                w(format!("margin = {margin}"));
            }
            DataSource::Csv { path, target, task } => {
                w("kind = csv".into());
                w(format!("path = {}", path.display()));
                w(format!("target = {target}"));
                w(format!("task = {task}"));
            }
        }
        w(format!("queries = {}", self.data.queries));
        w(format!("corrupt = {}", self.data.corrupt));
        w(String::new());
        w("[model]".into());
        w(format!("hidden = {}", join(&self.hidden)));
        w(String::new());
        let t = &self.train;
        w("[train]".into());
        w(format!("lr = {}", t.lr));
        w(format!("momentum = {}", t.momentum));
        w(format!("weight_decay = {}", t.weight_decay));
        w(format!("batch_size = {}", t.batch_size));
        w(format!("epochs = {}", t.epochs));
        if let Some((f, e)) = t.decay {
            w(format!("decay_factor = {f}"));
            w(format!("decay_every = {e}"));
        }
        if let Some(c) = t.checkpoint_stride {
            w(format!("checkpoint_stride = {c}"));
        }
        w(String::new());
        let s = &self.solver;
        w("[solver]".into());
        if let Some(d) = s.damping {
            w(format!("damping = {d}"));
        }
        w(format!("lr_ratio = {}", s.lr_ratio));
        w(format!("iterations = {}", s.iterations));
        w(format!(
            "batch_size = {}",
            s.batch_size.map_or("full".to_string(), |b| b.to_string())
        ));
        w(format!("momentum = {}", s.momentum));
        w(format!("decay_factor = {}", s.decay_factor));
        w(format!("decay_every = {}", s.decay_every));
        w(format!("repeats = {}", s.repeats));
        if let Some(lr) = s.sni_lr {
            w(format!("sni_lr = {lr}"));
        }
        w(String::new());
        w("[source]".into());
        w(format!("segments = {}", self.segments));
        w(String::new());
        let e = &self.eval;
        w("[eval]".into());
        w(format!("masks = {}", e.masks));
        w(format!("beta = {}", e.beta));
        w(format!("repeats = {}", e.repeats));
        w(format!("null_trials = {}", e.null_trials));
        w(format!("bins = {}", join(&e.bins)));
        w(format!("scan_damping = {}", e.scan_damping));
        w(format!("scan_iterations = {}", e.scan_iterations));
        w(format!("scan_stride = {}", e.scan_stride));
        w(format!("scan_queries = {}", e.scan_queries));
        w(format!("scan_lr = {}", e.scan_lr));
        w(String::new());
        w("[neumann]".into());
        w(format!("alpha = {}", self.neumann.alpha));
        w(format!("damping = {}", self.neumann.damping));
        w(format!("iterations = {}", join(&self.neumann.iterations)));
        out
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_ini().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(output_dim);
        dims
    }
}
