//! Linear datamodeling evaluation and the curvature-subspace scan.
//!
//! Ground truth is the measurement after retraining on random subsets,
//! averaged over seeds. A method is scored per query by the Spearman
//! correlation between that ground truth and its additive prediction over
//! the same subsets.

use std::collections::HashSet;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::data::Dataset;
use crate::ekfac::EkfacState;
use crate::error::{Error, Result};
use crate::ihvp::{quadratic_objective, solve, SolverConfig};
use crate::linalg::spearman;
use crate::model::{measurement, Example, MlpSpec, ParamVector};
use crate::seed;
use crate::trainer::{train, TrainConfig};

/// Default eigenvalue thresholds for the curvature scan.
pub const DEFAULT_BIN_THRESHOLDS: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub n: usize,
    pub beta: f64,
    pub seed: u64,
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn from_masks(n: usize, beta: f64, seed: u64, masks: Vec<Vec<bool>>) -> Result<Self> {
        let k = subset_size(n, beta)?;
        for (j, m) in masks.iter().enumerate() {
            if m.len() != n {
                return Err(Error::dim(format!(
                    "mask {j} has length {} for {n} examples",
                    m.len()
                )));
            }
            let c = m.iter().filter(|&&b| b).count();
            if c != k {
                return Err(Error::invalid(format!(
                    "mask {j} includes {c} examples, expected {k}"
                )));
            }
        }
        Ok(MaskSet {
            n,
            beta,
            seed,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn mask(&self, j: usize) -> &[bool] {
        &self.masks[j]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn subset_size(&self) -> usize {
        subset_size(self.n, self.beta).unwrap_or(0)
    }
}

fn subset_size(n: usize, beta: f64) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!(
            "subset fraction {beta} outside (0, 1)"
        )));
    }
    let k = (beta * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "fraction {beta} of {n} examples selects nothing"
        )));
    }
    Ok(k)
}

/// `m` uniform `⌊βn⌋`-subsets, each drawn as a Fisher–Yates prefix from its own derived stream.
pub fn generate_masks(n: usize, beta: f64, m: usize, seed: u64) -> Result<MaskSet> {
    let k = subset_size(n, beta)?;
    if m == 0 {
        return Err(Error::invalid("mask count must be positive"));
    }
    let masks: Vec<Vec<bool>> = (0..m)
        .map(|j| {
            let mut rng = seed::rng(seed, &[j as u64]);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let pick = rng.random_range(i..n);
                idx.swap(i, pick);
            }
            let mut mask = vec![false; n];
            for &i in &idx[..k] {
                mask[i] = true;
            }
            mask
        })
        .collect();
    let distinct: HashSet<&Vec<bool>> = masks.iter().collect();
    if distinct.len() < masks.len() {
        log::warn!("{} duplicate masks among {m}", masks.len() - distinct.len());
    }
    MaskSet::from_masks(n, beta, seed, masks)
}

/// Init and batch-order seeds for one retraining cell.
pub fn cell_seeds(base_seed: u64, mask_index: usize, repeat: usize) -> (u64, u64) {
    let s = seed::derive(base_seed, &[mask_index as u64, repeat as u64]);
    (seed::derive(s, &[0]), seed::derive(s, &[1]))
}

/// Retraining grid: one measurement vector per (mask, repeat) cell, `None`
/// for cells whose training diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    masks: usize,
    repeats: usize,
    queries: usize,
    cells: Vec<Option<Vec<f64>>>,
}

impl GroundTruth {
    pub fn from_cells(
        masks: usize,
        repeats: usize,
        queries: usize,
        cells: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if cells.len() != masks * repeats {
            return Err(Error::dim(format!(
                "{} cells for {masks} masks × {repeats} repeats",
                cells.len()
            )));
        }
        for c in cells.iter().flatten() {
            if c.len() != queries {
                return Err(Error::dim(format!(
                    "cell with {} measurements for {queries} queries",
                    c.len()
                )));
            }
        }
        Ok(GroundTruth {
            masks,
            repeats,
            queries,
            cells,
        })
    }

    pub fn num_masks(&self) -> usize {
        self.masks
    }

    pub fn num_queries(&self) -> usize {
        self.queries
    }

    pub fn repeats(&self) -> usize {
        self.repeats
    }

    pub fn cell(&self, mask: usize, repeat: usize) -> Option<&[f64]> {
        self.cells[mask * self.repeats + repeat].as_deref()
    }

    /// `(mask, repeat)` pairs whose training diverged.
    pub fn excluded_cells(&self) -> Vec<(usize, usize)> {
        (0..self.masks)
            .flat_map(|j| (0..self.repeats).map(move |r| (j, r)))
            .filter(|&(j, r)| self.cell(j, r).is_none())
            .collect()
    }

    fn successful(&self, mask: usize) -> impl Iterator<Item = &[f64]> {
        (0..self.repeats).filter_map(move |r| self.cell(mask, r))
    }

    /// Mean measurement over successful repeats; NaN when every repeat diverged.
    pub fn expected(&self, mask: usize, query: usize) -> f64 {
        let (sum, n) = self
            .successful(mask)
            .fold((0.0, 0usize), |(s, n), c| (s + c[query], n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Sample standard deviation over successful repeats (0 with one repeat).
    pub fn std_dev(&self, mask: usize, query: usize) -> f64 {
        let vals: Vec<f64> = self.successful(mask).map(|c| c[query]).collect();
        if vals.len() < 2 {
            return if vals.is_empty() { f64::NAN } else { 0.0 };
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    }

    /// Expected ground truth of one query across masks.
    pub fn column(&self, query: usize) -> Vec<f64> {
        (0..self.masks).map(|j| self.expected(j, query)).collect()
    }

    /// CSV `mask_id,repeat,query_id,measurement`; diverged cells are written as NaN.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["mask_id", "repeat", "query_id", "measurement"])
            .map_err(csv_err)?;
        for j in 0..self.masks {
            for r in 0..self.repeats {
                for q in 0..self.queries {
                    let v = self.cell(j, r).map_or(f64::NAN, |c| c[q]);
                    w.write_record([j.to_string(), r.to_string(), q.to_string(), v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<(usize, usize, usize, f64)>() {
            rows.push(rec.map_err(csv_err)?);
        }
        let masks = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let repeats = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let queries = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        if rows.len() != masks * repeats * queries {
            return Err(Error::Format {
                what: "ground truth",
                detail: format!("{} rows for a {masks}×{repeats}×{queries} grid", rows.len()),
            });
        }
        let mut cells = vec![Some(vec![0.0; queries]); masks * repeats];
        for (j, r, q, v) in rows {
            let cell = &mut cells[j * repeats + r];
            if v.is_nan() {
                *cell = None;
            } else if let Some(c) = cell {
                c[q] = v;
            }
        }
        Self::from_cells(masks, repeats, queries, cells)
    }
}

/// Retraining settings for the ground-truth grid.
#[derive(Debug, Clone)]
pub struct GroundTruthPlan<'a> {
    pub repeats: usize,
    pub base_seed: u64,
    /// Directory for per-cell results; existing cells are reused.
    pub cache_dir: Option<&'a Path>,
}

fn cell_path(dir: &Path, mask: usize, repeat: usize) -> PathBuf {
    dir.join(format!("cell_{mask:05}_{repeat:03}.txt"))
}

fn read_cell(path: &Path, queries: usize) -> Option<Option<Vec<f64>>> {
    let text = fs::read_to_string(path).ok()?;
    if text.trim() == "diverged" {
        return Some(None);
    }
    let vals: Vec<f64> = text
        .lines()
        .map(|l| l.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    (vals.len() == queries).then_some(Some(vals))
}

fn write_cell(path: &Path, cell: &Option<Vec<f64>>) -> Result<()> {
    let body = match cell {
        None => "diverged\n".to_string(),
        Some(v) => v.iter().map(|x| format!("{x:e}\n")).collect(),
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains one model per (mask, repeat) cell in parallel and records every
/// query measurement at the final parameters.
pub fn compute_ground_truth(
    spec: &MlpSpec,
    dataset: &Dataset,
    train_config: &TrainConfig,
    masks: &MaskSet,
    queries: &[Example],
    plan: &GroundTruthPlan<'_>,
) -> Result<GroundTruth> {
    if plan.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    if masks.n != dataset.len() {
        return Err(Error::dim(format!(
            "masks over {} examples for a dataset of {}",
            masks.n,
            dataset.len()
        )));
    }
    if let Some(dir) = plan.cache_dir {
        fs::create_dir_all(dir)?;
    }
    let cells = (0..masks.len() * plan.repeats)
        .into_par_iter()
        .map(|c| {
            let (j, r) = (c / plan.repeats, c % plan.repeats);
            let path = plan.cache_dir.map(|d| cell_path(d, j, r));
            if let Some(cached) = path.as_deref().and_then(|p| read_cell(p, queries.len())) {
                return Ok(cached);
            }
            let (init_seed, batch_seed) = cell_seeds(plan.base_seed, j, r);
            let cfg = TrainConfig {
                init_seed,
                batch_seed,
                ..train_config.clone()
            };
            let cell = match train(spec, dataset, &cfg, Some(masks.mask(j))) {
                Ok(traj) => {
                    let theta = traj.final_params();
                    let vals = queries.iter().map(|q| measurement(spec, theta, q)).collect::<Result<Vec<_>>>()?;
                    if vals.iter().all(|v| v.is_finite()) {
                        Some(vals)
                    } else {
                        log::warn!("mask {j} repeat {r}: non-finite measurement, cell excluded");
                        None
                    }
                }
                Err(Error::TrainingDivergence { step, loss }) => {
                    log::warn!("mask {j} repeat {r}: training diverged at step {step} (loss {loss}), cell excluded");
                    None
                }
                Err(e) => return Err(e),
            };
            if let Some(p) = &path {
                write_cell(p, &cell)?;
            }
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;
    GroundTruth::from_cells(masks.len(), plan.repeats, queries.len(), cells)
}

/// Additive prediction `Σ_{m ∈ S} τ(m)`.
pub fn group_influence(scores: &[f64], mask: &[bool]) -> Result<f64> {
    if scores.len() != mask.len() {
        return Err(Error::dim(format!(
            "{} scores for a mask of length {}",
            scores.len(),
            mask.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(mask)
        .filter(|(_, &b)| b)
        .map(|(s, _)| s)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub ensemble_size: usize,
    /// `None` for queries excluded because a correlation was undefined.
    pub per_query: Vec<Option<f64>>,
    pub mean: f64,
    pub stderr: f64,
    pub excluded: usize,
}

impl LdsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Rank correlation of one query's ground truth with its predictions over
/// the masks. Scores are removal effects, so the expected measurement after
/// training on `S` falls as `Γ(S)` grows; predictions enter negated.
/// Masks whose cells all diverged are skipped.
pub fn query_lds(scores: &[f64], masks: &MaskSet, truth: &[f64]) -> Result<f64> {
    if truth.len() != masks.len() {
        return Err(Error::dim(format!(
            "{} ground-truth values for {} masks",
            truth.len(),
            masks.len()
        )));
    }
    let mut gt = Vec::with_capacity(truth.len());
    let mut pred = Vec::with_capacity(truth.len());
    for (j, &t) in truth.iter().enumerate() {
        if t.is_finite() {
            gt.push(t);
            pred.push(-group_influence(scores, masks.mask(j))?);
        }
    }
    if gt.len() < 2 {
        return Err(Error::UndefinedCorrelation);
    }
    spearman(&gt, &pred)
}

/// Per-query LDS with mean and standard error over the queries that have one.
pub fn lds(scores: &AttributionMatrix, masks: &MaskSet, truth: &GroundTruth) -> Result<LdsReport> {
    if scores.num_queries() != truth.num_queries() {
        return Err(Error::dim(format!(
            "{} scored queries against {} ground-truth queries",
            scores.num_queries(),
            truth.num_queries()
        )));
    }
    if scores.num_train() != masks.n || truth.num_masks() != masks.len() {
        return Err(Error::dim(
            "scores, masks and ground truth disagree on sizes",
        ));
    }
    let mut per_query = Vec::with_capacity(scores.num_queries());
    for q in 0..scores.num_queries() {
        match query_lds(scores.row(q), masks, &truth.column(q)) {
            Ok(rho) => per_query.push(Some(rho)),
            Err(Error::UndefinedCorrelation) => {
                log::warn!("query {q}: constant ground truth or predictions, excluded");
                per_query.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let vals: Vec<f64> = per_query.iter().flatten().copied().collect();
    let excluded = per_query.len() - vals.len();
    let (mean, stderr) = mean_and_stderr(&vals);
    Ok(LdsReport {
        method: scores.method.clone(),
        seeds: scores.seeds.clone(),
        ensemble_size: scores.seeds.len().max(1),
        per_query,
        mean,
        stderr,
        excluded,
    })
}

/// Mean and standard error of the mean (NaN mean for no values, 0 error for one).
pub fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Distribution of the mean LDS under i.i.d. Gaussian scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullLds {
    pub mean: f64,
    pub std_dev: f64,
}

impl NullLds {
    /// `mean + 3σ`: a mean LDS above this is unlikely under random scores.
    pub fn upper_bound(&self) -> f64 {
        self.mean + 3.0 * self.std_dev
    }
}

pub fn null_lds(masks: &MaskSet, truth: &GroundTruth, trials: usize, seed: u64) -> Result<NullLds> {
    if trials < 2 {
        return Err(Error::invalid("null simulation needs at least two trials"));
    }
    let q = truth.num_queries();
    let means = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed, &[t as u64]);
            let scores: Vec<f64> = (0..q * masks.n)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let m = AttributionMatrix::new("null", vec![t as u64], q, masks.n, scores)?;
            Ok(lds(&m, masks, truth)?.mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_stderr(&means);
    Ok(NullLds {
        mean,
        std_dev: se * (trials as f64).sqrt(),
    })
}

/// Eigenvalue bin of the curvature scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bin {
    /// No projection.
    Full,
    /// Directions with `Λ > threshold`.
    Above(f64),
}

impl Bin {
    /// CSV value; 0 stands for the full space.
    pub fn threshold(self) -> f64 {
        match self {
            Bin::Full => 0.0,
            Bin::Above(t) => t,
        }
    }

    fn project(self, ekfac: &EkfacState, v: &ParamVector) -> Result<ParamVector> {
        match self {
            Bin::Full => Ok(v.clone()),
            Bin::Above(t) => ekfac.project_to_bin(t, v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureRow {
    pub iteration: usize,
    pub bin: Bin,
    pub objective: f64,
    pub lds: Option<f64>,
    pub solver: &'static str,
}

/// Retraining data for LDS curves of one query.
#[derive(Debug, Clone, Copy)]
pub struct ScanLds<'a> {
    pub masks: &'a MaskSet,
    /// Expected ground truth of the query across masks.
    pub truth: &'a [f64],
    /// Training loss gradients at the scan parameters.
    pub train_grads: &'a [ParamVector],
}

/// Curvature-scan settings. Snapshots are taken every `stride` iterations.
#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub damping: f64,
    pub sni: SolverConfig,
    pub astra: SolverConfig,
    pub thresholds: Vec<f64>,
    pub stride: usize,
}

fn scan_rows(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    ekfac: &EkfacState,
    v: &ParamVector,
    damping: f64,
    bins: &[Bin],
    iterate: &ParamVector,
    iteration: usize,
    solver: &'static str,
    lds_data: Option<&ScanLds<'_>>,
) -> Result<Vec<CurvatureRow>> {
    bins.par_iter()
        .map(|&bin| {
            let p = bin.project(ekfac, iterate)?;
            let objective = quadratic_objective(spec, params, dataset, damping, v, &p)?;
            let lds = match lds_data {
                None => None,
                Some(d) => {
                    let scores: Vec<f64> = d.train_grads.iter().map(|g| p.dot(g)).collect();
                    match query_lds(&scores, d.masks, d.truth) {
                        Ok(r) => Some(r),
                        Err(Error::UndefinedCorrelation) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(CurvatureRow {
                iteration,
                bin,
                objective,
                lds,
                solver,
            })
        })
        .collect()
}

/// Runs both solvers on `v` and evaluates, at every snapshot, the
/// projected objective and projected-score LDS in each eigenvalue bin.
pub fn curvature_scan(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    ekfac: &EkfacState,
    v: &ParamVector,
    config: &ScanConfig,
    lds_data: Option<&ScanLds<'_>>,
) -> Result<Vec<CurvatureRow>> {
    if config.thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid("bin thresholds must be strictly descending"));
    }
    if config.stride == 0 {
        return Err(Error::invalid("snapshot stride must be positive"));
    }
    let mut bins: Vec<Bin> = config.thresholds.iter().map(|&t| Bin::Above(t)).collect();
    bins.push(Bin::Full);
    let mut rows = Vec::new();
    for (name, cfg, precond) in [
        ("sni", &config.sni, None),
        ("astra", &config.astra, Some(ekfac)),
    ] {
        let cfg = SolverConfig {
            damping: config.damping,
            ..cfg.clone()
        };
        let mut failure = None;
        let mut observer = |obs: crate::ihvp::Observation<'_>| {
            if !obs.iteration.is_multiple_of(config.stride) && obs.iteration != cfg.iterations {
                return ControlFlow::Continue(());
            }
            match scan_rows(
                spec,
                params,
                dataset,
                ekfac,
                v,
                config.damping,
                &bins,
                obs.iterate,
                obs.iteration,
                name,
                lds_data,
            ) {
                Ok(r) => {
                    rows.extend(r);
                    ControlFlow::Continue(())
                }
                Err(e) => {
                    failure = Some(e);
                    ControlFlow::Break(())
                }
            }
        };
        solve(spec, params, dataset, v, &cfg, precond, &mut observer)?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(rows)
}

pub fn write_curvature_csv(rows: &[CurvatureRow], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iteration", "bin_threshold", "objective", "lds", "solver"])
        .map_err(csv_err)?;
    for r in rows {
        let lds = r.lds.map_or(String::new(), |v| v.to_string());
        w.write_record([
            r.iteration.to_string(),
            r.bin.threshold().to_string(),
            r.objective.to_string(),
            lds,
            r.solver.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Objective curve of one solver and bin, ordered by iteration.
pub fn bin_curve(rows: &[CurvatureRow], solver: &str, bin: Bin) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.solver == solver && r.bin == bin)
        .map(|r| (r.iteration, r.objective))
        .collect();
    c.sort_by_key(|p| p.0);
    c
}

/// First iteration `k` with `|h(k + window) − h(k)| < tol`, if any.
pub fn plateau_iteration(curve: &[(usize, f64)], window: usize, tol: f64) -> Option<usize> {
    curve.iter().find_map(|&(k, h)| {
        curve
            .iter()
            .find(|p| p.0 == k + window)
            .filter(|p| (p.1 - h).abs() < tol)
            .map(|_| k)
    })
}
