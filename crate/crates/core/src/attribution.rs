//! Attribution scores from damped inverse-curvature products.
//!
//! A score `τ(m, q) = uᵀ ∇L(z_m)` pairs a per-query vector `u` (the query
//! measurement gradient pushed through an iHVP solver) with every training
//! gradient. Positive scores mean that removing `z_m` raises the query
//! measurement. Segment-unrolled scores sum such pairings over trajectory
//! segments, each with its own curvature, damping and averaged weights.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ekfac::{fit, Accumulation, EkfacState};
use crate::error::{Error, Result};
use crate::ihvp::{solve, SolverConfig};
use crate::model::{grad, measurement_grad, Example, MlpSpec, ParamVector};
use crate::seed;
use crate::trainer::{segment_trajectory, Segment, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IfSolver {
    /// One damped EKFAC inverse.
    Ekfac,
    /// EKFAC-preconditioned iteration.
    Astra,
    /// Plain Neumann iteration.
    Sni,
    /// Raw query gradient (no curvature).
    Identity,
    /// Dense factorization; tiny networks only.
    Exact,
}

impl IfSolver {
    pub fn tag(self) -> &'static str {
        match self {
            IfSolver::Ekfac => "ekfac",
            IfSolver::Astra => "astra",
            IfSolver::Sni => "sni",
            IfSolver::Identity => "identity",
            IfSolver::Exact => "exact",
        }
    }

    pub fn needs_curvature(self) -> bool {
        matches!(self, IfSolver::Ekfac | IfSolver::Astra)
    }
}

impl std::str::FromStr for IfSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ekfac" => Ok(IfSolver::Ekfac),
            "astra" => Ok(IfSolver::Astra),
            "sni" | "lissa" => Ok(IfSolver::Sni),
            "identity" => Ok(IfSolver::Identity),
            "exact" => Ok(IfSolver::Exact),
            other => Err(Error::invalid(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    Ekfac,
    Astra,
}

/// `|queries| × N` scores, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub method: String,
    pub seeds: Vec<u64>,
    queries: usize,
    train: usize,
    scores: Vec<f64>,
}

impl AttributionMatrix {
    pub fn new(
        method: impl Into<String>,
        seeds: Vec<u64>,
        queries: usize,
        train: usize,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if scores.len() != queries * train {
            return Err(Error::dim(format!(
                "{} scores for a {queries}×{train} grid",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite score for query {} and training example {}",
                i / train.max(1),
                i % train.max(1)
            )));
        }
        Ok(AttributionMatrix {
            method: method.into(),
            seeds,
            queries,
            train,
            scores,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries
    }

    pub fn num_train(&self) -> usize {
        self.train
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.train..(q + 1) * self.train]
    }

    pub fn get(&self, q: usize, m: usize) -> f64 {
        self.scores[q * self.train + m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    /// Tidy CSV: `query_id,train_id,score,method,seed` with ensemble seeds joined by `+`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["query_id", "train_id", "score", "method", "seed"])
            .map_err(csv_err)?;
        let seed = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("+");
        for q in 0..self.queries {
            for (m, s) in self.row(q).iter().enumerate() {
                w.write_record([
                    q.to_string(),
                    m.to_string(),
                    s.to_string(),
                    self.method.clone(),
                    seed.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Elementwise mean over matrices from different seeds.
pub fn ensemble(matrices: &[AttributionMatrix]) -> Result<AttributionMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Empty("no matrices to ensemble".into()))?;
    for m in &matrices[1..] {
        if m.method != first.method {
            return Err(Error::invalid(format!(
                "cannot ensemble {} with {}",
                first.method, m.method
            )));
        }
        if (m.queries, m.train) != (first.queries, first.train) {
            return Err(Error::dim(format!(
                "cannot ensemble a {}×{} grid with a {}×{} grid",
                first.queries, first.train, m.queries, m.train
            )));
        }
    }
    let k = matrices.len() as f64;
    let scores = (0..first.scores.len())
        .map(|i| matrices.iter().map(|m| m.scores[i]).sum::<f64>() / k)
        .collect();
    let seeds = matrices
        .iter()
        .flat_map(|m| m.seeds.iter().copied())
        .collect();
    AttributionMatrix::new(
        first.method.clone(),
        seeds,
        first.queries,
        first.train,
        scores,
    )
}

/// Loss gradient of every training example at `params`.
pub fn train_gradients(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
) -> Result<Vec<ParamVector>> {
    dataset.par_iter().map(|e| grad(spec, params, e)).collect()
}

/// Measurement gradient of every query at `params`.
pub fn query_gradients(
    spec: &MlpSpec,
    params: &ParamVector,
    queries: &[Example],
) -> Result<Vec<ParamVector>> {
    queries
        .par_iter()
        .map(|q| measurement_grad(spec, params, q))
        .collect()
}

/// Solver seed for a query and trajectory segment. Static influence uses segment 0.
pub fn solve_seed(base: u64, query: usize, segment: usize) -> u64 {
    seed::derive(base, &[query as u64, segment as u64])
}

fn tag_divergence(err: Error, context: String) -> Error {
    match err {
        Error::Divergence { iteration, reason } => Error::Divergence {
            iteration,
            reason: format!("{context}: {reason}"),
        },
        other => other,
    }
}

/// Applies the chosen solver to one right-hand side.
pub fn solve_direction(
    solver: IfSolver,
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    v: &ParamVector,
    config: &SolverConfig,
    ekfac: Option<&EkfacState>,
) -> Result<ParamVector> {
    let need = || Error::invalid(format!("{} solver needs a curvature state", solver.tag()));
    match solver {
        IfSolver::Identity => Ok(v.clone()),
        IfSolver::Ekfac => ekfac.ok_or_else(need)?.precondition(config.damping, v),
        IfSolver::Exact => crate::ihvp::exact_ihvp(spec, params, dataset, config.damping, v),
        IfSolver::Sni => Ok(solve(spec, params, dataset, v, config, None, &mut |_| {
            std::ops::ControlFlow::Continue(())
        })?
        .0),
        IfSolver::Astra => {
            let state = ekfac.ok_or_else(need)?;
            Ok(
                solve(spec, params, dataset, v, config, Some(state), &mut |_| {
                    std::ops::ControlFlow::Continue(())
                })?
                .0,
            )
        }
    }
}

fn score_rows(directions: &[ParamVector], grads: &[ParamVector]) -> Vec<f64> {
    directions
        .par_iter()
        .flat_map_iter(|u| grads.iter().map(move |g| u.dot(g)))
        .collect()
}

/// Influence scores for precomputed query gradients, with curvature and
/// training gradients evaluated at `params`.
pub fn if_scores_from_query_gradients(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    query_grads: &[ParamVector],
    solver: IfSolver,
    config: &SolverConfig,
    ekfac: Option<&EkfacState>,
) -> Result<AttributionMatrix> {
    if solver == IfSolver::Exact {
        let exact = crate::ihvp::ExactIhvp::new(spec, params, dataset, config.damping)?;
        let dirs = query_grads
            .iter()
            .map(|v| exact.solve(v))
            .collect::<Result<Vec<_>>>()?;
        let grads = train_gradients(spec, params, dataset)?;
        return AttributionMatrix::new(
            solver.tag(),
            vec![config.seed],
            query_grads.len(),
            dataset.len(),
            score_rows(&dirs, &grads),
        );
    }
    let dirs = query_grads
        .par_iter()
        .enumerate()
        .map(|(q, v)| {
            let cfg = SolverConfig {
                seed: solve_seed(config.seed, q, 0),
                ..config.clone()
            };
            solve_direction(solver, spec, params, dataset, v, &cfg, ekfac)
                .map_err(|e| tag_divergence(e, format!("query {q}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = train_gradients(spec, params, dataset)?;
    AttributionMatrix::new(
        solver.tag(),
        vec![config.seed],
        query_grads.len(),
        dataset.len(),
        score_rows(&dirs, &grads),
    )
}

/// Influence-function scores of every training example on every query, at `params`.
pub fn if_attribute(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    queries: &[Example],
    solver: IfSolver,
    config: &SolverConfig,
    ekfac: Option<&EkfacState>,
) -> Result<AttributionMatrix> {
    let qg = query_gradients(spec, params, queries)?;
    if_scores_from_query_gradients(spec, params, dataset, &qg, solver, config, ekfac)
}

/// Segments with their damping and curvature at the averaged weights.
#[derive(Debug, Clone)]
pub struct SourcePlan {
    pub segments: Vec<Segment>,
    pub states: Vec<EkfacState>,
}

impl SourcePlan {
    pub fn build(
        spec: &MlpSpec,
        trajectory: &Trajectory,
        segments: usize,
        dataset: &[Example],
        seed: u64,
        mode: Accumulation,
    ) -> Result<Self> {
        let segments = segment_trajectory(trajectory, segments)?;
        let states = segments
            .iter()
            .map(|s| {
                fit(
                    spec,
                    &s.mean_params,
                    dataset,
                    seed::derive(seed, &[s.index as u64]),
                    mode,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(segments, states)
    }

    pub fn from_parts(segments: Vec<Segment>, states: Vec<EkfacState>) -> Result<Self> {
        if segments.len() != states.len() || segments.is_empty() {
            return Err(Error::invalid(format!(
                "{} segments with {} curvature states",
                segments.len(),
                states.len()
            )));
        }
        for s in &segments {
            let d = s.damping();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!(
                    "segment {} has damping {d}",
                    s.index
                )));
            }
        }
        Ok(SourcePlan { segments, states })
    }

    /// Per-segment damping `1/(η̄_ℓ K_ℓ)`.
    pub fn dampings(&self) -> Vec<f64> {
        self.segments.iter().map(Segment::damping).collect()
    }

    /// Step-count-weighted mean of the segment dampings.
    pub fn if_damping(&self) -> f64 {
        crate::trainer::implied_damping(&self.segments)
    }
}

/// `(1 − exp(−cσ))/σ`, continuous at σ = 0.
pub fn unrolled_filter(sigma: f64, c: f64) -> f64 {
    let x = c * sigma;
    if x.abs() < 1e-12 {
        c
    } else {
        -(-x).exp_m1() / sigma
    }
}

/// Solver config for segment `ℓ`: damping λ_ℓ, with step size and
/// preconditioner damping keeping the template's ratios to its damping.
pub fn segment_config(template: &SolverConfig, damping: f64) -> SolverConfig {
    let ratio = damping / template.damping;
    SolverConfig {
        lr: template.lr * ratio,
        damping,
        precond_damping: template.precond_damping.map(|p| p * ratio),
        ..template.clone()
    }
}

/// Per-segment r-vectors for one query gradient, last segment first in the
/// recursion but returned in segment order.
pub fn source_directions(
    spec: &MlpSpec,
    plan: &SourcePlan,
    dataset: &[Example],
    query_grad: &ParamVector,
    mode: SourceMode,
    template: &SolverConfig,
    query_index: usize,
) -> Result<Vec<ParamVector>> {
    let l = plan.segments.len();
    let mut out = vec![spec.zeros(); l];
    let mut carry = query_grad.clone();
    for idx in (0..l).rev() {
        let seg = &plan.segments[idx];
        let state = &plan.states[idx];
        let c = seg.mean_lr * seg.steps as f64;
        out[idx] = match mode {
            SourceMode::Ekfac => state.apply_spectral(&carry, |lam| unrolled_filter(lam, c))?,
            SourceMode::Astra => {
                let cfg = SolverConfig {
                    seed: solve_seed(template.seed, query_index, idx),
                    ..segment_config(template, seg.damping())
                };
                solve(
                    spec,
                    &seg.mean_params,
                    dataset,
                    &carry,
                    &cfg,
                    Some(state),
                    &mut |_| std::ops::ControlFlow::Continue(()),
                )
                .map_err(|e| tag_divergence(e, format!("query {query_index}, segment {idx}")))?
                .0
            }
        };
        if idx > 0 {
            carry = state.matrix_exp_apply(c, &carry)?;
        }
    }
    Ok(out)
}

/// Segment-unrolled scores `Σ_ℓ r_ℓᵀ ∇L(θ̄_ℓ, z_m)`, with query gradients
/// taken at `final_params`.
pub fn source_attribute(
    spec: &MlpSpec,
    plan: &SourcePlan,
    dataset: &[Example],
    queries: &[Example],
    final_params: &ParamVector,
    mode: SourceMode,
    template: &SolverConfig,
) -> Result<AttributionMatrix> {
    let qg = query_gradients(spec, final_params, queries)?;
    let dirs = qg
        .par_iter()
        .enumerate()
        .map(|(q, v)| source_directions(spec, plan, dataset, v, mode, template, q))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![0.0; queries.len() * dataset.len()];
    for (idx, seg) in plan.segments.iter().enumerate() {
        let grads = train_gradients(spec, &seg.mean_params, dataset)?;
        let seg_dirs: Vec<ParamVector> = dirs.iter().map(|d| d[idx].clone()).collect();
        for (s, add) in scores.iter_mut().zip(score_rows(&seg_dirs, &grads)) {
            *s += add;
        }
    }
    let method = match mode {
        SourceMode::Ekfac => "ekfac-source",
        SourceMode::Astra => "astra-source",
    };
    AttributionMatrix::new(
        method,
        vec![template.seed],
        queries.len(),
        dataset.len(),
        scores,
    )
}
