//! Damped inverse-curvature-vector products.
//!
//! All solvers target `(G + λI)⁻¹ v` where `G` is the Gauss-Newton matrix of
//! the mean training loss. The iterative solvers run gradient descent on the
//! quadratic `h(θ) = ½ θᵀ(G + λI)θ − θᵀv`, optionally preconditioned by a
//! damped EKFAC inverse, with `G` replaced by a mini-batch estimate.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ekfac::EkfacState;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::model::{dense_ggn, ggn_vec, Example, MlpSpec, ParamVector};
use crate::seed;

/// Largest parameter count for which dense curvature assembly is allowed.
pub const MAX_DENSE_PARAMS: usize = 2000;

/// Learning-rate grid for sweeps.
pub const LR_SWEEP_GRID: [f64; 6] = [1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// Divergence is declared once the objective exceeds this multiple of its scale.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    QueryGradient,
    PreconditionedQueryGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Step size α.
    pub lr: f64,
    /// Damping λ of the target system.
    pub damping: f64,
    /// Preconditioner damping λ̃; defaults to λ.
    pub precond_damping: Option<f64>,
    /// Mini-batch size; `None` (or ≥ N) uses the full dataset every step.
    pub batch_size: Option<usize>,
    /// Iteration count J.
    pub iterations: usize,
    pub momentum: f64,
    pub lr_decay: Option<LrDecay>,
    /// Independent runs R whose results are averaged.
    pub repeats: usize,
    pub seed: u64,
    pub init: InitMode,
    /// Also record the full-batch objective every n iterations.
    pub full_objective_every: Option<usize>,
    /// Store iterate snapshots every n iterations.
    pub snapshot_every: Option<usize>,
}

impl SolverConfig {
    /// Preconditioned recipe: λ̃ = λ, α = 0.1λ, momentum 0.9, step size halved
    /// every 50 iterations, 200 iterations, batches of 256.
    pub fn astra_default(damping: f64) -> Self {
        SolverConfig {
            lr: 0.1 * damping,
            damping,
            precond_damping: None,
            batch_size: Some(256),
            iterations: 200,
            momentum: 0.9,
            lr_decay: Some(LrDecay {
                factor: 0.5,
                every: 50,
            }),
            repeats: 1,
            seed: 0,
            init: InitMode::PreconditionedQueryGradient,
            full_objective_every: None,
            snapshot_every: None,
        }
    }

    /// Plain Neumann iteration started at the query gradient.
    pub fn sni_default(damping: f64, lr: f64) -> Self {
        SolverConfig {
            lr,
            damping,
            precond_damping: None,
            batch_size: Some(256),
            iterations: 200,
            momentum: 0.0,
            lr_decay: None,
            repeats: 1,
            seed: 0,
            init: InitMode::QueryGradient,
            full_objective_every: None,
            snapshot_every: None,
        }
    }

    pub fn precond_damping(&self) -> f64 {
        self.precond_damping.unwrap_or(self.damping)
    }

    pub fn lr_at(&self, k: usize) -> f64 {
        match self.lr_decay {
            Some(d) if d.every > 0 => self.lr * d.factor.powi((k / d.every) as i32),
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("solver lr", self.lr)?;
        positive("damping", self.damping)?;
        positive("preconditioner damping", self.precond_damping())?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "solver momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("solver batch size must be at least 1"));
        }
        if let Some(d) = self.lr_decay {
            positive("lr decay factor", d.factor)?;
            if d.every == 0 {
                return Err(Error::invalid("lr decay interval must be at least 1"));
            }
        }
        if self.full_objective_every == Some(0) || self.snapshot_every == Some(0) {
            return Err(Error::invalid("trace intervals must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// `h(θ_k)` on the batch drawn at iteration k.
    pub objective: f64,
    /// Full-batch `h(θ_k)` when requested.
    pub full_objective: Option<f64>,
    pub lr: f64,
    pub wall_time_ms: f64,
}

/// Objective curve and snapshots of the first repeat.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveTrace {
    pub points: Vec<TracePoint>,
    pub snapshots: Vec<(usize, ParamVector)>,
}

/// What the observer sees at each iteration `k = 0..=J` of the first repeat.
pub struct Observation<'a> {
    pub iteration: usize,
    pub objective: f64,
    pub iterate: &'a ParamVector,
}

fn check_dense(spec: &MlpSpec) -> Result<()> {
    if spec.num_params() > MAX_DENSE_PARAMS {
        return Err(Error::invalid(format!(
            "dense curvature needs at most {MAX_DENSE_PARAMS} parameters, network has {}",
            spec.num_params()
        )));
    }
    Ok(())
}

/// Factorized `G + λI` for repeated exact solves.
pub struct ExactIhvp {
    spec: MlpSpec,
    damped: DenseMatrix,
    factor: Cholesky,
}

impl ExactIhvp {
    pub fn new(
        spec: &MlpSpec,
        params: &ParamVector,
        dataset: &[Example],
        damping: f64,
    ) -> Result<Self> {
        check_dense(spec)?;
        if !(damping > 0.0) {
            return Err(Error::invalid(format!(
                "damping must be positive, got {damping}"
            )));
        }
        let mut damped = dense_ggn(spec, params, dataset)?.symmetrized();
        damped.add_diagonal(damping);
        let factor = Cholesky::factor(&damped)?;
        Ok(ExactIhvp {
            spec: spec.clone(),
            damped,
            factor,
        })
    }

    /// Dense `G + λI`.
    pub fn matrix(&self) -> &DenseMatrix {
        &self.damped
    }

    pub fn solve(&self, v: &ParamVector) -> Result<ParamVector> {
        let x = self.factor.solve(v.as_slice())?;
        let r = self.damped.matvec(&x)?;
        let resid = crate::linalg::relative_error(&r, v.as_slice());
        if !(resid < 1e-10) && v.norm() > 0.0 {
            return Err(Error::numeric(format!(
                "exact solve residual {resid:e} exceeds 1e-10"
            )));
        }
        self.spec.params_from_vec(x)
    }
}

/// Dense-oracle `(G + λI)⁻¹ v` over the full dataset.
pub fn exact_ihvp(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    damping: f64,
    v: &ParamVector,
) -> Result<ParamVector> {
    ExactIhvp::new(spec, params, dataset, damping)?.solve(v)
}

/// `½θᵀ(G + λI)θ − θᵀv` with the full-dataset `G`.
pub fn quadratic_objective(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    damping: f64,
    v: &ParamVector,
    theta: &ParamVector,
) -> Result<f64> {
    let mut ht = ggn_vec(spec, params, dataset, theta)?;
    ht.axpy(damping, theta);
    Ok(0.5 * theta.dot(&ht) - theta.dot(v))
}

/// `α Σ_{j<J} (I − α(G + λI))ʲ v` by Horner iteration, `G` given as a map.
pub fn truncated_neumann_apply(
    g_apply: impl Fn(&[f64]) -> Vec<f64>,
    alpha: f64,
    damping: f64,
    j: usize,
    v: &[f64],
) -> Vec<f64> {
    let mut x = vec![0.0; v.len()];
    for _ in 0..j {
        let gx = g_apply(&x);
        x = v
            .iter()
            .zip(&x)
            .zip(&gx)
            .map(|((&vi, &xi), &gi)| vi + xi - alpha * (gi + damping * xi))
            .collect();
    }
    x.iter_mut().for_each(|xi| *xi *= alpha);
    x
}

/// `λ + 1/(αJ)`: the damping a truncated series effectively applies.
pub fn effective_damping(alpha: f64, damping: f64, j: f64) -> f64 {
    damping + 1.0 / (alpha * j)
}

/// Continuous-time filter `(1 − exp(−αJ(σ + λ)))/(σ + λ)` of a truncated series.
pub fn neumann_filter(sigma: f64, alpha: f64, damping: f64, j: f64) -> f64 {
    let s = sigma + damping;
    -(-alpha * j * s).exp_m1() / s
}

enum Curvature<'a> {
    Plain,
    Preconditioned(&'a EkfacState, f64),
}

impl Curvature<'_> {
    fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        match self {
            Curvature::Plain => Ok(v.clone()),
            Curvature::Preconditioned(state, damping) => state.precondition(*damping, v),
        }
    }
}

/// Neumann iteration `θ ← θ − α((G̃ + λI)θ − v)`.
pub fn sni_solve(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    v: &ParamVector,
    config: &SolverConfig,
) -> Result<(ParamVector, SolveTrace)> {
    solve(spec, params, dataset, v, config, None, &mut |_| {
        ControlFlow::Continue(())
    })
}

/// Preconditioned iteration `θ ← θ − α P⁻¹((G̃ + λI)θ − v)` with
/// `P⁻¹ = (EKFAC + λ̃I)⁻¹`.
pub fn astra_solve(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    ekfac: &EkfacState,
    v: &ParamVector,
    config: &SolverConfig,
) -> Result<(ParamVector, SolveTrace)> {
    solve(spec, params, dataset, v, config, Some(ekfac), &mut |_| {
        ControlFlow::Continue(())
    })
}

/// Shared solver loop. `precond = None` gives the plain Neumann iteration.
/// The observer sees every iterate of the first repeat and may stop early,
/// in which case that iterate is returned without further repeats.
pub fn solve(
    spec: &MlpSpec,
    params: &ParamVector,
    dataset: &[Example],
    v: &ParamVector,
    config: &SolverConfig,
    precond: Option<&EkfacState>,
    observer: &mut dyn FnMut(Observation<'_>) -> ControlFlow<()>,
) -> Result<(ParamVector, SolveTrace)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("iHVP solve over an empty dataset".into()));
    }
    if v.len() != spec.num_params() {
        return Err(Error::dim(format!(
            "right-hand side of length {} for {} parameters",
            v.len(),
            spec.num_params()
        )));
    }
    let curvature = match precond {
        Some(state) => {
            if **state.layout() != **spec.layout() {
                return Err(Error::dim("curvature state does not match the network"));
            }
            Curvature::Preconditioned(state, config.precond_damping())
        }
        None => Curvature::Plain,
    };
    let full_batch = config.batch_size.is_none_or(|b| b >= dataset.len());
    let v_norm_sq = v.dot(v);

    let mut total = spec.zeros();
    let mut trace = SolveTrace::default();
    let start = Instant::now();
    for repeat in 0..config.repeats {
        let first = repeat == 0;
        let mut rng = seed::rng(config.seed, &[repeat as u64]);
        let mut theta = match config.init {
            InitMode::Zero => spec.zeros(),
            InitMode::QueryGradient => v.clone(),
            InitMode::PreconditionedQueryGradient => match precond {
                Some(state) => state.precondition(config.precond_damping(), v)?,
                None => {
                    return Err(Error::invalid(
                        "preconditioned initialization needs a curvature state",
                    ))
                }
            },
        };
        let mut velocity = spec.zeros();
        let mut scale: Option<f64> = None;
        let mut indices = Vec::new();
        for k in 0..=config.iterations {
            if !theta.is_finite() {
                return Err(Error::Divergence {
                    iteration: k,
                    reason: "non-finite iterate".into(),
                });
            }
            let mut residual = if full_batch {
                ggn_vec(spec, params, dataset, &theta)?
            } else {
                let b = config.batch_size.expect("mini-batch mode");
                indices.clear();
                indices.extend((0..b).map(|_| rng.random_range(0..dataset.len())));
                ggn_vec(spec, params, indices.iter().map(|&i| &dataset[i]), &theta)?
            };
            residual.axpy(config.damping, &theta);
            let objective = 0.5 * theta.dot(&residual) - theta.dot(v);
            if !objective.is_finite() {
                return Err(Error::Divergence {
                    iteration: k,
                    reason: "non-finite objective".into(),
                });
            }
            let s = *scale.get_or_insert(objective.abs().max(0.5 * v_norm_sq / config.damping));
            if objective > DIVERGENCE_FACTOR * s && s > 0.0 {
                return Err(Error::Divergence {
                    iteration: k,
                    reason: format!("objective {objective:e} exceeds {DIVERGENCE_FACTOR:e} × initial scale {s:e}"),
                });
            }
            let lr = config.lr_at(k);
            if first {
                let full_objective = match config.full_objective_every {
                    Some(n) if k % n == 0 || k == config.iterations => Some(if full_batch {
                        objective
                    } else {
                        quadratic_objective(spec, params, dataset, config.damping, v, &theta)?
                    }),
                    _ => None,
                };
                trace.points.push(TracePoint {
                    iteration: k,
                    objective,
                    full_objective,
                    lr,
                    wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                if config
                    .snapshot_every
                    .is_some_and(|n| k % n == 0 || k == config.iterations)
                {
                    trace.snapshots.push((k, theta.clone()));
                }
                let flow = observer(Observation {
                    iteration: k,
                    objective,
                    iterate: &theta,
                });
                if flow.is_break() {
                    return Ok((theta, trace));
                }
            }
            if k == config.iterations {
                break;
            }
            residual.axpy(-1.0, v);
            let step = curvature.apply(&residual)?;
            velocity.scale(config.momentum);
            velocity.axpy(1.0, &step);
            theta.axpy(-lr, &velocity);
        }
        total.axpy(1.0, &theta);
    }
    if config.repeats > 1 {
        total.scale(1.0 / config.repeats as f64);
    }
    Ok((total, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekfac::{fit, Accumulation};
    use crate::linalg::{relative_error, sym_eigh};
    use crate::model::Task;
    use crate::trainer::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(spec: &MlpSpec, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.params_from_vec(
            (0..spec.num_params())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn tiny() -> (MlpSpec, ParamVector, Vec<Example>) {
        let spec = MlpSpec::new(vec![2, 5, 1], Task::Regression).unwrap();
        let params = init_params(&spec, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..24)
            .map(|_| {
                let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                Example::regression(x, 0.0)
            })
            .collect();
        (spec, params, data)
    }

    #[test]
    fn zero_output_network_gives_identity_solve() {
        let spec = MlpSpec::new(vec![2, 3, 1], Task::Regression).unwrap();
        // all-zero weights: the Jacobian w.r.t. every parameter except the
        // last-layer bias vanishes, so G is zero apart from that coordinate
        let params = spec.zeros();
        let data = vec![Example::regression(vec![0.4, 0.1], 0.0)];
        let mut v = random_vector(&spec, 1);
        let last = v.len() - 1;
        v.as_mut_slice()[last] = 0.0;
        let x = exact_ihvp(&spec, &params, &data, 1.0, &v).unwrap();
        assert!(relative_error(x.as_slice(), v.as_slice()) < 1e-14);
    }

    #[test]
    fn single_example_matches_sherman_morrison() {
        let spec = MlpSpec::new(vec![3, 1], Task::Regression).unwrap();
        let params = random_vector(&spec, 2);
        let xb = [0.7, -0.2, 1.3, 1.0];
        let data = vec![Example::regression(xb[..3].to_vec(), 0.0)];
        let lambda = 0.3;
        let v = random_vector(&spec, 3);
        // (uuᵀ + λI)⁻¹ v = v/λ − u (uᵀv) / (λ(λ + uᵀu))
        let uv = crate::linalg::dot(&xb, v.as_slice());
        let uu = crate::linalg::dot(&xb, &xb);
        let expected: Vec<f64> = v
            .as_slice()
            .iter()
            .zip(&xb)
            .map(|(&vi, &ui)| vi / lambda - ui * uv / (lambda * (lambda + uu)))
            .collect();
        let x = exact_ihvp(&spec, &params, &data, lambda, &v).unwrap();
        assert!(relative_error(x.as_slice(), &expected) < 1e-12);
    }

    #[test]
    fn dense_guard() {
        let spec = MlpSpec::new(vec![50, 50, 1], Task::Regression).unwrap();
        let data = vec![Example::regression(vec![0.0; 50], 0.0)];
        assert!(exact_ihvp(&spec, &spec.zeros(), &data, 1.0, &spec.zeros()).is_err());
    }

    fn full_batch(cfg: SolverConfig) -> SolverConfig {
        SolverConfig {
            batch_size: None,
            momentum: 0.0,
            lr_decay: None,
            ..cfg
        }
    }

    fn lmax_damped(spec: &MlpSpec, params: &ParamVector, data: &[Example], lambda: f64) -> f64 {
        let exact = ExactIhvp::new(spec, params, data, lambda).unwrap();
        *sym_eigh(exact.matrix()).unwrap().values.last().unwrap()
    }

    #[test]
    fn full_batch_sni_converges_to_exact() {
        let (spec, params, data) = tiny();
        let lambda = 0.05;
        let v = random_vector(&spec, 5);
        let exact = exact_ihvp(&spec, &params, &data, lambda, &v).unwrap();
        let lr = 1.0 / lmax_damped(&spec, &params, &data, lambda);
        let cfg = SolverConfig {
            iterations: 20_000,
            ..full_batch(SolverConfig::sni_default(lambda, lr))
        };
        let (x, _) = sni_solve(&spec, &params, &data, &v, &cfg).unwrap();
        assert!(relative_error(x.as_slice(), exact.as_slice()) < 1e-4);
    }

    #[test]
    fn identity_curvature_one_step() {
        let spec = MlpSpec::new(vec![2, 1], Task::Regression).unwrap();
        let params = spec.zeros();
        let data = vec![Example::regression(vec![0.0, 0.0], 0.0)];
        // G = e eᵀ for the bias coordinate only; v avoids it
        let v = spec.params_from_vec(vec![0.3, -0.8, 0.0]).unwrap();
        let cfg = SolverConfig {
            iterations: 1,
            init: InitMode::Zero,
            ..full_batch(SolverConfig::sni_default(1.0, 1.0))
        };
        let (x, _) = sni_solve(&spec, &params, &data, &v, &cfg).unwrap();
        assert_eq!(x, v);
    }

    #[test]
    fn zero_iterations_return_query_gradient() {
        let (spec, params, data) = tiny();
        let v = random_vector(&spec, 6);
        let cfg = SolverConfig {
            iterations: 0,
            ..SolverConfig::sni_default(0.1, 0.01)
        };
        let (x, trace) = sni_solve(&spec, &params, &data, &v, &cfg).unwrap();
        assert_eq!(x, v);
        assert_eq!(trace.points.len(), 1);
    }

    fn fitted(spec: &MlpSpec, params: &ParamVector, data: &[Example]) -> EkfacState {
        fit(spec, params, data, 9, Accumulation::Sequential).unwrap()
    }

    #[test]
    fn one_step_equals_preconditioner() {
        let (spec, params, data) = tiny();
        let state = fitted(&spec, &params, &data);
        for seed in 0..20 {
            let v = random_vector(&spec, 100 + seed);
            let lambda = 0.01 * (1 + seed) as f64;
            let cfg = SolverConfig {
                lr: 1.0,
                iterations: 1,
                init: InitMode::Zero,
                momentum: 0.0,
                lr_decay: None,
                ..SolverConfig::astra_default(lambda)
            };
            let (x, _) = astra_solve(&spec, &params, &data, &state, &v, &cfg).unwrap();
            let p = state.precondition(lambda, &v).unwrap();
            assert!(relative_error(x.as_slice(), p.as_slice()) <= 1e-14);
        }
    }

    #[test]
    fn zero_rhs_stays_zero() {
        let (spec, params, data) = tiny();
        let state = fitted(&spec, &params, &data);
        let cfg = SolverConfig {
            batch_size: Some(4),
            iterations: 30,
            snapshot_every: Some(1),
            ..SolverConfig::astra_default(0.1)
        };
        let (x, trace) = astra_solve(&spec, &params, &data, &state, &spec.zeros(), &cfg).unwrap();
        assert!(x.as_slice().iter().all(|&c| c == 0.0));
        assert!(trace
            .snapshots
            .iter()
            .all(|(_, s)| s.as_slice().iter().all(|&c| c == 0.0)));
        assert_eq!(trace.points.len(), 31);
    }

    #[test]
    fn astra_converges_faster_than_sni() {
        let (spec, params, data) = tiny();
        let lambda = 0.01;
        let state = fitted(&spec, &params, &data);
        let v = random_vector(&spec, 7);
        let exact = exact_ihvp(&spec, &params, &data, lambda, &v).unwrap();
        let iterations_to = |precond: Option<&EkfacState>, lr: f64| {
            let cfg = SolverConfig {
                lr,
                iterations: 50_000,
                init: InitMode::Zero,
                ..full_batch(SolverConfig::astra_default(lambda))
            };
            let mut hit = None;
            solve(&spec, &params, &data, &v, &cfg, precond, &mut |o| {
                if relative_error(o.iterate.as_slice(), exact.as_slice()) < 1e-4 {
                    hit = Some(o.iteration);
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .unwrap();
            hit
        };
        let lr_sni = 1.0 / lmax_damped(&spec, &params, &data, lambda);
        let sni = iterations_to(None, lr_sni).expect("sni converges");
        let astra = iterations_to(Some(&state), 0.5).expect("astra converges");
        assert!(astra < sni, "astra {astra} vs sni {sni}");
    }

    #[test]
    fn full_batch_objective_is_monotone() {
        let (spec, params, data) = tiny();
        let lambda = 0.05;
        let state = fitted(&spec, &params, &data);
        let v = random_vector(&spec, 8);
        let lr_sni = 1.0 / lmax_damped(&spec, &params, &data, lambda);
        let sni = SolverConfig {
            iterations: 300,
            ..full_batch(SolverConfig::sni_default(lambda, lr_sni))
        };
        let (_, t) = sni_solve(&spec, &params, &data, &v, &sni).unwrap();
        assert!(t
            .points
            .windows(2)
            .all(|w| w[1].objective <= w[0].objective + 1e-14));

        // preconditioned system P^{-1/2}(G+λ)P^{-1/2}: bound its top eigenvalue densely
        let exact = ExactIhvp::new(&spec, &params, &data, lambda).unwrap();
        let d = spec.num_params();
        let mut pg = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let col = exact.matrix().column(j);
            let pc = state
                .precondition(lambda, &spec.params_from_vec(col).unwrap())
                .unwrap();
            for i in 0..d {
                pg[(i, j)] = pc.as_slice()[i];
            }
        }
        // P⁻¹(G+λ) is similar to a symmetric PD matrix, so its spectral
        // radius bounds the stable step; power iteration is enough here
        let mut x = vec![1.0; d];
        let mut rho = 0.0;
        for _ in 0..500 {
            let y = pg.matvec(&x).unwrap();
            rho = crate::linalg::norm(&y) / crate::linalg::norm(&x);
            x = y.iter().map(|v| v / crate::linalg::norm(&y)).collect();
        }
        let astra = SolverConfig {
            lr: 0.9 / rho,
            iterations: 300,
            ..full_batch(SolverConfig::astra_default(lambda))
        };
        let (_, t) = astra_solve(&spec, &params, &data, &state, &v, &astra).unwrap();
        assert!(t
            .points
            .windows(2)
            .all(|w| w[1].objective <= w[0].objective + 1e-12));
    }

    #[test]
    fn both_solvers_reach_the_same_fixed_point() {
        let (spec, params, data) = tiny();
        let lambda = 0.05;
        let state = fitted(&spec, &params, &data);
        let v = random_vector(&spec, 9);
        let exact = ExactIhvp::new(&spec, &params, &data, lambda).unwrap();
        let lr_sni = 1.0 / lmax_damped(&spec, &params, &data, lambda);
        let (a, _) = sni_solve(
            &spec,
            &params,
            &data,
            &v,
            &SolverConfig {
                iterations: 30_000,
                ..full_batch(SolverConfig::sni_default(lambda, lr_sni))
            },
        )
        .unwrap();
        let (b, _) = astra_solve(
            &spec,
            &params,
            &data,
            &state,
            &v,
            &SolverConfig {
                lr: 0.5,
                iterations: 3_000,
                ..full_batch(SolverConfig::astra_default(lambda))
            },
        )
        .unwrap();
        for x in [&a, &b] {
            let r = exact.matrix().matvec(x.as_slice()).unwrap();
            assert!(relative_error(&r, v.as_slice()) < 1e-8);
        }
    }

    #[test]
    fn partition_minibatches_average_to_full_batch() {
        let (spec, params, data) = tiny();
        let v = random_vector(&spec, 10);
        let full = ggn_vec(&spec, &params, &data, &v).unwrap();
        let mut acc = spec.zeros();
        for chunk in data.chunks(6) {
            acc.axpy(1.0 / 4.0, &ggn_vec(&spec, &params, chunk, &v).unwrap());
        }
        assert!(relative_error(acc.as_slice(), full.as_slice()) < 1e-12);
    }

    #[test]
    fn with_replacement_minibatches_are_unbiased() {
        let (spec, params, data) = tiny();
        let v = random_vector(&spec, 11);
        let full = ggn_vec(&spec, &params, &data, &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 10_000;
        let coord = full
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..data.len())).collect();
                ggn_vec(&spec, &params, idx.iter().map(|&i| &data[i]), &v)
                    .unwrap()
                    .as_slice()[coord]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - full.as_slice()[coord]).abs() < 3.0 * se,
            "{mean} vs {}",
            full.as_slice()[coord]
        );
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let (spec, params, data) = tiny();
        let state = fitted(&spec, &params, &data);
        let v = random_vector(&spec, 13);
        let cfg = SolverConfig {
            batch_size: Some(5),
            iterations: 40,
            repeats: 3,
            seed: 77,
            ..SolverConfig::astra_default(0.05)
        };
        let a = astra_solve(&spec, &params, &data, &state, &v, &cfg)
            .unwrap()
            .0;
        let b = astra_solve(&spec, &params, &data, &state, &v, &cfg)
            .unwrap()
            .0;
        assert_eq!(a, b);
        let c = astra_solve(
            &spec,
            &params,
            &data,
            &state,
            &v,
            &SolverConfig { seed: 78, ..cfg },
        )
        .unwrap()
        .0;
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_is_detected() {
        let (spec, params, data) = tiny();
        let v = random_vector(&spec, 14);
        let cfg = SolverConfig {
            iterations: 500,
            ..full_batch(SolverConfig::sni_default(0.01, 50.0))
        };
        assert!(matches!(
            sni_solve(&spec, &params, &data, &v, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn objective_examples() {
        let (spec, params, data) = tiny();
        let lambda = 0.1;
        let v = random_vector(&spec, 15);
        assert_eq!(
            quadratic_objective(&spec, &params, &data, lambda, &v, &spec.zeros()).unwrap(),
            0.0
        );
        let x = exact_ihvp(&spec, &params, &data, lambda, &v).unwrap();
        let h_star = quadratic_objective(&spec, &params, &data, lambda, &v, &x).unwrap();
        assert!((h_star + 0.5 * v.dot(&x)).abs() < 1e-12 * h_star.abs());
        for seed in 0..10 {
            let mut y = x.clone();
            y.axpy(1e-3, &random_vector(&spec, 200 + seed));
            assert!(quadratic_objective(&spec, &params, &data, lambda, &v, &y).unwrap() > h_star);
        }
    }

    #[test]
    fn series_examples() {
        let v = [1.0, -2.0, 0.5];
        let zero = |x: &[f64]| vec![0.0; x.len()];
        assert_eq!(
            truncated_neumann_apply(zero, 0.3, 0.7, 1, &v),
            vec![0.3, -0.6, 0.15]
        );
        assert_eq!(effective_damping(0.1, 0.01, 100.0), 0.11);
        assert_eq!(effective_damping(1.0, 0.25, f64::INFINITY), 0.25);
    }

    #[test]
    fn series_tracks_continuous_filter() {
        let (alpha, lambda, j) = (1e-3, 1e-2, 1000usize);
        for &sigma in &[0.1, 0.5, 1.0, 3.0, 9.9] {
            let x = alpha * j as f64 * (sigma + lambda);
            assert!((0.1..=10.0).contains(&x));
            let g = move |x: &[f64]| x.iter().map(|v| sigma * v).collect::<Vec<_>>();
            let out = truncated_neumann_apply(g, alpha, lambda, j, &[1.0])[0];
            let f = neumann_filter(sigma, alpha, lambda, j as f64);
            assert!((out - f).abs() < 0.1 * f);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn objective_is_convex(s1 in 0u64..500, s2 in 0u64..500) {
            let (spec, params, data) = tiny();
            let v = random_vector(&spec, 999);
            let a = random_vector(&spec, s1);
            let b = random_vector(&spec, 1000 + s2);
            let mut mid = a.scaled(0.5);
            mid.axpy(0.5, &b);
            let h = |t: &ParamVector| quadratic_objective(&spec, &params, &data, 0.1, &v, t).unwrap();
            prop_assert!(h(&mid) <= 0.5 * h(&a) + 0.5 * h(&b) + 1e-12);
        }
    }
}
