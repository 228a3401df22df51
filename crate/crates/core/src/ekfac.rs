//! Eigenvalue-corrected Kronecker-factored curvature.
//!
//! Each layer's curvature block is approximated in the Kronecker eigenbasis
//! `Q_S ⊗ Q_A` of the input-activation and pre-activation-gradient
//! covariances, with one scaling per eigenvector. For a layer block `V̄`
//! (`O × (I+1)`), the eigencoordinates are `Q_Sᵀ V̄ Q_A`.
//!
//! Statistics use pseudo-gradients under labels sampled from the model, one
//! per input. Per-example draws come from seeds pre-drawn sequentially from
//! the caller's rng, so the parallel mode differs from the sequential one
//! only in floating-point summation order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigh, DenseMatrix};
use crate::model::{
    backprop_deltas, forward, pseudo_output_grad, sample_from_outputs, Example, ForwardCache,
    Layout, MlpSpec, ParamVector,
};

/// Summation strategy for statistic accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Examples summed in dataset order; bit-reproducible.
    #[default]
    Sequential,
    /// Rayon reduction; equal up to floating-point reassociation.
    Parallel,
}

/// Uncentered covariances of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    /// `Â = mean ā ā ᵀ`, `(I+1) × (I+1)`.
    pub a: DenseMatrix,
    /// `Ŝ = mean Ds Dsᵀ`, `O × O`.
    pub s: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub q_a: DenseMatrix,
    pub d_a: Vec<f64>,
    pub q_s: DenseMatrix,
    pub d_s: Vec<f64>,
    /// `O × (I+1)` scalings, one per Kronecker eigenvector `(Q_S)_i ⊗ (Q_A)_j`.
    pub lambda: DenseMatrix,
}

impl LayerFactors {
    fn to_eigen(&self, v: &DenseMatrix) -> DenseMatrix {
        self.q_s
            .tr_matmul(v)
            .and_then(|m| m.matmul(&self.q_a))
            .expect("layer shapes")
    }

    fn to_param_basis(&self, v: &DenseMatrix) -> DenseMatrix {
        self.q_s
            .matmul(v)
            .and_then(|m| m.matmul(&self.q_a.transpose()))
            .expect("layer shapes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfacState {
    layout: Arc<Layout>,
    layers: Vec<LayerFactors>,
}

/// One sampled-label pass: for each example, its forward cache and the
/// per-layer pseudo-gradient deltas.
fn pseudo_pass<F, T>(
    spec: &MlpSpec,
    params: &ParamVector,
    examples: &[Example],
    rng: &mut (impl Rng + ?Sized),
    mode: Accumulation,
    zero: impl Fn() -> T + Sync + Send,
    add: F,
    merge: impl Fn(T, T) -> T + Sync + Send,
) -> Result<T>
where
    F: Fn(&mut T, &ForwardCache, &[Vec<f64>]) + Sync + Send,
    T: Send,
{
    if examples.is_empty() {
        return Err(Error::Empty(
            "curvature statistics over an empty dataset".into(),
        ));
    }
    let seeds: Vec<u64> = (0..examples.len()).map(|_| rng.random()).collect();
    let visit = |acc: &mut T, (example, &seed): (&Example, &u64)| -> Result<()> {
        let (out, cache) = forward(spec, params, &example.x)?;
        let mut example_rng = ChaCha8Rng::seed_from_u64(seed);
        let label = sample_from_outputs(spec.task(), &out, &mut example_rng);
        let deltas = backprop_deltas(spec, params, &cache, &pseudo_output_grad(&out, label));
        add(acc, &cache, &deltas);
        Ok(())
    };
    match mode {
        Accumulation::Sequential => {
            let mut acc = zero();
            for pair in examples.iter().zip(&seeds) {
                visit(&mut acc, pair)?;
            }
            Ok(acc)
        }
        Accumulation::Parallel => examples
            .par_iter()
            .zip(seeds.par_iter())
            .try_fold(&zero, |mut acc, pair| visit(&mut acc, pair).map(|_| acc))
            .try_reduce(&zero, |a, b| Ok(merge(a, b))),
    }
}

/// `Â_{l−1}` and `Ŝ_l` for every layer, averaged over `examples`.
pub fn collect_stats(
    spec: &MlpSpec,
    params: &ParamVector,
    examples: &[Example],
    rng: &mut (impl Rng + ?Sized),
    mode: Accumulation,
) -> Result<Vec<LayerStats>> {
    let zero = || -> Vec<LayerStats> {
        spec.layout()
            .shapes()
            .iter()
            .map(|&(o, i1)| LayerStats {
                a: DenseMatrix::zeros(i1, i1),
                s: DenseMatrix::zeros(o, o),
            })
            .collect()
    };
    let add = |acc: &mut Vec<LayerStats>, cache: &ForwardCache, deltas: &[Vec<f64>]| {
        for (l, st) in acc.iter_mut().enumerate() {
            st.a.add_outer(1.0, &cache.inputs[l], &cache.inputs[l]);
            st.s.add_outer(1.0, &deltas[l], &deltas[l]);
        }
    };
    let merge = |mut a: Vec<LayerStats>, b: Vec<LayerStats>| {
        for (x, y) in a.iter_mut().zip(&b) {
            x.a.add_assign(&y.a).expect("same shapes");
            x.s.add_assign(&y.s).expect("same shapes");
        }
        a
    };
    let mut stats = pseudo_pass(spec, params, examples, rng, mode, zero, add, merge)?;
    let inv = 1.0 / examples.len() as f64;
    for st in &mut stats {
        st.a.scale(inv);
        st.s.scale(inv);
    }
    Ok(stats)
}

/// Plain KFAC state: eigendecomposed factors with `Λ = d_S d_Aᵀ`.
pub fn build_state(spec: &MlpSpec, stats: &[LayerStats]) -> Result<EkfacState> {
    let layout = spec.layout();
    if stats.len() != layout.num_layers() {
        return Err(Error::dim(format!(
            "{} layer statistics for {} layers",
            stats.len(),
            layout.num_layers()
        )));
    }
    let mut layers = Vec::with_capacity(stats.len());
    for (l, st) in stats.iter().enumerate() {
        let (o, i1) = layout.shape(l);
        if (st.a.rows(), st.a.cols(), st.s.rows(), st.s.cols()) != (i1, i1, o, o) {
            return Err(Error::dim(format!(
                "layer {l} statistics do not match shape {o}×{i1}"
            )));
        }
        let ea = sym_eigh(&st.a)?;
        let es = sym_eigh(&st.s)?;
        let mut lambda = DenseMatrix::zeros(o, i1);
        for i in 0..o {
            for j in 0..i1 {
                lambda[(i, j)] = (es.values[i] * ea.values[j]).max(0.0);
            }
        }
        layers.push(LayerFactors {
            q_a: ea.basis,
            d_a: ea.values,
            q_s: es.basis,
            d_s: es.values,
            lambda,
        });
    }
    Ok(EkfacState {
        layout: layout.clone(),
        layers,
    })
}

/// Replaces the KFAC scalings with the mean squared projections of fresh
/// pseudo-gradients onto each Kronecker eigenvector.
pub fn correct_eigenvalues(
    state: &EkfacState,
    spec: &MlpSpec,
    params: &ParamVector,
    examples: &[Example],
    rng: &mut (impl Rng + ?Sized),
    mode: Accumulation,
) -> Result<EkfacState> {
    if *state.layout != **spec.layout() {
        return Err(Error::dim("curvature state does not match the network"));
    }
    let zero = || -> Vec<DenseMatrix> {
        state
            .layers
            .iter()
            .map(|f| DenseMatrix::zeros(f.lambda.rows(), f.lambda.cols()))
            .collect()
    };
    // A per-example layer gradient is δ āᵀ, so its eigencoordinates are the
    // outer product (Q_Sᵀ δ)(Q_Aᵀ ā)ᵀ and their squares factor the same way.
    let add = |acc: &mut Vec<DenseMatrix>, cache: &ForwardCache, deltas: &[Vec<f64>]| {
        for (l, (grid, f)) in acc.iter_mut().zip(&state.layers).enumerate() {
            let ps: Vec<f64> = f
                .q_s
                .tr_matvec(&deltas[l])
                .expect("shape")
                .iter()
                .map(|v| v * v)
                .collect();
            let pa: Vec<f64> = f
                .q_a
                .tr_matvec(&cache.inputs[l])
                .expect("shape")
                .iter()
                .map(|v| v * v)
                .collect();
            grid.add_outer(1.0, &ps, &pa);
        }
    };
    let merge = |mut a: Vec<DenseMatrix>, b: Vec<DenseMatrix>| {
        for (x, y) in a.iter_mut().zip(&b) {
            x.add_assign(y).expect("same shapes");
        }
        a
    };
    let grids = pseudo_pass(spec, params, examples, rng, mode, zero, add, merge)?;
    let inv = 1.0 / examples.len() as f64;
    let mut out = state.clone();
    for (f, mut grid) in out.layers.iter_mut().zip(grids) {
        grid.scale(inv);
        grid.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        f.lambda = grid;
    }
    Ok(out)
}

/// Statistics, eigendecomposition and eigenvalue correction in one call,
/// with the two label-sampling passes drawn from independent streams.
pub fn fit(
    spec: &MlpSpec,
    params: &ParamVector,
    examples: &[Example],
    seed: u64,
    mode: Accumulation,
) -> Result<EkfacState> {
    let stats = collect_stats(
        spec,
        params,
        examples,
        &mut crate::seed::rng(seed, &[0xfac1]),
        mode,
    )?;
    let kfac = build_state(spec, &stats)?;
    correct_eigenvalues(
        &kfac,
        spec,
        params,
        examples,
        &mut crate::seed::rng(seed, &[0xfac2]),
        mode,
    )
}

impl EkfacState {
    /// Assembles a state from raw factors, validating shapes and scalings.
    pub fn from_layers(layout: Arc<Layout>, layers: Vec<LayerFactors>) -> Result<Self> {
        if layers.len() != layout.num_layers() {
            return Err(Error::dim(format!(
                "{} factor sets for {} layers",
                layers.len(),
                layout.num_layers()
            )));
        }
        for (l, f) in layers.iter().enumerate() {
            let (o, i1) = layout.shape(l);
            let ok = (f.q_a.rows(), f.q_a.cols(), f.d_a.len()) == (i1, i1, i1)
                && (f.q_s.rows(), f.q_s.cols(), f.d_s.len()) == (o, o, o)
                && (f.lambda.rows(), f.lambda.cols()) == (o, i1);
            if !ok {
                return Err(Error::dim(format!(
                    "layer {l} factors do not match shape {o}×{i1}"
                )));
            }
            if f.lambda
                .as_slice()
                .iter()
                .any(|&v| !(v >= 0.0) || !v.is_finite())
            {
                return Err(Error::numeric(format!(
                    "layer {l} has a negative or non-finite scaling"
                )));
            }
        }
        Ok(EkfacState { layout, layers })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    /// Every scaling across all layers, in parameter order of the eigenbasis.
    pub fn scalings(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|f| f.lambda.as_slice().iter().copied())
            .collect()
    }

    /// Multiplies each eigencoordinate by `f(Λ)`.
    pub fn apply_spectral(&self, v: &ParamVector, f: impl Fn(f64) -> f64) -> Result<ParamVector> {
        if **v.layout() != *self.layout {
            return Err(Error::dim(format!(
                "vector of length {} does not match the curvature layout",
                v.len()
            )));
        }
        let mut out = v.clone();
        for (l, factors) in self.layers.iter().enumerate() {
            let mut coords = factors.to_eigen(&v.layer_matrix(l));
            for (c, &lam) in coords
                .as_mut_slice()
                .iter_mut()
                .zip(factors.lambda.as_slice())
            {
                *c *= f(lam);
            }
            out.set_layer_matrix(l, &factors.to_param_basis(&coords));
        }
        Ok(out)
    }

    /// `(P + λ̃ I)⁻¹ v`.
    pub fn precondition(&self, damping: f64, v: &ParamVector) -> Result<ParamVector> {
        if !(damping > 0.0) || !damping.is_finite() {
            return Err(Error::invalid(format!(
                "preconditioner damping must be positive, got {damping}"
            )));
        }
        self.apply_spectral(v, |lam| 1.0 / (lam + damping))
    }

    /// `(P + λ̃ I) v`, the forward map undone by [`Self::precondition`].
    pub fn damped_apply(&self, damping: f64, v: &ParamVector) -> Result<ParamVector> {
        self.apply_spectral(v, |lam| lam + damping)
    }

    /// `exp(−c P) v`.
    pub fn matrix_exp_apply(&self, c: f64, v: &ParamVector) -> Result<ParamVector> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!(
                "exponent scale must be finite and ≥ 0, got {c}"
            )));
        }
        self.apply_spectral(v, |lam| (-c * lam).exp())
    }

    /// Keeps only eigencoordinates whose scaling exceeds `threshold`.
    pub fn project_to_bin(&self, threshold: f64, v: &ParamVector) -> Result<ParamVector> {
        if threshold.is_nan() {
            return Err(Error::invalid("bin threshold is NaN"));
        }
        self.apply_spectral(v, |lam| if lam > threshold { 1.0 } else { 0.0 })
    }
}
