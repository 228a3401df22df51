//! Multi-layer perceptron engine.
//!
//! Every layer is affine on the homogeneous input `[a; 1]` with weights and
//! bias stored together as an `O × (I+1)` row-major block; hidden layers use
//! ReLU and the last layer is linear. The network output is the last
//! pre-activation (a regression value or class logits).
//!
//! Gauss-Newton-vector products use a forward-mode directional derivative of
//! the outputs followed by a reverse-mode pass seeded in output space, so the
//! curvature matrix is never formed.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Scalar output with squared error `½(y − t)²`.
    Regression,
    /// Logits with softmax cross-entropy.
    Classification,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Regression => f.write_str("regression"),
            Task::Classification => f.write_str("classification"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Shape of every layer block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    len: usize,
}

impl Layout {
    /// `shapes[l] = (rows, cols)` of each layer block.
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut len = 0;
        for &(r, c) in &shapes {
            offsets.push(len);
            len += r * c;
        }
        Layout {
            shapes,
            offsets,
            len,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// `(O, I + 1)` of layer `l`.
    pub fn shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn range(&self, l: usize) -> std::ops::Range<usize> {
        let (r, c) = self.shapes[l];
        self.offsets[l]..self.offsets[l] + r * c
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Architecture of a ReLU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    task: Task,
    layout: Arc<Layout>,
}

impl MlpSpec {
    /// `layer_dims` lists input, hidden and output widths.
    pub fn new(layer_dims: Vec<usize>, task: Task) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output widths",
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        let out = *layer_dims.last().unwrap();
        if task == Task::Regression && out != 1 {
            return Err(Error::invalid(format!(
                "regression expects a scalar output, got width {out}"
            )));
        }
        let shapes = layer_dims.windows(2).map(|w| (w[1], w[0] + 1)).collect();
        Ok(MlpSpec {
            layer_dims,
            task,
            layout: Arc::new(Layout::new(shapes)),
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn params_from_vec(&self, data: Vec<f64>) -> Result<ParamVector> {
        ParamVector::from_vec(self.layout.clone(), data)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if *params.layout != *self.layout {
            return Err(Error::dim(format!(
                "parameter vector of length {} does not match the {} parameters of {:?}",
                params.len(),
                self.num_params(),
                self.layer_dims
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input of width {} for a network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: Target) -> Result<()> {
        match (self.task, target) {
            (Task::Regression, Target::Value(_)) => Ok(()),
            (Task::Classification, Target::Class(c)) if c < self.output_dim() => Ok(()),
            (Task::Classification, Target::Class(c)) => Err(Error::invalid(format!(
                "class {c} out of range for {} outputs",
                self.output_dim()
            ))),
            (task, t) => Err(Error::invalid(format!(
                "target {t:?} does not fit a {task} task"
            ))),
        }
    }
}

/// Flat parameter-space vector with per-layer `O × (I+1)` row-major blocks.
///
/// Gradients, iHVP iterates and solver right-hand sides all live here.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.len()];
        ParamVector { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::dim(format!(
                "{} values for a layout of {} parameters",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.data[self.layout.range(l)]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layout.range(l);
        &mut self.data[r]
    }

    pub fn layer_matrix(&self, l: usize) -> DenseMatrix {
        let (r, c) = self.layout.shape(l);
        DenseMatrix::from_vec(r, c, self.layer(l).to_vec()).expect("layout shape")
    }

    pub fn set_layer_matrix(&mut self, l: usize, m: &DenseMatrix) {
        debug_assert_eq!((m.rows(), m.cols()), self.layout.shape(l));
        self.layer_mut(l).copy_from_slice(m.as_slice());
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `self += alpha · x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        axpy(alpha, &x.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Unit vector along coordinate `i`.
    pub fn unit(layout: Arc<Layout>, i: usize) -> Self {
        let mut v = Self::zeros(layout);
        v.data[i] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Target {
    Value(f64),
    Class(usize),
}

impl Target {
    pub fn as_f64(self) -> f64 {
        match self {
            Target::Value(v) => v,
            Target::Class(c) => c as f64,
        }
    }
}

/// One input-target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub t: Target,
}

impl Example {
    pub fn regression(x: Vec<f64>, t: f64) -> Self {
        Example {
            x,
            t: Target::Value(t),
        }
    }

    pub fn classification(x: Vec<f64>, class: usize) -> Self {
        Example {
            x,
            t: Target::Class(class),
        }
    }
}

/// Per-layer homogeneous inputs `[a_{l-1}; 1]` and pre-activations `s_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }
}

#[inline]
fn relu(s: f64) -> f64 {
    if s > 0.0 {
        s
    } else {
        0.0
    }
}

/// Subgradient convention: 0 at the kink.
#[inline]
fn relu_grad(s: f64) -> f64 {
    if s > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn affine(block: &[f64], rows: usize, input_bar: &[f64]) -> Vec<f64> {
    let cols = input_bar.len();
    (0..rows)
        .map(|i| dot(&block[i * cols..(i + 1) * cols], input_bar))
        .collect()
}

pub fn forward(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
) -> Result<(Vec<f64>, ForwardCache)> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let cache = forward_unchecked(spec, params, x);
    let out = cache.outputs().to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite network output"));
    }
    Ok((out, cache))
}

fn forward_unchecked(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> ForwardCache {
    let n_layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut a_bar: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
    for l in 0..n_layers {
        let (rows, _) = spec.layout.shape(l);
        let s = affine(params.layer(l), rows, &a_bar);
        let next_bar = if l + 1 < n_layers {
            s.iter()
                .map(|&v| relu(v))
                .chain(std::iter::once(1.0))
                .collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut a_bar, next_bar));
        pre_activations.push(s);
    }
    ForwardCache {
        inputs,
        pre_activations,
    }
}

/// Backpropagates an output-space seed `∂/∂s_P` to every layer's
/// pre-activation, returning `∂/∂s_l` for each layer.
pub fn backprop_deltas(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    output_seed: &[f64],
) -> Vec<Vec<f64>> {
    let n_layers = spec.num_layers();
    let mut deltas = vec![Vec::new(); n_layers];
    deltas[n_layers - 1] = output_seed.to_vec();
    for l in (1..n_layers).rev() {
        let (rows, cols) = spec.layout.shape(l);
        let block = params.layer(l);
        let delta = &deltas[l];
        // Skip the bias column: the constant 1 carries no gradient.
        let mut prev = vec![0.0; cols - 1];
        for (i, &d) in delta.iter().enumerate().take(rows) {
            if d != 0.0 {
                axpy(d, &block[i * cols..i * cols + cols - 1], &mut prev);
            }
        }
        for (p, &s) in prev.iter_mut().zip(&cache.pre_activations[l - 1]) {
            *p *= relu_grad(s);
        }
        deltas[l - 1] = prev;
    }
    deltas
}

/// Accumulates `scale · Σ_l δ_l [a_{l-1}; 1]ᵀ` into `out`.
fn accumulate_param_grad(
    cache: &ForwardCache,
    deltas: &[Vec<f64>],
    scale: f64,
    out: &mut ParamVector,
) {
    for (l, delta) in deltas.iter().enumerate() {
        let a_bar = &cache.inputs[l];
        let cols = a_bar.len();
        let block = out.layer_mut(l);
        for (i, &d) in delta.iter().enumerate() {
            let c = scale * d;
            if c != 0.0 {
                axpy(c, a_bar, &mut block[i * cols..(i + 1) * cols]);
            }
        }
    }
}

/// Parameter gradient of a scalar whose derivative w.r.t. the outputs is `output_seed`.
pub fn vjp(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    output_seed: &[f64],
) -> ParamVector {
    let deltas = backprop_deltas(spec, params, cache, output_seed);
    let mut g = spec.zeros();
    accumulate_param_grad(cache, &deltas, 1.0, &mut g);
    g
}

/// Forward-mode directional derivative of the outputs along `v`.
pub fn jvp(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    v: &ParamVector,
) -> Vec<f64> {
    let n_layers = spec.num_layers();
    let mut a_dot: Vec<f64> = Vec::new();
    let mut s_dot = Vec::new();
    for l in 0..n_layers {
        let (rows, cols) = spec.layout.shape(l);
        let a_bar = &cache.inputs[l];
        let v_block = v.layer(l);
        let w_block = params.layer(l);
        s_dot = (0..rows)
            .map(|i| {
                let mut acc = dot(&v_block[i * cols..(i + 1) * cols], a_bar);
                if l > 0 {
                    acc += dot(&w_block[i * cols..i * cols + cols - 1], &a_dot);
                }
                acc
            })
            .collect();
        if l + 1 < n_layers {
            a_dot = s_dot
                .iter()
                .zip(&cache.pre_activations[l])
                .map(|(&d, &s)| d * relu_grad(s))
                .collect();
        }
    }
    s_dot
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-example loss: `½(y − t)²` or `−log softmax(y)[t]`.
pub fn loss(spec: &MlpSpec, outputs: &[f64], target: Target) -> Result<f64> {
    spec.check_target(target)?;
    if outputs.len() != spec.output_dim() {
        return Err(Error::dim("output width"));
    }
    Ok(match target {
        Target::Value(t) => 0.5 * (outputs[0] - t).powi(2),
        Target::Class(c) => log_sum_exp(outputs.iter()) - outputs[c],
    })
}

/// `∂ loss / ∂ outputs`.
fn loss_output_grad(outputs: &[f64], target: Target) -> Vec<f64> {
    match target {
        Target::Value(t) => vec![outputs[0] - t],
        Target::Class(c) => {
            let mut p = softmax(outputs);
            p[c] -= 1.0;
            p
        }
    }
}

pub fn grad(spec: &MlpSpec, params: &ParamVector, example: &Example) -> Result<ParamVector> {
    spec.check_target(example.t)?;
    let (out, cache) = forward(spec, params, &example.x)?;
    let g = vjp(spec, params, &cache, &loss_output_grad(&out, example.t));
    if !g.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(g)
}

/// Loss and gradient from a single forward pass.
pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    example: &Example,
) -> Result<(f64, ParamVector)> {
    spec.check_target(example.t)?;
    let (out, cache) = forward(spec, params, &example.x)?;
    let l = loss(spec, &out, example.t)?;
    let g = vjp(spec, params, &cache, &loss_output_grad(&out, example.t));
    Ok((l, g))
}

/// Mean loss and mean gradient over a batch, accumulated without
/// per-example parameter-sized allocations.
pub fn mean_loss_and_grad<'a, I>(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: I,
) -> Result<(f64, ParamVector)>
where
    I: IntoIterator<Item = &'a Example>,
{
    spec.check_params(params)?;
    let mut g = spec.zeros();
    let mut total = 0.0;
    let mut count = 0usize;
    for example in batch {
        spec.check_input(&example.x)?;
        spec.check_target(example.t)?;
        let cache = forward_unchecked(spec, params, &example.x);
        let out = cache.outputs();
        total += loss(spec, out, example.t)?;
        let deltas = backprop_deltas(spec, params, &cache, &loss_output_grad(out, example.t));
        accumulate_param_grad(&cache, &deltas, 1.0, &mut g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    let inv = 1.0 / count as f64;
    g.scale(inv);
    Ok((total * inv, g))
}

/// Applies the output-space loss Hessian `H_z` to `u`.
fn output_hessian_apply(task: Task, outputs: &[f64], u: &[f64]) -> Vec<f64> {
    match task {
        Task::Regression => u.to_vec(),
        Task::Classification => {
            let p = softmax(outputs);
            let pu = dot(&p, u);
            p.iter()
                .zip(u)
                .map(|(&pi, &ui)| pi * ui - pi * pu)
                .collect()
        }
    }
}

/// `(1/|batch|) Σ_i J_iᵀ H_{z,i} J_i v` over the given examples.
pub fn ggn_vec<'a, I>(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: I,
    v: &ParamVector,
) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a Example>,
{
    spec.check_params(params)?;
    spec.check_params(v)?;
    let mut out = spec.zeros();
    let mut count = 0usize;
    for example in batch {
        spec.check_input(&example.x)?;
        let cache = forward_unchecked(spec, params, &example.x);
        let jv = jvp(spec, params, &cache, v);
        let hjv = output_hessian_apply(spec.task, cache.outputs(), &jv);
        let deltas = backprop_deltas(spec, params, &cache, &hjv);
        accumulate_param_grad(&cache, &deltas, 1.0, &mut out);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty(
            "GGN-vector product over an empty batch".into(),
        ));
    }
    out.scale(1.0 / count as f64);
    if !out.is_finite() {
        return Err(Error::numeric("non-finite GGN-vector product"));
    }
    Ok(out)
}

/// Dense GGN over `examples`, assembled column by column from [`ggn_vec`].
pub fn dense_ggn(
    spec: &MlpSpec,
    params: &ParamVector,
    examples: &[Example],
) -> Result<DenseMatrix> {
    let d = spec.num_params();
    let mut g = DenseMatrix::zeros(d, d);
    for j in 0..d {
        let col = ggn_vec(
            spec,
            params,
            examples,
            &ParamVector::unit(spec.layout.clone(), j),
        )?;
        for (i, &x) in col.as_slice().iter().enumerate() {
            g[(i, j)] = x;
        }
    }
    Ok(g)
}

/// Draws a target from the model's own predictive distribution at `x`.
///
/// Classification samples a class from the softmax; regression samples
/// `Normal(output, 1)`.
pub fn sample_label<R: Rng + ?Sized>(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    rng: &mut R,
) -> Result<Target> {
    let (out, _) = forward(spec, params, x)?;
    Ok(sample_from_outputs(spec.task, &out, rng))
}

pub(crate) fn sample_from_outputs<R: Rng + ?Sized>(
    task: Task,
    outputs: &[f64],
    rng: &mut R,
) -> Target {
    match task {
        Task::Regression => {
            let normal = Normal::new(outputs[0], 1.0).expect("unit variance");
            Target::Value(normal.sample(rng))
        }
        Task::Classification => {
            let p = softmax(outputs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    return Target::Class(c);
                }
            }
            // u landed in the rounding slack above Σp; take the last class with mass
            Target::Class(p.iter().rposition(|&pc| pc > 0.0).unwrap_or(p.len() - 1))
        }
    }
}

/// Parameter-space gradient of `−log p(ŷ | x)` for a sampled label `ŷ`.
pub fn pseudo_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    sampled: Target,
) -> ParamVector {
    vjp(
        spec,
        params,
        cache,
        &loss_output_grad(cache.outputs(), sampled),
    )
}

/// Output-space seed of the pseudo-gradient, for per-layer statistics.
pub(crate) fn pseudo_output_grad(outputs: &[f64], sampled: Target) -> Vec<f64> {
    loss_output_grad(outputs, sampled)
}

/// Query measurement: absolute error for regression, negative correct-class
/// margin `−g_t + log Σ_{i≠t} exp g_i` for classification.
pub fn measurement(spec: &MlpSpec, params: &ParamVector, query: &Example) -> Result<f64> {
    spec.check_target(query.t)?;
    let (out, _) = forward(spec, params, &query.x)?;
    measurement_from_outputs(&out, query.t)
}

fn measurement_from_outputs(out: &[f64], target: Target) -> Result<f64> {
    match target {
        Target::Value(t) => Ok((out[0] - t).abs()),
        Target::Class(c) => {
            if out.len() < 2 {
                return Err(Error::invalid(
                    "margin measurement needs at least two classes",
                ));
            }
            let others = out
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .map(|(_, v)| v);
            Ok(-out[c] + log_sum_exp(others))
        }
    }
}

fn measurement_output_grad(out: &[f64], target: Target) -> Result<Vec<f64>> {
    match target {
        Target::Value(t) => {
            let r = out[0] - t;
            // sign(0) = 0 at the kink
            let s = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            Ok(vec![s])
        }
        Target::Class(c) => {
            if out.len() < 2 {
                return Err(Error::invalid(
                    "margin measurement needs at least two classes",
                ));
            }
            let max = out
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            let mut g: Vec<f64> = out
                .iter()
                .enumerate()
                .map(|(i, &v)| if i == c { 0.0 } else { (v - max).exp() })
                .collect();
            let total: f64 = g.iter().sum();
            g.iter_mut().for_each(|x| *x /= total);
            g[c] = -1.0;
            Ok(g)
        }
    }
}

pub fn measurement_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    query: &Example,
) -> Result<ParamVector> {
    spec.check_target(query.t)?;
    let (out, cache) = forward(spec, params, &query.x)?;
    let seed = measurement_output_grad(&out, query.t)?;
    let g = vjp(spec, params, &cache, &seed);
    if !g.is_finite() {
        return Err(Error::numeric("non-finite measurement gradient"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_params(spec: &MlpSpec, seed: u64, scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..spec.num_params())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        spec.params_from_vec(data).unwrap()
    }

    fn seeded_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    /// Central differences of `f` around `params`, step 1e-5.
    fn finite_difference(params: &ParamVector, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..params.len())
            .map(|i| {
                let mut plus = params.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_fd_match(analytic: &ParamVector, numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.as_slice().iter().zip(numeric).enumerate() {
            if a.abs() > 1e-8 || n.abs() > 1e-8 {
                let rel = (a - n).abs() / a.abs().max(n.abs());
                assert!(rel < 1e-5, "coord {i}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Task::Regression).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Task::Regression).is_err());
        assert!(MlpSpec::new(vec![3, 2], Task::Regression).is_err());
        let s = MlpSpec::new(vec![2, 8, 4, 1], Task::Regression).unwrap();
        assert_eq!(s.num_params(), 8 * 3 + 4 * 9 + 5);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 5, 2], Task::Classification).unwrap();
        let (out, cache) = forward(&spec, &spec.zeros(), &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(cache.inputs.len(), 2);
        assert_eq!(
            cache.inputs[1],
            vec![0.0; 5].into_iter().chain([1.0]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_affine_layer() {
        let spec = MlpSpec::new(vec![2, 2], Task::Classification).unwrap();
        let params = spec
            .params_from_vec(vec![1.0, 0.0, 0.5, 0.0, 1.0, -0.5])
            .unwrap();
        let (out, _) = forward(&spec, &params, &[3.0, -4.0]).unwrap();
        assert_eq!(out, vec![3.5, -4.5]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let spec = MlpSpec::new(vec![2, 3, 2], Task::Classification).unwrap();
        let p = seeded_params(&spec, 3, 1.0);
        let x = [0.7, -1.1];
        let w = p.as_slice();
        let mut h = [0.0; 3];
        for i in 0..3 {
            let s = w[i * 3] * x[0] + w[i * 3 + 1] * x[1] + w[i * 3 + 2];
            h[i] = if s > 0.0 { s } else { 0.0 };
        }
        let w2 = &w[9..];
        let mut expected = [0.0; 2];
        for i in 0..2 {
            expected[i] =
                w2[i * 4] * h[0] + w2[i * 4 + 1] * h[1] + w2[i * 4 + 2] * h[2] + w2[i * 4 + 3];
        }
        let (out, _) = forward(&spec, &p, &x).unwrap();
        for i in 0..2 {
            assert!((out[i] - expected[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_dimension_errors() {
        let spec = MlpSpec::new(vec![2, 1], Task::Regression).unwrap();
        assert!(matches!(
            forward(&spec, &spec.zeros(), &[1.0]),
            Err(Error::Dimension(_))
        ));
        let other = MlpSpec::new(vec![3, 1], Task::Regression).unwrap();
        assert!(matches!(
            forward(&spec, &other.zeros(), &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let reg = MlpSpec::new(vec![1, 1], Task::Regression).unwrap();
        assert_eq!(loss(&reg, &[2.5], Target::Value(2.5)).unwrap(), 0.0);
        let cls = MlpSpec::new(vec![1, 4], Task::Classification).unwrap();
        let l = loss(&cls, &[0.3; 4], Target::Class(2)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
        let two = MlpSpec::new(vec![1, 2], Task::Classification).unwrap();
        let l = loss(&two, &[2.0, 0.0], Target::Class(0)).unwrap();
        let e2 = 2f64.exp();
        assert!((l + (e2 / (e2 + 1.0)).ln()).abs() < 1e-14);
    }

    #[test]
    fn grad_vanishes_at_least_squares_minimum() {
        // single example, 1-layer: any w with w·[x;1] = t is a minimizer
        let spec = MlpSpec::new(vec![2, 1], Task::Regression).unwrap();
        let params = spec.params_from_vec(vec![1.0, 2.0, 0.5]).unwrap();
        let ex = Example::regression(vec![1.0, -1.0], 1.0 - 2.0 + 0.5);
        let g = grad(&spec, &params, &ex).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_matches_finite_differences() {
        for (seed, task) in [
            (1, Task::Regression),
            (2, Task::Classification),
            (3, Task::Regression),
        ] {
            let dims = match task {
                Task::Regression => vec![3, 5, 4, 1],
                Task::Classification => vec![3, 6, 3],
            };
            let spec = MlpSpec::new(dims, task).unwrap();
            let params = seeded_params(&spec, seed, 0.8);
            let x = seeded_input(3, seed + 100);
            let t = match task {
                Task::Regression => Target::Value(0.3),
                Task::Classification => Target::Class(1),
            };
            let ex = Example { x: x.clone(), t };
            let g = grad(&spec, &params, &ex).unwrap();
            let numeric = finite_difference(&params, |p| {
                let (o, _) = forward(&spec, p, &x).unwrap();
                loss(&spec, &o, t).unwrap()
            });
            assert_fd_match(&g, &numeric);
        }
    }

    #[test]
    fn dead_unit_has_zero_incoming_gradient() {
        let spec = MlpSpec::new(vec![2, 2, 1], Task::Regression).unwrap();
        // unit 0 of the hidden layer: weights (1,1), bias -10 -> dead for small x
        let params = spec
            .params_from_vec(vec![1.0, 1.0, -10.0, 0.5, -0.5, 0.1, 2.0, 3.0, 0.0])
            .unwrap();
        let ex = Example::regression(vec![0.2, 0.3], 5.0);
        let g = grad(&spec, &params, &ex).unwrap();
        assert_eq!(&g.layer(0)[0..3], &[0.0, 0.0, 0.0]);
        assert!(g.layer(0)[3..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ggn_zero_vector() {
        let spec = MlpSpec::new(vec![2, 3, 1], Task::Regression).unwrap();
        let p = seeded_params(&spec, 9, 1.0);
        let batch = vec![Example::regression(vec![0.1, 0.2], 0.0)];
        let out = ggn_vec(&spec, &p, &batch, &spec.zeros()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            ggn_vec(&spec, &p, &Vec::<Example>::new(), &spec.zeros()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn single_layer_ggn_is_input_outer_product() {
        let spec = MlpSpec::new(vec![3, 1], Task::Regression).unwrap();
        let params = seeded_params(&spec, 4, 1.0);
        let x = vec![0.5, -2.0, 1.5];
        let xb = [0.5, -2.0, 1.5, 1.0];
        let v = seeded_params(&spec, 5, 1.0);
        let out = ggn_vec(&spec, &params, &[Example::regression(x, 0.0)], &v).unwrap();
        let xv = dot(&xb, v.as_slice());
        for (o, x) in out.as_slice().iter().zip(xb) {
            assert!((o - x * xv).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_ggn_symmetric_psd_and_consistent() {
        let spec = MlpSpec::new(vec![2, 4, 1], Task::Regression).unwrap();
        let params = seeded_params(&spec, 6, 1.0);
        let data: Vec<Example> = (0..16)
            .map(|i| Example::regression(seeded_input(2, 200 + i), i as f64 * 0.1))
            .collect();
        let g = dense_ggn(&spec, &params, &data).unwrap();
        assert!(g.asymmetry() < 1e-12);
        let e = sym_eigh(&g).unwrap();
        assert!(e.values[0] >= -1e-9);
        let v = seeded_params(&spec, 7, 1.0);
        let direct = ggn_vec(&spec, &params, &data, &v).unwrap();
        let dense = g.matvec(v.as_slice()).unwrap();
        assert!(crate::linalg::relative_error(direct.as_slice(), &dense) < 1e-12);
    }

    #[test]
    fn classification_ggn_matches_explicit_jacobian_form() {
        // J built from finite differences of the outputs; H_z = diag(p) - ppᵀ
        let spec = MlpSpec::new(vec![2, 3, 3], Task::Classification).unwrap();
        let params = seeded_params(&spec, 8, 1.0);
        let x = seeded_input(2, 77);
        let d = spec.num_params();
        let h = 1e-6;
        let mut jac = DenseMatrix::zeros(3, d);
        for j in 0..d {
            let mut plus = params.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[j] -= h;
            let (op, _) = forward(&spec, &plus, &x).unwrap();
            let (om, _) = forward(&spec, &minus, &x).unwrap();
            for i in 0..3 {
                jac[(i, j)] = (op[i] - om[i]) / (2.0 * h);
            }
        }
        let (out, _) = forward(&spec, &params, &x).unwrap();
        let p = softmax(&out);
        let mut hz = DenseMatrix::from_diag(&p);
        hz.add_outer(-1.0, &p, &p);
        let v = seeded_params(&spec, 10, 1.0);
        let jv = jac.matvec(v.as_slice()).unwrap();
        let expected = jac.tr_matvec(&hz.matvec(&jv).unwrap()).unwrap();
        let got = ggn_vec(&spec, &params, &[Example::classification(x, 0)], &v).unwrap();
        assert!(crate::linalg::relative_error(got.as_slice(), &expected) < 1e-6);
    }

    #[test]
    fn sample_label_degenerate_softmax() {
        let spec = MlpSpec::new(vec![1, 3], Task::Classification).unwrap();
        let params = spec
            .params_from_vec(vec![0.0, 0.0, 0.0, 1e6, 0.0, 0.0])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000)
            .filter(|_| sample_label(&spec, &params, &[0.0], &mut rng).unwrap() == Target::Class(1))
            .count();
        assert!(hits as f64 / 1e4 >= 0.999);
    }

    #[test]
    fn sample_label_uniform_frequencies() {
        let spec = MlpSpec::new(vec![1, 4], Task::Classification).unwrap();
        let params = spec.zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            if let Target::Class(c) = sample_label(&spec, &params, &[0.3], &mut rng).unwrap() {
                counts[c] += 1;
            }
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!(
                (c as f64 / n as f64 - 0.25).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn sample_label_regression_mean() {
        let spec = MlpSpec::new(vec![1, 1], Task::Regression).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                sample_label(&spec, &spec.zeros(), &[1.0], &mut rng)
                    .unwrap()
                    .as_f64()
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn measurement_examples() {
        let reg = MlpSpec::new(vec![1, 1], Task::Regression).unwrap();
        let p = reg.params_from_vec(vec![2.0, 1.0]).unwrap();
        assert_eq!(
            measurement(&reg, &p, &Example::regression(vec![1.0], 3.0)).unwrap(),
            0.0
        );
        let g = measurement_grad(&reg, &p, &Example::regression(vec![1.0], 3.0)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        assert_eq!(
            measurement_from_outputs(&[0.0, 0.0], Target::Class(0)).unwrap(),
            0.0
        );
        let m = measurement_from_outputs(&[3.0, 1.0, 0.0], Target::Class(0)).unwrap();
        assert!((m - (-3.0 + (1f64.exp() + 1.0).ln())).abs() < 1e-14);

        let one = MlpSpec::new(vec![1, 1], Task::Classification).unwrap();
        assert!(measurement(&one, &one.zeros(), &Example::classification(vec![0.0], 0)).is_err());
    }

    #[test]
    fn measurement_grad_matches_finite_differences() {
        for seed in 0..3u64 {
            let spec = MlpSpec::new(vec![3, 4, 1], Task::Regression).unwrap();
            let params = seeded_params(&spec, 30 + seed, 1.0);
            let q = Example::regression(seeded_input(3, 40 + seed), 10.0);
            let g = measurement_grad(&spec, &params, &q).unwrap();
            let numeric = finite_difference(&params, |p| measurement(&spec, p, &q).unwrap());
            assert_fd_match(&g, &numeric);

            let spec = MlpSpec::new(vec![3, 4, 3], Task::Classification).unwrap();
            let params = seeded_params(&spec, 50 + seed, 1.0);
            let q = Example::classification(seeded_input(3, 60 + seed), 2);
            let g = measurement_grad(&spec, &params, &q).unwrap();
            let numeric = finite_difference(&params, |p| measurement(&spec, p, &q).unwrap());
            assert_fd_match(&g, &numeric);
        }
    }
}
