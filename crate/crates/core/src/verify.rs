//! Independent numerical oracles.
//!
//! Every oracle here is written against the plain definitions (dense one-hot
//! vectors, full double sums, all-pairs comparisons, central differences)
//! rather than the fast sparse code paths, so agreement between the two is
//! meaningful. [`selfcheck`] runs a small randomized suite of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::LrModel;
use crate::error::{Error, Result};
use crate::eval::{self, cross_entropy, ScoredSet};
use crate::fm::FmModel;
use crate::fnn::FnnModel;
use crate::net::{Activation, DenseLayer, DropoutMask, MlpStack};
use crate::schema::{FieldSchema, SparseInstance};
use crate::sigmoid;
use crate::snn::{Dae, SnnModel};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// A named tensor inside a [`FlatParams`] buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub layout: Vec<TensorSlot>,
}

impl FlatParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

/// Models whose parameters can be laid out in one flat buffer.
pub trait Flatten: Clone {
    /// Visits every parameter tensor in a fixed order.
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64]));

    fn flatten(&self) -> FlatParams {
        let mut copy = self.clone();
        let mut values = Vec::new();
        let mut layout = Vec::new();
        copy.visit_mut(&mut |name, t| {
            layout.push(TensorSlot {
                name,
                offset: values.len(),
                len: t.len(),
            });
            values.extend_from_slice(t);
        });
        FlatParams { values, layout }
    }

    /// A copy of `self` with parameters read from `flat`, which must share `self`'s layout.
    fn unflatten(&self, flat: &FlatParams) -> Result<Self> {
        let mut out = self.clone();
        let mut slots = flat.layout.iter();
        let mut error = None;
        out.visit_mut(&mut |name, t| {
            if error.is_some() {
                return;
            }
            match slots.next() {
                Some(s) if s.name == name && s.len == t.len() && s.offset + s.len <= flat.values.len() => {
                    t.copy_from_slice(&flat.values[s.offset..s.offset + s.len]);
                }
                _ => error = Some(Error::DimensionMismatch(format!("layout does not match tensor `{name}`"))),
            }
        });
        match error {
            Some(e) => Err(e),
            None if slots.next().is_some() => Err(Error::DimensionMismatch("layout has extra tensors".into())),
            None => Ok(out),
        }
    }

    /// Same shape, every parameter zero.
    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, t| t.fill(0.0));
        out
    }
}

impl Flatten for LrModel {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        f("bias".into(), std::slice::from_mut(&mut self.bias));
        f("w".into(), &mut self.w);
    }
}

impl Flatten for FmModel {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        f("w0".into(), std::slice::from_mut(&mut self.w0));
        f("w".into(), &mut self.w);
        for (i, v) in self.v.iter_mut().enumerate() {
            f(format!("v[{i}]"), v);
        }
    }
}

fn visit_stack(stack: &mut MlpStack, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
    for (l, layer) in stack.layers_mut().iter_mut().enumerate() {
        for (r, row) in layer.weights.iter_mut().enumerate() {
            f(format!("{prefix}layer{l}.weights[{r}]"), row);
        }
        f(format!("{prefix}layer{l}.bias"), &mut layer.bias);
    }
}

impl Flatten for MlpStack {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        visit_stack(self, "", f);
    }
}

impl Flatten for FnnModel {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        f("w0".into(), std::slice::from_mut(&mut self.w0));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (j, column) in block.iter_mut().enumerate() {
                f(format!("blocks[{i}][{j}]"), column);
            }
        }
        visit_stack(&mut self.upper, "upper.", f);
    }
}

impl Flatten for SnnModel {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        for (g, column) in self.w0.iter_mut().enumerate() {
            f(format!("w0[{g}]"), column);
        }
        f("b0".into(), &mut self.b0);
        visit_stack(&mut self.upper, "upper.", f);
    }
}

impl Flatten for Dae {
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        for (g, column) in self.weights.iter_mut().enumerate() {
            f(format!("weights[{g}]"), column);
        }
        f("hidden_bias".into(), &mut self.hidden_bias);
        f("visible_bias".into(), &mut self.visible_bias);
    }
}

/// Central differences `(L(θ + εe_k) - L(θ - εe_k)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut loss: F, params: &FlatParams, epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&FlatParams) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    if !loss(params)?.is_finite() {
        return Err(Error::NonFinite("loss at the base point"));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let x = params.values[k];
        probe.values[k] = x + epsilon;
        let up = loss(&probe)?;
        probe.values[k] = x - epsilon;
        let down = loss(&probe)?;
        probe.values[k] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("loss at a probe point"));
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// `||a - b|| / max(||a|| + ||b||, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    diff / scale.max(1e-300)
}

pub fn dense_input(dim: usize, instance: &SparseInstance) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for &g in &instance.active {
        x[g] = 1.0;
    }
    x
}

/// FM probability by the literal double sum over all `N` features.
pub fn fm_bruteforce_predict(model: &FmModel, instance: &SparseInstance) -> Result<f64> {
    let n = model.w.len();
    instance.check_bounds(n)?;
    let x = dense_input(n, instance);
    let mut logit = model.w0;
    for i in 0..n {
        logit += model.w[i] * x[i];
    }
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = model.v[i].iter().zip(&model.v[j]).map(|(a, b)| a * b).sum();
            logit += dot * x[i] * x[j];
        }
    }
    Ok(sigmoid(logit))
}

/// `(#{pos > neg} + #{pos = neg} / 2) / (P Q)` over all pairs.
pub fn auc_pairwise(scored: &ScoredSet) -> Result<f64> {
    let pairs: Vec<(f64, u8)> = scored.scores().iter().copied().zip(scored.labels().iter().copied()).collect();
    let (mut wins, mut count) = (0.0, 0usize);
    for &(p, lp) in &pairs {
        if lp != 1 {
            continue;
        }
        for &(q, lq) in &pairs {
            if lq != 0 {
                continue;
            }
            count += 1;
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    if count == 0 {
        return Err(Error::SingleClass);
    }
    Ok(wins / count as f64)
}

fn derivative(act: Activation, out: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - out * out,
        Activation::Sigmoid => out * (1.0 - out),
        Activation::Linear => 1.0,
    }
}

/// Layer activations of a stack computed with explicit index loops:
/// `acts[0]` is the (masked) input, `acts[l + 1]` the output of layer `l`,
/// `raw[l]` that output before dropout.
struct DenseTrace {
    acts: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

fn keep_factor(mask: Option<&[bool]>, i: usize, keep_prob: f64) -> f64 {
    match mask {
        Some(m) => {
            if m[i] {
                1.0
            } else {
                0.0
            }
        }
        None => keep_prob,
    }
}

fn dense_stack_trace(stack: &MlpStack, z: &[f64], mask: Option<&DropoutMask>) -> DenseTrace {
    let layers = stack.layers();
    let p = stack.keep_prob();
    let input_mask = mask.and_then(|m| m.input.as_deref());
    let mut input = z.to_vec();
    if input_mask.is_some() || (mask.is_none() && stack.input_dropout()) {
        for (i, v) in input.iter_mut().enumerate() {
            *v *= keep_factor(input_mask, i, p);
        }
    }
    let mut acts = vec![input];
    let mut raw = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let prev = &acts[l];
        let mut out = vec![0.0; layer.n_out()];
        for r in 0..layer.n_out() {
            let mut s = layer.bias[r];
            for c in 0..layer.n_in() {
                s += layer.weights[r][c] * prev[c];
            }
            out[r] = layer.activation.apply(s);
        }
        raw.push(out.clone());
        if l + 1 < layers.len() {
            let m = mask.map(|m| m.hidden[l].as_slice());
            for (i, v) in out.iter_mut().enumerate() {
                *v *= keep_factor(m, i, p);
            }
        }
        acts.push(out);
    }
    DenseTrace { acts, raw }
}

/// Naive backprop; returns per-layer `(dW, db)` and dL/d(stack input).
fn dense_stack_backward(
    stack: &MlpStack,
    trace: &DenseTrace,
    y: f64,
    mask: Option<&DropoutMask>,
) -> (Vec<(Vec<Vec<f64>>, Vec<f64>)>, Vec<f64>) {
    let layers = stack.layers();
    let p = stack.keep_prob();
    let n = layers.len();
    let mut grads = vec![(Vec::new(), Vec::new()); n];
    let mut delta = vec![trace.acts[n][0] - y];
    let mut back = Vec::new();
    for l in (0..n).rev() {
        let layer: &DenseLayer = &layers[l];
        let prev = &trace.acts[l];
        let mut gw = vec![vec![0.0; layer.n_in()]; layer.n_out()];
        for r in 0..layer.n_out() {
            for c in 0..layer.n_in() {
                gw[r][c] = delta[r] * prev[c];
            }
        }
        grads[l] = (gw, delta.clone());
        back = vec![0.0; layer.n_in()];
        for c in 0..layer.n_in() {
            for r in 0..layer.n_out() {
                back[c] += layer.weights[r][c] * delta[r];
            }
        }
        if l > 0 {
            let m = mask.map(|m| m.hidden[l - 1].as_slice());
            let below = layers[l - 1].activation;
            delta = (0..back.len())
                .map(|i| back[i] * keep_factor(m, i, p) * derivative(below, trace.raw[l - 1][i]))
                .collect();
        }
    }
    let input_mask = mask.and_then(|m| m.input.as_deref());
    if input_mask.is_some() || (mask.is_none() && stack.input_dropout()) {
        for (i, v) in back.iter_mut().enumerate() {
            *v *= keep_factor(input_mask, i, p);
        }
    }
    (grads, back)
}

fn dense_apply_stack(stack: &mut MlpStack, grads: &[(Vec<Vec<f64>>, Vec<f64>)], lr: f64, l2: f64) {
    for (layer, (gw, gb)) in stack.layers_mut().iter_mut().zip(grads) {
        for r in 0..layer.weights.len() {
            for c in 0..layer.weights[r].len() {
                layer.weights[r][c] -= lr * (gw[r][c] + l2 * layer.weights[r][c]);
            }
            layer.bias[r] -= lr * (gb[r] + l2 * layer.bias[r]);
        }
    }
}

/// Bottom weights of an FNN as one dense `J x N` matrix (row 0 is `w0`'s
/// constant input, which has no column weights).
fn fnn_dense_bottom(model: &FnnModel) -> Vec<Vec<f64>> {
    let k1 = model.k() + 1;
    let dim: usize = model.cardinalities().iter().sum();
    let mut w = vec![vec![0.0; dim]; FnnModel::embedding_width(model.n_fields(), model.k())];
    let mut start = 0;
    for (i, block) in model.blocks.iter().enumerate() {
        for (j, column) in block.iter().enumerate() {
            for (r, &v) in column.iter().enumerate() {
                w[1 + i * k1 + r][start + j] = v;
            }
        }
        start += block.len();
    }
    w
}

fn fnn_dense_embed(model: &FnnModel, x: &[f64]) -> Vec<f64> {
    let w = fnn_dense_bottom(model);
    let mut z: Vec<f64> = w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    z[0] = model.w0;
    z
}

fn check_field_layout(model: &FnnModel, instance: &SparseInstance) -> Result<usize> {
    let dim: usize = model.cardinalities().iter().sum();
    instance.check_bounds(dim)?;
    let mut start = 0;
    if instance.active.len() != model.n_fields() {
        return Err(Error::DimensionMismatch("one active feature per field expected".into()));
    }
    for (block, &g) in model.blocks.iter().zip(&instance.active) {
        if g < start || g >= start + block.len() {
            return Err(Error::DimensionMismatch(format!("feature {g} outside its field")));
        }
        start += block.len();
    }
    Ok(dim)
}

/// FNN output computed by materialising the dense input and bottom matrix.
pub fn fnn_dense_forward(model: &FnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<f64> {
    let dim = check_field_layout(model, instance)?;
    let z = fnn_dense_embed(model, &dense_input(dim, instance));
    Ok(dense_stack_trace(&model.upper, &z, mask).acts.last().expect("output")[0])
}

/// One dense SGD step on an FNN: every bottom column receives `dL/dz * x_g`
/// and columns with `x_g = 1` are shrunk by L2. Returns the updated copy.
pub fn fnn_dense_update(
    model: &FnnModel,
    instance: &SparseInstance,
    learning_rate: f64,
    l2_lambda: f64,
    mask: Option<&DropoutMask>,
) -> Result<FnnModel> {
    let dim = check_field_layout(model, instance)?;
    let x = dense_input(dim, instance);
    let z = fnn_dense_embed(model, &x);
    let trace = dense_stack_trace(&model.upper, &z, mask);
    let (grads, dz) = dense_stack_backward(&model.upper, &trace, instance.y(), mask);
    let mut out = model.clone();
    dense_apply_stack(&mut out.upper, &grads, learning_rate, l2_lambda);
    out.w0 -= learning_rate * dz[0];
    let k1 = model.k() + 1;
    let mut start = 0;
    for (i, block) in out.blocks.iter_mut().enumerate() {
        for (j, column) in block.iter_mut().enumerate() {
            let xg = x[start + j];
            for (r, v) in column.iter_mut().enumerate() {
                *v -= learning_rate * (dz[1 + i * k1 + r] * xg + l2_lambda * xg * *v);
            }
        }
        start += block.len();
    }
    Ok(out)
}

fn snn_dense_embed(model: &SnnModel, x: &[f64]) -> Vec<f64> {
    (0..model.b0.len())
        .map(|j| {
            let mut s = model.b0[j];
            for (g, column) in model.w0.iter().enumerate() {
                s += column[j] * x[g];
            }
            sigmoid(s)
        })
        .collect()
}

/// SNN output with the bottom layer evaluated over all `N` inputs.
pub fn snn_dense_forward(model: &SnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<f64> {
    instance.check_bounds(model.w0.len())?;
    let z = snn_dense_embed(model, &dense_input(model.w0.len(), instance));
    Ok(dense_stack_trace(&model.upper, &z, mask).acts.last().expect("output")[0])
}

/// One dense SGD step on an SNN; the dense analogue of its sparse fine-tuning step.
pub fn snn_dense_update(
    model: &SnnModel,
    instance: &SparseInstance,
    learning_rate: f64,
    l2_lambda: f64,
    mask: Option<&DropoutMask>,
) -> Result<SnnModel> {
    instance.check_bounds(model.w0.len())?;
    let x = dense_input(model.w0.len(), instance);
    let z = snn_dense_embed(model, &x);
    let trace = dense_stack_trace(&model.upper, &z, mask);
    let (grads, dz) = dense_stack_backward(&model.upper, &trace, instance.y(), mask);
    let d_pre: Vec<f64> = dz.iter().zip(&z).map(|(d, z)| d * z * (1.0 - z)).collect();
    let mut out = model.clone();
    dense_apply_stack(&mut out.upper, &grads, learning_rate, l2_lambda);
    for (b, d) in out.b0.iter_mut().zip(&d_pre) {
        *b -= learning_rate * d;
    }
    for (g, column) in out.w0.iter_mut().enumerate() {
        for (v, d) in column.iter_mut().zip(&d_pre) {
            *v -= learning_rate * (d * x[g] + l2_lambda * x[g] * *v);
        }
    }
    Ok(out)
}

/// Analytic gradients laid out like [`Flatten::flatten`].
pub fn lr_gradient_flat(model: &LrModel, instance: &SparseInstance) -> Result<Vec<f64>> {
    let (_, g) = model.gradient(instance)?;
    let mut out = model.zeroed();
    out.bias = g;
    for &i in &instance.active {
        out.w[i] += g;
    }
    Ok(out.flatten().values)
}

pub fn fm_gradient_flat(model: &FmModel, instance: &SparseInstance) -> Result<Vec<f64>> {
    let (_, grad) = model.gradient(instance)?;
    let mut out = model.zeroed();
    out.w0 = grad.w0;
    for (i, dw, dv) in grad.features {
        out.w[i] = dw;
        out.v[i] = dv;
    }
    Ok(out.flatten().values)
}

fn write_stack_grad(stack: &mut MlpStack, grads: &crate::net::StackGradients) {
    for (layer, g) in stack.layers_mut().iter_mut().zip(&grads.layers) {
        layer.weights.clone_from(&g.weights);
        layer.bias.clone_from(&g.bias);
    }
}

pub fn fnn_gradient_flat(model: &FnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    let (_, grad) = model.gradient(instance, mask)?;
    let mut out = model.zeroed();
    out.w0 = grad.w0;
    for (i, j, d) in &grad.columns {
        out.blocks[*i][*j].clone_from(d);
    }
    write_stack_grad(&mut out.upper, &grad.upper);
    Ok(out.flatten().values)
}

pub fn snn_gradient_flat(model: &SnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    let (_, grad) = model.gradient(instance, mask)?;
    let mut out = model.zeroed();
    out.b0.clone_from(&grad.bottom);
    for &g in &grad.active {
        out.w0[g].clone_from(&grad.bottom);
    }
    write_stack_grad(&mut out.upper, &grad.upper);
    Ok(out.flatten().values)
}

pub fn dae_gradient_flat(dae: &Dae, units: &[(usize, f64)], corrupted: &[f64]) -> Vec<f64> {
    let (_, grad) = dae.gradient(units, corrupted);
    let mut out = dae.zeroed();
    out.hidden_bias = grad.hidden_bias;
    for ((&(g, _), dw), dc) in units.iter().zip(grad.weights).zip(grad.visible_bias) {
        out.weights[g] = dw;
        out.visible_bias[g] = dc;
    }
    out.flatten().values
}

/// Random fixtures for the oracle suites.
pub mod fixtures {
    use super::*;

    /// 1..=`max_fields` fields with 1..=`max_values` known values each (plus OOV).
    pub fn schema<R: Rng + ?Sized>(rng: &mut R, max_fields: usize, max_values: usize) -> FieldSchema {
        let n = rng.random_range(1..=max_fields);
        FieldSchema::build((0..n).map(|i| {
            let c = rng.random_range(1..=max_values);
            (format!("f{i}"), (0..c).map(|v| format!("v{v}")).collect::<Vec<_>>())
        }))
        .expect("generated schema is valid")
    }

    /// One uniformly drawn slot (OOV included) per field and a random label.
    pub fn instance<R: Rng + ?Sized>(rng: &mut R, schema: &FieldSchema) -> SparseInstance {
        let active = (0..schema.n_fields())
            .map(|f| {
                let (s, e) = schema.range(f);
                rng.random_range(s..=e)
            })
            .collect();
        SparseInstance::new(active, rng.random_range(0..=1))
    }

    fn fill<R: Rng + ?Sized>(t: &mut [f64], scale: f64, rng: &mut R) {
        for v in t {
            *v = rng.random_range(-scale..scale);
        }
    }

    pub fn randomize<M: Flatten, R: Rng + ?Sized>(model: &mut M, scale: f64, rng: &mut R) {
        model.visit_mut(&mut |_, t| fill(t, scale, rng));
    }

    pub fn activation<R: Rng + ?Sized>(rng: &mut R) -> Activation {
        [Activation::Tanh, Activation::Sigmoid, Activation::Linear][rng.random_range(0..3)]
    }

    pub fn hidden<R: Rng + ?Sized>(rng: &mut R, max_layers: usize, max_width: usize) -> Vec<usize> {
        (0..rng.random_range(1..=max_layers))
            .map(|_| rng.random_range(1..=max_width))
            .collect()
    }

    pub fn stack<R: Rng + ?Sized>(rng: &mut R, n_input: usize, keep_prob: f64) -> MlpStack {
        let hidden = hidden(rng, 2, 5);
        let input_dropout = rng.random_bool(0.3);
        let mut s = MlpStack::build(n_input, &hidden, activation(rng), keep_prob, input_dropout, rng)
            .expect("valid stack");
        randomize(&mut s, 1.0, rng);
        s
    }

    pub fn lr<R: Rng + ?Sized>(rng: &mut R, schema: &FieldSchema) -> LrModel {
        let mut m = LrModel::zeros(schema.dim());
        randomize(&mut m, 1.0, rng);
        m
    }

    pub fn fm<R: Rng + ?Sized>(rng: &mut R, schema: &FieldSchema, max_k: usize) -> FmModel {
        let mut m = FmModel::zeros(schema.dim(), rng.random_range(1..=max_k));
        randomize(&mut m, 1.0, rng);
        m
    }

    pub fn fnn<R: Rng + ?Sized>(rng: &mut R, schema: &FieldSchema, max_k: usize) -> FnnModel {
        let fm = fm(rng, schema, max_k);
        let keep = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.3..1.0) };
        let upper = stack(rng, FnnModel::embedding_width(schema.n_fields(), fm.k()), keep);
        FnnModel::from_fm(&fm, schema, upper).expect("matching shapes")
    }

    pub fn snn<R: Rng + ?Sized>(rng: &mut R, schema: &FieldSchema, max_bottom: usize) -> SnnModel {
        let m0 = rng.random_range(1..=max_bottom);
        let keep = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.3..1.0) };
        let upper = stack(rng, m0, keep);
        let mut m = SnnModel::new(vec![vec![0.0; m0]; schema.dim()], vec![0.0; m0], upper).expect("matching shapes");
        for column in &mut m.w0 {
            fill(column, 1.0, rng);
        }
        fill(&mut m.b0, 1.0, rng);
        m
    }

    pub fn dae<R: Rng + ?Sized>(rng: &mut R, n_visible: usize, max_hidden: usize) -> Dae {
        let mut d = Dae::uniform(n_visible, rng.random_range(1..=max_hidden), 1.0, rng);
        fill(&mut d.hidden_bias, 1.0, rng);
        fill(&mut d.visible_bias, 1.0, rng);
        d
    }

    /// A random subset of visible units with binary targets.
    pub fn units<R: Rng + ?Sized>(rng: &mut R, n_visible: usize) -> Vec<(usize, f64)> {
        let k = rng.random_range(1..=n_visible);
        rand::seq::index::sample(rng, n_visible, k)
            .into_iter()
            .map(|g| (g, if rng.random_bool(0.5) { 1.0 } else { 0.0 }))
            .collect()
    }

    /// A training mask half of the time, the inference path otherwise.
    pub fn mask<R: Rng + ?Sized>(rng: &mut R, stack: &MlpStack) -> Option<DropoutMask> {
        rng.random_bool(0.5).then(|| stack.sample_mask(rng).expect("valid keep probability"))
    }
}

/// Worst relative error between analytic and finite-difference gradients
/// over `trials` random small models of each kind.
pub mod gradient_checks {
    use super::*;

    fn check<M: Flatten>(
        model: &M,
        loss: impl Fn(&M) -> Result<f64>,
        analytic: Vec<f64>,
    ) -> Result<f64> {
        let flat = model.flatten();
        let numeric = finite_diff_grad(|p| loss(&model.unflatten(p)?), &flat, DEFAULT_EPSILON)?;
        Ok(relative_error(&analytic, &numeric))
    }

    pub fn lr(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::lr(rng, &schema);
            let inst = fixtures::instance(rng, &schema);
            let loss = |m: &LrModel| Ok(cross_entropy(inst.y(), m.predict(&inst)?));
            worst = worst.max(check(&model, loss, lr_gradient_flat(&model, &inst)?)?);
        }
        Ok(worst)
    }

    pub fn fm(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::fm(rng, &schema, 3);
            let inst = fixtures::instance(rng, &schema);
            let loss = |m: &FmModel| Ok(cross_entropy(inst.y(), m.predict(&inst)?));
            worst = worst.max(check(&model, loss, fm_gradient_flat(&model, &inst)?)?);
        }
        Ok(worst)
    }

    pub fn fnn(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::fnn(rng, &schema, 3);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let loss = |m: &FnnModel| Ok(cross_entropy(inst.y(), m.forward(&inst, mask.as_ref())?.y_hat()));
            worst = worst.max(check(&model, loss, fnn_gradient_flat(&model, &inst, mask.as_ref())?)?);
        }
        Ok(worst)
    }

    pub fn snn(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::snn(rng, &schema, 5);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let loss = |m: &SnnModel| Ok(cross_entropy(inst.y(), m.forward(&inst, mask.as_ref())?.y_hat()));
            worst = worst.max(check(&model, loss, snn_gradient_flat(&model, &inst, mask.as_ref())?)?);
        }
        Ok(worst)
    }

    pub fn dae(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let n_visible = rng.random_range(1..=15);
            let dae = fixtures::dae(rng, n_visible, 5);
            let units = fixtures::units(rng, n_visible);
            let corrupted = Dae::corrupt(&units, 0.3, rng);
            let loss = |d: &Dae| Ok(d.loss(&units, &corrupted));
            worst = worst.max(check(&dae, loss, dae_gradient_flat(&dae, &units, &corrupted))?);
        }
        Ok(worst)
    }
}

/// Largest absolute difference over two equally shaped models.
pub fn max_abs_diff<M: Flatten>(a: &M, b: &M) -> f64 {
    let (a, b) = (a.flatten(), b.flatten());
    if a.layout != b.layout {
        return f64::INFINITY;
    }
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute disagreement between fast and oracle paths over random trials.
pub mod equivalence_checks {
    use super::*;

    pub fn fm(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::fm(rng, &schema, 3);
            let inst = fixtures::instance(rng, &schema);
            worst = worst.max((model.predict(&inst)? - fm_bruteforce_predict(&model, &inst)?).abs());
        }
        Ok(worst)
    }

    pub fn auc(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let n = rng.random_range(2..=40);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
            labels[0] = 0;
            labels[1] = 1;
            // A coarse score grid forces plenty of ties.
            let levels = rng.random_range(1..=10);
            let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let set = ScoredSet::new(scores, labels)?;
            worst = worst.max((eval::auc(&set)? - auc_pairwise(&set)?).abs());
        }
        Ok(worst)
    }

    pub fn fnn_forward(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::fnn(rng, &schema, 3);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let fast = model.forward(&inst, mask.as_ref())?.y_hat();
            worst = worst.max((fast - fnn_dense_forward(&model, &inst, mask.as_ref())?).abs());
        }
        Ok(worst)
    }

    pub fn snn_forward(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::snn(rng, &schema, 5);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let fast = model.forward(&inst, mask.as_ref())?.y_hat();
            worst = worst.max((fast - snn_dense_forward(&model, &inst, mask.as_ref())?).abs());
        }
        Ok(worst)
    }

    /// Sparse and dense FNN steps; also counts inactive bottom columns that
    /// moved when `l2_lambda = 0` (must be zero).
    pub fn fnn_update(rng: &mut ChaCha8Rng, trials: usize) -> Result<(f64, usize)> {
        let mut worst: f64 = 0.0;
        let mut moved = 0;
        for t in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::fnn(rng, &schema, 3);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let l2 = if t % 2 == 0 { 0.0 } else { rng.random_range(0.0..0.1) };
            let lr = rng.random_range(0.01..0.5);
            let mut sparse = model.clone();
            let fwd = sparse.forward(&inst, mask.as_ref())?;
            crate::fnn::fnn_sparse_update(&mut sparse, &inst, &fwd, lr, l2, mask.as_ref())?;
            let dense = fnn_dense_update(&model, &inst, lr, l2, mask.as_ref())?;
            worst = worst.max(max_abs_diff(&sparse, &dense));
            if l2 == 0.0 {
                let mut start = 0;
                for (i, block) in model.blocks.iter().enumerate() {
                    for (j, column) in block.iter().enumerate() {
                        let active = inst.active[i] == start + j;
                        if !active && sparse.blocks[i][j] != *column {
                            moved += 1;
                        }
                    }
                    start += block.len();
                }
            }
        }
        Ok((worst, moved))
    }

    pub fn snn_update(rng: &mut ChaCha8Rng, trials: usize) -> Result<(f64, usize)> {
        let mut worst: f64 = 0.0;
        let mut moved = 0;
        for t in 0..trials {
            let schema = fixtures::schema(rng, 3, 4);
            let model = fixtures::snn(rng, &schema, 5);
            let inst = fixtures::instance(rng, &schema);
            let mask = fixtures::mask(rng, &model.upper);
            let l2 = if t % 2 == 0 { 0.0 } else { rng.random_range(0.0..0.1) };
            let lr = rng.random_range(0.01..0.5);
            let mut sparse = model.clone();
            sparse.fine_tune_step(&inst, lr, l2, mask.as_ref())?;
            let dense = snn_dense_update(&model, &inst, lr, l2, mask.as_ref())?;
            worst = worst.max(max_abs_diff(&sparse, &dense));
            if l2 == 0.0 {
                moved += (0..model.w0.len())
                    .filter(|g| !inst.active.contains(g) && sparse.w0[*g] != model.w0[*g])
                    .count();
            }
        }
        Ok((worst, moved))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

/// Runs every oracle suite at reduced trial counts with a fixed seed.
pub fn selfcheck() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = Vec::new();
    let mut push = |name, value: Result<f64>, tol: f64| {
        let (passed, detail) = match value {
            Ok(v) => (v < tol, format!("worst {v:.3e} (tolerance {tol:.0e})")),
            Err(e) => (false, e.to_string()),
        };
        out.push(CheckResult { name, passed, detail });
    };
    push("lr gradient", gradient_checks::lr(&mut rng, 20), GRADIENT_TOLERANCE);
    push("fm gradient", gradient_checks::fm(&mut rng, 20), GRADIENT_TOLERANCE);
    push("fnn gradient", gradient_checks::fnn(&mut rng, 20), GRADIENT_TOLERANCE);
    push("snn gradient", gradient_checks::snn(&mut rng, 20), GRADIENT_TOLERANCE);
    push("dae gradient", gradient_checks::dae(&mut rng, 20), GRADIENT_TOLERANCE);
    push("fm brute force", equivalence_checks::fm(&mut rng, 200), EQUIVALENCE_TOLERANCE);
    push("auc pairwise", equivalence_checks::auc(&mut rng, 200), EQUIVALENCE_TOLERANCE);
    push("fnn dense forward", equivalence_checks::fnn_forward(&mut rng, 200), EQUIVALENCE_TOLERANCE);
    push("snn dense forward", equivalence_checks::snn_forward(&mut rng, 200), EQUIVALENCE_TOLERANCE);
    let update = |r: Result<(f64, usize)>| {
        r.and_then(|(w, moved)| {
            if moved == 0 {
                Ok(w)
            } else {
                Err(Error::DimensionMismatch(format!("{moved} inactive columns changed")))
            }
        })
    };
    push("fnn sparse update", update(equivalence_checks::fnn_update(&mut rng, 100)), EQUIVALENCE_TOLERANCE);
    push("snn sparse update", update(equivalence_checks::snn_update(&mut rng, 100)), EQUIVALENCE_TOLERANCE);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let p = FlatParams {
            values: vec![3.0],
            layout: vec![TensorSlot {
                name: "x".into(),
                offset: 0,
                len: 1,
            }],
        };
        let g = finite_diff_grad(|p| Ok(0.5 * p.values[0] * p.values[0]), &p, DEFAULT_EPSILON).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-9);
        let g = finite_diff_grad(|_| Ok(2.0), &p, DEFAULT_EPSILON).unwrap();
        assert_eq!(g, vec![0.0]);
        assert!(finite_diff_grad(|p| Ok(1.0 / (p.values[0] - 3.0)), &p, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let schema = fixtures::schema(&mut rng, 3, 4);
        let fnn = fixtures::fnn(&mut rng, &schema, 3);
        let flat = fnn.flatten();
        assert_eq!(fnn.unflatten(&flat).unwrap(), fnn);
        let snn = fixtures::snn(&mut rng, &schema, 4);
        assert_eq!(snn.unflatten(&snn.flatten()).unwrap(), snn);
        assert!(snn.unflatten(&fnn.flatten()).is_err());
    }

    #[test]
    fn brute_force_fm_basics() {
        let m = FmModel::zeros(5, 2);
        assert_eq!(fm_bruteforce_predict(&m, &SparseInstance::new(vec![0, 3], 1)).unwrap(), 0.5);
        let mut m = FmModel::zeros(5, 2);
        m.w0 = 0.2;
        m.w[3] = -0.7;
        m.v[3] = vec![4.0, 5.0];
        let p = fm_bruteforce_predict(&m, &SparseInstance::new(vec![3], 0)).unwrap();
        assert_eq!(p, sigmoid(0.2 - 0.7));
    }

    #[test]
    fn pairwise_auc_extremes() {
        let s = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auc_pairwise(&s).unwrap(), 1.0);
        let s = ScoredSet::new(vec![0.9, 0.8, 0.2, 0.1], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auc_pairwise(&s).unwrap(), 0.0);
        let s = ScoredSet::new(vec![0.5, 0.6], vec![1, 1]).unwrap();
        assert!(matches!(auc_pairwise(&s), Err(Error::SingleClass)));
    }

    #[test]
    fn selfcheck_passes() {
        for r in selfcheck() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
