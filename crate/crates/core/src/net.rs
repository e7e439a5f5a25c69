//! Dense network core shared by the FM-initialised and sampling-pretrained models.
//!
//! Dropout convention: during training hidden activations are multiplied by a
//! 0/1 mask with no rescaling; at inference they are multiplied by the keep
//! probability `p` instead. A stack trained without dropout has `p = 1`, which
//! makes the inference path and the unmasked training path identical.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmoid;

pub use crate::eval::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative written in terms of the activation's output.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Linear => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected layer; `weights[o][i]` links input `i` to output `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: vec![vec![0.0; n_in]; n_out],
            bias: vec![0.0; n_out],
            activation,
        }
    }

    /// Weights and biases uniform in `[-1/sqrt(n_in), 1/sqrt(n_in)]`.
    pub fn uniform<R: Rng + ?Sized>(n_in: usize, n_out: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weights = (0..n_out).map(|_| (0..n_in).map(|_| draw()).collect()).collect();
        let bias = (0..n_out).map(|_| draw()).collect();
        DenseLayer {
            weights,
            bias,
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn n_out(&self) -> usize {
        self.bias.len()
    }

    fn activate(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| {
                let pre = row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x);
                self.activation.apply(pre)
            })
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.bias.iter().chain(self.weights.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Per-unit keep flags for the stack's hidden layers (and optionally its input).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    pub hidden: Vec<Vec<bool>>,
    pub input: Option<Vec<bool>>,
}

/// Draws an independent Bernoulli(`keep_prob`) flag per unit.
pub fn make_dropout_mask<R: Rng + ?Sized>(
    hidden_sizes: &[usize],
    input_size: Option<usize>,
    keep_prob: f64,
    rng: &mut R,
) -> Result<DropoutMask> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::config(format!("keep probability {keep_prob} not in (0, 1]")));
    }
    let mut draw = |n: usize| -> Vec<bool> { (0..n).map(|_| rng.random::<f64>() < keep_prob).collect() };
    let input = input_size.map(&mut draw);
    let hidden = hidden_sizes.iter().map(|&n| draw(n)).collect();
    Ok(DropoutMask {
        keep_prob,
        hidden,
        input,
    })
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub y_hat: f64,
    /// Stack input after input dropout / scaling.
    pub input: Vec<f64>,
    /// Activation of every layer before masking.
    pub raw: Vec<Vec<f64>>,
    /// Activation of every layer as seen by the next layer.
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGradients {
    pub layers: Vec<LayerGradient>,
    /// dL/d(stack input), before any input dropout.
    pub input: Vec<f64>,
}

/// Hidden layers followed by a single sigmoid output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpStack {
    layers: Vec<DenseLayer>,
    keep_prob: f64,
    input_dropout: bool,
}

impl MlpStack {
    pub fn new(layers: Vec<DenseLayer>, keep_prob: f64, input_dropout: bool) -> Result<Self> {
        let stack = MlpStack {
            layers,
            keep_prob,
            input_dropout,
        };
        stack.check()?;
        Ok(stack)
    }

    /// Randomly initialised stack `n_input -> hidden... -> 1`.
    pub fn build<R: Rng + ?Sized>(
        n_input: usize,
        hidden: &[usize],
        activation: Activation,
        keep_prob: f64,
        input_dropout: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = Self::shapes(n_input, hidden)
            .map(|(n_in, n_out, last)| {
                let act = if last { Activation::Sigmoid } else { activation };
                DenseLayer::uniform(n_in, n_out, act, rng)
            })
            .collect();
        Self::new(layers, keep_prob, input_dropout)
    }

    pub fn zeros(n_input: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let layers = Self::shapes(n_input, hidden)
            .map(|(n_in, n_out, last)| {
                DenseLayer::zeros(n_in, n_out, if last { Activation::Sigmoid } else { activation })
            })
            .collect();
        Self::new(layers, 1.0, false)
    }

    fn shapes(n_input: usize, hidden: &[usize]) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let n = hidden.len();
        (0..=n).map(move |l| {
            let n_in = if l == 0 { n_input } else { hidden[l - 1] };
            let n_out = if l == n { 1 } else { hidden[l] };
            (n_in, n_out, l == n)
        })
    }

    pub(crate) fn check(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::DimensionMismatch("stack has no layers".into()))?;
        if last.n_out() != 1 || last.activation != Activation::Sigmoid {
            return Err(Error::DimensionMismatch(
                "stack must end in one sigmoid output unit".into(),
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.bias.len() || layer.weights.iter().any(|r| r.len() != layer.n_in()) {
                return Err(Error::DimensionMismatch(format!("layer {l} is ragged")));
            }
            if l > 0 && layer.n_in() != self.layers[l - 1].n_out() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l} expects {} inputs, previous layer has {} outputs",
                    layer.n_in(),
                    self.layers[l - 1].n_out()
                )));
            }
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::config(format!("keep probability {} not in (0, 1]", self.keep_prob)));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(DenseLayer::n_out).collect()
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn input_dropout(&self) -> bool {
        self.input_dropout
    }

    /// Draws a training mask shaped for this stack.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DropoutMask> {
        let input = self.input_dropout.then(|| self.input_size());
        make_dropout_mask(&self.hidden_sizes(), input, self.keep_prob, rng)
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        let sizes = self.hidden_sizes();
        let ok = mask.hidden.len() == sizes.len()
            && mask.hidden.iter().zip(&sizes).all(|(m, &s)| m.len() == s)
            && mask.input.as_ref().is_none_or(|m| m.len() == self.input_size());
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("dropout mask does not match stack".into()))
        }
    }

    /// Forward pass. With a mask this is the training path; without one,
    /// hidden activations are scaled by the stack's keep probability.
    pub fn forward(&self, z: &[f64], mask: Option<&DropoutMask>) -> Result<Forward> {
        if z.len() != self.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "stack expects {} inputs, got {}",
                self.input_size(),
                z.len()
            )));
        }
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let input: Vec<f64> = match (mask.and_then(|m| m.input.as_ref()), self.input_dropout) {
            (Some(keep), _) => z.iter().zip(keep).map(|(v, &k)| if k { *v } else { 0.0 }).collect(),
            (None, true) if mask.is_none() => z.iter().map(|v| v * self.keep_prob).collect(),
            _ => z.to_vec(),
        };
        let hidden = self.layers.len() - 1;
        let mut raw = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { &input } else { &outputs[l - 1] };
            let act = layer.activate(prev);
            let out = if l < hidden {
                match mask {
                    Some(m) => act.iter().zip(&m.hidden[l]).map(|(a, &k)| if k { *a } else { 0.0 }).collect(),
                    None => act.iter().map(|a| a * self.keep_prob).collect(),
                }
            } else {
                act.clone()
            };
            raw.push(act);
            outputs.push(out);
        }
        Ok(Forward {
            y_hat: outputs[hidden][0],
            input,
            raw,
            outputs,
        })
    }

    /// Exact gradients of `cross_entropy(y, y_hat)` for the forward pass `fwd`,
    /// which must have been produced with the same `mask`.
    pub fn backward(&self, fwd: &Forward, y: f64, mask: Option<&DropoutMask>) -> Result<StackGradients> {
        if fwd.raw.len() != self.layers.len() {
            return Err(Error::DimensionMismatch("forward cache does not match stack".into()));
        }
                let mut grads: Vec<LayerGradient> = Vec::with_capacity(self.layers.len());
        // sigmoid output with cross-entropy: dL/d(pre-activation) = y_hat - y
        let mut delta = vec![fwd.y_hat - y];
        let mut d_input = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let prev = if l == 0 { &fwd.input } else { &fwd.outputs[l - 1] };
            let weights = delta
                .iter()
                .map(|d| prev.iter().map(|x| d * x).collect())
                .collect();
            grads.push(LayerGradient {
                weights,
                bias: delta.clone(),
            });
            let mut d_prev = vec![0.0; layer.n_in()];
            for (row, d) in layer.weights.iter().zip(&delta) {
                for (acc, w) in d_prev.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            if l == 0 {
                d_input = d_prev;
            } else {
                let below = &self.layers[l - 1];
                let gate = |i: usize| match mask {
                    Some(m) => {
                        if m.hidden[l - 1][i] {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    None => self.keep_prob,
                };
                delta = d_prev
                    .iter()
                    .enumerate()
                    .map(|(i, d)| d * gate(i) * below.activation.derivative_from_output(fwd.raw[l - 1][i]))
                    .collect();
            }
        }
        grads.reverse();
        let input = match (mask.and_then(|m| m.input.as_ref()), self.input_dropout) {
            (Some(keep), _) => d_input.iter().zip(keep).map(|(d, &k)| if k { *d } else { 0.0 }).collect(),
            (None, true) if mask.is_none() => d_input.iter().map(|d| d * self.keep_prob).collect(),
            _ => d_input,
        };
        Ok(StackGradients { layers: grads, input })
    }

    /// SGD with L2 on every weight and bias.
    pub fn apply_gradients(&mut self, grads: &StackGradients, learning_rate: f64, l2_lambda: f64) -> Result<()> {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (row, grow) in layer.weights.iter_mut().zip(&g.weights) {
                sgd_step(row, grow, learning_rate, l2_lambda)?;
            }
            sgd_step(&mut layer.bias, &g.bias, learning_rate, l2_lambda)?;
        }
        Ok(())
    }

    /// Sum of squares of all weights and biases.
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| sum_squares(l.weights.iter().flatten()) + sum_squares(&l.bias))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }
}

pub(crate) fn sum_squares<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().map(|v| v * v).sum()
}

/// `theta <- theta - learning_rate * (grad + l2_lambda * theta)`, elementwise.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64, l2_lambda: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let next = *p - learning_rate * (g + l2_lambda * *p);
        if !next.is_finite() {
            return Err(Error::NonFinite("parameter update"));
        }
        *p = next;
    }
    Ok(())
}

/// Bernoulli-Bernoulli RBM; `weights[v][h]` links visible `v` to hidden `h`.
///
/// Visible-major storage lets a step touch only a subset of visible units,
/// which is what field-wise negative sampling needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rbm {
    pub weights: Vec<Vec<f64>>,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl Rbm {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Rbm {
            weights: vec![vec![0.0; n_hidden]; n_visible],
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn uniform<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut rbm = Self::zeros(n_visible, n_hidden);
        for w in rbm.weights.iter_mut().flatten() {
            *w = rng.random_range(-scale..=scale);
        }
        rbm
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    /// `sigmoid(W v + b_h)` over the given `(visible index, value)` units only.
    pub fn hidden_probs(&self, units: &[(usize, f64)]) -> Vec<f64> {
        let mut pre = self.hidden_bias.clone();
        for &(v, x) in units {
            if x != 0.0 {
                for (p, w) in pre.iter_mut().zip(&self.weights[v]) {
                    *p += w * x;
                }
            }
        }
        pre.into_iter().map(sigmoid).collect()
    }

    fn visible_probs(&self, units: &[(usize, f64)], hidden: &[f64]) -> Vec<f64> {
        units
            .iter()
            .map(|&(v, _)| {
                let pre = self.weights[v]
                    .iter()
                    .zip(hidden)
                    .fold(self.visible_bias[v], |acc, (w, h)| acc + w * h);
                sigmoid(pre)
            })
            .collect()
    }

    /// One CD-1 update restricted to `units`. Visible units not listed are
    /// neither read nor written; hidden biases always update.
    ///
    /// `h ~ Bernoulli(sigmoid(W v + b_h))` draws one uniform per hidden unit;
    /// the reconstruction `v'` and `h'` use probabilities. Returns the mean
    /// squared reconstruction error of the listed units.
    pub fn cd1_units<R: Rng + ?Sized>(&mut self, units: &[(usize, f64)], learning_rate: f64, rng: &mut R) -> Result<f64> {
        let h_prob = self.hidden_probs(units);
        let h: Vec<f64> = h_prob
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        let v_recon = self.visible_probs(units, &h);
        let recon_units: Vec<(usize, f64)> = units.iter().zip(&v_recon).map(|(&(v, _), &r)| (v, r)).collect();
        let h_recon = self.hidden_probs(&recon_units);

        for (&(v, x), &xr) in units.iter().zip(&v_recon) {
            for ((w, hp), hn) in self.weights[v].iter_mut().zip(&h).zip(&h_recon) {
                *w += learning_rate * (hp * x - hn * xr);
            }
            self.visible_bias[v] += learning_rate * (x - xr);
        }
        for ((b, hp), hn) in self.hidden_bias.iter_mut().zip(&h).zip(&h_recon) {
            *b += learning_rate * (hp - hn);
        }
        if !self.units_finite(units) {
            return Err(Error::NonFinite("RBM parameters"));
        }
        let err = units.iter().zip(&v_recon).map(|(&(_, x), r)| (x - r).powi(2)).sum::<f64>();
        Ok(err / units.len().max(1) as f64)
    }

    fn units_finite(&self, units: &[(usize, f64)]) -> bool {
        self.hidden_bias.iter().all(|b| b.is_finite())
            && units
                .iter()
                .all(|&(v, _)| self.visible_bias[v].is_finite() && self.weights[v].iter().all(|w| w.is_finite()))
    }

    /// Deterministic mean-field reconstruction error over `units`:
    /// `v' = sigmoid(W^T sigmoid(W v + b_h) + b_v)`, mean of `(v - v')^2`.
    pub fn reconstruction_error(&self, units: &[(usize, f64)]) -> f64 {
        let h = self.hidden_probs(units);
        let recon = self.visible_probs(units, &h);
        let err: f64 = units.iter().zip(&recon).map(|(&(_, x), r)| (x - r).powi(2)).sum();
        err / units.len().max(1) as f64
    }
}

/// One CD-1 step over the full visible vector.
pub fn rbm_cd1_step<R: Rng + ?Sized>(rbm: &mut Rbm, visible: &[f64], learning_rate: f64, rng: &mut R) -> Result<f64> {
    if visible.len() != rbm.n_visible() {
        return Err(Error::DimensionMismatch(format!(
            "RBM has {} visible units, got {}",
            rbm.n_visible(),
            visible.len()
        )));
    }
    if visible.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::config("RBM visible values must lie in [0, 1]"));
    }
    let units: Vec<(usize, f64)> = visible.iter().copied().enumerate().collect();
    rbm.cd1_units(&units, learning_rate, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbmSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Per-dimension affine map `a' = scale * a + offset` into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
struct UnitScaling {
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl UnitScaling {
    fn identity(n: usize) -> Self {
        UnitScaling {
            scale: vec![1.0; n],
            offset: vec![0.0; n],
        }
    }

    /// Identity when every value already lies in `[0, 1]`, else per-dimension min-max.
    fn fit(inputs: &[Vec<f64>]) -> Self {
        let n = inputs[0].len();
        if inputs.iter().flatten().all(|v| (0.0..=1.0).contains(v)) {
            return Self::identity(n);
        }
        let mut scaling = Self::identity(n);
        for d in 0..n {
            let (lo, hi) = inputs
                .iter()
                .map(|x| x[d])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > lo {
                scaling.scale[d] = 1.0 / (hi - lo);
                scaling.offset[d] = -lo / (hi - lo);
            } else {
                scaling.scale[d] = 0.0;
                scaling.offset[d] = 0.5;
            }
        }
        scaling
    }

    fn after(activation: Activation, n: usize) -> Self {
        match activation {
            Activation::Tanh => UnitScaling {
                scale: vec![0.5; n],
                offset: vec![0.5; n],
            },
            Activation::Sigmoid | Activation::Linear => Self::identity(n),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(v, (s, o))| (s * v + o).clamp(0.0, 1.0))
            .collect()
    }
}

/// Greedy layer-wise RBM pre-training of every hidden layer of `stack`.
///
/// Layer inputs are mapped into `[0, 1]` first (min-max for raw inputs,
/// `(a + 1) / 2` after tanh layers). Each trained RBM is folded back into
/// its dense layer so that the layer's rescaled activation equals the RBM's
/// hidden probability exactly; layer `l + 1` then trains on those
/// probabilities. The output layer keeps its random initialisation.
///
/// `observer` sees the training codes of every layer before its RBM is fit.
pub fn pretrain_upper_layers<R: Rng + ?Sized>(
    stack: &mut MlpStack,
    inputs: &[Vec<f64>],
    schedule: RbmSchedule,
    rng: &mut R,
    mut observer: Option<&mut dyn FnMut(usize, &[Vec<f64>])>,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("upper-layer pre-training inputs"));
    }
    if inputs.iter().any(|x| x.len() != stack.input_size()) {
        return Err(Error::DimensionMismatch("pre-training input width".into()));
    }
    if schedule.epochs == 0 {
        return Ok(());
    }
    let mut scaling = UnitScaling::fit(inputs);
    let mut codes: Vec<Vec<f64>> = inputs.iter().map(|x| scaling.apply(x)).collect();
    let n_hidden_layers = stack.layers.len() - 1;
    for l in 0..n_hidden_layers {
        if let Some(obs) = observer.as_deref_mut() {
            obs(l, &codes);
        }
        let layer = &stack.layers[l];
        let mut rbm = Rbm::zeros(layer.n_in(), layer.n_out());
        for (o, row) in layer.weights.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                rbm.weights[i][o] = *w;
            }
        }
        let mut order: Vec<usize> = (0..codes.len()).collect();
        for _ in 0..schedule.epochs {
            order.shuffle(rng);
            for &k in &order {
                rbm_cd1_step(&mut rbm, &codes[k], schedule.learning_rate, rng)?;
            }
        }
        let layer = &mut stack.layers[l];
        let fold = match layer.activation {
            Activation::Tanh => 0.5,
            Activation::Sigmoid | Activation::Linear => 1.0,
        };
        for (o, row) in layer.weights.iter_mut().enumerate() {
            for (i, w) in row.iter_mut().enumerate() {
                *w = fold * rbm.weights[i][o] * scaling.scale[i];
            }
            let shift: f64 = (0..rbm.n_visible()).map(|i| rbm.weights[i][o] * scaling.offset[i]).sum();
            layer.bias[o] = fold * (shift + rbm.hidden_bias[o]);
        }
        codes = codes
            .iter()
            .map(|c| {
                let units: Vec<(usize, f64)> = c.iter().copied().enumerate().collect();
                rbm.hidden_probs(&units)
            })
            .collect();
        scaling = UnitScaling::after(layer.activation, layer.n_out());
    }
    if !stack.is_finite() {
        return Err(Error::NonFinite("pre-trained stack"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_stack_predicts_half() {
        let stack = MlpStack::zeros(4, &[3, 2], Activation::Tanh).unwrap();
        let fwd = stack.forward(&[1.0, -2.0, 0.5, 3.0], None).unwrap();
        assert_eq!(fwd.y_hat, 0.5);
    }

    #[test]
    fn full_mask_matches_unmasked() {
        let stack = MlpStack::build(4, &[3, 2], Activation::Tanh, 1.0, false, &mut rng(1)).unwrap();
        let mask = make_dropout_mask(&[3, 2], None, 1.0, &mut rng(2)).unwrap();
        assert!(mask.hidden.iter().flatten().all(|&k| k));
        let z = [0.3, -0.1, 0.7, 0.2];
        let a = stack.forward(&z, Some(&mask)).unwrap();
        let b = stack.forward(&z, None).unwrap();
        assert_eq!(a.y_hat.to_bits(), b.y_hat.to_bits());
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn rejects_bad_shapes() {
        let stack = MlpStack::zeros(4, &[3], Activation::Tanh).unwrap();
        assert!(stack.forward(&[1.0; 3], None).is_err());
        let bad = DenseLayer::zeros(3, 2, Activation::Tanh);
        assert!(MlpStack::new(vec![bad], 1.0, false).is_err());
        let mask = make_dropout_mask(&[5], None, 0.5, &mut rng(0)).unwrap();
        assert!(stack.forward(&[0.0; 4], Some(&mask)).is_err());
    }

    #[test]
    fn output_delta_is_prediction_error() {
        let stack = MlpStack::build(3, &[2], Activation::Tanh, 1.0, false, &mut rng(5)).unwrap();
        let fwd = stack.forward(&[0.1, 0.2, 0.3], None).unwrap();
        let g = stack.backward(&fwd, 1.0, None).unwrap();
        assert_relative_eq!(g.layers[1].bias[0], fwd.y_hat - 1.0);
    }

    #[test]
    fn blocked_layer_has_zero_incoming_gradient() {
        let stack = MlpStack::build(3, &[4, 2], Activation::Tanh, 0.5, false, &mut rng(6)).unwrap();
        let mask = DropoutMask {
            keep_prob: 0.5,
            hidden: vec![vec![true; 4], vec![false; 2]],
            input: None,
        };
        let fwd = stack.forward(&[0.5, -0.5, 1.0], Some(&mask)).unwrap();
        let g = stack.backward(&fwd, 0.0, Some(&mask)).unwrap();
        assert!(g.layers[1].weights.iter().flatten().all(|&w| w == 0.0));
        assert!(g.layers[1].bias.iter().all(|&b| b == 0.0));
        assert!(g.input.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = vec![1.0, 2.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        let mut q = vec![1.0];
        sgd_step(&mut q, &[0.0], 0.1, 0.1).unwrap();
        assert_relative_eq!(q[0], 0.99, epsilon = 1e-15);
        let mut r = vec![1.0];
        assert!(sgd_step(&mut r, &[f64::INFINITY], 0.1, 0.0).is_err());
    }

    #[test]
    fn sgd_matches_elementwise_formula() {
        let mut g = rng(8);
        let params: Vec<f64> = (0..50).map(|_| g.random_range(-2.0..2.0)).collect();
        let grads: Vec<f64> = (0..50).map(|_| g.random_range(-2.0..2.0)).collect();
        let mut updated = params.clone();
        sgd_step(&mut updated, &grads, 0.05, 0.01).unwrap();
        for i in 0..50 {
            let expect = params[i] - 0.05 * (grads[i] + 0.01 * params[i]);
            assert!((updated[i] - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn l2_penalty_values() {
        let zero = MlpStack::zeros(2, &[2], Activation::Tanh).unwrap();
        assert_eq!(zero.l2_penalty(), 0.0);
        let mut one = zero.clone();
        one.layers_mut()[0].weights[1][0] = 2.0;
        assert_eq!(one.l2_penalty(), 4.0);
        let random = MlpStack::build(3, &[4, 2], Activation::Tanh, 1.0, false, &mut rng(3)).unwrap();
        let mut naive = 0.0;
        for layer in random.layers() {
            for row in &layer.weights {
                for w in row {
                    naive += w * w;
                }
            }
            for b in &layer.bias {
                naive += b * b;
            }
        }
        assert!((random.l2_penalty() - naive).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_rates() {
        assert!(make_dropout_mask(&[3], None, 0.0, &mut rng(0)).is_err());
        let all = make_dropout_mask(&[10, 10], Some(4), 1.0, &mut rng(0)).unwrap();
        assert!(all.hidden.iter().flatten().chain(all.input.as_ref().unwrap()).all(|&k| k));

        let p = 0.8;
        let n = 100_000;
        let mask = make_dropout_mask(&[n], None, p, &mut rng(9)).unwrap();
        let kept = mask.hidden[0].iter().filter(|&&k| k).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((kept - n as f64 * p).abs() < 3.0 * sd);

        let again = make_dropout_mask(&[n], None, p, &mut rng(9)).unwrap();
        assert_eq!(mask, again);
    }

    #[test]
    fn inference_scales_hidden_by_keep_prob() {
        let stack = MlpStack::build(2, &[3], Activation::Tanh, 0.5, false, &mut rng(4)).unwrap();
        let fwd = stack.forward(&[0.2, 0.4], None).unwrap();
        for (raw, out) in fwd.raw[0].iter().zip(&fwd.outputs[0]) {
            assert_eq!(*out, raw * 0.5);
        }
    }

    #[test]
    fn cd1_zero_rate_is_identity() {
        let mut rbm = Rbm::uniform(4, 3, 0.1, &mut rng(1));
        let before = rbm.clone();
        rbm_cd1_step(&mut rbm, &[1.0, 0.0, 1.0, 0.5], 0.0, &mut rng(2)).unwrap();
        assert_eq!(rbm, before);
        assert!(rbm_cd1_step(&mut rbm, &[2.0, 0.0, 1.0, 0.5], 0.1, &mut rng(2)).is_err());
    }

    #[test]
    fn cd1_matches_hand_trace() {
        // 2 visible units, 1 hidden unit.
        let mut rbm = Rbm {
            weights: vec![vec![0.5], vec![-0.3]],
            visible_bias: vec![0.1, -0.2],
            hidden_bias: vec![0.05],
        };
        let v = [1.0, 0.0];
        let lr = 0.1;
        let mut trace_rng = rng(77);
        let u: f64 = trace_rng.random();

        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p_h = s(0.5 * 1.0 + (-0.3) * 0.0 + 0.05);
        let h = if u < p_h { 1.0 } else { 0.0 };
        let v1 = s(0.5 * h + 0.1);
        let v2 = s(-0.3 * h - 0.2);
        let h2 = s(0.5 * v1 - 0.3 * v2 + 0.05);
        let expect_w = [0.5 + lr * (h * 1.0 - h2 * v1), -0.3 + lr * (h * 0.0 - h2 * v2)];
        let expect_bv = [0.1 + lr * (1.0 - v1), -0.2 + lr * (0.0 - v2)];
        let expect_bh = 0.05 + lr * (h - h2);

        rbm_cd1_step(&mut rbm, &v, lr, &mut rng(77)).unwrap();
        assert_relative_eq!(rbm.weights[0][0], expect_w[0], epsilon = 1e-15);
        assert_relative_eq!(rbm.weights[1][0], expect_w[1], epsilon = 1e-15);
        assert_relative_eq!(rbm.visible_bias[0], expect_bv[0], epsilon = 1e-15);
        assert_relative_eq!(rbm.visible_bias[1], expect_bv[1], epsilon = 1e-15);
        assert_relative_eq!(rbm.hidden_bias[0], expect_bh, epsilon = 1e-15);
    }

    #[test]
    fn cd1_reduces_reconstruction_error() {
        // Two prototype patterns with bit-flip noise.
        let mut g = rng(21);
        let protos = [[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]];
        let data: Vec<Vec<f64>> = (0..200)
            .map(|k| {
                protos[k % 2]
                    .iter()
                    .map(|&b| if g.random::<f64>() < 0.05 { 1.0 - b } else { b })
                    .collect()
            })
            .collect();
        let units = |x: &Vec<f64>| x.iter().copied().enumerate().collect::<Vec<_>>();
        let mean_err = |rbm: &Rbm| data.iter().map(|x| rbm.reconstruction_error(&units(x))).sum::<f64>() / data.len() as f64;

        let mut rbm = Rbm::uniform(6, 3, 0.01, &mut g);
        let before = mean_err(&rbm);
        for _ in 0..10 {
            for x in &data {
                rbm_cd1_step(&mut rbm, x, 0.1, &mut g).unwrap();
            }
        }
        assert!(mean_err(&rbm) < before);
    }

    #[test]
    fn pretrain_zero_epochs_is_noop() {
        let mut stack = MlpStack::build(3, &[4, 2], Activation::Tanh, 1.0, false, &mut rng(1)).unwrap();
        let before = stack.clone();
        let inputs = vec![vec![0.1, 0.5, 0.9]; 5];
        let sched = RbmSchedule {
            epochs: 0,
            learning_rate: 0.1,
        };
        pretrain_upper_layers(&mut stack, &inputs, sched, &mut rng(2), None).unwrap();
        assert_eq!(stack, before);
        assert!(pretrain_upper_layers(&mut stack, &[], sched, &mut rng(2), None).is_err());
    }

    #[test]
    fn pretrain_wires_layer_probabilities_upward() {
        let mut g = rng(13);
        let inputs: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| g.random_range(-2.0..2.0)).collect()).collect();
        let mut stack = MlpStack::build(3, &[4, 2], Activation::Tanh, 1.0, false, &mut g).unwrap();
        let output_before = stack.layers()[2].clone();
        let mut seen: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut obs = |_: usize, codes: &[Vec<f64>]| seen.push(codes.to_vec());
        let sched = RbmSchedule {
            epochs: 3,
            learning_rate: 0.05,
        };
        pretrain_upper_layers(&mut stack, &inputs, sched, &mut g, Some(&mut obs)).unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(stack.layers()[2], output_before);
        // Layer 2's training codes are the rescaled deterministic activations
        // of the folded layer 1: (tanh(W1 x + b1) + 1) / 2.
        for (x, code) in inputs.iter().zip(&seen[1]) {
            let fwd = stack.forward(x, None).unwrap();
            for (a, c) in fwd.raw[0].iter().zip(code) {
                assert_relative_eq!((a + 1.0) / 2.0, *c, epsilon = 1e-12);
            }
        }
        assert!(seen[0].iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
