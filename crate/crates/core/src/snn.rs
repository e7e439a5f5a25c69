//! Sampling-based neural network.
//!
//! The bottom layer `z = sigmoid(W0 x + b0)` is fully connected to the
//! one-hot input, so with `n` active features it reduces to summing `n`
//! columns of `W0`. It is pre-trained unsupervised on sampled views of each
//! instance: the active unit of every field plus `m` random inactive ones.
//! Units outside the view are neither read nor written during that step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negative_units, Dataset};
use crate::error::{Error, Result};
use crate::eval::cross_entropy;
use crate::net::{pretrain_upper_layers, sgd_step, sum_squares, DropoutMask, Forward, MlpStack, Rbm, RbmSchedule, StackGradients};
use crate::schema::SparseInstance;
use crate::sigmoid;
use crate::train::{fit_with_early_stopping, TrainConfig, TrainReport, Trainable};

pub const DEFAULT_KEEP_PROB: f64 = 0.99;

/// Bottom weights are drawn uniform in `[-INIT_SCALE, INIT_SCALE]` before pre-training.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMethod {
    Rbm,
    Dae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub method: PretrainMethod,
    /// Negative units per field.
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Masking-noise probability (DAE only).
    pub corruption: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn from_train_config(method: PretrainMethod, config: &TrainConfig) -> Self {
        PretrainConfig {
            method,
            negatives: config.negatives,
            epochs: config.bottom_pretrain_epochs,
            learning_rate: config.bottom_pretrain_learning_rate,
            corruption: config.corruption,
            seed: config.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::config("negatives must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.corruption) {
            return Err(Error::config("corruption must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("pre-training learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Called after every pre-training step with the sampled units and the
/// bottom weights (`weights[g]` is the column of global feature `g`).
pub type StepObserver<'a> = &'a mut dyn FnMut(&[(usize, f64)], &[Vec<f64>]);

/// Pre-trained bottom layer plus the mean training reconstruction error of
/// each epoch. `visible_bias` is kept for measuring reconstruction only; the
/// network uses `weights` and `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct BottomInit {
    pub method: PretrainMethod,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub visible_bias: Vec<f64>,
    pub epoch_errors: Vec<f64>,
}

impl BottomInit {
    /// RBM: mean squared mean-field reconstruction error. DAE: mean
    /// cross-entropy of the uncorrupted reconstruction.
    pub fn reconstruction_error(&self, units: &[(usize, f64)]) -> f64 {
        match self.method {
            PretrainMethod::Rbm => Rbm {
                weights: self.weights.clone(),
                visible_bias: self.visible_bias.clone(),
                hidden_bias: self.bias.clone(),
            }
            .reconstruction_error(units),
            PretrainMethod::Dae => Dae {
                weights: self.weights.clone(),
                hidden_bias: self.bias.clone(),
                visible_bias: self.visible_bias.clone(),
            }
            .reconstruction_error(units),
        }
    }

    /// Mean reconstruction error over one sampled view per instance of
    /// `data`; the views depend only on `seed`.
    pub fn heldout_error(&self, data: &Dataset, negatives: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = data
            .instances()
            .iter()
            .map(|inst| self.reconstruction_error(&sample_negative_units(inst, data.schema(), negatives, &mut rng).units()))
            .sum();
        total / data.len().max(1) as f64
    }
}

/// Denoising auto-encoder with tied weights: `weights[g]` is both the
/// encoder column and the decoder row of visible unit `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dae {
    pub weights: Vec<Vec<f64>>,
    pub hidden_bias: Vec<f64>,
    pub visible_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeGradient {
    /// Per listed unit, dL/d(weights[g]).
    pub weights: Vec<Vec<f64>>,
    pub hidden_bias: Vec<f64>,
    /// Per listed unit, dL/d(visible_bias[g]).
    pub visible_bias: Vec<f64>,
}

impl Dae {
    pub fn uniform<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, scale: f64, rng: &mut R) -> Self {
        let weights = (0..n_visible)
            .map(|_| (0..n_hidden).map(|_| rng.random_range(-scale..=scale)).collect())
            .collect();
        Dae {
            weights,
            hidden_bias: vec![0.0; n_hidden],
            visible_bias: vec![0.0; n_visible],
        }
    }

    fn encode(&self, units: &[(usize, f64)], inputs: &[f64]) -> Vec<f64> {
        let mut pre = self.hidden_bias.clone();
        for (&(g, _), &x) in units.iter().zip(inputs) {
            if x != 0.0 {
                for (p, w) in pre.iter_mut().zip(&self.weights[g]) {
                    *p += w * x;
                }
            }
        }
        pre.into_iter().map(sigmoid).collect()
    }

    fn decode(&self, units: &[(usize, f64)], hidden: &[f64]) -> Vec<f64> {
        units
            .iter()
            .map(|&(g, _)| {
                let pre = self.weights[g].iter().zip(hidden).fold(self.visible_bias[g], |a, (w, h)| a + w * h);
                sigmoid(pre)
            })
            .collect()
    }

    /// Summed cross-entropy of reconstructing `units` from `corrupted` inputs.
    pub fn loss(&self, units: &[(usize, f64)], corrupted: &[f64]) -> f64 {
        let h = self.encode(units, corrupted);
        let recon = self.decode(units, &h);
        units.iter().zip(&recon).map(|(&(_, v), &r)| cross_entropy(v, r)).sum()
    }

    /// Loss and exact gradient over the listed units only.
    pub fn gradient(&self, units: &[(usize, f64)], corrupted: &[f64]) -> (f64, DaeGradient) {
        let h = self.encode(units, corrupted);
        let recon = self.decode(units, &h);
        let errors: Vec<f64> = units.iter().zip(&recon).map(|(&(_, v), r)| r - v).collect();
        let mut d_hidden = vec![0.0; h.len()];
        for (&(g, _), e) in units.iter().zip(&errors) {
            for (d, w) in d_hidden.iter_mut().zip(&self.weights[g]) {
                *d += e * w;
            }
        }
        let delta: Vec<f64> = d_hidden.iter().zip(&h).map(|(d, h)| d * h * (1.0 - h)).collect();
        let weights = units
            .iter()
            .zip(&errors)
            .zip(corrupted)
            .map(|((_, e), &x)| h.iter().zip(&delta).map(|(hj, dj)| e * hj + dj * x).collect())
            .collect();
        let loss = units.iter().zip(&recon).map(|(&(_, v), &r)| cross_entropy(v, r)).sum();
        (
            loss,
            DaeGradient {
                weights,
                hidden_bias: delta,
                visible_bias: errors,
            },
        )
    }

    /// Masks each unit to 0 with probability `corruption` (one uniform per unit).
    pub fn corrupt<R: Rng + ?Sized>(units: &[(usize, f64)], corruption: f64, rng: &mut R) -> Vec<f64> {
        units
            .iter()
            .map(|&(_, v)| if rng.random::<f64>() < corruption { 0.0 } else { v })
            .collect()
    }

    /// One SGD step on a corrupted copy of `units`; returns the mean per-unit loss.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        units: &[(usize, f64)],
        learning_rate: f64,
        corruption: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let corrupted = Self::corrupt(units, corruption, rng);
        let (loss, grad) = self.gradient(units, &corrupted);
        for ((&(g, _), dw), dc) in units.iter().zip(&grad.weights).zip(&grad.visible_bias) {
            sgd_step(&mut self.weights[g], dw, learning_rate, 0.0)?;
            self.visible_bias[g] -= learning_rate * dc;
        }
        sgd_step(&mut self.hidden_bias, &grad.hidden_bias, learning_rate, 0.0)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("DAE loss"));
        }
        Ok(loss / units.len().max(1) as f64)
    }

    /// Mean per-unit cross-entropy of the clean reconstruction.
    pub fn reconstruction_error(&self, units: &[(usize, f64)]) -> f64 {
        let clean: Vec<f64> = units.iter().map(|&(_, v)| v).collect();
        self.loss(units, &clean) / units.len().max(1) as f64
    }
}

fn check_pretrain_input(train: &Dataset, bottom_width: usize) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("pre-training set"));
    }
    if bottom_width == 0 {
        return Err(Error::config("bottom width must be at least 1"));
    }
    Ok(())
}

/// Sampled-RBM pre-training of the bottom layer. Each step runs CD-1 on the
/// sampled view of one instance; the RBM's hidden side becomes `(W0, b0)`
/// and its visible biases are dropped.
pub fn rbm_pretrain_bottom(
    train: &Dataset,
    bottom_width: usize,
    config: &PretrainConfig,
    observer: Option<StepObserver<'_>>,
) -> Result<BottomInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rbm_pretrain_bottom_with(train, bottom_width, config, &mut rng, observer)
}

fn rbm_pretrain_bottom_with(
    train: &Dataset,
    bottom_width: usize,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    mut observer: Option<StepObserver<'_>>,
) -> Result<BottomInit> {
    if config.method != PretrainMethod::Rbm {
        return Err(Error::config("expected RBM pre-training config"));
    }
    config.validate()?;
    check_pretrain_input(train, bottom_width)?;
    let schema = train.schema();
    let mut rbm = Rbm::uniform(schema.dim(), bottom_width, INIT_SCALE, rng);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_errors = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &k in &order {
            let units = sample_negative_units(&train.instances()[k], schema, config.negatives, rng).units();
            total += rbm.cd1_units(&units, config.learning_rate, rng)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs(&units, &rbm.weights);
            }
        }
        epoch_errors.push(total / order.len() as f64);
    }
    Ok(BottomInit {
        method: PretrainMethod::Rbm,
        weights: rbm.weights,
        bias: rbm.hidden_bias,
        visible_bias: rbm.visible_bias,
        epoch_errors,
    })
}

/// Sampled-DAE pre-training of the bottom layer with tied weights and
/// masking noise; the decoder biases are dropped afterwards.
pub fn dae_pretrain_bottom(
    train: &Dataset,
    bottom_width: usize,
    config: &PretrainConfig,
    observer: Option<StepObserver<'_>>,
) -> Result<BottomInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    dae_pretrain_bottom_with(train, bottom_width, config, &mut rng, observer)
}

fn dae_pretrain_bottom_with(
    train: &Dataset,
    bottom_width: usize,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    mut observer: Option<StepObserver<'_>>,
) -> Result<BottomInit> {
    if config.method != PretrainMethod::Dae {
        return Err(Error::config("expected DAE pre-training config"));
    }
    config.validate()?;
    check_pretrain_input(train, bottom_width)?;
    let schema = train.schema();
    let mut dae = Dae::uniform(schema.dim(), bottom_width, INIT_SCALE, rng);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_errors = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &k in &order {
            let units = sample_negative_units(&train.instances()[k], schema, config.negatives, rng).units();
            total += dae.step(&units, config.learning_rate, config.corruption, rng)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs(&units, &dae.weights);
            }
        }
        epoch_errors.push(total / order.len() as f64);
    }
    Ok(BottomInit {
        method: PretrainMethod::Dae,
        weights: dae.weights,
        bias: dae.hidden_bias,
        visible_bias: dae.visible_bias,
        epoch_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnModel {
    /// `w0[g]` is the bottom-layer column of global feature `g`, length `M0`.
    pub w0: Vec<Vec<f64>>,
    pub b0: Vec<f64>,
    pub upper: MlpStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnForward {
    pub z: Vec<f64>,
    pub stack: Forward,
}

impl SnnForward {
    pub fn y_hat(&self) -> f64 {
        self.stack.y_hat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnGradient {
    /// dL/d(pre-activation of z); also the gradient of `b0` and of every active column.
    pub bottom: Vec<f64>,
    pub active: Vec<usize>,
    pub upper: StackGradients,
}

impl SnnModel {
    pub fn new(w0: Vec<Vec<f64>>, b0: Vec<f64>, upper: MlpStack) -> Result<Self> {
        let m0 = b0.len();
        if w0.iter().any(|c| c.len() != m0) {
            return Err(Error::DimensionMismatch("bottom columns must match b0".into()));
        }
        if upper.input_size() != m0 {
            return Err(Error::DimensionMismatch(format!(
                "upper stack takes {} inputs, bottom layer has {m0} units",
                upper.input_size()
            )));
        }
        Ok(SnnModel { w0, b0, upper })
    }

    pub fn n_features(&self) -> usize {
        self.w0.len()
    }

    pub fn bottom_width(&self) -> usize {
        self.b0.len()
    }

    /// `sigmoid(b0 + sum of the active columns)`.
    pub fn embed(&self, instance: &SparseInstance) -> Result<Vec<f64>> {
        instance.check_bounds(self.n_features())?;
        let mut pre = self.b0.clone();
        for &g in &instance.active {
            for (p, w) in pre.iter_mut().zip(&self.w0[g]) {
                *p += w;
            }
        }
        Ok(pre.into_iter().map(sigmoid).collect())
    }

    pub fn forward(&self, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<SnnForward> {
        let z = self.embed(instance)?;
        let stack = self.upper.forward(&z, mask)?;
        Ok(SnnForward { z, stack })
    }

    pub fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        Ok(self.forward(instance, None)?.y_hat())
    }

    pub fn gradient_from(
        &self,
        instance: &SparseInstance,
        fwd: &SnnForward,
        mask: Option<&DropoutMask>,
    ) -> Result<SnnGradient> {
        let upper = self.upper.backward(&fwd.stack, instance.y(), mask)?;
        let bottom = upper.input.iter().zip(&fwd.z).map(|(d, z)| d * z * (1.0 - z)).collect();
        Ok(SnnGradient {
            bottom,
            active: instance.active.clone(),
            upper,
        })
    }

    pub fn gradient(&self, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<(f64, SnnGradient)> {
        let fwd = self.forward(instance, mask)?;
        let grad = self.gradient_from(instance, &fwd, mask)?;
        Ok((cross_entropy(instance.y(), fwd.y_hat()), grad))
    }

    /// Upper stack densely; bottom at the active columns only, with lazy L2.
    /// `b0` is not penalised.
    pub fn apply_gradient(&mut self, grad: &SnnGradient, learning_rate: f64, l2_lambda: f64) -> Result<()> {
        self.upper.apply_gradients(&grad.upper, learning_rate, l2_lambda)?;
        sgd_step(&mut self.b0, &grad.bottom, learning_rate, 0.0)?;
        for &g in &grad.active {
            sgd_step(&mut self.w0[g], &grad.bottom, learning_rate, l2_lambda)?;
        }
        Ok(())
    }

    /// One fine-tuning step; returns the pre-step loss.
    pub fn fine_tune_step(
        &mut self,
        instance: &SparseInstance,
        learning_rate: f64,
        l2_lambda: f64,
        mask: Option<&DropoutMask>,
    ) -> Result<f64> {
        let (loss, grad) = self.gradient(instance, mask)?;
        self.apply_gradient(&grad, learning_rate, l2_lambda)?;
        Ok(loss)
    }

    pub fn l2_penalty(&self) -> f64 {
        sum_squares(self.w0.iter().flatten()) + self.upper.l2_penalty()
    }
}

pub fn snn_forward(model: &SnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<SnnForward> {
    model.forward(instance, mask)
}

impl Trainable for SnnModel {
    fn train_epoch(
        &mut self,
        data: &Dataset,
        order: &[usize],
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let dropout = self.upper.keep_prob() < 1.0;
        let mut total = 0.0;
        for &k in order {
            let mask = if dropout { Some(self.upper.sample_mask(rng)?) } else { None };
            total += self.fine_tune_step(&data.instances()[k], config.learning_rate, config.l2_lambda, mask.as_ref())?;
        }
        Ok(total / order.len() as f64)
    }

    fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        SnnModel::predict(self, instance)
    }
}

/// Bottom width and the hidden sizes above it. Without an explicit bottom
/// width the first hidden size is the bottom layer itself.
pub fn layer_plan(config: &TrainConfig) -> (usize, Vec<usize>) {
    match config.bottom_width {
        Some(w) => (w, config.hidden.clone()),
        None => (config.hidden[0], config.hidden[1..].to_vec()),
    }
}

/// Bottom pre-training, optional RBM pre-training of the upper hidden
/// layers on the bottom codes, then fine-tuning with early stopping.
pub fn snn_train(
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    method: PretrainMethod,
) -> Result<(SnnModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    train.ensure_same_schema(valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (bottom_width, upper_hidden) = layer_plan(config);
    let pretrain = PretrainConfig::from_train_config(method, config);
    let bottom = match method {
        PretrainMethod::Rbm => rbm_pretrain_bottom_with(train, bottom_width, &pretrain, &mut rng, None)?,
        PretrainMethod::Dae => dae_pretrain_bottom_with(train, bottom_width, &pretrain, &mut rng, None)?,
    };
    log::info!("bottom pre-training errors per epoch: {:?}", bottom.epoch_errors);
    let upper = MlpStack::build(
        bottom_width,
        &upper_hidden,
        config.activation,
        config.keep_prob_or(DEFAULT_KEEP_PROB),
        config.input_dropout,
        &mut rng,
    )?;
    let mut model = SnnModel::new(bottom.weights, bottom.bias, upper)?;
    if config.pretrain_upper && config.pretrain_epochs > 0 && !upper_hidden.is_empty() {
        let codes = train
            .instances()
            .iter()
            .map(|i| model.embed(i))
            .collect::<Result<Vec<_>>>()?;
        let schedule = RbmSchedule {
            epochs: config.pretrain_epochs,
            learning_rate: config.pretrain_learning_rate,
        };
        pretrain_upper_layers(&mut model.upper, &codes, schedule, &mut rng, None)?;
    }
    fit_with_early_stopping(model, train, valid, config, &mut rng)
}
