//! Second-order factorisation machine with a sigmoid link.
//!
//! For a one-hot instance only the `n` active features are non-zero, so the
//! pairwise term is evaluated in `O(nK)` with
//! `sum_{i<j} <v_i, v_j> = (|sum v_i|^2 - sum |v_i|^2) / 2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::cross_entropy;
use crate::net::sum_squares;
use crate::schema::SparseInstance;
use crate::sigmoid;
use crate::train::{fit_with_early_stopping, TrainConfig, TrainReport, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmModel {
    pub w0: f64,
    pub w: Vec<f64>,
    /// `v[i]` is the latent vector of feature `i`.
    pub v: Vec<Vec<f64>>,
}

/// Gradient of the loss for one instance; only active features appear.
#[derive(Debug, Clone, PartialEq)]
pub struct FmGradient {
    pub w0: f64,
    /// `(feature, dL/dw_i, dL/dv_i)`
    pub features: Vec<(usize, f64, Vec<f64>)>,
}

impl FmModel {
    pub fn zeros(n_features: usize, k: usize) -> Self {
        FmModel {
            w0: 0.0,
            w: vec![0.0; n_features],
            v: vec![vec![0.0; k]; n_features],
        }
    }

    /// `w0 = 0`, `w = 0`, latent entries uniform in `[-0.01, 0.01]`.
    pub fn init<R: Rng + ?Sized>(n_features: usize, k: usize, rng: &mut R) -> Self {
        let mut model = Self::zeros(n_features, k);
        for x in model.v.iter_mut().flatten() {
            *x = rng.random_range(-0.01..=0.01);
        }
        model
    }

    pub fn n_features(&self) -> usize {
        self.w.len()
    }

    pub fn k(&self) -> usize {
        self.v.first().map_or(0, Vec::len)
    }

    fn latent_sum(&self, active: &[usize]) -> Vec<f64> {
        let mut sum = vec![0.0; self.k()];
        for &i in active {
            for (s, x) in sum.iter_mut().zip(&self.v[i]) {
                *s += x;
            }
        }
        sum
    }

    pub fn logit(&self, instance: &SparseInstance) -> Result<f64> {
        instance.check_bounds(self.n_features())?;
        let linear: f64 = self.w0 + instance.active.iter().map(|&i| self.w[i]).sum::<f64>();
        let sum = self.latent_sum(&instance.active);
        let squares: f64 = instance.active.iter().map(|&i| sum_squares(&self.v[i])).sum();
        Ok(linear + 0.5 * (sum_squares(&sum) - squares))
    }

    pub fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        Ok(sigmoid(self.logit(instance)?))
    }

    /// Cross-entropy loss and its gradient.
    pub fn gradient(&self, instance: &SparseInstance) -> Result<(f64, FmGradient)> {
        let y_hat = self.predict(instance)?;
        let y = instance.y();
        let g = y_hat - y;
        let sum = self.latent_sum(&instance.active);
        let features = instance
            .active
            .iter()
            .map(|&i| {
                let dv = sum.iter().zip(&self.v[i]).map(|(s, x)| g * (s - x)).collect();
                (i, g, dv)
            })
            .collect();
        Ok((cross_entropy(y, y_hat), FmGradient { w0: g, features }))
    }

    /// L2 penalty over `w` and `V` (the global bias is not penalised).
    pub fn l2_penalty(&self) -> f64 {
        sum_squares(&self.w) + sum_squares(self.v.iter().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite() && self.w.iter().chain(self.v.iter().flatten()).all(|x| x.is_finite())
    }
}

/// One SGD step on the cross-entropy of [`FmModel::predict`]. Only `w0` and
/// the active features' `w_i`, `v_i` move; L2 shrinks just those `w_i`, `v_i`.
/// Returns the pre-step loss.
pub fn fm_grad_step(
    model: &mut FmModel,
    instance: &SparseInstance,
    learning_rate: f64,
    l2_lambda: f64,
) -> Result<f64> {
    let (loss, grad) = model.gradient(instance)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("FM loss"));
    }
    model.w0 -= learning_rate * grad.w0;
    for (i, dw, dv) in grad.features {
        model.w[i] -= learning_rate * (dw + l2_lambda * model.w[i]);
        for (x, d) in model.v[i].iter_mut().zip(dv) {
            *x -= learning_rate * (d + l2_lambda * *x);
        }
        if !model.w[i].is_finite() || model.v[i].iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("FM parameters"));
        }
    }
    if !model.w0.is_finite() {
        return Err(Error::NonFinite("FM bias"));
    }
    Ok(loss)
}

impl Trainable for FmModel {
    fn train_epoch(
        &mut self,
        data: &Dataset,
        order: &[usize],
        config: &TrainConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &k in order {
            total += fm_grad_step(self, &data.instances()[k], config.learning_rate, config.l2_lambda)?;
        }
        Ok(total / order.len() as f64)
    }

    fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        FmModel::predict(self, instance)
    }
}

/// Shuffled per-instance SGD with early stopping; returns the best-validation snapshot.
pub fn fm_train(train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<(FmModel, TrainReport)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fm_train_with(train, valid, config, &mut rng)
}

pub(crate) fn fm_train_with(
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FmModel, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let model = FmModel::init(train.schema().dim(), config.latent_dim, rng);
    fit_with_early_stopping(model, train, valid, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_model_predicts_half() {
        let m = FmModel::zeros(6, 3);
        assert_eq!(m.predict(&SparseInstance::new(vec![0, 3], 1)).unwrap(), 0.5);
    }

    #[test]
    fn unit_interaction() {
        let mut m = FmModel::zeros(4, 2);
        m.v[0] = vec![1.0, 0.0];
        m.v[2] = vec![1.0, 0.0];
        let p = m.predict(&SparseInstance::new(vec![0, 2], 0)).unwrap();
        assert_relative_eq!(p, 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);
        assert_relative_eq!(p, 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn out_of_range_index() {
        let m = FmModel::zeros(4, 2);
        assert!(m.predict(&SparseInstance::new(vec![0, 4], 0)).is_err());
    }

    #[test]
    fn bias_gradient_is_prediction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = FmModel::init(6, 3, &mut rng);
        let inst = SparseInstance::new(vec![1, 4], 1);
        let (_, g) = m.gradient(&inst).unwrap();
        assert_relative_eq!(g.w0, m.predict(&inst).unwrap() - 1.0);
    }

    #[test]
    fn tiny_rate_leaves_parameters_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FmModel::init(6, 3, &mut rng);
        m.w0 = 0.1;
        m.w.fill(0.2);
        let mut stepped = m.clone();
        fm_grad_step(&mut stepped, &SparseInstance::new(vec![0, 5], 1), 1e-300, 0.1).unwrap();
        assert_eq!(stepped, m);
    }

    #[test]
    fn step_touches_only_active_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = FmModel::init(8, 2, &mut rng);
        let mut stepped = m.clone();
        fm_grad_step(&mut stepped, &SparseInstance::new(vec![1, 6], 0), 0.1, 0.01).unwrap();
        for i in [0, 2, 3, 4, 5, 7] {
            assert_eq!(stepped.w[i], m.w[i]);
            assert_eq!(stepped.v[i], m.v[i]);
        }
        assert_ne!(stepped.v[1], m.v[1]);
    }

    #[test]
    fn prediction_ignores_active_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = FmModel::init(9, 4, &mut rng);
        let a = m.predict(&SparseInstance::new(vec![0, 4, 8], 0)).unwrap();
        let b = m.predict(&SparseInstance::new(vec![8, 0, 4], 0)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
