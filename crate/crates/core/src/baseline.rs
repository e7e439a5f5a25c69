//! Logistic regression over the sparse one-hot features.

use rand::SeedableRng;
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
pub struct LrModel {
    pub bias: f64,
    pub w: Vec<f64>,
}

impl LrModel {
    pub fn zeros(n_features: usize) -> Self {
        LrModel {
            bias: 0.0,
            w: vec![0.0; n_features],
        }
    }

    pub fn logit(&self, instance: &SparseInstance) -> Result<f64> {
        instance.check_bounds(self.w.len())?;
        Ok(self.bias + instance.active.iter().map(|&i| self.w[i]).sum::<f64>())
    }

    pub fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        Ok(sigmoid(self.logit(instance)?))
    }

    /// Loss and `dL/dlogit`; every active weight and the bias share that gradient.
    pub fn gradient(&self, instance: &SparseInstance) -> Result<(f64, f64)> {
        let y_hat = self.predict(instance)?;
        Ok((cross_entropy(instance.y(), y_hat), y_hat - instance.y()))
    }

    pub fn l2_penalty(&self) -> f64 {
        sum_squares(&self.w)
    }

    /// One SGD step with lazy L2 on the active weights; returns the pre-step loss.
    pub fn sgd_step(&mut self, instance: &SparseInstance, learning_rate: f64, l2_lambda: f64) -> Result<f64> {
        let (loss, g) = self.gradient(instance)?;
        self.bias -= learning_rate * g;
        for &i in &instance.active {
            self.w[i] -= learning_rate * (g + l2_lambda * self.w[i]);
            if !self.w[i].is_finite() {
                return Err(Error::NonFinite("LR weight"));
            }
        }
        if !self.bias.is_finite() {
            return Err(Error::NonFinite("LR bias"));
        }
        Ok(loss)
    }
}

impl Trainable for LrModel {
    fn train_epoch(
        &mut self,
        data: &Dataset,
        order: &[usize],
        config: &TrainConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &k in order {
            total += self.sgd_step(&data.instances()[k], config.learning_rate, config.l2_lambda)?;
        }
        Ok(total / order.len() as f64)
    }

    fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        LrModel::predict(self, instance)
    }
}

pub fn lr_predict(model: &LrModel, instance: &SparseInstance) -> Result<f64> {
    model.predict(instance)
}

/// Per-instance SGD from a zero model with early stopping.
pub fn lr_train(train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<(LrModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fit_with_early_stopping(LrModel::zeros(train.schema().dim()), train, valid, config, &mut rng)
}
