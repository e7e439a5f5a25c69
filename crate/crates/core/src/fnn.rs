//! Factorisation-machine supported neural network.
//!
//! The bottom layer is field-wise: field `i` owns a `(K+1) x cardinality_i`
//! block whose column for a feature is `(w, v_1, ..., v_K)` taken from a
//! trained FM. For a one-hot field the block-vector product is just the
//! active column, so `z = (w0, z_1, ..., z_n)` has `J = 1 + n(K+1)` entries
//! and feeds a dense tanh stack with one sigmoid output.
//!
//! Fine-tuning only ever writes the active column of each block (plus `w0`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::cross_entropy;
use crate::fm::{fm_train_with, FmModel};
use crate::net::{pretrain_upper_layers, sum_squares, DropoutMask, Forward, MlpStack, RbmSchedule, StackGradients};
use crate::schema::{FieldSchema, SparseInstance};
use crate::train::{fit_with_early_stopping, TrainConfig, TrainReport, Trainable};

pub const DEFAULT_KEEP_PROB: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnnModel {
    pub w0: f64,
    /// `blocks[i][j]` is the column of local feature `j` in field `i`, length `K + 1`.
    pub blocks: Vec<Vec<Vec<f64>>>,
    pub upper: MlpStack,
}

/// Forward cache: the embedding `z`, the stack activations and the active local columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnForward {
    pub z: Vec<f64>,
    pub locals: Vec<usize>,
    pub stack: Forward,
}

impl FnnForward {
    pub fn y_hat(&self) -> f64 {
        self.stack.y_hat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnnGradient {
    pub w0: f64,
    /// `(field, local column, dL/dcolumn)`
    pub columns: Vec<(usize, usize, Vec<f64>)>,
    pub upper: StackGradients,
}

/// Copies FM parameters into field blocks: column of feature `g` is `(w_g, v_g)`.
pub fn init_bottom_from_fm(fm: &FmModel, schema: &FieldSchema) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    if fm.n_features() != schema.dim() {
        return Err(Error::SchemaMismatch(format!(
            "FM has {} features, schema has {}",
            fm.n_features(),
            schema.dim()
        )));
    }
    let blocks = (0..schema.n_fields())
        .map(|i| {
            let (start, end) = schema.range(i);
            (start..=end)
                .map(|g| std::iter::once(fm.w[g]).chain(fm.v[g].iter().copied()).collect())
                .collect()
        })
        .collect();
    Ok((fm.w0, blocks))
}

impl FnnModel {
    pub fn from_fm(fm: &FmModel, schema: &FieldSchema, upper: MlpStack) -> Result<Self> {
        let (w0, blocks) = init_bottom_from_fm(fm, schema)?;
        let model = FnnModel { w0, blocks, upper };
        model.check()?;
        Ok(model)
    }

    pub fn embedding_width(n_fields: usize, k: usize) -> usize {
        1 + n_fields * (k + 1)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let k1 = self.k() + 1;
        if self.blocks.iter().flatten().any(|c| c.len() != k1) {
            return Err(Error::DimensionMismatch("ragged bottom block".into()));
        }
        if self.blocks.iter().any(Vec::is_empty) {
            return Err(Error::DimensionMismatch("empty bottom block".into()));
        }
        let j = Self::embedding_width(self.n_fields(), self.k());
        if self.upper.input_size() != j {
            return Err(Error::DimensionMismatch(format!(
                "upper stack takes {} inputs, embedding has {j}",
                self.upper.input_size()
            )));
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.blocks.len()
    }

    pub fn k(&self) -> usize {
        self.blocks.first().and_then(|b| b.first()).map_or(1, Vec::len) - 1
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// Reads the bottom back out as FM parameters (inverse of [`FnnModel::from_fm`]).
    pub fn to_fm(&self) -> FmModel {
        let columns = self.blocks.iter().flatten();
        FmModel {
            w0: self.w0,
            w: columns.clone().map(|c| c[0]).collect(),
            v: columns.map(|c| c[1..].to_vec()).collect(),
        }
    }

    fn locals(&self, instance: &SparseInstance) -> Result<Vec<usize>> {
        if instance.active.len() != self.n_fields() {
            return Err(Error::DimensionMismatch(format!(
                "instance has {} fields, model has {}",
                instance.active.len(),
                self.n_fields()
            )));
        }
        let mut start = 0;
        let mut locals = Vec::with_capacity(self.n_fields());
        for (block, &g) in self.blocks.iter().zip(&instance.active) {
            let card = block.len();
            if g < start || g >= start + card {
                return Err(Error::IndexOutOfRange {
                    index: g,
                    dim: self.cardinalities().iter().sum(),
                });
            }
            locals.push(g - start);
            start += card;
        }
        Ok(locals)
    }

    /// `z = (w0, z_1, ..., z_n)` with `z_i` the active column of block `i`.
    pub fn embed(&self, instance: &SparseInstance) -> Result<Vec<f64>> {
        let locals = self.locals(instance)?;
        Ok(self.embed_locals(&locals))
    }

    fn embed_locals(&self, locals: &[usize]) -> Vec<f64> {
        let mut z = Vec::with_capacity(Self::embedding_width(self.n_fields(), self.k()));
        z.push(self.w0);
        for (block, &j) in self.blocks.iter().zip(locals) {
            z.extend_from_slice(&block[j]);
        }
        z
    }

    pub fn forward(&self, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<FnnForward> {
        let locals = self.locals(instance)?;
        let z = self.embed_locals(&locals);
        let stack = self.upper.forward(&z, mask)?;
        Ok(FnnForward { z, locals, stack })
    }

    pub fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        Ok(self.forward(instance, None)?.y_hat())
    }

    /// Gradient of the cross-entropy for a cached forward pass.
    pub fn gradient_from(&self, fwd: &FnnForward, y: f64, mask: Option<&DropoutMask>) -> Result<FnnGradient> {
        let upper = self.upper.backward(&fwd.stack, y, mask)?;
        let k1 = self.k() + 1;
        let columns = fwd
            .locals
            .iter()
            .enumerate()
            .map(|(i, &j)| (i, j, upper.input[1 + i * k1..1 + (i + 1) * k1].to_vec()))
            .collect();
        Ok(FnnGradient {
            w0: upper.input[0],
            columns,
            upper,
        })
    }

    pub fn gradient(&self, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<(f64, FnnGradient)> {
        let fwd = self.forward(instance, mask)?;
        let grad = self.gradient_from(&fwd, instance.y(), mask)?;
        Ok((cross_entropy(instance.y(), fwd.y_hat()), grad))
    }

    /// Applies a gradient: the upper stack densely, the bottom only at the
    /// active columns, each shrunk by `l2_lambda` (lazy L2). `w0` is not penalised.
    pub fn apply_gradient(&mut self, grad: &FnnGradient, learning_rate: f64, l2_lambda: f64) -> Result<()> {
        self.upper.apply_gradients(&grad.upper, learning_rate, l2_lambda)?;
        self.w0 -= learning_rate * grad.w0;
        if !self.w0.is_finite() {
            return Err(Error::NonFinite("FNN w0"));
        }
        for (i, j, d) in &grad.columns {
            crate::net::sgd_step(&mut self.blocks[*i][*j], d, learning_rate, l2_lambda)?;
        }
        Ok(())
    }

    /// `||W0||^2` over all blocks plus the upper stack's weights and biases.
    pub fn l2_penalty(&self) -> f64 {
        sum_squares(self.blocks.iter().flatten().flatten()) + self.upper.l2_penalty()
    }
}

pub fn fnn_forward(model: &FnnModel, instance: &SparseInstance, mask: Option<&DropoutMask>) -> Result<FnnForward> {
    model.forward(instance, mask)
}

/// One fine-tuning step from a cached forward pass; returns the loss of that pass.
pub fn fnn_sparse_update(
    model: &mut FnnModel,
    instance: &SparseInstance,
    fwd: &FnnForward,
    learning_rate: f64,
    l2_lambda: f64,
    mask: Option<&DropoutMask>,
) -> Result<f64> {
    let loss = cross_entropy(instance.y(), fwd.y_hat());
    let grad = model.gradient_from(fwd, instance.y(), mask)?;
    model.apply_gradient(&grad, learning_rate, l2_lambda)?;
    Ok(loss)
}

impl Trainable for FnnModel {
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
            let inst = &data.instances()[k];
            let mask = if dropout { Some(self.upper.sample_mask(rng)?) } else { None };
            let fwd = self.forward(inst, mask.as_ref())?;
            total += fnn_sparse_update(self, inst, &fwd, config.learning_rate, config.l2_lambda, mask.as_ref())?;
        }
        Ok(total / order.len() as f64)
    }

    fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        FnnModel::predict(self, instance)
    }
}

/// FM training, bottom initialisation, optional RBM pre-training of the
/// hidden layers, then fine-tuning with early stopping.
pub fn fnn_train(train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<(FnnModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    train.ensure_same_schema(valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schema = train.schema();

    let fm = if config.fm_init {
        let fm_config = TrainConfig {
            learning_rate: config.fm_learning_rate.unwrap_or(config.learning_rate),
            max_epochs: config.fm_max_epochs.unwrap_or(config.max_epochs),
            ..config.clone()
        };
        let (fm, report) = fm_train_with(train, valid, &fm_config, &mut rng)?;
        log::info!("FM stage stopped at epoch {} of {}", report.best_epoch, report.epochs.len());
        fm
    } else {
        FmModel::init(schema.dim(), config.latent_dim, &mut rng)
    };

    let upper = MlpStack::build(
        FnnModel::embedding_width(schema.n_fields(), config.latent_dim),
        &config.hidden,
        config.activation,
        config.keep_prob_or(DEFAULT_KEEP_PROB),
        config.input_dropout,
        &mut rng,
    )?;
    let mut model = FnnModel::from_fm(&fm, schema, upper)?;

    if config.pretrain_upper && config.pretrain_epochs > 0 {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    fn schema() -> FieldSchema {
        FieldSchema::build([("a", vec!["x", "y"]), ("b", vec!["p"])]).unwrap()
    }

    #[test]
    fn zero_fm_gives_zero_columns_and_half() {
        let s = schema();
        let fm = FmModel::zeros(s.dim(), 2);
        let upper = MlpStack::zeros(FnnModel::embedding_width(2, 2), &[3], Activation::Tanh).unwrap();
        let model = FnnModel::from_fm(&fm, &s, upper).unwrap();
        assert!(model.blocks.iter().flatten().flatten().all(|&x| x == 0.0));
        assert_eq!(model.predict(&SparseInstance::new(vec![1, 3], 0)).unwrap(), 0.5);
    }

    #[test]
    fn column_copy_and_round_trip() {
        let s = schema();
        let mut fm = FmModel::zeros(s.dim(), 2);
        fm.w[1] = 0.3;
        fm.v[1] = vec![1.0, 2.0];
        fm.w0 = -0.7;
        fm.v[4] = vec![0.5, -0.5];
        let upper = MlpStack::zeros(FnnModel::embedding_width(2, 2), &[3], Activation::Tanh).unwrap();
        let model = FnnModel::from_fm(&fm, &s, upper).unwrap();
        assert_eq!(model.blocks[0][1], vec![0.3, 1.0, 2.0]);
        assert_eq!(model.w0, -0.7);
        assert_eq!(model.to_fm(), fm);
    }

    #[test]
    fn embedding_layout() {
        let s = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = FmModel::init(s.dim(), 2, &mut rng);
        let upper = MlpStack::zeros(7, &[3], Activation::Tanh).unwrap();
        let model = FnnModel::from_fm(&fm, &s, upper).unwrap();
        let inst = SparseInstance::new(vec![1, 4], 1);
        let z = model.embed(&inst).unwrap();
        assert_eq!(z.len(), 7);
        assert_eq!(z[0], model.w0);
        assert_eq!(&z[1..4], model.blocks[0][1].as_slice());
        assert_eq!(&z[4..7], model.blocks[1][1].as_slice());
    }

    #[test]
    fn mismatches_are_rejected() {
        let s = schema();
        let fm = FmModel::zeros(s.dim() + 1, 2);
        let upper = MlpStack::zeros(7, &[3], Activation::Tanh).unwrap();
        assert!(FnnModel::from_fm(&fm, &s, upper.clone()).is_err());
        let fm = FmModel::zeros(s.dim(), 3);
        assert!(FnnModel::from_fm(&fm, &s, upper).is_err());
    }

    #[test]
    fn zero_upstream_gradient_leaves_bottom() {
        let s = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = FmModel::init(s.dim(), 2, &mut rng);
        // An all-zero stack passes no gradient down to z.
        let upper = MlpStack::zeros(7, &[3], Activation::Tanh).unwrap();
        let mut model = FnnModel::from_fm(&fm, &s, upper).unwrap();
        let before = model.blocks.clone();
        let inst = SparseInstance::new(vec![0, 3], 1);
        let fwd = model.forward(&inst, None).unwrap();
        fnn_sparse_update(&mut model, &inst, &fwd, 0.1, 0.0, None).unwrap();
        assert_eq!(model.blocks, before);
    }
}
