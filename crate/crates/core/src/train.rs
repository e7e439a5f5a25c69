//! Epoch loop, early stopping, learning-rate selection and grid search.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, ScoredSet};
use crate::net::Activation;
use crate::schema::SparseInstance;

/// Hyperparameters shared by every model kind. Fields a model does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    /// Pick `learning_rate` from `lr_grid` on validation AUC before the final fit.
    pub select_learning_rate: bool,
    pub max_epochs: usize,
    pub patience: usize,
    /// Dropout keep probability; `None` uses the model's default.
    pub keep_prob: Option<f64>,
    pub input_dropout: bool,
    pub l2_lambda: f64,
    /// Negative units sampled per field during SNN pre-training (`m`).
    pub negatives: usize,
    /// FM latent dimension `K`.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// SNN bottom width; defaults to the first hidden size.
    pub bottom_width: Option<usize>,
    /// FNN stage-one FM overrides.
    pub fm_learning_rate: Option<f64>,
    pub fm_max_epochs: Option<usize>,
    /// Initialise the FNN bottom from a trained FM. Disabling it trains
    /// the same architecture from a random bottom (debug only).
    pub fm_init: bool,
    pub pretrain_upper: bool,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub bottom_pretrain_epochs: usize,
    pub bottom_pretrain_learning_rate: f64,
    /// DAE masking-noise probability `q`.
    pub corruption: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            lr_grid: vec![1.0, 0.1, 0.01, 0.001, 0.0001],
            select_learning_rate: false,
            max_epochs: 20,
            patience: 1,
            keep_prob: None,
            input_dropout: false,
            l2_lambda: 0.0,
            negatives: 2,
            latent_dim: 10,
            hidden: vec![200, 300, 100],
            activation: Activation::Tanh,
            bottom_width: None,
            fm_learning_rate: None,
            fm_max_epochs: None,
            fm_init: true,
            pretrain_upper: true,
            pretrain_epochs: 1,
            pretrain_learning_rate: 0.01,
            bottom_pretrain_epochs: 1,
            bottom_pretrain_learning_rate: 0.01,
            corruption: 0.3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) || !self.lr_grid.iter().copied().all(positive) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.fm_learning_rate.is_some_and(|r| !positive(r)) {
            return Err(Error::config("fm_learning_rate must be positive"));
        }
        if self.max_epochs == 0 || self.fm_max_epochs == Some(0) {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if let Some(p) = self.keep_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("keep_prob {p} not in (0, 1]")));
            }
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::config("l2_lambda must be non-negative"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.bottom_width == Some(0) {
            return Err(Error::config("layer sizes must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.corruption) {
            return Err(Error::config("corruption must lie in [0, 1)"));
        }
        if !positive(self.pretrain_learning_rate) || !positive(self.bottom_pretrain_learning_rate) {
            return Err(Error::config("pre-training learning rates must be positive"));
        }
        Ok(())
    }

    pub fn keep_prob_or(&self, default: f64) -> f64 {
        self.keep_prob.unwrap_or(default)
    }
}

/// A model that can be trained one epoch at a time.
pub trait Trainable: Clone {
    /// One SGD pass over `data` in `order`; returns the mean training loss.
    fn train_epoch(
        &mut self,
        data: &Dataset,
        order: &[usize],
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64>;

    fn predict(&self, instance: &SparseInstance) -> Result<f64>;
}

pub fn predict_all<M: Trainable>(model: &M, data: &Dataset) -> Result<Vec<f64>> {
    data.instances().iter().map(|i| model.predict(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// `None` when the validation set holds a single class.
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot was returned.
    pub best_epoch: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for TrainReport {
    // Wall time is measurement noise, not part of the training outcome.
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs && self.best_epoch == other.best_epoch
    }
}

pub const REPORT_COLUMNS: [&str; 4] = ["epoch", "train_loss", "valid_loss", "valid_auc"];

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn best_valid_auc(&self) -> Option<f64> {
        self.best().valid_auc
    }

    /// CSV with the given leading config columns followed by [`REPORT_COLUMNS`].
    pub fn write_csv<W: Write>(&self, writer: W, config_columns: &[(&str, String)]) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let header: Vec<&str> = config_columns.iter().map(|(k, _)| *k).chain(REPORT_COLUMNS).collect();
        out.write_record(&header)?;
        for rec in &self.epochs {
            let mut row: Vec<String> = config_columns.iter().map(|(_, v)| v.clone()).collect();
            row.push(rec.epoch.to_string());
            row.push(rec.train_loss.to_string());
            row.push(rec.valid_loss.to_string());
            row.push(rec.valid_auc.map_or_else(String::new, |a| a.to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }
}

/// Stops once validation loss has failed to decrease against the previous
/// epoch `patience` times in a row; remembers the epoch with minimum loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    epoch: usize,
    previous: Option<f64>,
    streak: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            epoch: 0,
            previous: None,
            streak: 0,
            best: None,
        }
    }

    /// Records one epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epoch += 1;
        match self.previous {
            Some(prev) if loss >= prev => self.streak += 1,
            _ => self.streak = 0,
        }
        self.previous = Some(loss);
        let improved = self.best.is_none_or(|(_, b)| loss < b);
        if improved {
            self.best = Some((self.epoch, loss));
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.streak >= self.patience
    }

    /// 1-based epoch of the minimum loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

fn valid_metrics<M: Trainable>(model: &M, valid: &Dataset) -> Result<(f64, Option<f64>)> {
    let scored = ScoredSet::new(predict_all(model, valid)?, valid.labels())?;
    let loss = eval::logloss(&scored)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss"));
    }
    let auc = match eval::auc(&scored) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok((loss, auc))
}

/// Trains epoch by epoch, keeping a snapshot of the model with the lowest
/// validation cross-entropy, and returns that snapshot.
pub fn fit_with_early_stopping<M: Trainable>(
    mut model: M,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(M, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if valid.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    train.ensure_same_schema(valid)?;
    let started = Instant::now();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let train_loss = model.train_epoch(train, &order, config, rng)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let (valid_loss, valid_auc) = valid_metrics(&model, valid)?;
        log::debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6} auc {valid_auc:?}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_auc,
        });
        if stopper.observe(valid_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let report = TrainReport {
        epochs,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        wall_time: started.elapsed(),
    };
    Ok((best, report))
}

/// Something that turns a config into a trained model and its report.
pub trait ModelTrainer: Sync {
    type Model: Send;

    fn fit(&self, train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<(Self::Model, TrainReport)>;
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Trains once per rate in `config.lr_grid` (same seed) and returns the rate
/// with the best validation AUC; ties go to the smaller rate.
pub fn select_learning_rate<T: ModelTrainer>(
    trainer: &T,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    if config.lr_grid.is_empty() {
        return Err(Error::config("learning-rate grid is empty"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &rate in &config.lr_grid {
        let cfg = TrainConfig {
            learning_rate: rate,
            select_learning_rate: false,
            ..config.clone()
        };
        let auc = match trainer.fit(train, valid, &cfg) {
            Ok((_, report)) => report.best_valid_auc().unwrap_or(0.5),
            Err(e) if is_divergence(&e) => {
                log::info!("learning rate {rate} diverged");
                continue;
            }
            Err(e) => return Err(e),
        };
        let better = match best {
            None => true,
            Some((r, a)) => auc > a || (auc == a && rate < r),
        };
        if better {
            best = Some((rate, auc));
        }
    }
    best.map(|(r, _)| r).ok_or(Error::AllDiverged)
}

/// Layer-size profile over three hidden layers for a fixed unit budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Constant,
    Increasing,
    Decreasing,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Constant, Shape::Increasing, Shape::Decreasing, Shape::Diamond];

    fn ratios(self) -> [usize; 3] {
        match self {
            Shape::Constant => [1, 1, 1],
            Shape::Increasing => [1, 2, 3],
            Shape::Decreasing => [3, 2, 1],
            Shape::Diamond => [2, 3, 1],
        }
    }

    /// Splits `total` units by the shape's ratios, rounding each to the nearest 10.
    pub fn layer_sizes(self, total: usize) -> Vec<usize> {
        let ratios = self.ratios();
        let denom: usize = ratios.iter().sum();
        ratios
            .iter()
            .map(|&r| {
                let exact = total as f64 * r as f64 / denom as f64;
                (((exact / 10.0).round() * 10.0) as usize).max(1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeSweep {
    pub totals: Vec<usize>,
    pub kinds: Vec<Shape>,
}

/// Cartesian grid over hyperparameters; empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub learning_rate: Vec<f64>,
    pub keep_prob: Vec<f64>,
    pub l2_lambda: Vec<f64>,
    pub hidden: Vec<Vec<usize>>,
    pub shapes: Option<ShapeSweep>,
    pub negatives: Vec<usize>,
    pub activation: Vec<Activation>,
    pub latent_dim: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: TrainConfig,
}

/// Values of one grid axis; an empty axis keeps the base value.
fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl GridSpec {
    pub fn expand(&self) -> Vec<GridCell> {
        let base = &self.base;
        let mut hidden: Vec<(Vec<usize>, String)> = self
            .hidden
            .iter()
            .map(|h| (h.clone(), join_sizes(h)))
            .collect();
        if let Some(sweep) = &self.shapes {
            for &total in &sweep.totals {
                for &kind in &sweep.kinds {
                    let sizes = kind.layer_sizes(total);
                    let label = format!("{}:{}", serde_plain(&kind), join_sizes(&sizes));
                    hidden.push((sizes, label));
                }
            }
        }
        let hidden_axis: Vec<Option<(Vec<usize>, String)>> = if hidden.is_empty() {
            vec![None]
        } else {
            hidden.into_iter().map(Some).collect()
        };

        let keep_probs: Vec<Option<f64>> = self.keep_prob.iter().copied().map(Some).collect();
        let mut cells = Vec::new();
        for lr in axis(&self.learning_rate, base.learning_rate) {
            for p in axis(&keep_probs, base.keep_prob) {
                for l2 in axis(&self.l2_lambda, base.l2_lambda) {
                    for h in &hidden_axis {
                        for m in axis(&self.negatives, base.negatives) {
                            for act in axis(&self.activation, base.activation) {
                                for k in axis(&self.latent_dim, base.latent_dim) {
                                    let mut labels = Vec::new();
                                    if !self.learning_rate.is_empty() {
                                        labels.push(format!("lr={lr}"));
                                    }
                                    if let (false, Some(p)) = (self.keep_prob.is_empty(), p) {
                                        labels.push(format!("keep_prob={p}"));
                                    }
                                    if !self.l2_lambda.is_empty() {
                                        labels.push(format!("l2={l2}"));
                                    }
                                    if let Some((_, name)) = h {
                                        labels.push(format!("hidden={name}"));
                                    }
                                    if !self.negatives.is_empty() {
                                        labels.push(format!("m={m}"));
                                    }
                                    if !self.activation.is_empty() {
                                        labels.push(format!("activation={}", serde_plain(&act)));
                                    }
                                    if !self.latent_dim.is_empty() {
                                        labels.push(format!("k={k}"));
                                    }
                                    let config = TrainConfig {
                                        learning_rate: lr,
                                        keep_prob: p,
                                        l2_lambda: l2,
                                        hidden: h.as_ref().map_or_else(|| base.hidden.clone(), |(s, _)| s.clone()),
                                        negatives: m,
                                        activation: act,
                                        latent_dim: k,
                                        ..base.clone()
                                    };
                                    let label = if labels.is_empty() { "base".to_string() } else { labels.join(" ") };
                                    cells.push(GridCell { label, config });
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

fn join_sizes(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

fn serde_plain<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub index: usize,
    pub label: String,
    pub config: TrainConfig,
    /// `None` when the run diverged.
    pub outcome: Option<GridOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub valid_auc: Option<f64>,
    pub valid_loss: f64,
    pub best_epoch: usize,
}

/// Seed of grid cell `index`, derived from the base seed (splitmix64 mix).
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs every cell (in parallel) and returns rows sorted by validation AUC,
/// best first; diverged cells sort last.
pub fn grid_search<T: ModelTrainer>(
    trainer: &T,
    train: &Dataset,
    valid: &Dataset,
    cells: &[GridCell],
) -> Result<Vec<GridRow>> {
    if cells.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let mut rows = cells
        .par_iter()
        .enumerate()
        .map(|(index, cell)| {
            let mut cfg = cell.config.clone();
            cfg.seed = cell_seed(cell.config.seed, index);
            let outcome = match trainer.fit(train, valid, &cfg) {
                Ok((_, report)) => Some(GridOutcome {
                    valid_auc: report.best_valid_auc(),
                    valid_loss: report.best().valid_loss,
                    best_epoch: report.best_epoch,
                }),
                Err(e) if is_divergence(&e) => None,
                Err(e) => return Err(e),
            };
            Ok(GridRow {
                index,
                label: cell.label.clone(),
                config: cfg,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let key = |r: &GridRow| r.outcome.as_ref().map(|o| o.valid_auc.unwrap_or(f64::NEG_INFINITY));
    rows.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(rows)
}

pub const GRID_COLUMNS: [&str; 14] = [
    "rank",
    "cell",
    "label",
    "learning_rate",
    "keep_prob",
    "l2_lambda",
    "hidden",
    "negatives",
    "activation",
    "latent_dim",
    "best_epoch",
    "valid_loss",
    "valid_auc",
    "status",
];

pub fn write_grid_csv<W: Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(GRID_COLUMNS)?;
    for (rank, row) in rows.iter().enumerate() {
        let c = &row.config;
        let (epoch, loss, auc, status) = match &row.outcome {
            Some(o) => (
                o.best_epoch.to_string(),
                o.valid_loss.to_string(),
                o.valid_auc.map_or_else(String::new, |a| a.to_string()),
                "ok",
            ),
            None => (String::new(), String::new(), String::new(), "diverged"),
        };
        out.write_record([
            (rank + 1).to_string(),
            row.index.to_string(),
            row.label.clone(),
            c.learning_rate.to_string(),
            c.keep_prob.map_or_else(String::new, |p| p.to_string()),
            c.l2_lambda.to_string(),
            join_sizes(&c.hidden),
            c.negatives.to_string(),
            serde_plain(&c.activation),
            c.latent_dim.to_string(),
            epoch,
            loss,
            auc,
            status.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<grid table>", e))?;
    Ok(())
}
