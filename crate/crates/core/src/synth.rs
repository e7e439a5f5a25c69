//! Synthetic click data drawn from a planted factorisation-machine teacher.
//!
//! Field `f{i}` takes values `v0..v{c-1}` uniformly at random. The label is
//! Bernoulli with probability `sigmoid(teacher logit)`, where the teacher's
//! pairwise interactions carry most of the signal so that a purely additive
//! model cannot capture it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fm::FmModel;
use crate::schema::{FieldSchema, SparseInstance};

pub const LABEL_COLUMN: &str = "click";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub fields: usize,
    pub cardinality: usize,
    pub instances: usize,
    /// Latent dimension of the teacher.
    pub planted_k: usize,
    /// Standard deviation of the summed pairwise term over a random instance.
    pub interaction_scale: f64,
    /// Standard deviation of each linear weight.
    pub linear_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fields: 5,
            cardinality: 10,
            instances: 24_000,
            planted_k: 4,
            interaction_scale: 3.0,
            linear_scale: 0.3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    pub teacher: FmModel,
}

fn uniform_with_std<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    let a = std * 3f64.sqrt();
    if a == 0.0 {
        0.0
    } else {
        rng.random_range(-a..a)
    }
}

pub fn synth_schema(fields: usize, cardinality: usize) -> Result<FieldSchema> {
    FieldSchema::build((0..fields).map(|i| (format!("f{i}"), (0..cardinality).map(|v| format!("v{v}")))))
}

/// Teacher over the schema's one-hot layout; OOV slots get zero parameters.
/// The teacher bias centres the logit so both classes are well represented.
pub fn planted_teacher<R: Rng + ?Sized>(schema: &FieldSchema, config: &SynthConfig, rng: &mut R) -> FmModel {
    let pairs = (config.fields * config.fields.saturating_sub(1) / 2).max(1) as f64;
    // Var(<v_i, v_j>) = K s^4 for independent entries of standard deviation s.
    let entry_std = (config.interaction_scale.powi(2) / (pairs * config.planted_k.max(1) as f64)).powf(0.25);
    let mut teacher = FmModel::zeros(schema.dim(), config.planted_k);
    for field in 0..schema.n_fields() {
        let (start, _) = schema.range(field);
        for g in start..schema.oov_index(field) {
            teacher.w[g] = uniform_with_std(config.linear_scale, rng);
            for x in &mut teacher.v[g] {
                *x = uniform_with_std(entry_std, rng);
            }
        }
    }
    teacher
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    if config.fields == 0 || config.cardinality == 0 || config.planted_k == 0 {
        return Err(Error::config("synth needs at least one field, value and latent dimension"));
    }
    if !(config.interaction_scale >= 0.0 && config.linear_scale >= 0.0) {
        return Err(Error::config("synth scales must be non-negative"));
    }
    let schema = Arc::new(synth_schema(config.fields, config.cardinality)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut teacher = planted_teacher(&schema, config, &mut rng);
    let records: Vec<Vec<usize>> = (0..config.instances)
        .map(|_| {
            (0..config.fields)
                .map(|f| schema.start(f) + rng.random_range(0..config.cardinality))
                .collect()
        })
        .collect();
    let mut logits = records
        .iter()
        .map(|active| teacher.logit(&SparseInstance::new(active.clone(), 0)))
        .collect::<Result<Vec<_>>>()?;
    if !logits.is_empty() {
        let mean = logits.iter().sum::<f64>() / logits.len() as f64;
        teacher.w0 = -mean;
        logits.iter_mut().for_each(|l| *l -= mean);
    }
    let instances = records
        .into_iter()
        .zip(logits)
        .map(|(active, logit)| {
            let label = rng.random::<f64>() < crate::sigmoid(logit);
            SparseInstance::new(active, label as u8)
        })
        .collect();
    Ok(SynthData {
        dataset: Dataset::new(schema, instances)?,
        teacher,
    })
}
