//! Self-describing JSON model files.
//!
//! A file carries a format tag and version, the model kind with its
//! parameters, the field schema used for encoding, the training config and
//! the seed. Floats are written in shortest round-trip form and parsed
//! exactly, so a loaded model reproduces the saved model's predictions bit for bit.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::{lr_train, LrModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fm::{fm_train, FmModel};
use crate::fnn::{fnn_train, FnnModel};
use crate::schema::{FieldSchema, SparseInstance};
use crate::snn::{snn_train, PretrainMethod, SnnModel};
use crate::train::{select_learning_rate, ModelTrainer, TrainConfig, TrainReport};

pub const FORMAT: &str = "deepctr-model";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lr,
    Fm,
    Fnn,
    SnnRbm,
    SnnDae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Lr, ModelKind::Fm, ModelKind::Fnn, ModelKind::SnnRbm, ModelKind::SnnDae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Fm => "fm",
            ModelKind::Fnn => "fnn",
            ModelKind::SnnRbm => "snn-rbm",
            ModelKind::SnnDae => "snn-dae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum TrainedModel {
    Lr(LrModel),
    Fm(FmModel),
    Fnn(FnnModel),
    SnnRbm(SnnModel),
    SnnDae(SnnModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Lr(_) => ModelKind::Lr,
            TrainedModel::Fm(_) => ModelKind::Fm,
            TrainedModel::Fnn(_) => ModelKind::Fnn,
            TrainedModel::SnnRbm(_) => ModelKind::SnnRbm,
            TrainedModel::SnnDae(_) => ModelKind::SnnDae,
        }
    }

    pub fn predict(&self, instance: &SparseInstance) -> Result<f64> {
        match self {
            TrainedModel::Lr(m) => m.predict(instance),
            TrainedModel::Fm(m) => m.predict(instance),
            TrainedModel::Fnn(m) => m.predict(instance),
            TrainedModel::SnnRbm(m) | TrainedModel::SnnDae(m) => m.predict(instance),
        }
    }

    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.instances().iter().map(|i| self.predict(i)).collect()
    }

    /// Checks the parameter layout against the schema it claims to encode.
    pub fn check_against(&self, schema: &FieldSchema) -> Result<()> {
        let mismatch = |what: &str, got: usize, want: usize| {
            Error::ModelFormat(format!("{what} has {got} entries, schema expects {want}"))
        };
        let dim = schema.dim();
        match self {
            TrainedModel::Lr(m) => {
                if m.w.len() != dim {
                    return Err(mismatch("LR weights", m.w.len(), dim));
                }
            }
            TrainedModel::Fm(m) => {
                if m.w.len() != dim || m.v.len() != dim {
                    return Err(mismatch("FM parameters", m.w.len().min(m.v.len()), dim));
                }
                let k = m.k();
                if m.v.iter().any(|v| v.len() != k) {
                    return Err(Error::ModelFormat("ragged FM latent vectors".into()));
                }
            }
            TrainedModel::Fnn(m) => {
                m.upper.check()?;
                m.check()?;
                if m.cardinalities() != schema.cardinalities() {
                    return Err(Error::ModelFormat("FNN blocks do not match schema fields".into()));
                }
            }
            TrainedModel::SnnRbm(m) | TrainedModel::SnnDae(m) => {
                m.upper.check()?;
                if m.w0.len() != dim {
                    return Err(mismatch("SNN bottom columns", m.w0.len(), dim));
                }
                if m.w0.iter().any(|c| c.len() != m.b0.len()) || m.upper.input_size() != m.b0.len() {
                    return Err(Error::ModelFormat("SNN bottom layer shape is inconsistent".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: String,
    #[serde(flatten)]
    pub model: TrainedModel,
    pub schema: FieldSchema,
    pub config: TrainConfig,
    pub seed: u64,
}

impl ModelFile {
    pub fn new(model: TrainedModel, schema: FieldSchema, config: TrainConfig) -> Self {
        ModelFile {
            format: FORMAT.to_string(),
            version: VERSION.to_string(),
            seed: config.seed,
            model,
            schema,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::ModelFormat(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::ModelFormat(format!("unsupported version `{}`", self.version)));
        }
        self.model.check_against(&self.schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(self.to_json()?.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::ModelFormat(e.to_string()))?;
        file.check()?;
        Ok(file)
    }
}

impl ModelTrainer for ModelKind {
    type Model = TrainedModel;

    fn fit(&self, train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
        Ok(match self {
            ModelKind::Lr => {
                let (m, r) = lr_train(train, valid, config)?;
                (TrainedModel::Lr(m), r)
            }
            ModelKind::Fm => {
                let (m, r) = fm_train(train, valid, config)?;
                (TrainedModel::Fm(m), r)
            }
            ModelKind::Fnn => {
                let (m, r) = fnn_train(train, valid, config)?;
                (TrainedModel::Fnn(m), r)
            }
            ModelKind::SnnRbm => {
                let (m, r) = snn_train(train, valid, config, PretrainMethod::Rbm)?;
                (TrainedModel::SnnRbm(m), r)
            }
            ModelKind::SnnDae => {
                let (m, r) = snn_train(train, valid, config, PretrainMethod::Dae)?;
                (TrainedModel::SnnDae(m), r)
            }
        })
    }
}

/// Trains `kind`, first choosing the learning rate from `config.lr_grid` when
/// `config.select_learning_rate` is set. Returns the config actually used.
pub fn train_model(
    kind: ModelKind,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainReport, TrainConfig)> {
    config.validate()?;
    let mut config = config.clone();
    if config.select_learning_rate {
        config.learning_rate = select_learning_rate(&kind, train, valid, &config)?;
        log::info!("selected learning rate {}", config.learning_rate);
    }
    let (model, report) = kind.fit(train, valid, &config)?;
    Ok((model, report, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn data() -> Dataset {
        let schema = Arc::new(FieldSchema::build([("a", vec!["x", "y"]), ("b", vec!["p", "q", "r"])]).unwrap());
        let inst = (0..20)
            .map(|k| SparseInstance::new(vec![k % 2, 3 + k % 3], ((k % 2) ^ (k % 3 == 0) as usize) as u8))
            .collect();
        Dataset::new(schema, inst).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: vec![4, 3],
            latent_dim: 2,
            max_epochs: 3,
            learning_rate: 0.1,
            ..Default::default()
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn every_kind_round_trips_bit_exactly() {
        let d = data();
        for kind in ModelKind::ALL {
            let (model, _, cfg) = train_model(kind, &d, &d, &small_config()).unwrap();
            let file = ModelFile::new(model, d.schema().clone(), cfg);
            let text = file.to_json().unwrap();
            assert!(text.contains(&format!("\"kind\": \"{kind}\"")));
            let back = ModelFile::from_json(&text).unwrap();
            assert_eq!(back, file);
            for inst in d.instances() {
                let a = file.model.predict(inst).unwrap();
                let b = back.model.predict(inst).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_layout_and_version() {
        let d = data();
        let file = ModelFile::new(TrainedModel::Lr(LrModel::zeros(3)), d.schema().clone(), TrainConfig::default());
        assert!(matches!(ModelFile::from_json(&file.to_json().unwrap()), Err(Error::ModelFormat(_))));
        let mut file = ModelFile::new(TrainedModel::Lr(LrModel::zeros(d.schema().dim())), d.schema().clone(), TrainConfig::default());
        file.version = "0".into();
        assert!(ModelFile::from_json(&file.to_json().unwrap()).is_err());
    }
}
