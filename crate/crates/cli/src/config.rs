//! Declarative run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use lga_core::data::{read_dataset, split_by_patient, synth_dataset, Dataset, SplitSpec, SynthSpec};
use lga_core::model::ModelConfig;
use lga_core::train::TrainSpec;
use lga_core::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where records come from: a dataset file, or a synthetic spec generated
/// in memory. Exactly one must be given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// Parse JSON text; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("config field `{path}`: {}", e.inner()))
        })
    }

    /// Load from a file. A relative `data.path` is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn with_overrides(mut self, seed: Option<u64>, precision: Option<Precision>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(p) = precision {
            self.model.precision = p;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        self.split.validate().map_err(|e| CliError::Usage(format!("split: {e}")))?;
        match (&self.data.path, &self.data.synth) {
            (None, None) => return Err(CliError::Usage("data: give either `path` or `synth`".into())),
            (Some(_), Some(_)) => return Err(CliError::Usage("data: `path` and `synth` are mutually exclusive".into())),
            (None, Some(s)) => {
                s.validate().map_err(|e| CliError::Usage(format!("data.synth: {e}")))?;
                let m = &self.model;
                if (s.leads, s.len, s.classes) != (m.leads, m.input_len, m.classes) {
                    return Err(CliError::Usage(format!(
                        "data.synth (leads {}, len {}, classes {}) does not match model ({}, {}, {})",
                        s.leads, s.len, s.classes, m.leads, m.input_len, m.classes
                    )));
                }
            }
            (Some(_), None) => {}
        }
        Ok(())
    }

    /// Read or generate the dataset and check it against the model.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let ds = match (&self.data.path, &self.data.synth) {
            (Some(p), _) => {
                if !p.exists() {
                    return Err(CliError::Usage(format!("data path {} does not exist", p.display())));
                }
                read_dataset(p)?
            }
            (None, Some(s)) => synth_dataset(s)?,
            (None, None) => return Err(CliError::Usage("data: give either `path` or `synth`".into())),
        };
        let m = &self.model;
        if (ds.leads, ds.len, ds.classes) != (m.leads, m.input_len, m.classes) {
            return Err(CliError::Usage(format!(
                "dataset has {} leads × {} samples × {} classes, model expects {} × {} × {}",
                ds.leads, ds.len, ds.classes, m.leads, m.input_len, m.classes
            )));
        }
        Ok(ds)
    }

    /// `(train, val, dev)` by patient.
    pub fn splits(&self) -> Result<(Dataset, Dataset, Dataset), CliError> {
        let ds = self.dataset()?;
        Ok(split_by_patient(&ds, &self.split)?)
    }

    /// The desk-scale configuration: 512 synthetic records, a 64-wide
    /// three-stage model with 16-sample windows.
    pub fn tiny() -> Self {
        let model = ModelConfig {
            input_len: 512,
            embed_dim: 64,
            stages: 3,
            window_len: 16,
            ..ModelConfig::default()
        };
        let mut train = TrainSpec::default();
        train.schedule.lr_start = 1e-3;
        train.schedule.lr_end = 1e-4;
        RunConfig {
            seed: 42,
            train,
            split: SplitSpec {
                train: 0.7,
                val: 0.15,
                dev: 0.15,
                seed: 42,
            },
            data: DataConfig {
                path: None,
                synth: Some(SynthSpec::new(512, model.classes, 42, model.leads, model.input_len)),
            },
            model,
        }
    }

    /// Seconds-scale smoke configuration on the gradient-check model:
    /// 2 leads × 64 samples, 96 records, 4 epochs.
    pub fn miniature() -> Self {
        let model = lga_core::gradcheck::miniature_config();
        let mut train = TrainSpec::default();
        train.schedule.lr_start = 3e-3;
        train.schedule.lr_end = 3e-4;
        train.schedule.total_epochs = 4;
        RunConfig {
            seed: 7,
            train,
            split: SplitSpec {
                train: 0.5,
                val: 0.25,
                dev: 0.25,
                seed: 7,
            },
            data: DataConfig {
                path: None,
                synth: Some(SynthSpec::new(96, model.classes, 7, model.leads, model.input_len)),
            },
            model,
        }
    }
}
