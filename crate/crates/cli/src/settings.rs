//! The flat run configuration: trainer keys plus dataset and model keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ews_core::data::{synthetic, Dataset, SyntheticConfig};
use ews_core::topology::InputShape;
use ews_core::train::TrainConfig;
use ews_core::ModelTopology;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    /// `synthetic`, a packed dataset file or a class-folder directory.
    pub dataset: String,
    pub data_classes: usize,
    pub data_train: usize,
    pub data_val: usize,
    pub data_test: usize,
    pub data_jitter: f64,
    pub data_noise: f64,
    pub data_seed: u64,
    /// Side length images are resized to when read from class folders.
    pub image_size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            dataset: "synthetic".into(),
            data_classes: s.classes,
            data_train: s.train,
            data_val: s.val,
            data_test: s.test,
            data_jitter: s.jitter,
            data_noise: s.noise,
            data_seed: s.seed,
            image_size: s.height,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub groups: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            groups: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub data: DataSettings,
    #[serde(flatten)]
    pub model: ModelSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let config: RunConfig = ews_core::config::load(path, overrides)?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> anyhow::Result<String> {
        Ok(ews_core::config::to_text(self)?)
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        let d = &self.data;
        if d.dataset == "synthetic" {
            return Ok(synthetic(&SyntheticConfig {
                classes: d.data_classes,
                train: d.data_train,
                val: d.data_val,
                test: d.data_test,
                height: d.image_size,
                width: d.image_size,
                jitter: d.data_jitter,
                noise: d.data_noise,
                seed: d.data_seed,
                ..SyntheticConfig::default()
            })?);
        }
        let source = PathBuf::from(&d.dataset);
        if source.is_dir() {
            let shape = InputShape {
                height: d.image_size,
                width: d.image_size,
                channels: 3,
            };
            Dataset::from_class_folders(&source, shape, d.val_fraction, d.test_fraction, d.data_seed)
                .with_context(|| format!("reading class folders under {}", source.display()))
        } else if source.is_file() {
            Dataset::read_packed(&source).with_context(|| format!("reading packed dataset {}", source.display()))
        } else {
            bail!("dataset `{}` is neither `synthetic`, a packed file nor a directory", d.dataset)
        }
    }

    pub fn topology(&self, data: &Dataset) -> anyhow::Result<ModelTopology> {
        Ok(ModelTopology::residual(
            data.input_shape(),
            &self.model.widths,
            self.model.blocks_per_stage,
            data.num_classes(),
            self.model.groups,
        )?)
    }
}
