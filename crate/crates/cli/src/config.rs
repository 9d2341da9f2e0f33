//! The run configuration file and how command-line flags are layered on top.

use std::fs;
use std::path::{Path, PathBuf};

use attrdet::datamodel::{load_manifest, Dataset};
use attrdet::evaluation::EvalConfig;
use attrdet::model::ModelVariant;
use attrdet::synthdata::{generate, SynthConfig};
use attrdet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Where the training and test sets come from. Paths are manifest files;
/// a missing path means the set is generated from the `[synth]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Size of a generated test set. It uses seed `synth.seed + 1` and the
    /// image prefix `test`.
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            test_images: 400,
        }
    }
}

/// Contents of a `--config` TOML file. Every table is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Flag values that override the file. `None` leaves the file value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub variant: Option<ModelVariant>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies flag overrides to the training table. The seed is the
    /// training seed only; a generated dataset keeps `synth.seed`.
    pub fn apply_train_overrides(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.train.variant = v;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(n) = o.steps {
            self.train.max_steps = n;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.lr {
            self.train.learning_rate = lr;
        }
        if let Some(m) = &o.manifest {
            self.data.train = Some(m.clone());
        }
    }

    pub fn test_synth(&self) -> SynthConfig {
        SynthConfig {
            n_images: self.data.test_images,
            seed: self.synth.seed.wrapping_add(1),
            image_prefix: "test".into(),
            ..self.synth.clone()
        }
    }

    pub fn train_set(&self) -> CliResult<Dataset> {
        match &self.data.train {
            Some(p) => Ok(load_manifest(p)?),
            None => Ok(generate(&self.synth)?),
        }
    }

    pub fn test_set(&self) -> CliResult<Dataset> {
        match &self.data.test {
            Some(p) => Ok(load_manifest(p)?),
            None => Ok(generate(&self.test_synth())?),
        }
    }
}
