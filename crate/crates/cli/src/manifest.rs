//! Run manifests and dataset fingerprints.

use std::fs;
use std::path::Path;

use attrdet::datamodel::{manifest_to_string, Dataset, SplitFile};
use attrdet::model::ModelVariant;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Written into every output directory before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub variant: Option<ModelVariant>,
    pub seed: u64,
    /// Hex sha256 of the input (or generated) dataset.
    pub dataset_fingerprint: String,
    pub test_fingerprint: Option<String>,
    pub split: Option<SplitFile>,
    /// The fully resolved configuration, flags applied.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, dataset_fingerprint: String) -> CliResult<Self> {
        Ok(RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            variant: None,
            seed,
            dataset_fingerprint,
            test_fingerprint: None,
            split: None,
            config: serde_json::to_value(config)?,
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(RUN_MANIFEST), self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json(value: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

/// Hashes the canonical manifest text followed by every image's decoded RGB
/// pixels, so re-encoding a PNG or moving the directory keeps the
/// fingerprint.
pub fn fingerprint(dataset: &Dataset) -> CliResult<String> {
    let mut h = Sha256::new();
    h.update(manifest_to_string(dataset)?.as_bytes());
    for i in 0..dataset.samples.len() {
        let img = dataset.load_image(i)?;
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
    }
    Ok(hex::encode(h.finalize()))
}
