//! Dataset manifests: feature statistics and the patient split, as TOML.

use std::collections::BTreeMap;
use std::path::Path;

use dmegp_core::data::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    feature_count: usize,
    task: String,
    means: Vec<f64>,
    stds: Vec<f64>,
    /// Patient id to `train`, `validation` or `test`.
    splits: BTreeMap<String, String>,
}

pub fn manifest_to_string(m: &DatasetManifest) -> Result<String> {
    let file = ManifestFile {
        feature_count: m.feature_count,
        task: m.task.label().into(),
        means: m.means.clone(),
        stds: m.stds.clone(),
        splits: m.assignment.iter().map(|(k, v)| (k.clone(), v.label().into())).collect(),
    };
    toml::to_string(&file).map_err(|e| CliError::Data(e.to_string()))
}

pub fn manifest_from_str(text: &str) -> Result<DatasetManifest> {
    let file: ManifestFile = toml::from_str(text).map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    let bad = |e: dmegp_core::Error| CliError::Data(format!("manifest: {e}"));
    Ok(DatasetManifest {
        feature_count: file.feature_count,
        task: file.task.parse().map_err(bad)?,
        means: file.means,
        stds: file.stds,
        assignment: file
            .splits
            .into_iter()
            .map(|(k, v)| Ok((k, v.parse().map_err(bad)?)))
            .collect::<Result<_>>()?,
    })
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    write_atomic(path, manifest_to_string(m)?.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    manifest_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmegp_core::data::{Split, TaskKind};

    #[test]
    fn round_trip() {
        let mut assignment = BTreeMap::new();
        assignment.insert("p1".to_string(), Split::Train);
        assignment.insert("p 2".to_string(), Split::Test);
        let m = DatasetManifest { feature_count: 1, means: vec![0.25], stds: vec![3.0], task: TaskKind::Classification, assignment };
        assert_eq!(manifest_from_str(&manifest_to_string(&m).unwrap()).unwrap(), m);
    }
}
