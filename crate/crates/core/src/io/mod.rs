//! File formats, engine configuration and the dataset layout.

pub mod config;
pub mod dataset;
pub mod pfm;
pub mod ply;
pub mod png;

use std::path::Path;

use crate::error::{Error, Result};

pub use config::EngineConfig;
pub use dataset::{write_oracle_dataset, DatasetLayout, Manifest};
pub use pfm::{read_flow, read_pfm, write_flow, write_pfm};
pub use ply::{load_cloud, save_cloud};
pub use png::{read_mask, read_png, write_mask, write_png};

/// Reads a whole file; a missing file becomes [`Error::MissingArtifact`].
pub(crate) fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.into())
        } else {
            e.into()
        }
    })
}

/// Writes `value` as pretty JSON under a top-level `"version"` key.
pub(crate) fn save_versioned_json<T: serde::Serialize>(path: &Path, version: u32, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    let obj = v.as_object_mut().ok_or_else(|| Error::InvalidInput("versioned JSON must be an object".into()))?;
    obj.insert("version".into(), version.into());
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

pub(crate) fn load_versioned_json<T: serde::de::DeserializeOwned>(path: &Path, supported: u32) -> Result<T> {
    let bytes = read_artifact(path)?;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let found = v
        .as_object_mut()
        .and_then(|o| o.remove("version"))
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::format(path, "missing version"))?;
    if found > supported as u64 {
        return Err(Error::UnsupportedVersion { path: path.into(), found: found as u32, supported });
    }
    serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))
}
