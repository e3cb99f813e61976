//! Model artifact directory: `manifest.json` plus `params.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    f64s_to_le, le_to_f64s, read_checked, read_json, sha256_hex, write_bytes, write_json,
};
use crate::nets::{ModelArtifact, ModelSpec, ParamStore, Provenance};
use crate::tensor::Matrix;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

/// Position of one named array inside `params.bin`, in f64 elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub provenance: Provenance,
    pub params: Vec<ParamEntry>,
    pub params_sha256: String,
}

pub fn save_artifact(artifact: &ModelArtifact, dir: &Path) -> Result<()> {
    artifact.validate()?;
    let mut entries = Vec::with_capacity(artifact.params.len());
    let mut offset = 0;
    for (name, m) in artifact.params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
    }
    let bytes = f64s_to_le(&artifact.params.flatten());
    let manifest = ArtifactManifest {
        format_version: ARTIFACT_FORMAT_VERSION,
        spec: artifact.spec.clone(),
        provenance: artifact.provenance.clone(),
        params: entries,
        params_sha256: sha256_hex(&bytes),
    };
    write_bytes(&dir.join(PARAMS), &bytes)?;
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads and validates an artifact. Nothing is returned unless the
/// version, checksum and layout all check out.
pub fn load_artifact(dir: &Path) -> Result<ModelArtifact> {
    let path = dir.join(MANIFEST);
    let raw: serde_json::Value = read_json(&path)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data(format!("{}: missing format_version", path.display())))?;
    if found != ARTIFACT_FORMAT_VERSION as u64 {
        return Err(Error::Version {
            path,
            expected: ARTIFACT_FORMAT_VERSION,
            found: found as u32,
        });
    }
    let manifest: ArtifactManifest = serde_json::from_value(raw).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let blob = dir.join(PARAMS);
    let bytes = read_checked(&blob, &manifest.params_sha256)?;
    let flat = le_to_f64s(&bytes, &blob)?;
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for e in &manifest.params {
        let n = e.rows * e.cols;
        if e.offset != expected_offset || e.offset + n > flat.len() {
            return Err(Error::Data(format!(
                "{}: array `{}` lies outside the parameter blob",
                path.display(),
                e.name
            )));
        }
        params.insert(
            e.name.clone(),
            Matrix::from_vec(e.rows, e.cols, flat[e.offset..e.offset + n].to_vec()),
        );
        expected_offset += n;
    }
    if expected_offset != flat.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing values in the parameter blob",
            blob.display(),
            flat.len() - expected_offset
        )));
    }
    let artifact = ModelArtifact {
        spec: manifest.spec,
        params,
        provenance: manifest.provenance,
    };
    artifact.validate()?;
    Ok(artifact)
}
