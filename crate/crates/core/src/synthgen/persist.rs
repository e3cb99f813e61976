//! Directory-per-scenario dataset format. See `docs/FORMATS.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Partition, ScenarioDataset, UniverseConfig};
use crate::error::{Error, Result};
use crate::io::{
    f64s_to_le, le_to_f64s, le_to_u32s, read_checked, read_json, sha256_hex, u32s_to_le,
    write_bytes, write_json,
};
use crate::tensor::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const PROFILES: &str = "profiles.f64";
const SEQUENCES: &str = "sequences.u32";
const MASK: &str = "seq_mask.u8";
const LABELS: &str = "labels.u8";
const PARTITION: &str = "partition.u8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scenario_id: usize,
    pub rows: usize,
    pub profile_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// SHA-256 of each binary array file, keyed by file name.
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UniverseManifest {
    format_version: u32,
    seed: u64,
    config: UniverseConfig,
    scenarios: Vec<String>,
}

pub fn save_dataset(ds: &ScenarioDataset, dir: &Path) -> Result<()> {
    let files: Vec<(&str, Vec<u8>)> = vec![
        (PROFILES, f64s_to_le(ds.profiles.data())),
        (SEQUENCES, u32s_to_le(&ds.sequences)),
        (MASK, ds.seq_mask.clone()),
        (LABELS, ds.labels.clone()),
        (PARTITION, ds.partition.iter().map(|&p| p as u8).collect()),
    ];
    let mut checksums = std::collections::BTreeMap::new();
    for (name, bytes) in &files {
        write_bytes(&dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        scenario_id: ds.scenario_id,
        rows: ds.len(),
        profile_dim: ds.profile_dim(),
        max_seq_len: ds.max_seq_len,
        vocab_size: ds.vocab_size,
        seed: ds.seed,
        checksums,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<ScenarioDataset> {
    let manifest_path = dir.join("manifest.json");
    let m: DatasetManifest = read_json(&manifest_path)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path: manifest_path,
            expected: DATASET_FORMAT_VERSION,
            found: m.format_version,
        });
    }
    let read = |name: &str| -> Result<Vec<u8>> {
        let sum = m
            .checksums
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest lacks a checksum for {name}")))?;
        read_checked(&dir.join(name), sum)
    };
    let profiles = le_to_f64s(&read(PROFILES)?, &dir.join(PROFILES))?;
    let sequences = le_to_u32s(&read(SEQUENCES)?, &dir.join(SEQUENCES))?;
    let seq_mask = read(MASK)?;
    let labels = read(LABELS)?;
    let partition = read(PARTITION)?
        .into_iter()
        .map(|b| Partition::from_u8(b).ok_or_else(|| Error::Data(format!("bad partition tag {b}"))))
        .collect::<Result<Vec<_>>>()?;
    if profiles.len() != m.rows * m.profile_dim {
        return Err(Error::Data(format!(
            "{}: expected {} profile values, found {}",
            dir.display(),
            m.rows * m.profile_dim,
            profiles.len()
        )));
    }
    let ds = ScenarioDataset {
        scenario_id: m.scenario_id,
        vocab_size: m.vocab_size,
        profiles: Matrix::from_vec(m.rows, m.profile_dim, profiles),
        sequences,
        seq_mask,
        labels,
        partition,
        max_seq_len: m.max_seq_len,
        seed: m.seed,
    };
    ds.validate()?;
    Ok(ds)
}

fn scenario_dir_name(id: usize) -> String {
    format!("scenario_{id:03}")
}

pub fn save_universe(
    datasets: &[ScenarioDataset],
    cfg: &UniverseConfig,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    let mut names = Vec::new();
    for ds in datasets {
        let name = scenario_dir_name(ds.scenario_id);
        save_dataset(ds, &dir.join(&name))?;
        names.push(name);
    }
    write_json(
        &dir.join("universe.json"),
        &UniverseManifest {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            config: cfg.clone(),
            scenarios: names,
        },
    )
}

/// Loads every scenario listed in `dir/universe.json`.
pub fn load_universe(dir: &Path) -> Result<(UniverseConfig, u64, Vec<ScenarioDataset>)> {
    let path = dir.join("universe.json");
    let m: UniverseManifest = read_json(&path)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            expected: DATASET_FORMAT_VERSION,
            found: m.format_version,
        });
    }
    let datasets = m
        .scenarios
        .iter()
        .map(|name| load_dataset(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m.config, m.seed, datasets))
}
