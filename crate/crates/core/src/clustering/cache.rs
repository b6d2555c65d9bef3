use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KMeansConfig, PrototypeBag, PrototypeSet, ScalePrototypes};
use crate::data::{read_f32_matrix, write_f32_matrix, FORMAT_VERSION};
use crate::digest::config_digest;
use crate::error::{Error, Result};

pub const PROTOS_MANIFEST_FILE: &str = "protos.manifest.json";
const FORMAT_NAME: &str = "mspt-protos";

#[derive(Debug, Serialize, Deserialize)]
struct ProtoManifest {
    format: String,
    version: u32,
    config_digest: String,
    config: KMeansConfig,
    scale_names: Vec<String>,
    bags: Vec<ProtoBagEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProtoBagEntry {
    id: String,
    scales: Vec<ProtoScaleEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProtoScaleEntry {
    scale: String,
    file: String,
    rows: usize,
    cols: usize,
    objective: f64,
    padded: bool,
    assignments: Vec<usize>,
}

/// Writes `protos.manifest.json` and one `.f32` centroid file per bag and
/// scale into `dir`.
pub fn cache_prototypes(set: &PrototypeSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bags = Vec::with_capacity(set.bags.len());
    for b in &set.bags {
        let mut scales = Vec::with_capacity(b.scales.len());
        for (sp, name) in b.scales.iter().zip(&set.scale_names) {
            let file = format!("{}.{name}.protos.f32", b.bag_id);
            write_f32_matrix(&dir.join(&file), &sp.centers)?;
            scales.push(ProtoScaleEntry {
                scale: name.clone(),
                file,
                rows: sp.centers.rows(),
                cols: sp.centers.cols(),
                objective: sp.objective,
                padded: sp.padded,
                assignments: sp.assignments.clone(),
            });
        }
        bags.push(ProtoBagEntry {
            id: b.bag_id.clone(),
            scales,
            warnings: b.warnings.clone(),
        });
    }
    let manifest = ProtoManifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config_digest: set.digest.clone(),
        config: set.config.clone(),
        scale_names: set.scale_names.clone(),
        bags,
    };
    let path = dir.join(PROTOS_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a cache built with exactly `cfg`; any other config is rejected as
/// stale.
pub fn load_prototypes(dir: &Path, cfg: &KMeansConfig) -> Result<PrototypeSet> {
    let path = dir.join(PROTOS_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    crate::data::container_check_header(&path, &raw, FORMAT_NAME)?;
    let manifest: ProtoManifest = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let expected = config_digest(cfg);
    if manifest.config_digest != expected {
        return Err(Error::StaleCache {
            expected,
            found: manifest.config_digest,
        });
    }
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in manifest.bags {
        let mut scales = Vec::with_capacity(entry.scales.len());
        for name in &manifest.scale_names {
            let s = entry
                .scales
                .iter()
                .find(|s| &s.scale == name)
                .ok_or_else(|| Error::MissingScale {
                    bag_id: entry.id.clone(),
                    scale: name.clone(),
                })?;
            let centers = read_f32_matrix(&dir.join(&s.file), s.rows, s.cols, &entry.id, name)?;
            scales.push(ScalePrototypes {
                centers,
                objective: s.objective,
                assignments: s.assignments.clone(),
                padded: s.padded,
            });
        }
        bags.push(PrototypeBag {
            bag_id: entry.id,
            scales,
            warnings: entry.warnings,
        });
    }
    Ok(PrototypeSet {
        config: manifest.config,
        digest: manifest.config_digest,
        scale_names: manifest.scale_names,
        bags,
    })
}
