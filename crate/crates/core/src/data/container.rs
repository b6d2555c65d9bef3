//! Directory container: `manifest.json` plus one headerless little-endian
//! `f32` row-major file per bag per scale.
//!
//! ```json
//! {
//!   "format": "mspt-bags",
//!   "version": 1,
//!   "d": 32,
//!   "class_names": ["negative", "positive"],
//!   "scale_names": ["s20", "s10", "s5"],
//!   "provenance": { ... },
//!   "bags": [
//!     { "id": "bag_00000", "label": 1,
//!       "scales": [ { "scale": "s20", "file": "bag_00000.s20.f32", "rows": 180, "cols": 32 }, ... ],
//!       "witnesses": [[3, 17], [4], [1]] }
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, MultiScaleBag};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "mspt-bags";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    d: usize,
    class_names: Vec<String>,
    scale_names: Vec<String>,
    #[serde(default)]
    provenance: serde_json::Value,
    bags: Vec<BagEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BagEntry {
    id: String,
    label: usize,
    scales: Vec<ScaleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    witnesses: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ScaleEntry {
    pub scale: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_f32_matrix(path: &Path, m: &Tensor2) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a headerless `rows × cols` matrix, checking the byte length first.
pub fn read_f32_matrix(path: &Path, rows: usize, cols: usize, bag_id: &str, scale: &str) -> Result<Tensor2> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            bag_id: bag_id.to_string(),
            scale: scale.to_string(),
            rows,
            cols,
            expected_bytes: expected,
            actual_bytes: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor2::new(rows, cols, data)?)
}

pub(crate) fn matrix_file_name(id: &str, scale: &str) -> String {
    format!("{id}.{scale}.f32")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bags = Vec::with_capacity(ds.len());
    for b in &ds.bags {
        let mut scales = Vec::with_capacity(b.scales.len());
        for (m, name) in b.scales.iter().zip(&ds.scale_names) {
            let file = matrix_file_name(&b.bag_id, name);
            write_f32_matrix(&dir.join(&file), m)?;
            scales.push(ScaleEntry {
                scale: name.clone(),
                file,
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        bags.push(BagEntry {
            id: b.bag_id.clone(),
            label: b.label,
            scales,
            witnesses: b.witnesses.clone(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        d: ds.d,
        class_names: ds.class_names.clone(),
        scale_names: ds.scale_names.clone(),
        provenance: ds.provenance.clone(),
        bags,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Parses the manifest, checking the format tag and version before the
/// full schema so that newer containers fail with a version error.
fn read_manifest(dir: &Path) -> Result<(PathBuf, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    check_header(&path, &raw, FORMAT_NAME)?;
    let manifest = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok((path, manifest))
}

pub(crate) fn check_header(path: &Path, raw: &serde_json::Value, format: &str) -> Result<()> {
    match raw.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        other => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("expected format `{format}`, found {other:?}"),
            })
        }
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            message: "missing integer field `version`".into(),
        })?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (path, manifest) = read_manifest(dir)?;
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in manifest.bags {
        let by_scale: BTreeMap<&str, &ScaleEntry> = entry.scales.iter().map(|s| (s.scale.as_str(), s)).collect();
        let mut scales = Vec::with_capacity(manifest.scale_names.len());
        for name in &manifest.scale_names {
            let s = by_scale.get(name.as_str()).ok_or_else(|| Error::MissingScale {
                bag_id: entry.id.clone(),
                scale: name.clone(),
            })?;
            scales.push(read_f32_matrix(&dir.join(&s.file), s.rows, s.cols, &entry.id, name)?);
        }
        bags.push(MultiScaleBag {
            bag_id: entry.id,
            label: entry.label,
            scales,
            witnesses: entry.witnesses,
        });
    }
    let ds = Dataset {
        bags,
        d: manifest.d,
        class_names: manifest.class_names,
        scale_names: manifest.scale_names,
        provenance: manifest.provenance,
    };
    ds.validate().map_err(|e| Error::Manifest {
        path,
        message: e.to_string(),
    })?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub bag_id: Option<String>,
    pub scale: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, bag_id: Option<&str>, scale: Option<&str>, message: impl Into<String>) {
        self.findings.push(Finding {
            bag_id: bag_id.map(str::to_string),
            scale: scale.map(str::to_string),
            message: message.into(),
        });
    }
}

/// Checks a container against its manifest using file metadata only; no
/// matrix is read.
pub fn validate_manifest(dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let manifest = match read_manifest(dir) {
        Ok((_, m)) => m,
        Err(e) => {
            report.push(None, None, e.to_string());
            return report;
        }
    };
    let scale_set: BTreeSet<&str> = manifest.scale_names.iter().map(String::as_str).collect();
    if scale_set.len() != manifest.scale_names.len() {
        report.push(None, None, "duplicate names in scale_names");
    }
    let mut ids = BTreeSet::new();
    let mut off_width = Vec::new();
    for b in &manifest.bags {
        let id = b.id.as_str();
        if !ids.insert(id) {
            report.push(Some(id), None, "duplicate bag id");
        }
        if b.label >= manifest.class_names.len() {
            report.push(
                Some(id),
                None,
                format!(
                    "label {} out of range for {} classes",
                    b.label,
                    manifest.class_names.len()
                ),
            );
        }
        let mut seen = BTreeSet::new();
        for s in &b.scales {
            let scale = s.scale.as_str();
            if !scale_set.contains(scale) {
                report.push(Some(id), Some(scale), "scale not declared in scale_names");
            }
            if !seen.insert(scale) {
                report.push(Some(id), Some(scale), "scale listed more than once");
            }
            if s.rows == 0 {
                report.push(Some(id), Some(scale), "scale has no instances");
            }
            if s.cols != manifest.d && !off_width.contains(&id) {
                off_width.push(id);
            }
            let path = dir.join(&s.file);
            match fs::metadata(&path) {
                Err(_) => report.push(Some(id), Some(scale), format!("missing file {}", s.file)),
                Ok(meta) => {
                    let expected = (s.rows * s.cols * 4) as u64;
                    if meta.len() != expected {
                        report.push(
                            Some(id),
                            Some(scale),
                            format!(
                                "file {} holds {} bytes, manifest declares {}x{} = {} bytes",
                                s.file,
                                meta.len(),
                                s.rows,
                                s.cols,
                                expected
                            ),
                        );
                    }
                }
            }
        }
        for name in &manifest.scale_names {
            if !seen.contains(name.as_str()) {
                report.push(Some(id), Some(name), "scale missing from bag");
            }
        }
    }
    if !off_width.is_empty() {
        report.push(
            None,
            None,
            format!(
                "feature dimension differs from d = {} in bags: {}",
                manifest.d,
                off_width.join(", ")
            ),
        );
    }
    report
}
