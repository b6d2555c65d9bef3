use std::fs;
use std::path::{Path, PathBuf};

use mspt::clustering::KMeansConfig;
use mspt::data::SyntheticConfig;
use mspt::train::{BenchConfig, TrainConfig};
use mspt::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// How bags are split into train and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Stratified k-fold when `n_test` is unset.
    pub k_folds: usize,
    /// Single stratified holdout of this many test bags.
    pub n_test: Option<usize>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            n_test: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Prototype counts swept by `ablate-k`.
    pub k_values: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

/// Everything an experiment run needs. Relative paths in a config file are
/// resolved against the file's directory, relative paths given as flags
/// against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub protos_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub kmeans: Option<KMeansConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn data_dir(&self) -> Result<&Path> {
        required(&self.data_dir, "data_dir")
    }

    pub fn protos_dir(&self) -> Result<&Path> {
        required(&self.protos_dir, "protos_dir")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        required(&self.out_dir, "out_dir")
    }

    pub fn kmeans(&self) -> Result<&KMeansConfig> {
        self.kmeans
            .as_ref()
            .ok_or_else(|| Error::Config("missing `kmeans` section".into()))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "missing `{field}` (set it in the config or pass --{})",
            field.replace('_', "-")
        ))
    })
}

/// A JSON document being assembled from a config file and flag overrides.
pub struct Doc {
    value: Value,
    base: PathBuf,
}

impl Doc {
    /// Reads `path`, or starts from `{}` when there is no config file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                value: Value::Object(Map::new()),
                base: PathBuf::new(),
            });
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        Ok(Self {
            value,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Sets a nested field, creating intermediate objects.
    pub fn set(&mut self, path: &[&str], v: impl Into<Value>) {
        let mut cur = &mut self.value;
        for key in path {
            if !cur.is_object() {
                *cur = Value::Object(Map::new());
            }
            cur = cur.as_object_mut().expect("object").entry(*key).or_insert(Value::Null);
        }
        *cur = v.into();
    }

    pub fn set_opt(&mut self, path: &[&str], v: Option<impl Into<Value>>) {
        if let Some(v) = v {
            self.set(path, v);
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.value.get(key).is_some_and(|v| !v.is_null())
    }

    /// Resolves a path field written in the config file against its directory.
    pub fn resolve_file_path(&mut self, key: &str) {
        if let Some(Value::String(s)) = self.value.get(key) {
            let p = Path::new(s);
            if p.is_relative() {
                let joined = self.base.join(p).to_string_lossy().into_owned();
                self.set(&[key], joined);
            }
        }
    }

    pub fn parse<T: DeserializeOwned>(self) -> Result<T> {
        serde_json::from_value(self.value).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Makes every path absolute so the embedded config names what was used.
pub fn absolutize(p: &mut Option<PathBuf>) -> Result<()> {
    if let Some(path) = p {
        *path = std::path::absolute(&*path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
