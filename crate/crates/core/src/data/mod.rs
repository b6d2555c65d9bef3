//! Multi-scale instance bags, the on-disk container, a seeded synthetic
//! generator and stratified splits.

mod container;
mod split;
mod synthetic;

pub(crate) use container::check_header as container_check_header;
pub use container::{
    load_dataset, read_f32_matrix, save_dataset, validate_manifest, write_f32_matrix, Finding, ValidationReport,
    FORMAT_VERSION, MANIFEST_FILE,
};
pub use split::{split_holdout, split_kfold, Fold, FoldPlan};
pub use synthetic::{generate_synthetic, witness_direction, SyntheticConfig};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Scale names from finest to coarsest.
pub const DEFAULT_SCALES: [&str; 3] = ["s20", "s10", "s5"];

pub fn default_scale_names() -> Vec<String> {
    DEFAULT_SCALES.iter().map(|s| s.to_string()).collect()
}

/// One labeled sample: an `n_s × d` instance matrix for every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleBag {
    pub bag_id: String,
    pub label: usize,
    /// Aligned with [`Dataset::scale_names`].
    pub scales: Vec<Tensor2>,
    /// Generator ground truth: witness row indices per scale.
    pub witnesses: Option<Vec<Vec<usize>>>,
}

impl MultiScaleBag {
    pub fn n_instances(&self, scale: usize) -> usize {
        self.scales[scale].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<MultiScaleBag>,
    pub d: usize,
    pub class_names: Vec<String>,
    pub scale_names: Vec<String>,
    /// Generator config or an import note.
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_scales(&self) -> usize {
        self.scale_names.len()
    }

    pub fn bag(&self, id: &str) -> Option<&MultiScaleBag> {
        self.bags.iter().find(|b| b.bag_id == id)
    }

    /// Bags in the order of `ids`.
    pub fn select<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a MultiScaleBag>> {
        let index: std::collections::HashMap<&str, &MultiScaleBag> =
            self.bags.iter().map(|b| (b.bag_id.as_str(), b)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::config(format!("unknown bag id `{id}`")))
            })
            .collect()
    }

    /// Checks the structural invariants: one matrix per scale, shared `d`,
    /// non-empty scales, labels in range, unique ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for b in &self.bags {
            if !seen.insert(b.bag_id.as_str()) {
                return Err(Error::config(format!("duplicate bag id `{}`", b.bag_id)));
            }
            if b.label >= self.n_classes() {
                return Err(Error::config(format!(
                    "bag `{}` has label {} but only {} classes",
                    b.bag_id,
                    b.label,
                    self.n_classes()
                )));
            }
            if b.scales.len() != self.n_scales() {
                return Err(Error::config(format!(
                    "bag `{}` has {} scales, expected {}",
                    b.bag_id,
                    b.scales.len(),
                    self.n_scales()
                )));
            }
            for (m, name) in b.scales.iter().zip(&self.scale_names) {
                if m.rows() == 0 || m.cols() != self.d {
                    return Err(Error::config(format!(
                        "bag `{}` scale `{name}` is {}x{}, expected n>=1 rows of width {}",
                        b.bag_id,
                        m.rows(),
                        m.cols(),
                        self.d
                    )));
                }
            }
        }
        Ok(())
    }
}
