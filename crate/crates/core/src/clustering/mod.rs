//! Per-bag, per-scale K-means prototypes and their on-disk cache.

mod cache;
mod kmeans;

pub use cache::{cache_prototypes, load_prototypes, PROTOS_MANIFEST_FILE};
pub use kmeans::{kmeans_fit, kmeans_fit_with_rng, kmeanspp_init, KMeansConfig, KMeansFit};

use std::collections::HashMap;

use crate::data::{Dataset, MultiScaleBag};
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePrototypes {
    /// `K × d` centroids, rows in lexicographic order.
    pub centers: Tensor2,
    pub objective: f64,
    /// Cluster index of every original instance.
    pub assignments: Vec<usize>,
    /// The scale had fewer than `K` instances and was padded with duplicates.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBag {
    pub bag_id: String,
    /// Aligned with the dataset's scale names.
    pub scales: Vec<ScalePrototypes>,
    pub warnings: Vec<String>,
}

/// Prototypes for a whole dataset, tagged with the config that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub config: KMeansConfig,
    pub digest: String,
    pub scale_names: Vec<String>,
    pub bags: Vec<PrototypeBag>,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn index(&self) -> HashMap<&str, &PrototypeBag> {
        self.bags.iter().map(|b| (b.bag_id.as_str(), b)).collect()
    }

    pub fn get(&self, bag_id: &str) -> Result<&PrototypeBag> {
        self.bags
            .iter()
            .find(|b| b.bag_id == bag_id)
            .ok_or_else(|| Error::MissingPrototypes(bag_id.to_string()))
    }
}

/// Orders rows lexicographically (first coordinate first) and remaps the
/// assignments to match.
fn sort_centers(centers: &Tensor2, assignments: &mut [usize]) -> Tensor2 {
    let mut order: Vec<usize> = (0..centers.rows()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (centers.row(a), centers.row(b));
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut new_pos = vec![0; order.len()];
    for (pos, &old) in order.iter().enumerate() {
        new_pos[old] = pos;
    }
    for a in assignments.iter_mut() {
        *a = new_pos[*a];
    }
    centers.select_rows(&order)
}

/// Runs K-means independently at every scale with a stream derived from
/// `(cfg.seed, bag_id, scale)`. Scales with fewer than `K` instances are padded
/// by cycling through their rows, with a warning.
///
/// Centroids are rounded to `f32` so cached and freshly computed prototypes
/// are identical.
pub fn extract_prototypes(bag: &MultiScaleBag, scale_names: &[String], cfg: &KMeansConfig) -> Result<PrototypeBag> {
    cfg.validate()?;
    let mut scales = Vec::with_capacity(bag.scales.len());
    let mut warnings = Vec::new();
    for (x, name) in bag.scales.iter().zip(scale_names) {
        let n = x.rows();
        let padded = n < cfg.k;
        let input = if padded {
            let msg = format!(
                "bag `{}` scale `{name}`: {n} instances < k = {}, padded with duplicates",
                bag.bag_id, cfg.k
            );
            log::warn!("{msg}");
            warnings.push(msg);
            let order: Vec<usize> = (0..cfg.k).map(|i| i % n).collect();
            x.select_rows(&order)
        } else {
            x.clone()
        };
        let mut rng = stream(cfg.seed, &["kmeans", &bag.bag_id, name]);
        let fit = kmeans_fit_with_rng(&input, cfg, &mut rng)?;
        let mut assignments = fit.assignments;
        assignments.truncate(n);
        let centers = sort_centers(&fit.centers, &mut assignments).map(|v| (v as f32) as f64);
        scales.push(ScalePrototypes {
            centers,
            objective: fit.objective,
            assignments,
            padded,
        });
    }
    Ok(PrototypeBag {
        bag_id: bag.bag_id.clone(),
        scales,
        warnings,
    })
}

/// Prototypes for every bag, in dataset order.
pub fn extract_all(ds: &Dataset, cfg: &KMeansConfig) -> Result<PrototypeSet> {
    let bags = ds
        .bags
        .iter()
        .map(|b| extract_prototypes(b, &ds.scale_names, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeSet {
        config: cfg.clone(),
        digest: config_digest(cfg),
        scale_names: ds.scale_names.clone(),
        bags,
    })
}
