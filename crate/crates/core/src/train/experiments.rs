use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::{csv_err, FoldResult, MetricsReport, Summary};
use super::{evaluate, train, TrainConfig, TrainedModel};
use crate::clustering::{extract_all, KMeansConfig, PrototypeSet};
use crate::data::{split_kfold, Dataset, FoldPlan};
use crate::digest::config_digest;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::rng::derive_seed;

/// Trains and evaluates one model per fold. Each fold starts from its own
/// initialisation seed derived from `cfg.seed` and the fold index.
pub fn run_plan(
    ds: &Dataset,
    plan: &FoldPlan,
    protos: Option<&PrototypeSet>,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    Ok(run_plan_with_models(ds, plan, protos, cfg)?.0)
}

/// [`run_plan`] that also returns the trained model of every fold.
pub fn run_plan_with_models(
    ds: &Dataset,
    plan: &FoldPlan,
    protos: Option<&PrototypeSet>,
    cfg: &TrainConfig,
) -> Result<(MetricsReport, Vec<TrainedModel>)> {
    let start = Instant::now();
    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut models = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let fold_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &["fold", &i.to_string()]),
            ..cfg.clone()
        };
        let trained = train(ds, &fold.train, protos, &fold_cfg)?;
        let test = ds.select(&fold.test)?;
        let ev = evaluate(&trained.spec, &trained.params, &test, protos)?;
        let auc = ev.auc()?;
        log::info!(
            "{} fold {i}: acc {:.4} auc {:.4} ({} epochs)",
            cfg.model.name(),
            ev.accuracy,
            auc,
            trained.epochs_run
        );
        folds.push(FoldResult {
            fold: i,
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            accuracy: ev.accuracy,
            auc,
            epochs_run: trained.epochs_run,
            best_epoch: trained.best_epoch,
            loss_curve: trained.loss_curve.clone(),
        });
        models.push(trained);
    }
    let config = run_identity(ds, plan, protos, cfg);
    let digest = config_digest(&config);
    let report = MetricsReport::from_folds(cfg.model.name(), config, digest, folds, start.elapsed().as_secs_f64());
    Ok((report, models))
}

/// Everything a run's metrics depend on: training config, split, dataset
/// provenance and prototype digest.
pub fn run_identity(
    ds: &Dataset,
    plan: &FoldPlan,
    protos: Option<&PrototypeSet>,
    cfg: &TrainConfig,
) -> serde_json::Value {
    json!({
        "train": cfg,
        "split": {"k_folds": plan.k_folds, "seed": plan.seed, "digest": config_digest(plan)},
        "dataset": config_digest(&ds.provenance),
        "prototypes": protos.filter(|_| cfg.model.needs_prototypes()).map(|p| p.digest.clone()),
    })
}

pub fn run_kfold(
    ds: &Dataset,
    protos: Option<&PrototypeSet>,
    cfg: &TrainConfig,
    k: usize,
    split_seed: u64,
) -> Result<MetricsReport> {
    let plan = split_kfold(ds, k, split_seed)?;
    run_plan(ds, &plan, protos, cfg)
}

pub const K_ABLATION_VARIANTS: [ModelKind; 3] = [ModelKind::Pt, ModelKind::FullBag, ModelKind::PrototypeBag];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGridCell {
    pub variant: String,
    /// `None` for Full-bag, which does not cluster.
    pub k: Option<usize>,
    pub accuracy: Summary,
    pub auc: Summary,
    pub config_digest: String,
    pub report: MetricsReport,
}

/// Accuracy per prototype count for PT and Prototype-bag, with Full-bag as a
/// single reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGrid {
    pub k_values: Vec<usize>,
    pub cells: Vec<KGridCell>,
}

impl KGrid {
    pub fn cell(&self, variant: ModelKind, k: Option<usize>) -> Option<&KGridCell> {
        self.cells.iter().find(|c| c.variant == variant.name() && c.k == k)
    }

    /// The K with the highest PT accuracy (smallest K on ties).
    pub fn best_pt_k(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for c in self.cells.iter().filter(|c| c.variant == ModelKind::Pt.name()) {
            let k = c.k.expect("PT cells carry K");
            if best.is_none_or(|(_, a)| c.accuracy.mean > a) {
                best = Some((k, c.accuracy.mean));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Long form: `variant,k,acc_mean,acc_sd,auc_mean,auc_sd,config_digest`,
    /// empty `k` for the Full-bag row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([
            "variant",
            "k",
            "acc_mean",
            "acc_sd",
            "auc_mean",
            "auc_sd",
            "config_digest",
        ])
        .map_err(|e| csv_err(path, e))?;
        for c in &self.cells {
            w.write_record([
                c.variant.clone(),
                c.k.map(|k| k.to_string()).unwrap_or_default(),
                c.accuracy.mean.to_string(),
                c.accuracy.sd.to_string(),
                c.auc.mean.to_string(),
                c.auc.sd.to_string(),
                c.config_digest.clone(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// The dataset restricted to its finest scale.
fn finest_scale_only(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    out.scale_names.truncate(1);
    for b in &mut out.bags {
        b.scales.truncate(1);
        if let Some(w) = &mut b.witnesses {
            w.truncate(1);
        }
    }
    out
}

/// Sweeps the prototype count for the single-scale variants. Prototypes are
/// re-extracted for each K with `kmeans` (its `k` is overridden). Every
/// variant uses the same fold plan and training seed.
pub fn ablate_k(
    ds: &Dataset,
    plan: &FoldPlan,
    cfg: &TrainConfig,
    kmeans: &KMeansConfig,
    k_values: &[usize],
) -> Result<KGrid> {
    if k_values.is_empty() {
        return Err(Error::config("k_values is empty"));
    }
    let single = finest_scale_only(ds);
    let mut cells = Vec::with_capacity(2 * k_values.len() + 1);
    let mut push = |variant: ModelKind, k: Option<usize>, report: MetricsReport| {
        cells.push(KGridCell {
            variant: variant.name().to_string(),
            k,
            accuracy: report.accuracy,
            auc: report.auc,
            config_digest: report.config_digest.clone(),
            report,
        });
    };
    for &k in k_values {
        let kcfg = KMeansConfig { k, ..kmeans.clone() };
        let protos = extract_all(&single, &kcfg)?;
        for variant in [ModelKind::Pt, ModelKind::PrototypeBag] {
            let tcfg = TrainConfig {
                k,
                ..cfg.with_model(variant)
            };
            push(variant, Some(k), run_plan(&single, plan, Some(&protos), &tcfg)?);
        }
    }
    let report = run_plan(&single, plan, None, &cfg.with_model(ModelKind::FullBag))?;
    push(ModelKind::FullBag, None, report);
    Ok(KGrid {
        k_values: k_values.to_vec(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub strategy: String,
    pub accuracy: Summary,
    pub auc: Summary,
    pub config_digest: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTable {
    pub rows: Vec<FusionRow>,
}

impl FusionTable {
    /// `strategy,acc_mean,acc_sd,auc_mean,auc_sd,config_digest`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["strategy", "acc_mean", "acc_sd", "auc_mean", "auc_sd", "config_digest"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.accuracy.mean.to_string(),
                r.accuracy.sd.to_string(),
                r.auc.mean.to_string(),
                r.auc.sd.to_string(),
                r.config_digest.clone(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Concatenation, MS-Max, MS-Attention and the Mixer fusion, all trained on
/// the same folds and seeds with the same prototypes.
pub fn ablate_fusion(ds: &Dataset, plan: &FoldPlan, protos: &PrototypeSet, cfg: &TrainConfig) -> Result<FusionTable> {
    let variants = [
        ("Concatenation", ModelKind::Concatenation),
        ("MS-Max", ModelKind::MsMax),
        ("MS-Attention", ModelKind::MsAttention),
        ("MFFM", ModelKind::Mspt),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, kind) in variants {
        let report = run_plan(ds, plan, Some(protos), &cfg.with_model(kind))?;
        rows.push(FusionRow {
            strategy: name.to_string(),
            accuracy: report.accuracy,
            auc: report.auc,
            config_digest: report.config_digest.clone(),
            report,
        });
    }
    Ok(FusionTable { rows })
}
