//! Training loop, evaluation, metrics and the experiment runners.

mod bench;
mod experiments;
mod metrics;

pub use bench::{bench_complexity, log_log_slope, BenchConfig, BenchReport, BenchRow};
pub use experiments::{
    ablate_fusion, ablate_k, run_identity, run_kfold, run_plan, run_plan_with_models, FusionRow, FusionTable, KGrid,
    KGridCell, K_ABLATION_VARIANTS,
};
pub use metrics::{auc, mean_sd, FoldResult, MetricsReport, Summary};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::PrototypeSet;
use crate::data::{Dataset, MultiScaleBag};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grads, predict, ModelKind, ModelParams, ModelSpec};
use crate::rng::stream;
use crate::tensor::{AdamConfig, AdamState};

/// Optimiser, schedule and architecture settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Only 1 is supported: one optimiser step per bag.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Prototypes per scale; must match the prototype set.
    pub k: usize,
    pub n_iters: usize,
    /// Token-mixing width, `2K` when unset.
    pub c: Option<usize>,
    /// Channel-mixing width, `⌈3d/2⌉` when unset.
    pub d_s: Option<usize>,
    /// Gated-attention width, `max(4, ⌈d/4⌉)` when unset.
    pub gap_hidden: Option<usize>,
    pub mixer_layers: usize,
    pub bias: bool,
    /// Hold out this fraction of each class of the training bags and monitor
    /// its loss for early stopping instead of the training loss.
    pub validation_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Mspt,
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            max_epochs: 150,
            early_stop_patience: 30,
            seed: 0,
            k: 16,
            n_iters: 1,
            c: None,
            d_s: None,
            gap_hidden: None,
            mixer_layers: 1,
            bias: true,
            validation_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size != 1 {
            return Err(Error::config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs {
            return Err(Error::config(format!(
                "early_stop_patience must be in 1..={}, got {}",
                self.max_epochs, self.early_stop_patience
            )));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("validation_fraction must be in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn spec(&self, d: usize, n_classes: usize, n_scales: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.model, d, self.k, n_classes, n_scales);
        spec.n_iters = self.n_iters;
        spec.c = self.c.unwrap_or(spec.c);
        spec.d_s = self.d_s.unwrap_or(spec.d_s);
        spec.gap_hidden = self.gap_hidden.unwrap_or(spec.gap_hidden);
        spec.mixer_layers = self.mixer_layers;
        spec.bias = self.bias;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_model(&self, model: ModelKind) -> Self {
        Self { model, ..self.clone() }
    }
}

/// Parameters from the best epoch plus the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ModelParams,
    /// Mean loss over the monitored bags, evaluated after each epoch.
    pub loss_curve: Vec<f64>,
    /// Mean training-bag loss after each epoch when a validation split is
    /// monitored instead.
    pub train_loss_curve: Option<Vec<f64>>,
    /// 0-based.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn check_protos(ds: &Dataset, protos: Option<&PrototypeSet>, cfg: &TrainConfig) -> Result<()> {
    if !cfg.model.needs_prototypes() {
        return Ok(());
    }
    let p = protos
        .ok_or_else(|| Error::MissingPrototypes(format!("model `{}` needs a prototype set", cfg.model.name())))?;
    if p.k() != cfg.k {
        return Err(Error::config(format!(
            "prototype set was built with k = {}, training config has k = {}",
            p.k(),
            cfg.k
        )));
    }
    if p.scale_names != ds.scale_names {
        return Err(Error::config("prototype scales do not match the dataset"));
    }
    Ok(())
}

fn mean_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    bags: &[&MultiScaleBag],
    protos: Option<&PrototypeSet>,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for bag in bags {
        let p = protos.map(|s| s.get(&bag.bag_id)).transpose()?;
        let pred = predict(spec, params, bag, p)?;
        let row = pred.logits.row(0);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let loss = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[bag.label];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                bag_id: bag.bag_id.clone(),
            });
        }
        total += loss;
    }
    Ok(total / bags.len() as f64)
}

/// Stratified hold-out of `fraction` of each class, at least one bag per
/// class that has two or more.
fn validation_split<'a>(
    bags: &[&'a MultiScaleBag],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a MultiScaleBag>, Vec<&'a MultiScaleBag>) {
    let n_classes = bags.iter().map(|b| b.label + 1).max().unwrap_or(0);
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == c).collect();
        idx.shuffle(&mut stream(seed, &["validation", &c.to_string()]));
        let take = if idx.len() >= 2 {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend(idx[..take].iter().map(|&i| bags[i]));
        fit.extend(idx[take..].iter().map(|&i| bags[i]));
    }
    // restore input order so the epoch shuffle alone decides visiting order
    let pos = |b: &MultiScaleBag| bags.iter().position(|x| x.bag_id == b.bag_id).unwrap_or(0);
    fit.sort_by_key(|b| pos(b));
    val.sort_by_key(|b| pos(b));
    (fit, val)
}

/// Trains on the bags named by `train_ids`.
///
/// Each epoch visits the bags in a seeded shuffled order with one Adam step
/// per bag, then evaluates the mean loss of the monitored bags (the training
/// bags, or the validation split when configured). Training stops once the
/// best loss so far has not improved for `early_stop_patience` epochs; the
/// parameters of the best epoch are returned.
pub fn train(
    ds: &Dataset,
    train_ids: &[String],
    protos: Option<&PrototypeSet>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    check_protos(ds, protos, cfg)?;
    let bags = ds.select(train_ids)?;
    if bags.is_empty() {
        return Err(Error::config("no training bags"));
    }
    let spec = cfg.spec(ds.d, ds.n_classes(), ds.n_scales())?;
    let mut params = init_params(&spec, cfg.seed)?;
    let (fit, monitor) = match cfg.validation_fraction {
        Some(f) => validation_split(&bags, f, cfg.seed),
        None => (bags.clone(), Vec::new()),
    };
    if fit.is_empty() {
        return Err(Error::config("validation split left no training bags"));
    }
    let mut adam = AdamState::new(cfg.adam(), params.named().into_iter().map(|(_, t)| t));

    let mut loss_curve = Vec::with_capacity(cfg.max_epochs);
    let mut train_curve = cfg.validation_fraction.map(|_| Vec::with_capacity(cfg.max_epochs));
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &["epoch-order", &epoch.to_string()]));
        for &i in &order {
            let bag = fit[i];
            let p = protos.map(|s| s.get(&bag.bag_id)).transpose()?;
            let (loss, grads) = loss_and_grads(&spec, &params, bag, p)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    bag_id: bag.bag_id.clone(),
                });
            }
            let grads = grads.named();
            let mut named = params.named_mut();
            adam.step(
                named
                    .iter_mut()
                    .zip(&grads)
                    .map(|((name, p), (_, g))| (name.as_str(), &mut **p, Some(*g))),
            )?;
        }
        let fit_loss = mean_loss(&spec, &params, &fit, protos, epoch)?;
        let monitored = if monitor.is_empty() {
            fit_loss
        } else {
            train_curve.as_mut().expect("validation mode").push(fit_loss);
            mean_loss(&spec, &params, &monitor, protos, epoch)?
        };
        loss_curve.push(monitored);
        log::debug!("epoch {epoch}: loss {monitored:.6}");
        if monitored < best.0 {
            best = (monitored, epoch, params.clone());
        } else if epoch - best.1 >= cfg.early_stop_patience {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let (best_loss, best_epoch, params) = best;
    Ok(TrainedModel {
        spec,
        params,
        epochs_run: loss_curve.len(),
        loss_curve,
        train_loss_curve: train_curve,
        best_epoch,
        best_loss,
        stopped_early,
    })
}

/// Per-bag predictions on an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub bag_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Probability of class 1.
    pub scores: Vec<f64>,
}

impl Evaluation {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores, &self.labels)
    }
}

pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    bags: &[&MultiScaleBag],
    protos: Option<&PrototypeSet>,
) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::config("cannot evaluate on an empty bag list"));
    }
    let mut ev = Evaluation {
        accuracy: 0.0,
        bag_ids: Vec::with_capacity(bags.len()),
        labels: Vec::with_capacity(bags.len()),
        predicted: Vec::with_capacity(bags.len()),
        scores: Vec::with_capacity(bags.len()),
    };
    let mut correct = 0usize;
    for bag in bags {
        let p = if spec.kind.needs_prototypes() {
            Some(
                protos
                    .ok_or_else(|| Error::MissingPrototypes(bag.bag_id.clone()))?
                    .get(&bag.bag_id)?,
            )
        } else {
            None
        };
        let pred = predict(spec, params, bag, p)?;
        let cls = pred.predicted_class();
        correct += usize::from(cls == bag.label);
        ev.bag_ids.push(bag.bag_id.clone());
        ev.labels.push(bag.label);
        ev.predicted.push(cls);
        ev.scores.push(pred.probs.get(0, 1.min(pred.probs.cols() - 1)));
    }
    ev.accuracy = correct as f64 / bags.len() as f64;
    Ok(ev)
}
