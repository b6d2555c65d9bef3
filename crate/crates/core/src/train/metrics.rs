use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC for binary labels, ties sharing their average rank.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean and sample standard deviation (`n - 1`); SD is 0 for one value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

pub fn mean_sd(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    if values.iter().all(|&v| v == values[0]) {
        // exact, avoiding rounding residue in the mean
        return Summary {
            mean: values[0],
            sd: 0.0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary { mean, sd }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub loss_curve: Vec<f64>,
}

/// Per-fold and aggregated metrics of one experiment.
///
/// `wall_time_secs` is the only field that varies between identical runs;
/// [`MetricsReport::to_json_deterministic`] leaves it out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub folds: Vec<FoldResult>,
    pub accuracy: Summary,
    pub auc: Summary,
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn from_folds(
        model: &str,
        config: serde_json::Value,
        config_digest: String,
        folds: Vec<FoldResult>,
        wall_time_secs: f64,
    ) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let auc: Vec<f64> = folds.iter().map(|f| f.auc).collect();
        Self {
            model: model.to_string(),
            config,
            config_digest,
            accuracy: mean_sd(&acc),
            auc: mean_sd(&auc),
            folds,
            wall_time_secs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The JSON report without `wall_time_secs`.
    pub fn to_json_deterministic(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("wall_time_secs");
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    /// One row per fold followed by `mean` and `sd` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut rec = |r: [String; 6]| w.write_record(&r).map_err(|e| csv_err(path, e));
        rec(["model", "fold", "accuracy", "auc", "epochs_run", "config_digest"].map(String::from))?;
        for f in &self.folds {
            rec([
                self.model.clone(),
                f.fold.to_string(),
                f.accuracy.to_string(),
                f.auc.to_string(),
                f.epochs_run.to_string(),
                self.config_digest.clone(),
            ])?;
        }
        for (tag, acc, auc) in [
            ("mean", self.accuracy.mean, self.auc.mean),
            ("sd", self.accuracy.sd, self.auc.sd),
        ] {
            rec([
                self.model.clone(),
                tag.into(),
                acc.to_string(),
                auc.to_string(),
                String::new(),
                self.config_digest.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
    }

    /// Direct count over all positive/negative pairs, ties worth one half.
    fn pairwise(scores: &[f64], labels: &[usize]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn rank_formula_matches_pair_count_with_ties() {
        let scores = [0.5, 0.2, 0.5, 0.9, 0.2, 0.7, 0.5, 0.1];
        let labels = [1, 0, 0, 1, 1, 0, 1, 0];
        assert!((auc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-15);
    }

    #[test]
    fn summary_uses_sample_sd() {
        let s = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.7, 0.7, 0.7]).sd, 0.0);
        assert_eq!(mean_sd(&[0.3]).sd, 0.0);
    }

    #[test]
    fn deterministic_json_drops_wall_time() {
        let fold = FoldResult {
            fold: 0,
            n_train: 4,
            n_test: 2,
            accuracy: 0.5,
            auc: 0.75,
            epochs_run: 3,
            best_epoch: 1,
            loss_curve: vec![0.7, 0.6, 0.65],
        };
        let a = MetricsReport::from_folds("mspt", serde_json::json!({}), "x".into(), vec![fold.clone()], 1.0);
        let mut b = a.clone();
        b.wall_time_secs = 9.0;
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.to_json_deterministic(), b.to_json_deterministic());
        assert!(!a.to_json_deterministic().contains("wall_time"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        a.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
    }
}
