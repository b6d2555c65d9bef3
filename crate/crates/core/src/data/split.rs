use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Train/test bag-id lists. A k-fold plan's test sets partition the dataset;
/// a holdout plan has a single fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k_folds: usize,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

/// Bag indices grouped by label, each group shuffled with its own stream.
fn shuffled_by_class(ds: &Dataset, seed: u64, tag: &str) -> Vec<Vec<usize>> {
    let n_classes = ds
        .bags
        .iter()
        .map(|b| b.label + 1)
        .max()
        .unwrap_or(0)
        .max(ds.n_classes());
    (0..n_classes)
        .map(|c| {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.bags[i].label == c).collect();
            idx.shuffle(&mut stream(seed, &[tag, &c.to_string()]));
            idx
        })
        .collect()
}

fn fold_from_mask(ds: &Dataset, in_test: &[bool]) -> Fold {
    let mut fold = Fold {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (b, &t) in ds.bags.iter().zip(in_test) {
        if t {
            fold.test.push(b.bag_id.clone());
        } else {
            fold.train.push(b.bag_id.clone());
        }
    }
    fold
}

/// Stratified k-fold split. Within each class bags are shuffled and dealt
/// round-robin; the dealing position carries over between classes so the
/// overall fold sizes also differ by at most one.
pub fn split_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > ds.len() {
        return Err(Error::config(format!(
            "k = {k} exceeds the {} bags available",
            ds.len()
        )));
    }
    let mut fold_of = vec![0usize; ds.len()];
    let mut next = 0usize;
    for class in shuffled_by_class(ds, seed, "kfold") {
        for i in class {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    let folds = (0..k)
        .map(|f| {
            let mask: Vec<bool> = fold_of.iter().map(|&x| x == f).collect();
            fold_from_mask(ds, &mask)
        })
        .collect();
    Ok(FoldPlan {
        k_folds: k,
        folds,
        seed,
    })
}

/// Stratified single train/test split with exactly `n_test` test bags,
/// allocated to classes by largest remainder.
pub fn split_holdout(ds: &Dataset, n_test: usize, seed: u64) -> Result<FoldPlan> {
    if n_test == 0 || n_test >= ds.len() {
        return Err(Error::config(format!(
            "holdout needs 0 < n_test < {}, got {n_test}",
            ds.len()
        )));
    }
    let classes = shuffled_by_class(ds, seed, "holdout");
    let n = ds.len() as f64;
    let quotas: Vec<f64> = classes.iter().map(|c| c.len() as f64 * n_test as f64 / n).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    // largest fractional part first, lower class index on ties
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = n_test - take.iter().sum::<usize>();
    for c in order {
        if missing == 0 {
            break;
        }
        if take[c] < classes[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let mut mask = vec![false; ds.len()];
    for (c, idx) in classes.iter().enumerate() {
        for &i in &idx[..take[c]] {
            mask[i] = true;
        }
    }
    Ok(FoldPlan {
        k_folds: 1,
        folds: vec![fold_from_mask(ds, &mask)],
        seed,
    })
}
