use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor2;

fn default_max_iters() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_restarts() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    /// Prototype count.
    pub k: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub n_restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: default_max_iters(),
            tol: default_tol(),
            n_restarts: default_restarts(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k-means needs k >= 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("k-means needs max_iters >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("k-means tol must be >= 0"));
        }
        if self.n_restarts == 0 {
            return Err(Error::config("k-means needs n_restarts >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Tensor2,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned center.
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
    /// Centers that had to be reseeded after going empty in the last update.
    pub repaired: Vec<bool>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// k-means++ seeding: first center uniform, each further center drawn with
/// probability proportional to its squared distance to the nearest chosen
/// center. If every remaining point coincides with a chosen center (fewer
/// distinct rows than `k`), the next center is drawn uniformly and may repeat.
pub fn kmeanspp_init<R: Rng + ?Sized>(x: &Tensor2, k: usize, rng: &mut R) -> Result<Tensor2> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "k-means++ needs 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total = nearest.iter().fold(0.0, |a, &d| a + d);
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target at the very top of the range
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    Ok(x.select_rows(&chosen))
}

/// Nearest center per point, ties to the lowest index, plus the objective.
fn assign(x: &Tensor2, centers: &Tensor2) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(x.rows());
    let mut objective = 0.0;
    for row in x.row_iter() {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.row_iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        assignments.push(best.0);
        objective += best.1;
    }
    (assignments, objective)
}

fn objective_of(x: &Tensor2, centers: &Tensor2, assignments: &[usize]) -> f64 {
    x.row_iter()
        .zip(assignments)
        .fold(0.0, |acc, (row, &a)| acc + sq_dist(row, centers.row(a)))
}

fn means(x: &Tensor2, assignments: &[usize], k: usize) -> (Tensor2, Vec<usize>) {
    let d = x.cols();
    let mut sums = Tensor2::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &a) in x.row_iter().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            for s in sums.row_mut(c) {
                *s *= inv;
            }
        }
    }
    (sums, counts)
}

/// Recomputes centers as means. An empty cluster is reseeded at the point
/// farthest from its own center (taken only from clusters with more than one
/// member), which then moves into the empty cluster.
fn update(x: &Tensor2, assignments: &mut [usize], k: usize) -> (Tensor2, Vec<bool>) {
    let (mut centers, mut counts) = means(x, assignments, k);
    let mut repaired = vec![false; k];
    for e in 0..k {
        if counts[e] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in x.row_iter().enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let d = sq_dist(row, centers.row(a));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((p, _)) = best else { continue };
        let donor = assignments[p];
        assignments[p] = e;
        counts[donor] -= 1;
        counts[e] = 1;
        repaired[e] = true;
        centers.row_mut(e).copy_from_slice(x.row(p));
        let (m, _) = means(x, assignments, k);
        centers.row_mut(donor).copy_from_slice(m.row(donor));
    }
    (centers, repaired)
}

fn lloyd(x: &Tensor2, init: Tensor2, cfg: &KMeansConfig) -> KMeansFit {
    let k = init.rows();
    let mut centers = init;
    let mut history = Vec::new();
    let mut assignments;
    let mut prev = f64::INFINITY;
    let mut iter = 0;
    loop {
        let (a, obj) = assign(x, &centers);
        assignments = a;
        debug_assert!(obj <= prev * (1.0 + 1e-12) + 1e-12, "objective rose: {prev} -> {obj}");
        history.push(obj);
        iter += 1;
        let converged = obj == 0.0 || (prev.is_finite() && prev - obj <= cfg.tol * prev);
        if converged || iter >= cfg.max_iters {
            break;
        }
        prev = obj;
        centers = update(x, &mut assignments, k).0;
    }
    // final centers are the means of the final assignment
    let (centers, repaired) = update(x, &mut assignments, k);
    let objective = objective_of(x, &centers, &assignments);
    history.push(objective);
    KMeansFit {
        centers,
        assignments,
        objective,
        history,
        repaired,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of `n_restarts` by objective
/// (earliest restart on ties).
pub fn kmeans_fit_with_rng<R: Rng + ?Sized>(x: &Tensor2, cfg: &KMeansConfig, rng: &mut R) -> Result<KMeansFit> {
    cfg.validate()?;
    if x.rows() < cfg.k {
        return Err(Error::config(format!(
            "k-means needs at least k = {} points, got {}",
            cfg.k,
            x.rows()
        )));
    }
    let mut best: Option<KMeansFit> = None;
    for _ in 0..cfg.n_restarts {
        let init = kmeanspp_init(x, cfg.k, rng)?;
        let fit = lloyd(x, init, cfg);
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_restarts >= 1"))
}

/// [`kmeans_fit_with_rng`] seeded from `cfg.seed`.
pub fn kmeans_fit(x: &Tensor2, cfg: &KMeansConfig) -> Result<KMeansFit> {
    kmeans_fit_with_rng(x, cfg, &mut stream(cfg.seed, &["kmeans"]))
}
