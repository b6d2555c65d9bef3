use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::csv_err;
use crate::error::{Error, Result};
use crate::pt::{pt_attention_cost, pt_forward, pt_init};
use crate::rng::{normal_matrix, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Bag sizes for the prototype path, ascending.
    pub pt_n_values: Vec<usize>,
    /// Bag sizes for dense self-attention, ascending.
    pub dense_n_values: Vec<usize>,
    pub k: usize,
    pub d: usize,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pt_n_values: vec![4096, 8192, 16384, 32768],
            dense_n_values: vec![512, 1024, 2048, 4096],
            k: 16,
            d: 64,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `pt` or `dense`.
    pub path: String,
    pub n: usize,
    pub seconds: f64,
    /// Analytic FLOPs of the attention part of one pass.
    pub attention_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time against `n`; absent with fewer than two sizes.
    pub pt_slope: Option<f64>,
    pub dense_slope: Option<f64>,
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["path", "n", "seconds", "attention_flops"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.path.clone(),
                r.n.to_string(),
                r.seconds.to_string(),
                r.attention_flops.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn ascending(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Times the prototype forward pass against dense self-attention (`P = X`)
/// over the configured bag sizes.
pub fn bench_complexity(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.k == 0 || cfg.d == 0 || cfg.repeats == 0 {
        return Err(Error::config("bench needs k, d and repeats >= 1"));
    }
    if !ascending(&cfg.pt_n_values) || !ascending(&cfg.dense_n_values) {
        return Err(Error::config("bench n values must be strictly ascending"));
    }
    let w = pt_init(cfg.d, 1, 1, cfg.seed).scales.remove(0);
    let time = |f: &dyn Fn()| {
        (0..cfg.repeats)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut rows = Vec::new();
    for &n in &cfg.pt_n_values {
        let x = normal_matrix(&mut stream(cfg.seed, &["bench", "x", &n.to_string()]), n, cfg.d, 1.0);
        let p = normal_matrix(&mut stream(cfg.seed, &["bench", "p"]), cfg.k, cfg.d, 1.0);
        let seconds = time(&|| {
            std::hint::black_box(pt_forward(&p, &x, &w, 1).expect("shapes agree"));
        });
        rows.push(BenchRow {
            path: "pt".into(),
            n,
            seconds,
            attention_flops: pt_attention_cost(n as u64, cfg.k as u64, cfg.d as u64).attention,
        });
    }
    for &n in &cfg.dense_n_values {
        let x = normal_matrix(&mut stream(cfg.seed, &["bench", "x", &n.to_string()]), n, cfg.d, 1.0);
        let seconds = time(&|| {
            std::hint::black_box(pt_forward(&x, &x, &w, 1).expect("shapes agree"));
        });
        rows.push(BenchRow {
            path: "dense".into(),
            n,
            seconds,
            attention_flops: pt_attention_cost(n as u64, n as u64, cfg.d as u64).attention,
        });
    }
    let slope = |path: &str| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.path == path)
            .map(|r| (r.n as f64, r.seconds))
            .unzip();
        log_log_slope(&xs, &ys)
    };
    Ok(BenchReport {
        pt_slope: slope("pt"),
        dense_slope: slope("dense"),
        config: cfg.clone(),
        rows,
    })
}
