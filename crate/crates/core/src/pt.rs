//! Prototype re-calibration by cross-attention: the K prototypes of a bag
//! are the queries, all of its instances are keys and values.
//!
//! For one pass with prototypes `P` (`K × d`) and instances `X` (`n × d`):
//!
//! ```text
//! Q = P·W_q,  Keys = X·W_k,  A = softmax_rows(Q·Keysᵀ / √d),  P̂ = A·(X·W_v)
//! ```
//!
//! With `n_iters > 1` the output of one pass is the query of the next; the
//! weights are shared across passes. There is no output projection, residual
//! or feed-forward block, and no positional encoding (instances are
//! unordered).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{normal_matrix, stream};
use crate::tensor::{Tape, Tensor2, Var};

/// Query/key/value projections for one scale, each `d × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T = Tensor2> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
        }
    }

    pub fn named(&self) -> [(&'static str, &T); 3] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut T); 3] {
        [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)]
    }
}

/// One independent projection triple per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtParams {
    pub d_k: usize,
    pub n_iters: usize,
    pub scales: Vec<AttentionWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtOutput {
    /// Re-calibrated prototypes, `K × d`.
    pub p_hat: Tensor2,
    /// Row-stochastic `K × n` attention of the final pass.
    pub a_map: Tensor2,
}

/// Draws every weight from `N(0, 1/d_k)`.
pub fn pt_init(d_k: usize, n_scales: usize, n_iters: usize, seed: u64) -> PtParams {
    let std = 1.0 / (d_k as f64).sqrt();
    let scales = (0..n_scales)
        .map(|s| {
            let s = s.to_string();
            let draw = |name: &str| normal_matrix(&mut stream(seed, &["pt", &s, name]), d_k, d_k, std);
            AttentionWeights {
                wq: draw("wq"),
                wk: draw("wk"),
                wv: draw("wv"),
            }
        })
        .collect();
    PtParams { d_k, n_iters, scales }
}

/// Direct evaluation on plain tensors, projecting the instances first.
///
/// Dense self-attention is the special case `p = x`.
pub fn pt_forward(p: &Tensor2, x: &Tensor2, w: &AttentionWeights, n_iters: usize) -> Result<PtOutput> {
    let scale = 1.0 / (p.cols() as f64).sqrt();
    let keys = x.matmul(&w.wk)?;
    let values = x.matmul(&w.wv)?;
    let mut query_src = p.clone();
    let mut a_map = Tensor2::zeros(p.rows(), x.rows());
    for _ in 0..n_iters.max(1) {
        let q = query_src.matmul(&w.wq)?;
        a_map = q.matmul_nt(&keys)?.scale(scale).softmax_rows();
        query_src = a_map.matmul(&values)?;
    }
    Ok(PtOutput {
        p_hat: query_src,
        a_map,
    })
}

/// Taped forward used for training. Products are re-associated so that no
/// `n × d` projection is formed: logits are `(Q·W_kᵀ)·Xᵀ` and the output is
/// `(A·X)·W_v`, which costs `O(K·n·d)` instead of `O(n·d²)`.
///
/// Returns `(P̂, A_map)`.
pub fn pt_forward_tape(
    tape: &mut Tape,
    p: Var,
    x: Var,
    w: &AttentionWeights<Var>,
    n_iters: usize,
) -> Result<(Var, Var)> {
    let d = tape.value(p).cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut query_src = p;
    let mut a_map = None;
    for _ in 0..n_iters.max(1) {
        let q = tape.matmul(query_src, w.wq)?;
        let qk = tape.matmul_nt(q, w.wk)?;
        let logits = tape.matmul_nt(qk, x)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax_rows(logits);
        let mixed = tape.matmul(a, x)?;
        query_src = tape.matmul(mixed, w.wv)?;
        a_map = Some(a);
    }
    Ok((query_src, a_map.expect("at least one pass")))
}

/// Analytic multiply-add count (×2 for FLOPs) of one attention pass with
/// `k` queries over `n` instances of width `d`, in the projected form of
/// [`pt_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    /// `Q = P·W_q`: `2·K·d²`.
    pub query_projection: u64,
    /// Keys and values: `4·n·d²`.
    pub key_value_projection: u64,
    /// Logits plus value mixing: `2·K·n·d + 2·K·n·d`.
    pub attention: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.query_projection + self.key_value_projection + self.attention
    }

    /// The part that grows with `n`.
    pub fn n_dependent(&self) -> u64 {
        self.key_value_projection + self.attention
    }
}

pub fn pt_attention_cost(n: u64, k: u64, d: u64) -> AttentionCost {
    AttentionCost {
        query_projection: 2 * k * d * d,
        key_value_projection: 4 * n * d * d,
        attention: 4 * k * n * d,
    }
}

/// Dense `n × n` self-attention is the `K = n` case.
pub fn dense_attention_cost(n: u64, d: u64) -> AttentionCost {
    pt_attention_cost(n, n, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, r: usize, c: usize) -> Tensor2 {
        crate::rng::uniform_matrix(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0)
    }

    fn weights(seed: u64, d: usize) -> AttentionWeights {
        AttentionWeights {
            wq: rand_t(seed, d, d),
            wk: rand_t(seed + 1, d, d),
            wv: rand_t(seed + 2, d, d),
        }
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let x = rand_t(1, 6, 3);
        let p = rand_t(2, 2, 3);
        let mut w = weights(3, 3);
        w.wq = Tensor2::zeros(3, 3);
        let out = pt_forward(&p, &x, &w, 1).unwrap();
        for &a in out.a_map.data() {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }
        let expected = x.mean_rows().matmul(&w.wv).unwrap();
        for r in out.p_hat.row_iter() {
            for (a, b) in r.iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_instance_is_copied_to_every_prototype() {
        let x = rand_t(4, 1, 3);
        let p = rand_t(5, 4, 3);
        let w = weights(6, 3);
        let out = pt_forward(&p, &x, &w, 2).unwrap();
        assert_eq!(out.a_map, Tensor2::filled(4, 1, 1.0));
        let xv = x.matmul(&w.wv).unwrap();
        for r in out.p_hat.row_iter() {
            assert_eq!(r, xv.row(0));
        }
    }

    #[test]
    fn small_integer_case_matches_scalar_oracle() {
        // K=2, n=3, d=2, integer weights; every step spelled out by hand.
        let p = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let x = Tensor2::from_rows(&[[1.0, 2.0], [0.0, -1.0], [2.0, 1.0]]);
        let w = AttentionWeights {
            wq: Tensor2::from_rows(&[[1.0, 0.0], [1.0, 1.0]]),
            wk: Tensor2::from_rows(&[[0.0, 1.0], [1.0, 0.0]]),
            wv: Tensor2::from_rows(&[[2.0, 0.0], [0.0, 1.0]]),
        };
        // q1 = [1,0], q2 = [1,1]
        // keys: x1 -> [2,1], x2 -> [-1,0], x3 -> [1,2]
        // values: x1 -> [2,2], x2 -> [0,-1], x3 -> [4,1]
        let s = 1.0 / 2f64.sqrt();
        let logits = [[2.0 * s, -1.0 * s, 1.0 * s], [3.0 * s, -1.0 * s, 3.0 * s]];
        let values = [[2.0, 2.0], [0.0, -1.0], [4.0, 1.0]];
        let mut expected = [[0.0; 2]; 2];
        let mut attn = [[0.0; 3]; 2];
        for r in 0..2 {
            let z: f64 = logits[r].iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                attn[r][j] = logits[r][j].exp() / z;
                for c in 0..2 {
                    expected[r][c] += attn[r][j] * values[j][c];
                }
            }
        }
        let out = pt_forward(&p, &x, &w, 1).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                assert!((out.a_map.get(r, j) - attn[r][j]).abs() < 1e-14);
            }
            for c in 0..2 {
                assert!((out.p_hat.get(r, c) - expected[r][c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reassociated_tape_path_matches_direct_path() {
        for (k, n, d, iters) in [(2, 5, 4, 1), (8, 40, 6, 1), (3, 17, 5, 3)] {
            let x = rand_t(10 + n as u64, n, d);
            let p = rand_t(20 + k as u64, k, d);
            let w = weights(30, d);
            let direct = pt_forward(&p, &x, &w, iters).unwrap();
            let mut tape = Tape::new();
            let (pv, xv) = (tape.constant(p.clone()), tape.constant(x.clone()));
            let wv = w.map(|t| tape.constant(t.clone()));
            let (ph, a) = pt_forward_tape(&mut tape, pv, xv, &wv, iters).unwrap();
            assert!(tape.value(ph).max_abs_diff(&direct.p_hat) < 1e-12);
            assert!(tape.value(a).max_abs_diff(&direct.a_map) < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = pt_init(8, 3, 1, 42);
        assert_eq!(a, pt_init(8, 3, 1, 42));
        assert_eq!(a.scales.len(), 3);
        assert_ne!(a.scales[0].wq, a.scales[1].wq);
        let big = pt_init(128, 1, 1, 7);
        let vals: Vec<f64> = big.scales[0]
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert!(vals.len() >= 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((var * 128.0 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn cost_model_examples() {
        let a = pt_attention_cost(1000, 16, 64);
        let b = pt_attention_cost(2000, 16, 64);
        assert_eq!(b.n_dependent(), 2 * a.n_dependent());
        assert_eq!(a.query_projection, b.query_projection);

        let dense = dense_attention_cost(300, 64);
        assert_eq!(dense.attention, 4 * 300 * 300 * 64);

        let pt = pt_attention_cost(5900, 16, 512);
        let full = pt_attention_cost(5900, 5900, 512);
        let ratio = pt.attention as f64 / full.attention as f64;
        assert!((ratio - 16.0 / 5900.0).abs() < 1e-15);
    }
}
