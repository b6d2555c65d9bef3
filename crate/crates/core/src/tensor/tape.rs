use super::{gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softmax_in_place, Tensor2, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    Flatten(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Records every executed operation in order so that adjoints can be replayed
/// from the loss backwards.
///
/// A tape lives for one forward/backward pass. Nodes are appended only, so a
/// node's inputs always have smaller indices than the node itself.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add_row(self.value(bias))?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization over the feature axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.shape() != (1, cols) {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    left: (rows, cols),
                    right: pv.shape(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor2::zeros(rows, cols);
        let mut out = Tensor2::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().fold(0.0, |a, &v| a + v) / cols as f64;
            let var = r.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                let h = (r[j] - mean) * rs;
                xhat.set(i, j, h);
                out.set(i, j, g[j] * h + b[j]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2::concat_cols(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column-wise maximum over rows (`1 × cols`). Ties go to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut argmax = vec![0usize; cols];
        let mut out = Tensor2::zeros(1, cols);
        for j in 0..cols {
            let mut best = f64::NEG_INFINITY;
            for i in 0..rows {
                let v = xv.get(i, j);
                if v > best {
                    best = v;
                    argmax[j] = i;
                }
            }
            out.set(0, j, best);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::MaxRows { x, argmax }, rg)
    }

    /// Mean over rows (`1 × cols`).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_rows();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor2::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Row-major reshape to `1 × (rows·cols)`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows() * xv.cols();
        let out = Tensor2::new(1, n, xv.data().to_vec()).expect("same length");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Flatten(x), rg)
    }

    /// `−log softmax(logits)[label]` for a `1 × classes` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                left: lv.shape(),
                right: (1, lv.cols()),
            });
        }
        if label >= lv.cols() {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: label,
                len: lv.cols(),
            });
        }
        let row = lv.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().fold(0.0, |a, &v| a + (v - max).exp()).ln();
        let loss = lse - row[label];
        let mut probs = row.to_vec();
        softmax_in_place(&mut probs);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor2::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Replays the tape from `loss` back to the leaves.
    ///
    /// Every trainable leaf reachable from `loss` ends up with a gradient;
    /// intermediate gradients are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<(), TensorError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.matmul_nt(val(*b))?);
                }
                if wants(*b) {
                    accumulate(grads, *b, val(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if wants(*b) {
                    accumulate(grads, *b, g.matmul_tn(val(*a))?);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if wants(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = super::dot(yr, gr);
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                if wants(*gain) {
                    accumulate(grads, *gain, column_sums(&g.hadamard(xhat)?));
                }
                if wants(*bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
                if wants(*x) {
                    let gv = val(*gain).data();
                    let mut dx = Tensor2::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let (mean_d, mean_dh) = (sum_d / n, sum_dh / n);
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            let d = gr[j] * gv[j];
                            *o = rstd[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let dx = Tensor2::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) * gelu_grad_scalar(x.get(i, j)));
                accumulate(grads, *a, dx);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let dx = Tensor2::from_fn(y.rows(), y.cols(), |i, j| {
                    let t = y.get(i, j);
                    g.get(i, j) * (1.0 - t * t)
                });
                accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let dx = Tensor2::from_fn(y.rows(), y.cols(), |i, j| {
                    let s = y.get(i, j);
                    g.get(i, j) * s * (1.0 - s)
                });
                accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let piece = Tensor2::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                        accumulate(grads, p, piece);
                    }
                    offset += w;
                }
            }
            Op::MaxRows { x, argmax } => {
                let (rows, cols) = val(*x).shape();
                let mut dx = Tensor2::zeros(rows, cols);
                for (j, &i) in argmax.iter().enumerate() {
                    dx.set(i, j, g.get(0, j));
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = val(*x).shape();
                let inv = 1.0 / rows as f64;
                let dx = Tensor2::from_fn(rows, cols, |_, j| g.get(0, j) * inv);
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let (rows, cols) = val(*x).shape();
                accumulate(grads, *x, Tensor2::filled(rows, cols, g.get(0, 0)));
            }
            Op::Flatten(x) => {
                let (rows, cols) = val(*x).shape();
                accumulate(grads, *x, Tensor2::new(rows, cols, g.data().to_vec())?);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = g.get(0, 0);
                let mut d = probs.clone();
                d[*label] -= 1.0;
                for v in &mut d {
                    *v *= s;
                }
                accumulate(grads, *logits, Tensor2::new(1, d.len(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, g.cols());
    for r in g.row_iter() {
        for (o, &x) in out.data_mut().iter_mut().zip(r) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` with respect to every entry of `inputs[which]`.
    fn finite_diff(inputs: &[Tensor2], which: usize, f: &dyn Fn(&[Tensor2]) -> f64, h: f64) -> Tensor2 {
        let mut out = Tensor2::zeros(inputs[which].rows(), inputs[which].cols());
        for k in 0..inputs[which].data().len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            out.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor2, b: &Tensor2) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-3)))
            .fold(0.0, f64::max)
    }

    /// Builds `build` on a fresh tape, backprops, and compares every input
    /// gradient to central differences.
    fn check(inputs: Vec<Tensor2>, build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let eval = |xs: &[Tensor2]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).get(0, 0)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let fd = finite_diff(&inputs, i, &eval, 1e-5);
            let g = grads.get(*v).expect("gradient populated");
            let e = rel_err(g, &fd);
            assert!(e <= tol, "input {i}: rel err {e}");
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        check(
            vec![a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                t.sum_all(c)
            },
            1e-6,
        );
    }

    #[test]
    fn sum_of_product_has_analytic_adjoint() {
        let a = Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor2::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        let ones = Tensor2::filled(2, 3, 1.0);
        assert_eq!(grads.get(va).unwrap(), &ones.matmul(&b.transpose()).unwrap());
        assert_eq!(grads.get(vb).unwrap(), &a.transpose().matmul(&ones).unwrap());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor2::from_rows(&[[1.0, -2.0, 3.0]]));
        let s = tape.sum_all(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &Tensor2::filled(1, 3, 1.0));
    }

    #[test]
    fn every_unary_and_binary_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 5);
        let y = random(&mut rng, 3, 5);
        let w = random(&mut rng, 4, 5);
        let bias = random(&mut rng, 1, 5);
        let gain = random(&mut rng, 1, 5);
        let weights = random(&mut rng, 3, 5);
        check(
            vec![x, y, w, bias, gain, weights],
            |t, v| {
                let ln = t.layer_norm(v[0], v[4], v[3], 1e-5).unwrap();
                let g = t.gelu(ln);
                let th = t.tanh(v[1]);
                let sg = t.sigmoid(v[1]);
                let m = t.mul(th, sg).unwrap();
                let s = t.add(g, m).unwrap();
                let s = t.add_row(s, v[3]).unwrap();
                let p = t.matmul_nt(s, v[2]).unwrap();
                let pt = t.transpose(p);
                let sm = t.softmax_rows(pt);
                let sm = t.scale(sm, 1.7);
                let smt = t.transpose(sm);
                let c = t.concat_cols(&[smt, s]).unwrap();
                let mx = t.max_rows(c);
                let mn = t.mean_rows(c);
                let f = t.flatten(v[5]);
                let f = t.gelu(f);
                let a = t.sum_all(mx);
                let b = t.sum_all(mn);
                let cc = t.sum_all(f);
                let ab = t.add(a, b).unwrap();
                t.add(ab, cc).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor2::from_rows(&[[0.0, 0.0]]));
        let loss = tape.cross_entropy(l, 0).unwrap();
        assert!((tape.value(loss).get(0, 0) - 2f64.ln()).abs() < 1e-15);

        let mut tape = Tape::new();
        let l = tape.param(Tensor2::from_rows(&[[30.0, -1e6]]));
        let loss = tape.cross_entropy(l, 0).unwrap();
        assert!(tape.value(loss).get(0, 0).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = Tensor2::from_rows(&[[0.3, -1.2, 2.0]]);
        let l = tape.param(logits.clone());
        let loss = tape.cross_entropy(l, 2).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut expected = logits.softmax_rows();
        expected.data_mut()[2] -= 1.0;
        assert!(g.get(l).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor2::zeros(1, 2));
        assert!(matches!(
            tape.cross_entropy(l, 2),
            Err(TensorError::Index { index: 2, len: 2, .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor2::zeros(2, 2));
        assert_eq!(
            tape.backward(a).unwrap_err(),
            TensorError::NonScalarLoss { rows: 2, cols: 2 }
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::filled(2, 2, 1.0));
        let w = tape.param(Tensor2::identity(2));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]));
        let gain = tape.constant(Tensor2::filled(1, 3, 1.0));
        let bias = tape.constant(Tensor2::zeros(1, 3));
        let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
        // mean 2, population variance 2/3
        let s = 1.5f64.sqrt();
        let out = tape.value(y);
        for (o, e) in out.row(0).iter().zip([-s, 0.0, s]) {
            assert!((o - e).abs() < 1e-12);
        }
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(1), &[0.0, 0.0, 0.0]);
        let bad = tape.constant(Tensor2::zeros(1, 2));
        assert!(tape.layer_norm(x, bad, bias, 1e-5).is_err());
    }

    #[test]
    fn max_rows_breaks_ties_towards_first_row() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::from_rows(&[[1.0, 5.0], [1.0, 2.0]]));
        let m = tape.max_rows(x);
        let s = tape.sum_all(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor2::from_rows(&[[1.0, 1.0], [0.0, 0.0]]));
    }

    #[test]
    fn forward_and_backward_are_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let a = tape.param(random(&mut rng, 6, 7));
            let b = tape.param(random(&mut rng, 7, 3));
            let c = tape.matmul(a, b).unwrap();
            let c = tape.softmax_rows(c);
            let c = tape.gelu(c);
            let s = tape.sum_all(c);
            let g = tape.backward(s).unwrap();
            (
                tape.value(s).clone(),
                g.get(a).unwrap().clone(),
                g.get(b).unwrap().clone(),
            )
        };
        assert_eq!(run(), run());
    }
}
