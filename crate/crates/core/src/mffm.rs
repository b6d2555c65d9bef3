//! Multi-scale fusion: pyramid concatenation, the Mixer layer, gated
//! attention pooling and the classifier head, plus the pooling baselines and
//! alternative fusion strategies.
//!
//! Every block is written once against the [`Tape`]; the plain-tensor
//! functions run the same code on a throwaway tape of constants.
//!
//! Linear weights are stored `out × in` and applied as `x·Wᵀ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, uniform_matrix};
use crate::tensor::{Tape, Tensor2, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One Mixer layer. Token mixing acts along the prototype axis (`K → c → K`)
/// for every channel; channel mixing acts along the feature axis
/// (`D → d_s → D`) for every prototype. Both are pre-LN residual MLPs with
/// GELU, and both LayerNorms normalise each prototype row over its `D`
/// channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerParams<T = Tensor2> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// `c × K`
    pub w1: T,
    pub b1: Option<T>,
    /// `K × c`
    pub w2: T,
    pub b2: Option<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// `d_s × D`
    pub w3: T,
    pub b3: Option<T>,
    /// `D × d_s`
    pub w4: T,
    pub b4: Option<T>,
}

/// Gated attention: `a = softmax_K((tanh(H·V_aᵀ) ⊙ σ(H·U_aᵀ))·w_aᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapParams<T = Tensor2> {
    /// `L × D`
    pub v: T,
    /// `L × D`
    pub u: T,
    /// `1 × L`
    pub w: T,
}

/// Single linear layer `D → d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T = Tensor2> {
    /// `d_out × D`
    pub w: T,
    pub b: Option<T>,
}

fn map_opt<T, U>(o: &Option<T>, f: &mut impl FnMut(&T) -> U) -> Option<U> {
    o.as_ref().map(f)
}

fn push_named<'a, T>(out: &mut Vec<(String, &'a T)>, prefix: &str, name: &str, t: &'a T) {
    out.push((format!("{prefix}.{name}"), t));
}

fn push_named_mut<'a, T>(out: &mut Vec<(String, &'a mut T)>, prefix: &str, name: &str, t: &'a mut T) {
    out.push((format!("{prefix}.{name}"), t));
}

impl<T> MixerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MixerParams<U> {
        MixerParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            w1: f(&self.w1),
            b1: map_opt(&self.b1, &mut f),
            w2: f(&self.w2),
            b2: map_opt(&self.b2, &mut f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            w3: f(&self.w3),
            b3: map_opt(&self.b3, &mut f),
            w4: f(&self.w4),
            b4: map_opt(&self.b4, &mut f),
        }
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        push_named(out, prefix, "ln1_gain", &self.ln1_gain);
        push_named(out, prefix, "ln1_bias", &self.ln1_bias);
        push_named(out, prefix, "w1", &self.w1);
        if let Some(b) = &self.b1 {
            push_named(out, prefix, "b1", b);
        }
        push_named(out, prefix, "w2", &self.w2);
        if let Some(b) = &self.b2 {
            push_named(out, prefix, "b2", b);
        }
        push_named(out, prefix, "ln2_gain", &self.ln2_gain);
        push_named(out, prefix, "ln2_bias", &self.ln2_bias);
        push_named(out, prefix, "w3", &self.w3);
        if let Some(b) = &self.b3 {
            push_named(out, prefix, "b3", b);
        }
        push_named(out, prefix, "w4", &self.w4);
        if let Some(b) = &self.b4 {
            push_named(out, prefix, "b4", b);
        }
    }

    pub fn collect_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        push_named_mut(out, prefix, "ln1_gain", &mut self.ln1_gain);
        push_named_mut(out, prefix, "ln1_bias", &mut self.ln1_bias);
        push_named_mut(out, prefix, "w1", &mut self.w1);
        if let Some(b) = &mut self.b1 {
            push_named_mut(out, prefix, "b1", b);
        }
        push_named_mut(out, prefix, "w2", &mut self.w2);
        if let Some(b) = &mut self.b2 {
            push_named_mut(out, prefix, "b2", b);
        }
        push_named_mut(out, prefix, "ln2_gain", &mut self.ln2_gain);
        push_named_mut(out, prefix, "ln2_bias", &mut self.ln2_bias);
        push_named_mut(out, prefix, "w3", &mut self.w3);
        if let Some(b) = &mut self.b3 {
            push_named_mut(out, prefix, "b3", b);
        }
        push_named_mut(out, prefix, "w4", &mut self.w4);
        if let Some(b) = &mut self.b4 {
            push_named_mut(out, prefix, "b4", b);
        }
    }
}

impl<T> GapParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GapParams<U> {
        GapParams {
            v: f(&self.v),
            u: f(&self.u),
            w: f(&self.w),
        }
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        push_named(out, prefix, "v", &self.v);
        push_named(out, prefix, "u", &self.u);
        push_named(out, prefix, "w", &self.w);
    }

    pub fn collect_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        push_named_mut(out, prefix, "v", &mut self.v);
        push_named_mut(out, prefix, "u", &mut self.u);
        push_named_mut(out, prefix, "w", &mut self.w);
    }
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            w: f(&self.w),
            b: map_opt(&self.b, &mut f),
        }
    }

    pub fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        push_named(out, prefix, "w", &self.w);
        if let Some(b) = &self.b {
            push_named(out, prefix, "b", b);
        }
    }

    pub fn collect_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        push_named_mut(out, prefix, "w", &mut self.w);
        if let Some(b) = &mut self.b {
            push_named_mut(out, prefix, "b", b);
        }
    }
}

/// PyTorch-style `U(-1/√in, 1/√in)` for weight and bias.
fn linear_init(seed: u64, labels: &[&str], out_dim: usize, in_dim: usize, bias: bool) -> (Tensor2, Option<Tensor2>) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut rng = stream(seed, labels);
    let w = uniform_matrix(&mut rng, out_dim, in_dim, bound);
    let b = bias.then(|| uniform_matrix(&mut rng, 1, out_dim, bound));
    (w, b)
}

/// Token hidden width `c`, channel hidden width `d_s`, prototype count `k`
/// and channel count `dim` (`3·d_k` for three scales).
pub fn mixer_init(seed: u64, layer: usize, k: usize, dim: usize, c: usize, d_s: usize, bias: bool) -> MixerParams {
    let l = layer.to_string();
    let (w1, b1) = linear_init(seed, &["mixer", &l, "w1"], c, k, bias);
    let (w2, b2) = linear_init(seed, &["mixer", &l, "w2"], k, c, bias);
    let (w3, b3) = linear_init(seed, &["mixer", &l, "w3"], d_s, dim, bias);
    let (w4, b4) = linear_init(seed, &["mixer", &l, "w4"], dim, d_s, bias);
    MixerParams {
        ln1_gain: Tensor2::filled(1, dim, 1.0),
        ln1_bias: Tensor2::zeros(1, dim),
        w1,
        b1,
        w2,
        b2,
        ln2_gain: Tensor2::filled(1, dim, 1.0),
        ln2_bias: Tensor2::zeros(1, dim),
        w3,
        b3,
        w4,
        b4,
    }
}

pub fn gap_init(seed: u64, tag: &str, dim: usize, hidden: usize) -> GapParams {
    let (v, _) = linear_init(seed, &["gap", tag, "v"], hidden, dim, false);
    let (u, _) = linear_init(seed, &["gap", tag, "u"], hidden, dim, false);
    let (w, _) = linear_init(seed, &["gap", tag, "w"], 1, hidden, false);
    GapParams { v, u, w }
}

pub fn head_init(seed: u64, dim: usize, d_out: usize, bias: bool) -> HeadParams {
    let (w, b) = linear_init(seed, &["head"], d_out, dim, bias);
    HeadParams { w, b }
}

/// `x·Wᵀ (+ b)`
fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul_nt(x, w)?;
    Ok(match b {
        Some(b) => tape.add_row(y, b)?,
        None => y,
    })
}

/// `[P̂_s20 | P̂_s10 | P̂_s5]`, fine to coarse.
pub fn concat_pyramid_tape(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    Ok(tape.concat_cols(parts)?)
}

pub fn concat_pyramid(parts: &[&Tensor2]) -> Result<Tensor2> {
    Ok(Tensor2::concat_cols(parts)?)
}

/// `X + (W_2·GELU(W_1·LN(X)ᵀ))ᵀ`, mixing across the rows of `X`.
pub fn token_mixing_tape(tape: &mut Tape, x: Var, p: &MixerParams<Var>) -> Result<Var> {
    let normed = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let t = tape.transpose(normed);
    let h = linear(tape, t, p.w1, p.b1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p.w2, p.b2)?;
    let back = tape.transpose(h);
    Ok(tape.add(x, back)?)
}

/// `X + W_4·GELU(W_3·LN(X))` applied to each row independently.
pub fn channel_mixing_tape(tape: &mut Tape, x: Var, p: &MixerParams<Var>) -> Result<Var> {
    let normed = tape.layer_norm(x, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)?;
    let h = linear(tape, normed, p.w3, p.b3)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p.w4, p.b4)?;
    Ok(tape.add(x, h)?)
}

pub fn mixer_layer_tape(tape: &mut Tape, x: Var, p: &MixerParams<Var>) -> Result<Var> {
    let h1 = token_mixing_tape(tape, x, p)?;
    channel_mixing_tape(tape, h1, p)
}

/// Returns `(Z, a)` with `Z: 1 × D` and `a: 1 × K`.
pub fn gated_attention_pool_tape(tape: &mut Tape, h: Var, p: &GapParams<Var>) -> Result<(Var, Var)> {
    let tv = tape.matmul_nt(h, p.v)?;
    let tv = tape.tanh(tv);
    let su = tape.matmul_nt(h, p.u)?;
    let su = tape.sigmoid(su);
    let gated = tape.mul(tv, su)?;
    let logits = tape.matmul_nt(gated, p.w)?;
    let logits = tape.transpose(logits);
    let a = tape.softmax_rows(logits);
    let z = tape.matmul(a, h)?;
    Ok((z, a))
}

/// Logits `1 × d_out`; the class probabilities are their softmax.
pub fn head_logits_tape(tape: &mut Tape, z: Var, p: &HeadParams<Var>) -> Result<Var> {
    linear(tape, z, p.w, p.b)
}

fn with_tape<R>(f: impl FnOnce(&mut Tape) -> Result<R>) -> Result<R> {
    f(&mut Tape::new())
}

pub fn mixer_layer(x: &Tensor2, p: &MixerParams) -> Result<Tensor2> {
    with_tape(|t| {
        let xv = t.constant(x.clone());
        let pv = p.map(|w| t.constant(w.clone()));
        let out = mixer_layer_tape(t, xv, &pv)?;
        Ok(t.value(out).clone())
    })
}

pub fn token_mixing(x: &Tensor2, p: &MixerParams) -> Result<Tensor2> {
    with_tape(|t| {
        let xv = t.constant(x.clone());
        let pv = p.map(|w| t.constant(w.clone()));
        let out = token_mixing_tape(t, xv, &pv)?;
        Ok(t.value(out).clone())
    })
}

pub fn channel_mixing(x: &Tensor2, p: &MixerParams) -> Result<Tensor2> {
    with_tape(|t| {
        let xv = t.constant(x.clone());
        let pv = p.map(|w| t.constant(w.clone()));
        let out = channel_mixing_tape(t, xv, &pv)?;
        Ok(t.value(out).clone())
    })
}

/// Returns `(Z, a)`.
pub fn gated_attention_pool(h: &Tensor2, p: &GapParams) -> Result<(Tensor2, Tensor2)> {
    with_tape(|t| {
        let hv = t.constant(h.clone());
        let pv = p.map(|w| t.constant(w.clone()));
        let (z, a) = gated_attention_pool_tape(t, hv, &pv)?;
        Ok((t.value(z).clone(), t.value(a).clone()))
    })
}

/// Class probabilities `Ŷ = softmax(Z·Wᵀ + b)`.
pub fn classify(z: &Tensor2, p: &HeadParams) -> Result<Tensor2> {
    with_tape(|t| {
        let zv = t.constant(z.clone());
        let pv = p.map(|w| t.constant(w.clone()));
        let logits = head_logits_tape(t, zv, &pv)?;
        Ok(t.value(logits).softmax_rows())
    })
}

/// Fusion of per-scale re-calibrated prototypes, compared against the Mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    /// Flatten `K × 3d` into one `1 × 3dK` vector; no pooling.
    Concatenation,
    /// Column max over prototypes per scale, summed over scales (`1 × d`).
    MsMax,
    /// Gated attention pool per scale (own parameters), summed (`1 × d`).
    MsAttention,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [Self::Concatenation, Self::MsMax, Self::MsAttention];

    pub fn name(self) -> &'static str {
        match self {
            Self::Concatenation => "Concatenation",
            Self::MsMax => "MS-Max",
            Self::MsAttention => "MS-Attention",
        }
    }

    /// Accepts the display name or a lowercase, dash-free spelling.
    pub fn parse(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        match key.as_str() {
            "concatenation" | "concat" => Ok(Self::Concatenation),
            "msmax" => Ok(Self::MsMax),
            "msattention" => Ok(Self::MsAttention),
            _ => Err(Error::config(format!("unknown fusion strategy `{s}`"))),
        }
    }

    /// Width of the bag vector fed to the head.
    pub fn output_dim(self, k: usize, d: usize, n_scales: usize) -> usize {
        match self {
            Self::Concatenation => k * d * n_scales,
            Self::MsMax | Self::MsAttention => d,
        }
    }
}

/// `gaps` needs one entry per scale for [`FusionStrategy::MsAttention`] and
/// is ignored otherwise. Returns the bag vector `Z`.
pub fn fuse_baseline_tape(
    tape: &mut Tape,
    strategy: FusionStrategy,
    p_hats: &[Var],
    gaps: &[GapParams<Var>],
) -> Result<Var> {
    match strategy {
        FusionStrategy::Concatenation => {
            let cat = tape.concat_cols(p_hats)?;
            Ok(tape.flatten(cat))
        }
        FusionStrategy::MsMax => {
            let mut acc: Option<Var> = None;
            for &p in p_hats {
                let m = tape.max_rows(p);
                acc = Some(match acc {
                    Some(a) => tape.add(a, m)?,
                    None => m,
                });
            }
            acc.ok_or_else(|| Error::config("MS-Max needs at least one scale"))
        }
        FusionStrategy::MsAttention => {
            if gaps.len() != p_hats.len() {
                return Err(Error::config(format!(
                    "MS-Attention needs one pooling block per scale, got {} for {} scales",
                    gaps.len(),
                    p_hats.len()
                )));
            }
            let mut acc: Option<Var> = None;
            for (&p, g) in p_hats.iter().zip(gaps) {
                let (z, _) = gated_attention_pool_tape(tape, p, g)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, z)?,
                    None => z,
                });
            }
            acc.ok_or_else(|| Error::config("MS-Attention needs at least one scale"))
        }
    }
}

pub fn fuse_baseline(strategy: FusionStrategy, p_hats: &[&Tensor2], gaps: &[GapParams]) -> Result<Tensor2> {
    with_tape(|t| {
        let pv: Vec<Var> = p_hats.iter().map(|p| t.constant((*p).clone())).collect();
        let gv: Vec<GapParams<Var>> = gaps.iter().map(|g| g.map(|w| t.constant(w.clone()))).collect();
        let z = fuse_baseline_tape(t, strategy, &pv, &gv)?;
        Ok(t.value(z).clone())
    })
}

/// Single-scale pooling of raw instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstancePooling {
    Mean,
    Max,
    /// Gated attention over instances.
    Abmil,
}

/// Pools an `n × d` instance matrix to `1 × d`. `gap` is required for
/// [`InstancePooling::Abmil`].
pub fn pool_instances_tape(
    tape: &mut Tape,
    kind: InstancePooling,
    x: Var,
    gap: Option<&GapParams<Var>>,
) -> Result<Var> {
    match kind {
        InstancePooling::Mean => Ok(tape.mean_rows(x)),
        InstancePooling::Max => Ok(tape.max_rows(x)),
        InstancePooling::Abmil => {
            let g = gap.ok_or_else(|| Error::config("ABMIL pooling needs gated-attention parameters"))?;
            Ok(gated_attention_pool_tape(tape, x, g)?.0)
        }
    }
}

/// Writes `bag_id,prototype_index,weight` rows for the GAP weights of each bag.
pub fn write_gap_weights_csv(path: &Path, rows: &[(String, Tensor2)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bag_id", "prototype_index", "weight"])
        .map_err(|e| csv_err(path, e))?;
    for (bag_id, a) in rows {
        for (i, v) in a.data().iter().enumerate() {
            w.write_record([bag_id.as_str(), &i.to_string(), &format!("{v:e}")])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attention map rows for one bag and scale.
pub struct AttentionDump<'a> {
    pub bag_id: &'a str,
    pub scale: &'a str,
    pub a_map: &'a Tensor2,
}

/// Writes `bag_id,scale,prototype_index,instance_index,weight` rows.
pub fn write_attention_csv(path: &Path, dumps: &[AttentionDump<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bag_id", "scale", "prototype_index", "instance_index", "weight"])
        .map_err(|e| csv_err(path, e))?;
    for d in dumps {
        for (k, row) in d.a_map.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([d.bag_id, d.scale, &k.to_string(), &j.to_string(), &format!("{v:e}")])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, r: usize, c: usize) -> Tensor2 {
        uniform_matrix(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0)
    }

    fn zero_mixer(k: usize, dim: usize, c: usize, d_s: usize) -> MixerParams {
        let mut p = mixer_init(0, 0, k, dim, c, d_s, true);
        for w in [&mut p.w1, &mut p.w2, &mut p.w3, &mut p.w4] {
            *w = Tensor2::zeros(w.rows(), w.cols());
        }
        for b in [&mut p.b1, &mut p.b2, &mut p.b3, &mut p.b4].into_iter().flatten() {
            *b = Tensor2::zeros(1, b.cols());
        }
        p
    }

    #[test]
    fn pyramid_order_and_shape() {
        let a = Tensor2::filled(2, 3, 1.0);
        let b = Tensor2::zeros(2, 3);
        let c = Tensor2::filled(2, 3, 3.0);
        let p = concat_pyramid(&[&a, &b, &c]).unwrap();
        assert_eq!(p.shape(), (2, 9));
        assert_eq!(p.row(1), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0]);
        assert!(concat_pyramid(&[&a, &Tensor2::zeros(3, 3)]).is_err());
    }

    #[test]
    fn zero_branches_are_identity() {
        let x = rand_t(1, 4, 6);
        let p = zero_mixer(4, 6, 8, 9);
        assert_eq!(mixer_layer(&x, &p).unwrap(), x);
    }

    #[test]
    fn mixer_matches_scalar_oracle() {
        // K=2, D=2, c=d_s=2, integer weights, unit LN.
        let x = Tensor2::from_rows(&[[1.0, 3.0], [2.0, -2.0]]);
        let mut p = mixer_init(0, 0, 2, 2, 2, 2, true);
        p.w1 = Tensor2::from_rows(&[[1.0, -1.0], [0.0, 2.0]]);
        p.b1 = Some(Tensor2::from_rows(&[[1.0, 0.0]]));
        p.w2 = Tensor2::from_rows(&[[1.0, 1.0], [-1.0, 0.0]]);
        p.b2 = Some(Tensor2::from_rows(&[[0.0, 1.0]]));
        p.w3 = Tensor2::from_rows(&[[2.0, 0.0], [1.0, 1.0]]);
        p.b3 = Some(Tensor2::from_rows(&[[0.0, -1.0]]));
        p.w4 = Tensor2::from_rows(&[[1.0, 0.0], [1.0, -1.0]]);
        p.b4 = Some(Tensor2::from_rows(&[[1.0, 1.0]]));

        let ln = |r: [f64; 2]| {
            let m = (r[0] + r[1]) / 2.0;
            let v = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            let s = (v + LAYER_NORM_EPS).sqrt();
            [(r[0] - m) / s, (r[1] - m) / s]
        };
        let mlp = |v: [f64; 2], wa: [[f64; 2]; 2], ba: [f64; 2], wb: [[f64; 2]; 2], bb: [f64; 2]| {
            let h: Vec<f64> = (0..2)
                .map(|i| gelu_scalar(wa[i][0] * v[0] + wa[i][1] * v[1] + ba[i]))
                .collect();
            [
                wb[0][0] * h[0] + wb[0][1] * h[1] + bb[0],
                wb[1][0] * h[0] + wb[1][1] * h[1] + bb[1],
            ]
        };
        let xr = [[1.0, 3.0], [2.0, -2.0]];
        let n = [ln(xr[0]), ln(xr[1])];
        // token mixing: one channel at a time, vector over the two prototypes
        let mut h1 = xr;
        for ch in 0..2 {
            let col = [n[0][ch], n[1][ch]];
            let out = mlp(
                col,
                [[1.0, -1.0], [0.0, 2.0]],
                [1.0, 0.0],
                [[1.0, 1.0], [-1.0, 0.0]],
                [0.0, 1.0],
            );
            h1[0][ch] += out[0];
            h1[1][ch] += out[1];
        }
        let mut h = h1;
        for row in 0..2 {
            let out = mlp(
                ln(h1[row]),
                [[2.0, 0.0], [1.0, 1.0]],
                [0.0, -1.0],
                [[1.0, 0.0], [1.0, -1.0]],
                [1.0, 1.0],
            );
            h[row][0] += out[0];
            h[row][1] += out[1];
        }
        let got = mixer_layer(&x, &p).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!(
                    (got.get(r, c) - h[r][c]).abs() < 1e-12,
                    "({r},{c}) {} vs {}",
                    got.get(r, c),
                    h[r][c]
                );
            }
        }
    }

    #[test]
    fn channel_mixing_commutes_with_row_permutation() {
        let x = rand_t(2, 5, 6);
        let p = mixer_init(3, 0, 5, 6, 10, 9, true);
        let perm = [3, 0, 4, 1, 2];
        let a = channel_mixing(&x.select_rows(&perm), &p).unwrap();
        let b = channel_mixing(&x, &p).unwrap().select_rows(&perm);
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn token_mixing_is_not_permutation_equivariant() {
        let x = rand_t(4, 4, 6);
        let p = mixer_init(5, 0, 4, 6, 8, 9, true);
        let perm = [1, 0, 3, 2];
        let a = mixer_layer(&x.select_rows(&perm), &p).unwrap();
        let b = mixer_layer(&x, &p).unwrap().select_rows(&perm);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn gap_examples() {
        let h = rand_t(6, 5, 4);
        let mut g = gap_init(1, "t", 4, 3);
        let (z, a) = gated_attention_pool(&h, &g).unwrap();
        assert!((a.sum() - 1.0).abs() < 1e-12);
        for j in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| h.get(i, j)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(z.get(0, j) >= lo - 1e-12 && z.get(0, j) <= hi + 1e-12);
        }
        g.w = Tensor2::zeros(1, 3);
        let (z, a) = gated_attention_pool(&h, &g).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(z.max_abs_diff(&h.mean_rows()) < 1e-12);

        let one = rand_t(7, 1, 4);
        let (z, a) = gated_attention_pool(&one, &gap_init(2, "t", 4, 3)).unwrap();
        assert_eq!(a, Tensor2::scalar(1.0));
        assert_eq!(z, one);
    }

    #[test]
    fn classify_examples() {
        let z = rand_t(8, 1, 6);
        let zero = HeadParams {
            w: Tensor2::zeros(2, 6),
            b: Some(Tensor2::zeros(1, 2)),
        };
        assert_eq!(classify(&z, &zero).unwrap(), Tensor2::filled(1, 2, 0.5));
        let fixed = HeadParams {
            w: Tensor2::zeros(2, 1),
            b: Some(Tensor2::from_rows(&[[2.0, 0.0]])),
        };
        let y = classify(&Tensor2::scalar(0.0), &fixed).unwrap();
        assert!((y.get(0, 0) - 0.8807970779778823).abs() < 1e-12);
        assert!((y.get(0, 1) - 0.11920292202211755).abs() < 1e-12);
        let y = classify(&z, &head_init(3, 6, 3, true)).unwrap();
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_examples() {
        let p: Vec<Tensor2> = (0..3).map(|s| rand_t(10 + s, 1, 4)).collect();
        let refs: Vec<&Tensor2> = p.iter().collect();
        let z = fuse_baseline(FusionStrategy::MsMax, &refs, &[]).unwrap();
        let sum = p[0].add(&p[1]).unwrap().add(&p[2]).unwrap();
        assert!(z.max_abs_diff(&sum) < 1e-15);

        let p: Vec<Tensor2> = (0..3).map(|s| rand_t(20 + s, 4, 5)).collect();
        let refs: Vec<&Tensor2> = p.iter().collect();
        let gaps: Vec<GapParams> = (0..3)
            .map(|s| {
                let mut g = gap_init(s, "x", 5, 2);
                g.w = Tensor2::zeros(1, 2);
                g
            })
            .collect();
        let z = fuse_baseline(FusionStrategy::MsAttention, &refs, &gaps).unwrap();
        let means = p[0]
            .mean_rows()
            .add(&p[1].mean_rows())
            .unwrap()
            .add(&p[2].mean_rows())
            .unwrap();
        assert!(z.max_abs_diff(&means) < 1e-12);

        let z = fuse_baseline(FusionStrategy::Concatenation, &refs, &[]).unwrap();
        assert_eq!(z.shape(), (1, FusionStrategy::Concatenation.output_dim(4, 5, 3)));
        assert_eq!(z.get(0, 5), p[1].get(0, 0));
        assert!(fuse_baseline(FusionStrategy::MsAttention, &refs, &gaps[..1]).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in FusionStrategy::ALL {
            assert_eq!(FusionStrategy::parse(s.name()).unwrap(), s);
        }
        assert!(matches!(FusionStrategy::parse("ms-sum"), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_examples() {
        let row = rand_t(30, 1, 4);
        let same = row.select_rows(&[0, 0, 0]);
        let mut t = Tape::new();
        let x = t.constant(same);
        let m = pool_instances_tape(&mut t, InstancePooling::Mean, x, None).unwrap();
        assert!(t.value(m).max_abs_diff(&row) < 1e-15);
        let one = t.constant(row.clone());
        let a = pool_instances_tape(&mut t, InstancePooling::Max, one, None).unwrap();
        let b = pool_instances_tape(&mut t, InstancePooling::Mean, one, None).unwrap();
        assert_eq!(t.value(a), t.value(b));

        let xs = rand_t(31, 6, 4);
        let x = t.constant(xs.clone());
        let mut g = gap_init(0, "abmil", 4, 3);
        g.w = Tensor2::zeros(1, 3);
        let gv = g.map(|w| t.constant(w.clone()));
        let a = pool_instances_tape(&mut t, InstancePooling::Abmil, x, Some(&gv)).unwrap();
        assert!(t.value(a).max_abs_diff(&xs.mean_rows()) < 1e-12);
        assert!(pool_instances_tape(&mut t, InstancePooling::Abmil, x, None).is_err());
    }

    #[test]
    fn csv_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gap.csv");
        write_gap_weights_csv(&path, &[("b1".into(), Tensor2::from_rows(&[[0.25, 0.75]]))]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("bag_id,prototype_index,weight\n"));

        let path = dir.path().join("attn.csv");
        let a = Tensor2::filled(2, 3, 1.0 / 3.0);
        write_attention_csv(
            &path,
            &[AttentionDump {
                bag_id: "b1",
                scale: "s20",
                a_map: &a,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(6).unwrap().starts_with("b1,s20,1,2,"));
    }
}
