//! Model variants and their parameters.
//!
//! All variants share one parameter layout (`pt`, `mixer`, `gap`, `head`);
//! a variant simply leaves the blocks it does not use empty.

use serde::{Deserialize, Serialize};

use crate::clustering::PrototypeBag;
use crate::data::MultiScaleBag;
use crate::error::{Error, Result};
use crate::mffm::{
    fuse_baseline_tape, gap_init, gated_attention_pool_tape, head_init, head_logits_tape, mixer_init, mixer_layer_tape,
    pool_instances_tape, FusionStrategy, GapParams, HeadParams, InstancePooling, MixerParams,
};
use crate::pt::{pt_forward_tape, pt_init, AttentionWeights};
use crate::tensor::{Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// PT at every scale, pyramid concat, Mixer, GAP, head.
    Mspt,
    /// PT at the finest scale only, then GAP and head.
    Pt,
    /// Every instance of the finest scale is a query (dense self-attention),
    /// then GAP and head. No clustering.
    FullBag,
    /// GAP and head over the static K-means prototypes of the finest scale.
    PrototypeBag,
    MeanPool,
    MaxPool,
    Abmil,
    /// PT at every scale, then the named fusion instead of Mixer + GAP.
    Concatenation,
    MsMax,
    MsAttention,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        Self::Mspt,
        Self::Pt,
        Self::FullBag,
        Self::PrototypeBag,
        Self::MeanPool,
        Self::MaxPool,
        Self::Abmil,
        Self::Concatenation,
        Self::MsMax,
        Self::MsAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mspt => "mspt",
            Self::Pt => "pt",
            Self::FullBag => "full-bag",
            Self::PrototypeBag => "prototype-bag",
            Self::MeanPool => "mean-pool",
            Self::MaxPool => "max-pool",
            Self::Abmil => "abmil",
            Self::Concatenation => "concatenation",
            Self::MsMax => "ms-max",
            Self::MsAttention => "ms-attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_lowercase().replace('_', "-");
        let key = match key.as_str() {
            "mffm" => "mspt",
            "mean" => "mean-pool",
            "max" => "max-pool",
            "concat" => "concatenation",
            k => k,
        };
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::config(format!("unknown model kind `{s}`")))
    }

    pub fn needs_prototypes(self) -> bool {
        !matches!(self, Self::FullBag | Self::MeanPool | Self::MaxPool | Self::Abmil)
    }

    pub fn multi_scale(self) -> bool {
        matches!(self, Self::Mspt | Self::Concatenation | Self::MsMax | Self::MsAttention)
    }

    fn fusion(self) -> Option<FusionStrategy> {
        match self {
            Self::Concatenation => Some(FusionStrategy::Concatenation),
            Self::MsMax => Some(FusionStrategy::MsMax),
            Self::MsAttention => Some(FusionStrategy::MsAttention),
            _ => None,
        }
    }
}

/// Resolved architecture. Build with [`ModelSpec::new`] to get the default
/// hidden widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Instance feature width `d_k`.
    pub d: usize,
    /// Prototypes per scale.
    pub k: usize,
    pub n_classes: usize,
    pub n_scales: usize,
    pub n_iters: usize,
    /// Token-mixing hidden width.
    pub c: usize,
    /// Channel-mixing hidden width.
    pub d_s: usize,
    /// Gated-attention hidden width.
    pub gap_hidden: usize,
    pub mixer_layers: usize,
    pub bias: bool,
}

impl ModelSpec {
    /// Defaults: `c = 2K`, `d_s = ⌈3d/2⌉`, `L = max(4, ⌈d/4⌉)`, one Mixer
    /// layer, one PT pass, biases on.
    pub fn new(kind: ModelKind, d: usize, k: usize, n_classes: usize, n_scales: usize) -> Self {
        Self {
            kind,
            d,
            k,
            n_classes,
            n_scales,
            n_iters: 1,
            c: 2 * k,
            d_s: (n_scales * d).div_ceil(2),
            gap_hidden: d.div_ceil(4).max(4),
            mixer_layers: 1,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("k", self.k),
            ("n_scales", self.n_scales),
            ("n_iters", self.n_iters),
            ("c", self.c),
            ("d_s", self.d_s),
            ("gap_hidden", self.gap_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        Ok(())
    }

    /// Width of the bag vector `Z` fed to the head.
    pub fn head_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Mspt => self.n_scales * self.d,
            ModelKind::Concatenation | ModelKind::MsMax | ModelKind::MsAttention => self
                .kind
                .fusion()
                .expect("fusion kind")
                .output_dim(self.k, self.d, self.n_scales),
            _ => self.d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor2> {
    /// One attention triple per scale the variant re-calibrates.
    pub pt: Vec<AttentionWeights<T>>,
    pub mixer: Vec<MixerParams<T>>,
    /// One pool for the fused representation, or one per scale for
    /// MS-Attention.
    pub gap: Vec<GapParams<T>>,
    pub head: HeadParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            pt: self.pt.iter().map(|p| p.map(&mut f)).collect(),
            mixer: self.mixer.iter().map(|p| p.map(&mut f)).collect(),
            gap: self.gap.iter().map(|p| p.map(&mut f)).collect(),
            head: self.head.map(&mut f),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (s, p) in self.pt.iter().enumerate() {
            for (n, t) in p.named() {
                out.push((format!("pt.{s}.{n}"), t));
            }
        }
        for (l, m) in self.mixer.iter().enumerate() {
            m.collect_named(&format!("mixer.{l}"), &mut out);
        }
        for (g, p) in self.gap.iter().enumerate() {
            p.collect_named(&format!("gap.{g}"), &mut out);
        }
        self.head.collect_named("head", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        for (s, p) in self.pt.iter_mut().enumerate() {
            for (n, t) in p.named_mut() {
                out.push((format!("pt.{s}.{n}"), t));
            }
        }
        for (l, m) in self.mixer.iter_mut().enumerate() {
            m.collect_named_mut(&format!("mixer.{l}"), &mut out);
        }
        for (g, p) in self.gap.iter_mut().enumerate() {
            p.collect_named_mut(&format!("gap.{g}"), &mut out);
        }
        self.head.collect_named_mut("head", &mut out);
        out
    }
}

impl ModelParams {
    pub fn n_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.rows() * t.cols()).sum()
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let d = spec.d;
    let pt_scales = match spec.kind {
        k if k.multi_scale() => spec.n_scales,
        ModelKind::Pt | ModelKind::FullBag => 1,
        _ => 0,
    };
    let pt = pt_init(d, pt_scales, spec.n_iters, seed).scales;
    let mixer = if spec.kind == ModelKind::Mspt {
        let dim = spec.n_scales * d;
        (0..spec.mixer_layers)
            .map(|l| mixer_init(seed, l, spec.k, dim, spec.c, spec.d_s, spec.bias))
            .collect()
    } else {
        Vec::new()
    };
    let gap = match spec.kind {
        ModelKind::Mspt => vec![gap_init(seed, "fused", spec.n_scales * d, spec.gap_hidden)],
        ModelKind::MsAttention => (0..spec.n_scales)
            .map(|s| gap_init(seed, &format!("scale{s}"), d, spec.gap_hidden))
            .collect(),
        ModelKind::Pt | ModelKind::FullBag | ModelKind::PrototypeBag | ModelKind::Abmil => {
            vec![gap_init(seed, "single", d, spec.gap_hidden)]
        }
        _ => Vec::new(),
    };
    let head = head_init(seed, spec.head_input_dim(), spec.n_classes, spec.bias);
    Ok(ModelParams { pt, mixer, gap, head })
}

/// Nodes of interest from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Final-pass attention maps, one per re-calibrated scale.
    pub a_maps: Vec<Var>,
    /// Weights of the single bag-level pool, when the variant has one.
    pub gap_weights: Option<Var>,
}

fn need_protos<'a>(protos: Option<&'a PrototypeBag>, bag: &MultiScaleBag, n_scales: usize) -> Result<&'a PrototypeBag> {
    let p = protos.ok_or_else(|| Error::MissingPrototypes(bag.bag_id.clone()))?;
    if p.scales.len() < n_scales {
        return Err(Error::MissingPrototypes(format!(
            "{} (has {} scales, needs {n_scales})",
            bag.bag_id,
            p.scales.len()
        )));
    }
    Ok(p)
}

fn need_scales(bag: &MultiScaleBag, n: usize) -> Result<()> {
    if bag.scales.len() < n {
        return Err(Error::config(format!(
            "bag `{}` has {} scales, the model needs {n}",
            bag.bag_id,
            bag.scales.len()
        )));
    }
    Ok(())
}

/// Records the forward pass of `bag` on `tape`. Instances and prototypes enter
/// as constants.
pub fn forward_tape(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams<Var>,
    bag: &MultiScaleBag,
    protos: Option<&PrototypeBag>,
) -> Result<Forward> {
    let kind = spec.kind;
    let n_scales = if kind.multi_scale() { spec.n_scales } else { 1 };
    need_scales(bag, n_scales)?;
    let protos = if kind.needs_prototypes() {
        Some(need_protos(protos, bag, n_scales)?)
    } else {
        None
    };

    let mut a_maps = Vec::new();
    let mut recalibrate = |tape: &mut Tape, s: usize| -> Result<Var> {
        let p = tape.constant(protos.expect("checked above").scales[s].centers.clone());
        let x = tape.constant(bag.scales[s].clone());
        let (p_hat, a) = pt_forward_tape(tape, p, x, &params.pt[s], spec.n_iters)?;
        a_maps.push(a);
        Ok(p_hat)
    };

    let mut gap_weights = None;
    let z = match kind {
        ModelKind::Mspt => {
            let parts = (0..n_scales)
                .map(|s| recalibrate(tape, s))
                .collect::<Result<Vec<_>>>()?;
            let mut h = tape.concat_cols(&parts)?;
            for m in &params.mixer {
                h = mixer_layer_tape(tape, h, m)?;
            }
            let (z, a) = gated_attention_pool_tape(tape, h, &params.gap[0])?;
            gap_weights = Some(a);
            z
        }
        ModelKind::Pt => {
            let p_hat = recalibrate(tape, 0)?;
            let (z, a) = gated_attention_pool_tape(tape, p_hat, &params.gap[0])?;
            gap_weights = Some(a);
            z
        }
        ModelKind::FullBag => {
            let x = tape.constant(bag.scales[0].clone());
            let (h, a) = pt_forward_tape(tape, x, x, &params.pt[0], spec.n_iters)?;
            a_maps.push(a);
            let (z, a) = gated_attention_pool_tape(tape, h, &params.gap[0])?;
            gap_weights = Some(a);
            z
        }
        ModelKind::PrototypeBag => {
            let p = tape.constant(protos.expect("checked above").scales[0].centers.clone());
            let (z, a) = gated_attention_pool_tape(tape, p, &params.gap[0])?;
            gap_weights = Some(a);
            z
        }
        ModelKind::MeanPool | ModelKind::MaxPool | ModelKind::Abmil => {
            let pooling = match kind {
                ModelKind::MeanPool => InstancePooling::Mean,
                ModelKind::MaxPool => InstancePooling::Max,
                _ => InstancePooling::Abmil,
            };
            let x = tape.constant(bag.scales[0].clone());
            pool_instances_tape(tape, pooling, x, params.gap.first())?
        }
        ModelKind::Concatenation | ModelKind::MsMax | ModelKind::MsAttention => {
            let parts = (0..n_scales)
                .map(|s| recalibrate(tape, s))
                .collect::<Result<Vec<_>>>()?;
            fuse_baseline_tape(tape, kind.fusion().expect("fusion kind"), &parts, &params.gap)?
        }
    };
    let logits = head_logits_tape(tape, z, &params.head)?;
    Ok(Forward {
        logits,
        a_maps,
        gap_weights,
    })
}

/// Plain-tensor outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor2,
    /// `softmax(logits)`
    pub probs: Tensor2,
    pub a_maps: Vec<Tensor2>,
    pub gap_weights: Option<Tensor2>,
}

impl Prediction {
    /// Argmax with ties going to the lowest class index.
    pub fn predicted_class(&self) -> usize {
        let row = self.probs.row(0);
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        best
    }
}

pub fn predict(
    spec: &ModelSpec,
    params: &ModelParams,
    bag: &MultiScaleBag,
    protos: Option<&PrototypeBag>,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.constant(t.clone()));
    let f = forward_tape(&mut tape, spec, &pv, bag, protos)?;
    let logits = tape.value(f.logits).clone();
    Ok(Prediction {
        probs: logits.softmax_rows(),
        logits,
        a_maps: f.a_maps.iter().map(|&a| tape.value(a).clone()).collect(),
        gap_weights: f.gap_weights.map(|a| tape.value(a).clone()),
    })
}

/// Cross-entropy loss of `bag` and the gradient of every parameter, in
/// [`ModelParams::named`] order.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    bag: &MultiScaleBag,
    protos: Option<&PrototypeBag>,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let pv = params.map(|t| tape.param(t.clone()));
    let f = forward_tape(&mut tape, spec, &pv, bag, protos)?;
    let loss = tape.cross_entropy(f.logits, bag.label)?;
    let mut grads = tape.backward(loss)?;
    let value = tape.value(loss).get(0, 0);
    // A parameter the loss does not reach gets a zero gradient.
    let g = pv.map(|&v| {
        grads
            .take(v)
            .unwrap_or_else(|| Tensor2::zeros(tape.value(v).rows(), tape.value(v).cols()))
    });
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{extract_prototypes, KMeansConfig};
    use crate::rng::uniform_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_bag(seed: u64, d: usize, sizes: &[usize], label: usize) -> MultiScaleBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiScaleBag {
            bag_id: format!("t{seed}"),
            label,
            scales: sizes.iter().map(|&n| uniform_matrix(&mut rng, n, d, 1.5)).collect(),
            witnesses: None,
        }
    }

    fn protos_for(bag: &MultiScaleBag, k: usize) -> PrototypeBag {
        let names = crate::data::default_scale_names();
        extract_prototypes(bag, &names[..bag.scales.len()], &KMeansConfig::new(k, 3)).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    /// Worst relative error over every parameter entry, with central
    /// differences at `h = 1e-5`.
    fn gradient_check(
        spec: &ModelSpec,
        params: &ModelParams,
        bag: &MultiScaleBag,
        protos: Option<&PrototypeBag>,
    ) -> f64 {
        let (_, grads) = loss_and_grads(spec, params, bag, protos).unwrap();
        let loss_at = |p: &ModelParams| {
            let pred = predict(spec, p, bag, protos).unwrap();
            let row = pred.logits.row(0);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[bag.label]
        };
        let h = 1e-5;
        let n_tensors = params.named().len();
        let mut worst = 0.0f64;
        for t in 0..n_tensors {
            let len = params.named()[t].1.data().len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.named_mut()[t].1.data_mut()[i] += h;
                let mut minus = params.clone();
                minus.named_mut()[t].1.data_mut()[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grads.named()[t].1.data()[i];
                let e = rel_err(an, fd);
                assert!(e <= 1e-4, "{} [{i}]: analytic {an}, numeric {fd}", params.named()[t].0);
                worst = worst.max(e);
            }
        }
        worst
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let bag = tiny_bag(1, 4, &[5, 4, 3], 1);
        let protos = protos_for(&bag, 2);
        let spec = ModelSpec::new(ModelKind::Mspt, 4, 2, 2, 3);
        let params = init_params(&spec, 9).unwrap();
        gradient_check(&spec, &params, &bag, Some(&protos));
    }

    #[test]
    fn every_variant_has_correct_gradients() {
        let bag = tiny_bag(2, 4, &[5, 4, 3], 0);
        let protos = protos_for(&bag, 2);
        for kind in ModelKind::ALL {
            let mut spec = ModelSpec::new(kind, 4, 2, 2, 3);
            spec.n_iters = 2;
            let params = init_params(&spec, 3).unwrap();
            gradient_check(&spec, &params, &bag, Some(&protos));
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_prefers_lowest() {
        let bag = tiny_bag(3, 4, &[5, 4, 3], 0);
        let protos = protos_for(&bag, 2);
        let spec = ModelSpec::new(ModelKind::Mspt, 4, 2, 2, 3);
        let params = init_params(&spec, 1).unwrap();
        let pred = predict(&spec, &params, &bag, Some(&protos)).unwrap();
        assert!((pred.probs.sum() - 1.0).abs() < 1e-12);
        assert_eq!(pred.a_maps.len(), 3);
        assert!((pred.gap_weights.unwrap().sum() - 1.0).abs() < 1e-12);
        let tie = Prediction {
            logits: Tensor2::zeros(1, 2),
            probs: Tensor2::filled(1, 2, 0.5),
            a_maps: vec![],
            gap_weights: None,
        };
        assert_eq!(tie.predicted_class(), 0);
    }

    #[test]
    fn instance_order_does_not_change_logits() {
        let bag = tiny_bag(4, 4, &[7, 5, 3], 1);
        let protos = protos_for(&bag, 2);
        let mut shuffled = bag.clone();
        shuffled.scales[0] = bag.scales[0].select_rows(&[6, 2, 0, 4, 1, 5, 3]);
        shuffled.scales[1] = bag.scales[1].select_rows(&[4, 3, 2, 1, 0]);
        for kind in ModelKind::ALL {
            let spec = ModelSpec::new(kind, 4, 2, 2, 3);
            let params = init_params(&spec, 5).unwrap();
            let a = predict(&spec, &params, &bag, Some(&protos)).unwrap();
            let b = predict(&spec, &params, &shuffled, Some(&protos)).unwrap();
            assert!(a.logits.max_abs_diff(&b.logits) <= 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn missing_prototypes_are_reported() {
        let bag = tiny_bag(5, 4, &[5, 4, 3], 0);
        let spec = ModelSpec::new(ModelKind::Mspt, 4, 2, 2, 3);
        let params = init_params(&spec, 1).unwrap();
        assert!(matches!(
            predict(&spec, &params, &bag, None),
            Err(Error::MissingPrototypes(_))
        ));
        let spec = ModelSpec::new(ModelKind::MeanPool, 4, 2, 2, 3);
        let params = init_params(&spec, 1).unwrap();
        assert!(predict(&spec, &params, &bag, None).is_ok());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(ModelKind::parse("MFFM").unwrap(), ModelKind::Mspt);
        assert!(matches!(ModelKind::parse("transmil"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_and_bias_flag() {
        let spec = ModelSpec::new(ModelKind::Mspt, 32, 8, 2, 3);
        assert_eq!((spec.c, spec.d_s, spec.gap_hidden), (16, 48, 8));
        let mut nb = spec.clone();
        nb.bias = false;
        let with = init_params(&spec, 0).unwrap();
        let without = init_params(&nb, 0).unwrap();
        assert!(with.named().len() > without.named().len());
        assert!(without
            .named()
            .iter()
            .all(|(n, _)| !n.ends_with(".b") && !n.contains(".b1")));
    }
}
