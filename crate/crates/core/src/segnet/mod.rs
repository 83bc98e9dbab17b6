//! Segmentation network: a 4-stage convolutional encoder, the HybridASPP
//! decoder and replaceable normalization statistics.

mod decoder;
mod encoder;
mod norm;

pub use decoder::{hybrid_aspp_forward, lawin_attention, lawin_origins, strip_pool};
pub use encoder::{encoder_forward, EncoderFeatures};
pub use norm::{recalibrate_norm, LayerStats, Moments, NormObserver, NormStats};

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{substream, stream_id};
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// Output strides of the four encoder stages.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Variance floor applied to stored statistics; also the epsilon of
/// batch-statistics normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Running-statistics momentum used during training.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 128],
            blocks: 1,
        }
    }
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            channels: [4; 4],
            blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!("encoder channels {:?} must be positive", self.channels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Side of the square query window, in stride-8 pixels.
    pub patch: usize,
    /// Context/query size ratios, one attention branch each.
    pub ratios: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    pub low_level_dim: usize,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            patch: 8,
            ratios: vec![2, 4, 8],
            embed_dim: 64,
            heads: 2,
            low_level_dim: 48,
            num_classes: 19,
        }
    }
}

impl DecoderConfig {
    /// Fits 64×64 inputs, whose stride-8 map is 8×8: context sides 2, 4, 8.
    pub fn desk(num_classes: usize) -> Self {
        DecoderConfig {
            patch: 2,
            ratios: vec![1, 2, 4],
            embed_dim: 32,
            heads: 2,
            low_level_dim: 16,
            num_classes,
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig {
            patch: 2,
            ratios: vec![1, 2],
            embed_dim: 4,
            heads: 2,
            low_level_dim: 4,
            num_classes: 2,
        }
    }

    /// Side lengths of the context windows, `ratio × patch`.
    pub fn context_sizes(&self) -> Vec<usize> {
        self.ratios.iter().map(|r| r * self.patch).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.ratios.is_empty() || self.ratios.contains(&0) {
            return Err(Error::Config(format!(
                "decoder needs a positive patch and ratios, got patch {} ratios {:?}",
                self.patch, self.ratios
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.low_level_dim == 0 || self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "invalid low-level dim {} or class count {}",
                self.low_level_dim, self.num_classes
            )));
        }
        Ok(())
    }

    /// Inputs are padded to a multiple of this so that every stage divides
    /// evenly and the stride-8 map tiles into query windows.
    pub fn input_multiple(&self) -> usize {
        lcm(32, 8 * self.patch)
    }

    /// Smallest input side whose stride-8 map holds the largest context
    /// window.
    pub fn min_input_side(&self) -> usize {
        8 * self.patch * self.ratios.iter().max().copied().unwrap_or(1)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Encoder and decoder parameters with their normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub params: Vec<Parameter>,
    pub norm: NormStats,
    index: HashMap<String, usize>,
}

struct Builder {
    params: Vec<Parameter>,
    norms: Vec<String>,
    rng: crate::rng::Rng,
}

impl Builder {
    /// Weight with the given shape, uniform in `±sqrt(3 / fan_in)` where
    /// `fan_in` is the product of all but the first dimension.
    fn weight(&mut self, name: String, shape: &[usize]) {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound));
        self.params.push(Parameter::new(name, value));
    }

    fn bias(&mut self, name: String, n: usize) {
        self.params.push(Parameter::new(name, Tensor::zeros([n])));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.params.push(Parameter::new(format!("{prefix}.gamma"), Tensor::full([c], 1.0)));
        self.params.push(Parameter::new(format!("{prefix}.beta"), Tensor::zeros([c])));
        self.norms.push(prefix.to_string());
    }

    fn conv_bn(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.weight(format!("{prefix}.weight"), &[c_out, c_in, k, k]);
        self.norm(&format!("{prefix}.bn"), c_out);
    }

    fn linear_bn(&mut self, prefix: &str, c_out: usize, c_in: usize) {
        self.weight(format!("{prefix}.weight"), &[c_out, c_in]);
        self.norm(&format!("{prefix}.bn"), c_out);
    }
}

impl ModelParams {
    /// Seeded initialization: fan-in-scaled uniform weights, zero biases,
    /// unit normalization scale, zero running mean and unit running variance.
    /// Normalization layers are registered in forward order.
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            norms: Vec::new(),
            rng: substream(seed, stream_id(&[0x5e9_0e7])),
        };
        let ch = encoder.channels;
        let mut c_in = 3;
        for (s, &c) in ch.iter().enumerate() {
            let k = if s == 0 { 7 } else { 3 };
            b.conv_bn(&format!("enc.s{s}.embed"), c, c_in, k);
            for blk in 0..encoder.blocks {
                b.conv_bn(&format!("enc.s{s}.b{blk}"), c, c, 3);
            }
            c_in = c;
        }
        let d = decoder.embed_dim;
        b.linear_bn("dec.embed", d, ch[1] + ch[2] + ch[3]);
        for r in 0..decoder.ratios.len() {
            for proj in ["q", "k", "v"] {
                b.weight(format!("dec.lawin{r}.{proj}.weight"), &[d, d]);
            }
            b.weight(format!("dec.lawin{r}.out.weight"), &[d, d]);
            b.bias(format!("dec.lawin{r}.out.bias"), d);
        }
        b.weight("dec.strip.h.weight".into(), &[d, d, 3, 1]);
        b.bias("dec.strip.h.bias".into(), d);
        b.weight("dec.strip.w.weight".into(), &[d, d, 1, 3]);
        b.bias("dec.strip.w.bias".into(), d);
        b.weight("dec.strip.fuse.weight".into(), &[d, d]);
        b.bias("dec.strip.fuse.bias".into(), d);
        b.linear_bn("dec.reduce", d, d * (decoder.ratios.len() + 2));
        b.linear_bn("dec.low", decoder.low_level_dim, ch[0]);
        b.linear_bn("dec.fuse", d, d + decoder.low_level_dim);
        b.weight("dec.cls.weight".into(), &[decoder.num_classes, d]);
        b.bias("dec.cls.bias".into(), decoder.num_classes);

        let widths: HashMap<String, usize> = b
            .params
            .iter()
            .filter(|p| p.name.ends_with(".gamma"))
            .map(|p| (p.name.trim_end_matches(".gamma").to_string(), p.value.numel()))
            .collect();
        let norm = NormStats::initial(b.norms.iter().map(|n| (n.clone(), widths[n])));
        Ok(Self::assemble(encoder, decoder, b.params, norm))
    }

    fn assemble(encoder: EncoderConfig, decoder: DecoderConfig, params: Vec<Parameter>, norm: NormStats) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelParams {
            encoder,
            decoder,
            params,
            norm,
            index,
        }
    }

    /// Reassembles a model from stored parts; names and shapes must match a
    /// freshly built model of the same configuration.
    pub fn from_parts(encoder: EncoderConfig, decoder: DecoderConfig, params: Vec<Parameter>, norm: NormStats) -> Result<Self> {
        let fresh = Self::new(encoder.clone(), decoder.clone(), 0)?;
        let layout = |ps: &[Parameter]| ps.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        let mismatch = layout(&fresh.params)
            .into_iter()
            .zip(layout(&params))
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1));
        if let Some(m) = mismatch.or_else(|| {
            (params.len() != fresh.params.len())
                .then(|| format!("{} parameters, configuration needs {}", params.len(), fresh.params.len()))
        }) {
            return Err(Error::State(format!("parameter layout: {m}")));
        }
        let norm_ok = norm.layers.len() == fresh.norm.layers.len()
            && norm.layers.iter().zip(&fresh.norm.layers).all(|(a, b)| {
                a.name == b.name && a.mean.len() == b.mean.len() && a.var.len() == b.var.len()
            });
        if !norm_ok {
            return Err(Error::State("normalization statistics do not match the configuration".into()));
        }
        Ok(Self::assemble(encoder, decoder, params, norm))
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive checksum of all parameter values.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            for v in p.value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Statistics of the current input; the moments are reported back.
    Batch,
    /// Stored statistics.
    Fixed(&'a NormStats),
}

/// Forward-pass context: the tape, the bound parameters and the
/// normalization policy.
pub struct Net<'a> {
    pub tape: &'a mut Tape,
    model: &'a ModelParams,
    vars: &'a [Var],
    mode: NormMode<'a>,
    observer: Option<&'a mut dyn NormObserver>,
    layer: usize,
    /// Per-layer batch moments seen in [`NormMode::Batch`].
    pub moments: Vec<Moments>,
}

impl<'a> Net<'a> {
    /// `vars` must come from binding `model.params` in order on `tape`.
    pub fn new(tape: &'a mut Tape, model: &'a ModelParams, vars: &'a [Var], mode: NormMode<'a>) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(Error::contract(
                "forward",
                format!("{} bound vars for {} parameters", vars.len(), model.params.len()),
            ));
        }
        Ok(Net {
            tape,
            model,
            vars,
            mode,
            observer: None,
            layer: 0,
            moments: Vec::new(),
        })
    }

    pub fn with_observer(mut self, observer: &'a mut dyn NormObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn model(&self) -> &'a ModelParams {
        self.model
    }

    pub(crate) fn p(&self, name: &str) -> Result<Var> {
        self.model
            .param_index(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    /// `W·x (+ b)` applied at every pixel of a `[C,H,W]` map.
    pub(crate) fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let (c, h, wd) = dims3(self.tape.shape(x))?;
        let flat = self.tape.reshape(x, &[c, h * wd])?;
        let y = self.tape.matmul(w, flat)?;
        let o = self.tape.shape(y)[0];
        let mut y = self.tape.reshape(y, &[o, h, wd])?;
        if bias {
            let b = self.p(&format!("{prefix}.bias"))?;
            y = self.tape.add_bias(y, b)?;
        }
        Ok(y)
    }

    pub(crate) fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let layer = self.layer;
        self.layer += 1;
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let (out, mean, var) = match self.mode {
            NormMode::Batch => {
                let (out, mean, var) = self.tape.batch_norm_train(x, gamma, beta, NORM_EPS)?;
                let count = self.tape.shape(x)[1..].iter().product();
                self.moments.push(Moments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                });
                (out, mean, var.iter().map(|v| v + NORM_EPS).collect::<Vec<_>>())
            }
            NormMode::Fixed(stats) => {
                let s = stats.layers.get(layer).filter(|s| s.name == prefix).ok_or_else(|| {
                    Error::State(format!("normalization layer {layer} is not {prefix} in stored statistics"))
                })?;
                let out = self.tape.batch_norm_fixed(x, gamma, beta, &s.mean, &s.var, NORM_EPS)?;
                (out, s.mean.clone(), s.var.iter().map(|v| v.max(NORM_EPS)).collect())
            }
        };
        if let Some(obs) = self.observer.as_deref_mut() {
            let pre = self.tape.value(x);
            let inner: usize = pre.shape()[1..].iter().product();
            let mut normalized = pre.clone();
            for (c, chunk) in normalized.data_mut().chunks_mut(inner).enumerate() {
                let inv = 1.0 / var[c].sqrt();
                for v in chunk {
                    *v = (*v - mean[c]) * inv;
                }
            }
            obs.observe(layer, pre, &normalized);
        }
        Ok(out)
    }

    pub(crate) fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.tape.conv2d(x, w, (stride, stride), (pad, pad))?;
        self.norm(y, &format!("{prefix}.bn"))
    }

    pub(crate) fn linear_bn_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(x, prefix, false)?;
        let y = self.norm(y, &format!("{prefix}.bn"))?;
        self.tape.relu(y)
    }
}

pub(crate) fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::contract("segnet", format!("expected [C,H,W], got {shape:?}"))),
    }
}

/// Reflect-pads a `[3,H,W]` image so both sides are multiples of `m` and at
/// least `min_side`.
pub fn pad_input(image: &Tensor, m: usize, min_side: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(image.shape())?;
    let side = |n: usize| n.max(min_side).div_ceil(m) * m;
    let (hp, wp) = (side(h), side(w));
    if (hp, wp) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let rows: Vec<usize> = (0..hp).map(|y| crate::data::augment::reflect(y as isize, h)).collect();
    let cols: Vec<usize> = (0..wp).map(|x| crate::data::augment::reflect(x as isize, w)).collect();
    Ok(Tensor::from_fn([c, hp, wp], |i| {
        let (ch, rem) = (i / (hp * wp), i % (hp * wp));
        src[ch * h * w + rows[rem / wp] * w + cols[rem % wp]]
    }))
}

/// Per-pixel logits `[C,H,W]` at input resolution: pad, encode, decode at
/// stride 4, upsample to the padded size, then crop. Inputs too small for
/// the largest context window are padded up to fit it.
pub fn model_forward(net: &mut Net, image: &Tensor) -> Result<Var> {
    let (c, h, w) = dims3(image.shape())?;
    if c != 3 {
        return Err(Error::contract("model_forward", format!("expected 3 input channels, got {c}")));
    }
    let dec = &net.model().decoder;
    let padded = pad_input(image, dec.input_multiple(), dec.min_input_side())?;
    let (hp, wp) = (padded.shape()[1], padded.shape()[2]);
    let x = net.tape.constant(padded);
    let feats = encoder_forward(net, x)?;
    let logits = hybrid_aspp_forward(net, &feats)?;
    let up = net.tape.resize_bilinear(logits, (hp, wp))?;
    if (hp, wp) == (h, w) {
        return Ok(up);
    }
    let crop = net.tape.gather_windows(up, (h, w), &[(0, 0)])?;
    let classes = net.tape.shape(up)[0];
    net.tape.reshape(crop, &[classes, h, w])
}

/// Gradient-free logits with the given normalization mode.
pub fn predict_logits(model: &ModelParams, image: &Tensor, mode: NormMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params, false);
    let mut net = Net::new(&mut tape, model, &vars, mode)?;
    let out = model_forward(&mut net, image)?;
    Ok(tape.value(out).clone())
}

/// Per-pixel argmax of logits `[C,H,W]`; ties go to the lowest id.
pub fn argmax_ids(logits: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = dims3(logits.shape())?;
    let z = logits.data();
    let n = h * w;
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if z[k * n + p] > z[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_model() -> ModelParams {
        ModelParams::new(EncoderConfig::default(), DecoderConfig::desk(5), 1).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        Tensor::from_fn([3, h, w], |_| rng.random::<f64>())
    }

    #[test]
    fn lcm_and_input_multiple() {
        assert_eq!(DecoderConfig::default().input_multiple(), 64);
        assert_eq!(DecoderConfig::desk(5).input_multiple(), 32);
        assert_eq!(lcm(32, 24), 96);
    }

    #[test]
    fn default_context_sizes() {
        assert_eq!(DecoderConfig::default().context_sizes(), [16, 32, 64]);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = desk_model();
        let b = desk_model();
        assert_eq!(a.checksum(), b.checksum());
        let c = ModelParams::new(EncoderConfig::default(), DecoderConfig::desk(5), 2).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        let w = a.param("enc.s0.embed.weight").unwrap();
        assert_eq!(w.value.shape(), [16, 3, 7, 7]);
        let bound = (3.0f64 / 147.0).sqrt();
        assert!(w.value.data().iter().all(|v| v.abs() <= bound));
        assert!(a.param("dec.cls.bias").unwrap().value.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.norm.layers.len(), 12);
    }

    #[test]
    fn logits_match_input_size() {
        let model = desk_model();
        for (h, w) in [(64, 64), (40, 72)] {
            let logits = predict_logits(&model, &image(h, w, 3), NormMode::Batch).unwrap();
            assert_eq!(logits.shape(), [5, h, w]);
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = desk_model();
        let x = image(64, 64, 4);
        let a = predict_logits(&model, &x, NormMode::Fixed(&model.norm)).unwrap();
        let b = predict_logits(&model, &x, NormMode::Fixed(&model.norm)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_reflects() {
        let x = Tensor::from_fn([1, 2, 3], |i| i as f64);
        let p = pad_input(&x, 4, 1).unwrap();
        assert_eq!(p.shape(), [1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 2.0, 1.0]);
        assert_eq!(&p.data()[8..12], &[0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_id() {
        let t = Tensor::new([3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_ids(&t).unwrap(), [0, 1]);
    }
}
