//! Analytic multiply-accumulate counts for a hierarchical transformer
//! encoder followed by one of three decoder heads.
//!
//! Normalization, activations and resizing are not counted; pooling counts
//! one operation per summed element.

use std::str::FromStr;

use crate::error::{Error, Result};

/// `k²·C_in·C_out·H_out·W_out`.
pub fn conv_macs(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    (k * k * c_in * c_out) as u64 * (h_out * w_out) as u64
}

/// `C_in·C_out·tokens`.
pub fn linear_macs(c_in: usize, c_out: usize, tokens: usize) -> u64 {
    (c_in * c_out) as u64 * tokens as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Per-stage projections to the embed dim, all upsampled to stride 4,
    /// concatenated, fused and classified.
    VanillaMlp,
    /// Stride-8 aggregation, a projected shortcut, one attention branch per
    /// ratio and a global image-pool branch.
    LawinAspp,
    /// As `LawinAspp` with an identity shortcut and strip pooling in place
    /// of the image-pool branch.
    HybridAspp,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::VanillaMlp, DecoderKind::LawinAspp, DecoderKind::HybridAspp];

    pub fn id(self) -> &'static str {
        match self {
            DecoderKind::VanillaMlp => "vanilla-mlp",
            DecoderKind::LawinAspp => "lawin-aspp",
            DecoderKind::HybridAspp => "hybrid-aspp",
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder {s:?}; expected vanilla-mlp, lawin-aspp or hybrid-aspp")))
    }
}

/// Hierarchical transformer encoder: overlapping patch embeddings, spatially
/// reduced self-attention and a depthwise-convolution feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct MitConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub reduction: [usize; 4],
    pub mlp_ratio: usize,
}

impl MitConfig {
    /// The B2 variant.
    pub fn b2() -> Self {
        MitConfig {
            channels: [64, 128, 320, 512],
            depths: [3, 4, 6, 3],
            reduction: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsConfig {
    pub encoder: MitConfig,
    pub decoder: DecoderKind,
    pub embed_dim: usize,
    pub patch: usize,
    pub ratios: Vec<usize>,
    pub low_level_dim: usize,
    pub num_classes: usize,
}

impl FlopsConfig {
    /// Full-scale comparison setting. The MLP head uses the 768-channel
    /// embedding it is published with; the pyramid heads use 512.
    pub fn reference(decoder: DecoderKind) -> Self {
        FlopsConfig {
            encoder: MitConfig::b2(),
            decoder,
            embed_dim: if decoder == DecoderKind::VanillaMlp { 768 } else { 512 },
            patch: 8,
            ratios: vec![2, 4, 8],
            low_level_dim: 48,
            num_classes: 19,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub components: Vec<(String, u64)>,
    pub total_macs: u64,
}

impl FlopsReport {
    /// `2 × MACs / 10⁹`.
    pub fn gflops(&self) -> f64 {
        2.0 * self.total_macs as f64 / 1e9
    }

    pub fn component(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|(n, _)| n == name).map(|&(_, m)| m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, macs) in &self.components {
            out.push_str(&format!("{name:<20} {:>12.3} GFLOPs\n", 2.0 * *macs as f64 / 1e9));
        }
        out.push_str(&format!("{:<20} {:>12.3} GFLOPs\n", "total", self.gflops()));
        out
    }
}

struct Tally(Vec<(String, u64)>);

impl Tally {
    fn add(&mut self, name: &str, macs: u64) {
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some((_, m)) => *m += macs,
            None => self.0.push((name.to_string(), macs)),
        }
    }
}

fn encoder_macs(cfg: &MitConfig, h: usize, w: usize, t: &mut Tally) {
    let mut c_in = 3;
    for s in 0..4 {
        let stride = 4 << s;
        let (hs, ws) = (h.div_ceil(stride), w.div_ceil(stride));
        let n = hs * ws;
        let c = cfg.channels[s];
        let k = if s == 0 { 7 } else { 3 };
        t.add("encoder.embed", conv_macs(k, c_in, c, hs, ws));
        let r = cfg.reduction[s];
        let kv_tokens = hs.div_ceil(r) * ws.div_ceil(r);
        let hidden = cfg.mlp_ratio * c;
        let mut attn = linear_macs(c, c, n) + 2 * linear_macs(c, c, kv_tokens) + linear_macs(c, c, n);
        if r > 1 {
            attn += conv_macs(r, c, c, hs.div_ceil(r), ws.div_ceil(r));
        }
        attn += 2 * (n * kv_tokens) as u64 * c as u64;
        let ffn = linear_macs(c, hidden, n) + conv_macs(3, 1, hidden, hs, ws) + linear_macs(hidden, c, n);
        t.add("encoder.attention", cfg.depths[s] as u64 * attn);
        t.add("encoder.ffn", cfg.depths[s] as u64 * ffn);
        c_in = c;
    }
}

fn attention_branch_macs(d: usize, h: usize, w: usize, p: usize, r: usize) -> Result<u64> {
    if h % p != 0 || w % p != 0 || r * p > h || r * p > w {
        return Err(Error::Config(format!("{h}x{w} stride-8 map cannot host patch {p} with ratio {r}")));
    }
    let windows = (h / p) * (w / p);
    let tokens = p * p;
    let pool = (windows * r * r * tokens * d) as u64;
    let qkv = 3 * linear_macs(d, d, h * w);
    let scores = 2 * (windows * tokens * tokens * d) as u64;
    let out = linear_macs(d, d, h * w);
    Ok(pool + qkv + scores + out)
}

/// Per-component MAC counts for an `h×w` input.
pub fn count_flops(cfg: &FlopsConfig, h: usize, w: usize) -> Result<FlopsReport> {
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("input {h}x{w} smaller than the 32-pixel encoder stride")));
    }
    let mut t = Tally(Vec::new());
    encoder_macs(&cfg.encoder, h, w, &mut t);
    let ch = cfg.encoder.channels;
    let d = cfg.embed_dim;
    let n = |stride: usize| h.div_ceil(stride) * w.div_ceil(stride);
    let (h8, w8) = (h.div_ceil(8), w.div_ceil(8));
    let (n4, n8) = (n(4), n(8));
    match cfg.decoder {
        DecoderKind::VanillaMlp => {
            for (s, &c) in ch.iter().enumerate() {
                t.add("decoder.project", linear_macs(c, d, n(4 << s)));
            }
            t.add("decoder.fuse", linear_macs(4 * d, d, n4));
        }
        DecoderKind::LawinAspp | DecoderKind::HybridAspp => {
            t.add("decoder.project", linear_macs(ch[1] + ch[2] + ch[3], d, n8));
            if cfg.decoder == DecoderKind::LawinAspp {
                t.add("decoder.shortcut", linear_macs(d, d, n8));
                t.add("decoder.image_pool", (d * n8) as u64 + linear_macs(d, d, 1));
            } else {
                let strips = (2 * d * n8) as u64
                    + 3 * linear_macs(d, d, h8)
                    + 3 * linear_macs(d, d, w8)
                    + linear_macs(d, d, h8 + w8)
                    + (d * n8) as u64;
                t.add("decoder.strip_pool", strips);
            }
            for &r in &cfg.ratios {
                t.add("decoder.attention", attention_branch_macs(d, h8, w8, cfg.patch, r)?);
            }
            t.add("decoder.reduce", linear_macs((cfg.ratios.len() + 2) * d, d, n8));
            t.add("decoder.low_level", linear_macs(ch[0], cfg.low_level_dim, n4));
            t.add("decoder.fuse", linear_macs(d + cfg.low_level_dim, d, n4));
        }
    }
    t.add("decoder.classify", linear_macs(d, cfg.num_classes, n4));
    let total_macs = t.0.iter().map(|(_, m)| m).sum();
    Ok(FlopsReport {
        components: t.0,
        total_macs,
    })
}
