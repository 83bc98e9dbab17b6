use super::{model_forward, ModelParams, Net, NormMode, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Stored statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of activations per channel the statistics summarize.
    pub count: u64,
}

/// Statistics of every normalization layer, in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub layers: Vec<LayerStats>,
}

/// Per-channel biased moments of one layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl NormStats {
    pub(crate) fn initial(layers: impl Iterator<Item = (String, usize)>) -> Self {
        NormStats {
            layers: layers
                .map(|(name, c)| LayerStats {
                    name,
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                    count: 0,
                })
                .collect(),
        }
    }

    /// Exponential moving average toward batch moments (unbiased variance).
    pub fn update_running(&mut self, moments: &[Moments]) -> Result<()> {
        if moments.len() != self.layers.len() {
            return Err(Error::contract(
                "update_running",
                format!("{} moment sets for {} layers", moments.len(), self.layers.len()),
            ));
        }
        for (layer, m) in self.layers.iter_mut().zip(moments) {
            let correction = if m.count > 1 { m.count as f64 / (m.count - 1) as f64 } else { 1.0 };
            for c in 0..layer.mean.len() {
                layer.mean[c] += NORM_MOMENTUM * (m.mean[c] - layer.mean[c]);
                layer.var[c] += NORM_MOMENTUM * (m.var[c] * correction - layer.var[c]);
            }
            layer.count += m.count as u64;
        }
        Ok(())
    }
}

/// Receives, for each normalization layer in forward order, its input and
/// the input standardized with the statistics in use (before scale/shift).
pub trait NormObserver {
    fn observe(&mut self, layer: usize, pre_norm: &Tensor, normalized: &Tensor);
}

/// Collects exact per-channel moments of one layer's input over many
/// forward passes (pairwise-merged two-pass moments).
struct Accumulate {
    layer: usize,
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NormObserver for Accumulate {
    fn observe(&mut self, layer: usize, pre: &Tensor, _normalized: &Tensor) {
        if layer != self.layer {
            return;
        }
        let c = pre.shape()[0];
        let inner = pre.numel() / c;
        if self.mean.is_empty() {
            self.mean = vec![0.0; c];
            self.m2 = vec![0.0; c];
        }
        let n_b = inner as f64;
        let n = self.count + n_b;
        for (ch, xs) in pre.data().chunks(inner).enumerate() {
            let mean_b = xs.iter().sum::<f64>() / n_b;
            let m2_b = xs.iter().map(|x| (x - mean_b) * (x - mean_b)).sum::<f64>();
            let delta = mean_b - self.mean[ch];
            self.mean[ch] += delta * n_b / n;
            self.m2[ch] += m2_b + delta * delta * self.count * n_b / n;
        }
        self.count = n;
    }
}

/// Replaces every layer's statistics with the exact moments of its input
/// over `images`. Layers are calibrated in forward order so each one sees
/// inputs normalized by the already recalibrated layers before it.
pub fn recalibrate_norm(model: &ModelParams, images: &[Tensor]) -> Result<NormStats> {
    if images.is_empty() {
        return Err(Error::Data("recalibration needs at least one image".into()));
    }
    let mut stats = model.norm.clone();
    for layer in 0..stats.layers.len() {
        let mut acc = Accumulate {
            layer,
            count: 0.0,
            mean: Vec::new(),
            m2: Vec::new(),
        };
        for image in images {
            let mut tape = Tape::new();
            let vars = tape.bind(&model.params, false);
            let mut net = Net::new(&mut tape, model, &vars, NormMode::Fixed(&stats))?.with_observer(&mut acc);
            model_forward(&mut net, image)?;
        }
        let l = &mut stats.layers[layer];
        l.var = acc.m2.iter().map(|m2| m2 / acc.count).collect();
        l.mean = acc.mean;
        l.count = acc.count as u64;
    }
    Ok(stats)
}
