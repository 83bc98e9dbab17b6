use super::{random_tensor, relative_error, rng};
use mmuda_core::segnet::{
    model_forward, DecoderConfig, EncoderConfig, ModelParams, Net, NormMode, NormObserver,
};
use mmuda_core::tensor::{Tape, Tensor};
use rand::Rng;

/// `sum(logits ⊙ weights)` in batch-statistics mode, and its gradient
/// with respect to every parameter when `grad` is set.
fn objective(model: &ModelParams, image: &Tensor, weights: &Tensor, grad: bool) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params, grad);
    let mut net = Net::new(&mut tape, model, &vars, NormMode::Batch).unwrap();
    let logits = model_forward(&mut net, image).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(logits, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item();
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let grads = (0..model.params.len())
        .map(|i| g.param(i).unwrap_or_else(|| Tensor::zeros(model.params[i].value.shape().to_vec())))
        .collect();
    (value, grads)
}

/// Relative error between tape and central-difference gradients of the
/// tiny model over all of its parameters.
pub fn tiny_model_fd_error() -> f64 {
    let model = ModelParams::new(EncoderConfig::tiny(), DecoderConfig::tiny(), 11).unwrap();
    let mut r = rng(12);
    let image = Tensor::from_fn([3, 8, 8], |_| r.random::<f64>());
    let weights = random_tensor(&mut r, &[2, 8, 8]);
    let (_, analytic) = objective(&model, &image, &weights, true);
    let h = 1e-5;
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (i, p) in model.params.iter().enumerate() {
        for j in 0..p.value.numel() {
            let mut plus = model.clone();
            plus.params[i].value.data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params[i].value.data_mut()[j] -= h;
            let d = (objective(&plus, &image, &weights, false).0 - objective(&minus, &image, &weights, false).0) / (2.0 * h);
            n_all.push(d);
            a_all.push(analytic[i].data()[j]);
        }
    }
    relative_error(&a_all, &n_all)
}

/// Gradient norm of every decoder-branch parameter after a cross-entropy
/// backward pass on one random 64×64 image. The identity branch has no
/// parameters of its own, so its slice of the reduction weight stands in
/// as `dec.reduce.identity`.
pub fn branch_gradient_norms(model: &ModelParams, seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let image = Tensor::from_fn([3, 64, 64], |_| r.random::<f64>());
    let c = model.num_classes() as u8;
    let labels: Vec<u8> = (0..64 * 64).map(|_| r.random_range(0..c)).collect();
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params, true);
    let mut net = Net::new(&mut tape, model, &vars, NormMode::Batch).unwrap();
    let logits = model_forward(&mut net, &image).unwrap();
    let loss = tape.cross_entropy(logits, &labels, 255).unwrap();
    let grads = tape.backward(loss.var).unwrap();
    let norm = |name: &str| {
        let g = grads.param(model.param_index(name).unwrap()).unwrap();
        g.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let mut out = Vec::new();
    for b in 0..model.decoder.ratios.len() {
        for p in ["q.weight", "k.weight", "v.weight", "out.weight", "out.bias"] {
            let name = format!("dec.lawin{b}.{p}");
            out.push((name.clone(), norm(&name)));
        }
    }
    for p in ["h.weight", "h.bias", "w.weight", "w.bias", "fuse.weight", "fuse.bias"] {
        let name = format!("dec.strip.{p}");
        out.push((name.clone(), norm(&name)));
    }
    let d = model.decoder.embed_dim;
    let g = grads.param(model.param_index("dec.reduce.weight").unwrap()).unwrap();
    let cols = g.shape()[1];
    let slice: f64 = (0..d).flat_map(|o| (0..d).map(move |i| o * cols + i)).map(|k| g.data()[k].powi(2)).sum();
    out.push(("dec.reduce.identity".into(), slice.sqrt()));
    out
}

struct Standardized(Vec<Vec<Tensor>>);

impl NormObserver for Standardized {
    fn observe(&mut self, layer: usize, _pre: &Tensor, normalized: &Tensor) {
        if self.0.len() <= layer {
            self.0.resize(layer + 1, Vec::new());
        }
        self.0[layer].push(normalized.clone());
    }
}

/// Worst per-channel `|mean|` and `|var − 1|` of pre-affine normalized
/// activations over `images`, using the model's stored statistics.
pub fn standardization_error(model: &ModelParams, images: &[Tensor]) -> (f64, f64) {
    let mut obs = Standardized(Vec::new());
    for img in images {
        let mut tape = Tape::new();
        let vars = tape.bind(&model.params, false);
        let mut net = Net::new(&mut tape, model, &vars, NormMode::Fixed(&model.norm)).unwrap().with_observer(&mut obs);
        model_forward(&mut net, img).unwrap();
    }
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for ts in &obs.0 {
        let c = ts[0].shape()[0];
        for ch in 0..c {
            let xs: Vec<f64> = ts
                .iter()
                .flat_map(|t| {
                    let inner = t.numel() / c;
                    t.data()[ch * inner..(ch + 1) * inner].to_vec()
                })
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }
    (worst_mean, worst_var)
}

/// Three fixed random 64×64 images.
pub fn calibration_batch(seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..3).map(|_| Tensor::from_fn([3, 64, 64], |_| r.random::<f64>())).collect()
}
