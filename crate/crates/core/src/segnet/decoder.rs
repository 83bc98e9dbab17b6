use super::{dims3, EncoderFeatures, Net};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Window placement for one attention branch on an `h×w` map.
#[derive(Clone, Debug, PartialEq)]
pub struct LawinWindows {
    pub query: Vec<(usize, usize)>,
    pub context: Vec<(usize, usize)>,
    /// Side of the square context window, `ratio × patch`.
    pub context_size: usize,
}

/// Query windows tile the map in `patch×patch` blocks. Each context window
/// is centred on its query window and shifted inward where it would cross
/// the border.
pub fn lawin_origins(h: usize, w: usize, patch: usize, ratio: usize) -> Result<LawinWindows> {
    if patch == 0 || ratio == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(
            "lawin_attention",
            format!("{h}x{w} map does not tile into {patch}x{patch} windows"),
        ));
    }
    let size = ratio * patch;
    if size > h || size > w {
        return Err(Error::contract(
            "lawin_attention",
            format!("context window {size}x{size} exceeds the {h}x{w} feature map"),
        ));
    }
    let half = (ratio - 1) * patch / 2;
    let place = |q: usize, extent: usize| q.saturating_sub(half).min(extent - size);
    let mut query = Vec::new();
    let mut context = Vec::new();
    for i in 0..h / patch {
        for j in 0..w / patch {
            let (qy, qx) = (i * patch, j * patch);
            query.push((qy, qx));
            context.push((place(qy, h), place(qx, w)));
        }
    }
    Ok(LawinWindows {
        query,
        context,
        context_size: size,
    })
}

/// Large-window attention branch `branch` of the decoder. Every query
/// window attends over its context window average-pooled by the ratio down
/// to `patch×patch` tokens, with multi-head scaled dot-product attention.
/// Q/K/V projections are applied to the whole map before windowing, which
/// commutes with pooling since both are linear.
pub fn lawin_attention(net: &mut Net, x: Var, branch: usize) -> Result<Var> {
    let cfg = &net.model().decoder;
    let (p, heads) = (cfg.patch, cfg.heads);
    let ratio = *cfg
        .ratios
        .get(branch)
        .ok_or_else(|| Error::contract("lawin_attention", format!("no attention branch {branch}")))?;
    let (d, h, w) = dims3(net.tape.shape(x))?;
    let win = lawin_origins(h, w, p, ratio)?;
    let (n, dh, tokens) = (win.query.len(), d / heads, p * p);
    let prefix = format!("dec.lawin{branch}");

    let q = net.linear(x, &format!("{prefix}.q"), false)?;
    let k = net.linear(x, &format!("{prefix}.k"), false)?;
    let v = net.linear(x, &format!("{prefix}.v"), false)?;
    let t = &mut *net.tape;
    let qw = t.gather_windows(q, (p, p), &win.query)?;
    let ctx = |t: &mut crate::tensor::Tape, m: Var| -> Result<Var> {
        let c = t.gather_windows(m, (win.context_size, win.context_size), &win.context)?;
        let c = t.avg_pool2d(c, (ratio, ratio), (ratio, ratio))?;
        t.reshape(c, &[n * heads, dh, tokens])
    };
    let kw = ctx(t, k)?;
    let vw = ctx(t, v)?;
    let qw = t.reshape(qw, &[n * heads, dh, tokens])?;
    let qt = t.transpose(qw)?;
    let scores = t.matmul(qt, kw)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = t.softmax(scores, 2)?;
    let vt = t.transpose(vw)?;
    let out = t.matmul(attn, vt)?;
    let out = t.transpose(out)?;
    let out = t.reshape(out, &[n, d, p, p])?;
    let out = t.scatter_windows(out, (h, w), &win.query)?;
    net.linear(out, &format!("{prefix}.out"), true)
}

/// Pooled strips of a `[d,h,w]` map: `[d,h,1]` (mean over each row) and
/// `[d,1,w]` (mean over each column).
pub(crate) fn pool_strips(net: &mut Net, x: Var) -> Result<(Var, Var)> {
    let (_, h, w) = dims3(net.tape.shape(x))?;
    let sh = net.tape.avg_pool2d(x, (1, w), (1, w))?;
    let sw = net.tape.avg_pool2d(x, (h, 1), (h, 1))?;
    Ok((sh, sw))
}

/// Strip pooling: both strips pass through a 3-tap convolution along their
/// long axis and the shared 1×1 fuse projection, are broadcast-summed, and
/// gate the input through a sigmoid. Fusing each strip before broadcasting
/// equals fusing their broadcast sum.
pub fn strip_pool(net: &mut Net, x: Var) -> Result<Var> {
    let (d, h, w) = dims3(net.tape.shape(x))?;
    let (sh, sw) = pool_strips(net, x)?;
    let wh = net.p("dec.strip.h.weight")?;
    let bh = net.p("dec.strip.h.bias")?;
    let ww = net.p("dec.strip.w.weight")?;
    let bw = net.p("dec.strip.w.bias")?;
    let t = &mut *net.tape;
    let sh = t.conv2d(sh, wh, (1, 1), (1, 0))?;
    let sh = t.add_bias(sh, bh)?;
    let sw = t.conv2d(sw, ww, (1, 1), (0, 1))?;
    let sw = t.add_bias(sw, bw)?;
    let fh = net.linear(sh, "dec.strip.fuse", false)?;
    let fw = net.linear(sw, "dec.strip.fuse", true)?;
    let t = &mut *net.tape;
    let fh = t.expand(fh, &[d, h, w])?;
    let fw = t.expand(fw, &[d, h, w])?;
    let z = t.add(fh, fw)?;
    let gate = t.sigmoid(z)?;
    t.mul(x, gate)
}

/// Decoder from encoder features to stride-4 logits.
///
/// F2..F4 are resized to stride 8, concatenated and embedded; the embedding
/// feeds five kinds of branch (identity, one attention branch per ratio,
/// strip pooling) whose concatenation is reduced, upsampled to stride 4,
/// joined with projected F1, fused and classified.
pub fn hybrid_aspp_forward(net: &mut Net, feats: &EncoderFeatures) -> Result<Var> {
    let [f1, f2, f3, f4] = feats.f;
    let (_, h8, w8) = dims3(net.tape.shape(f2))?;
    let (_, h4, w4) = dims3(net.tape.shape(f1))?;
    let f3 = net.tape.resize_bilinear(f3, (h8, w8))?;
    let f4 = net.tape.resize_bilinear(f4, (h8, w8))?;
    let agg = net.tape.concat(&[f2, f3, f4], 0)?;
    let e = net.linear_bn_relu(agg, "dec.embed")?;

    let mut branches = vec![e];
    for b in 0..net.model().decoder.ratios.len() {
        branches.push(lawin_attention(net, e, b)?);
    }
    branches.push(strip_pool(net, e)?);
    let cat = net.tape.concat(&branches, 0)?;
    let r = net.linear_bn_relu(cat, "dec.reduce")?;
    let r = net.tape.resize_bilinear(r, (h4, w4))?;
    let low = net.linear_bn_relu(f1, "dec.low")?;
    let cat = net.tape.concat(&[r, low], 0)?;
    let fused = net.linear_bn_relu(cat, "dec.fuse")?;
    net.linear(fused, "dec.cls", true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{DecoderConfig, EncoderConfig, ModelParams, NormMode};
    use crate::tensor::{Tape, Tensor};
    use rand::Rng as _;

    fn model(decoder: DecoderConfig) -> ModelParams {
        ModelParams::new(EncoderConfig::tiny(), decoder, 9).unwrap()
    }

    fn full_decoder(d: usize) -> DecoderConfig {
        DecoderConfig {
            embed_dim: d,
            ..DecoderConfig::default()
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn default_context_windows_are_16_32_64() {
        for (r, want) in [(2, 16), (4, 32), (8, 64)] {
            let win = lawin_origins(64, 64, 8, r).unwrap();
            assert_eq!(win.context_size, want);
            assert_eq!(win.query.len(), 64);
            assert!(win.context.iter().all(|&(y, x)| y + want <= 64 && x + want <= 64));
        }
        assert!(lawin_origins(32, 64, 8, 8).is_err());
    }

    #[test]
    fn context_windows_are_centred_away_from_edges() {
        let win = lawin_origins(64, 64, 8, 2).unwrap();
        // query block (2,3) sits at (16,24); its context starts 4 pixels earlier
        let i = win.query.iter().position(|&o| o == (16, 24)).unwrap();
        assert_eq!(win.context[i], (12, 20));
        assert_eq!(win.context[0], (0, 0));
        assert_eq!(*win.context.last().unwrap(), (48, 48));
    }

    #[test]
    fn attention_preserves_shape_for_default_ratios() {
        let m = model(full_decoder(4));
        let mut rng = crate::rng::seeded(1);
        for b in 0..3 {
            let mut tape = Tape::new();
            let vars = tape.bind(&m.params, false);
            let mut net = Net::new(&mut tape, &m, &vars, NormMode::Batch).unwrap();
            let x = net.tape.constant(Tensor::from_fn([4, 64, 64], |_| rng.random::<f64>()));
            let y = lawin_attention(&mut net, x, b).unwrap();
            assert_eq!(net.tape.shape(y), [4, 64, 64]);
        }
    }

    #[test]
    fn constant_input_gives_projected_constant() {
        let m = model(full_decoder(4));
        let c = [0.3, -1.2, 0.7, 2.0];
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params, false);
        let mut net = Net::new(&mut tape, &m, &vars, NormMode::Batch).unwrap();
        let x = net.tape.constant(Tensor::from_fn([4, 16, 16], |i| c[i / 256]));
        let y = lawin_attention(&mut net, x, 0).unwrap();
        // uniform attention averages identical values: out = Wo·(Wv·c) + bo
        let wv = m.param("dec.lawin0.v.weight").unwrap().value.data().to_vec();
        let wo = m.param("dec.lawin0.out.weight").unwrap().value.data().to_vec();
        let v: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wv[i * 4 + j] * c[j]).sum()).collect();
        let o: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wo[i * 4 + j] * v[j]).sum()).collect();
        let out = net.tape.value(y).data();
        for ch in 0..4 {
            for p in 0..256 {
                assert!((out[ch * 256 + p] - o[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strip_shapes_and_single_row() {
        let m = model(DecoderConfig::tiny());
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params, false);
        let mut net = Net::new(&mut tape, &m, &vars, NormMode::Batch).unwrap();
        let mut rng = crate::rng::seeded(2);
        let x = net.tape.constant(Tensor::from_fn([4, 5, 7], |_| rng.random::<f64>()));
        let (sh, sw) = pool_strips(&mut net, x).unwrap();
        assert_eq!(net.tape.shape(sh), [4, 5, 1]);
        assert_eq!(net.tape.shape(sw), [4, 1, 7]);

        let row = Tensor::from_fn([4, 1, 7], |_| rng.random::<f64>());
        let r = net.tape.constant(row.clone());
        let (_, sw) = pool_strips(&mut net, r).unwrap();
        assert_eq!(net.tape.value(sw), &row);
        let y = strip_pool(&mut net, r).unwrap();
        assert_eq!(net.tape.shape(y), [4, 1, 7]);
    }

    #[test]
    fn strip_pool_constant_matches_scalar_reference() {
        let mut m = model(DecoderConfig::tiny());
        let mut rng = crate::rng::seeded(3);
        for name in ["dec.strip.h.bias", "dec.strip.w.bias", "dec.strip.fuse.bias"] {
            let i = m.param_index(name).unwrap();
            m.params[i].value = Tensor::from_fn([4], |_| rng.random_range(-0.5..0.5));
        }
        let c = 0.8;
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params, false);
        let mut net = Net::new(&mut tape, &m, &vars, NormMode::Batch).unwrap();
        let (h, w) = (6, 5);
        let x = net.tape.constant(Tensor::full([4, h, w], c));
        let y = strip_pool(&mut net, x).unwrap();
        let out = net.tape.value(y).data().to_vec();

        let get = |n: &str| m.param(n).unwrap().value.data().to_vec();
        let (wh, bh, ww, bw, wf, bf) = (
            get("dec.strip.h.weight"),
            get("dec.strip.h.bias"),
            get("dec.strip.w.weight"),
            get("dec.strip.w.bias"),
            get("dec.strip.fuse.weight"),
            get("dec.strip.fuse.bias"),
        );
        // conv over a constant strip with zero padding: taps that fall off
        // the edge contribute nothing
        let conv = |wt: &[f64], b: &[f64], o: usize, taps: &[usize]| {
            b[o] + (0..4).map(|i| taps.iter().map(|&t| wt[(o * 4 + i) * 3 + t] * c).sum::<f64>()).sum::<f64>()
        };
        for y_ in 0..h {
            for x_ in 0..w {
                let taps_h: Vec<usize> = (0..3).filter(|&t| (y_ + t).checked_sub(1).is_some_and(|r| r < h)).collect();
                let taps_w: Vec<usize> = (0..3).filter(|&t| (x_ + t).checked_sub(1).is_some_and(|r| r < w)).collect();
                let s: Vec<f64> = (0..4)
                    .map(|o| conv(&wh, &bh, o, &taps_h) + conv(&ww, &bw, o, &taps_w))
                    .collect();
                for o in 0..4 {
                    let g = bf[o] + (0..4).map(|i| wf[o * 4 + i] * s[i]).sum::<f64>();
                    let want = c * sigmoid(g);
                    assert!((out[o * h * w + y_ * w + x_] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decoder_emits_stride_four_logits_from_five_branch_kinds() {
        let m = ModelParams::new(EncoderConfig::default(), DecoderConfig::desk(5), 0).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params, false);
        let mut net = Net::new(&mut tape, &m, &vars, NormMode::Batch).unwrap();
        let mut rng = crate::rng::seeded(4);
        let x = net.tape.constant(Tensor::from_fn([3, 64, 64], |_| rng.random::<f64>()));
        let feats = crate::segnet::encoder_forward(&mut net, x).unwrap();
        let logits = hybrid_aspp_forward(&mut net, &feats).unwrap();
        assert_eq!(net.tape.shape(logits), [5, 16, 16]);
        let reduce = m.param("dec.reduce.weight").unwrap();
        assert_eq!(reduce.value.shape()[1], 5 * m.decoder.embed_dim);
    }
}
