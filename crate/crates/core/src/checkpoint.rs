//! Checkpoint directories: a plain-text `manifest.txt` and a `params.bin`
//! payload of little-endian f32 values.
//!
//! Payload order: every parameter value in manifest order, then every
//! momentum buffer in the same order, then per normalization layer its
//! running means followed by its running variances.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{DecoderConfig, EncoderConfig, LayerStats, ModelParams, NormStats};
use crate::tensor::{Parameter, Tensor};

pub const FORMAT: &str = "mmuda-checkpoint 1";
pub const MANIFEST: &str = "manifest.txt";
pub const PAYLOAD: &str = "params.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub config_hash: String,
    pub iteration: usize,
    /// Target mIoU at the time of saving, if evaluated.
    pub miou: Option<f64>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn manifest_text(ck: &Checkpoint, payload_len: usize) -> String {
    let m = &ck.model;
    let (e, d) = (&m.encoder, &m.decoder);
    let mut out = String::new();
    let _ = writeln!(out, "format {FORMAT}");
    let _ = writeln!(out, "config_hash {}", ck.config_hash);
    let _ = writeln!(out, "iteration {}", ck.iteration);
    let _ = writeln!(out, "miou {}", ck.miou.map_or("none".to_string(), |v| format!("{v:?}")));
    let _ = writeln!(out, "encoder {} {}", join(&e.channels), e.blocks);
    let _ = writeln!(
        out,
        "decoder {} {} {} {} {} {}",
        d.patch,
        join(&d.ratios),
        d.embed_dim,
        d.heads,
        d.low_level_dim,
        d.num_classes
    );
    let _ = writeln!(out, "dtype f32le");
    for p in &m.params {
        let _ = writeln!(out, "param {} {}", p.name, join(p.value.shape()));
    }
    for l in &m.norm.layers {
        let _ = writeln!(out, "norm {} {} {}", l.name, l.mean.len(), l.count);
    }
    let _ = writeln!(out, "payload_bytes {payload_len}");
    out
}

fn payload(model: &ModelParams) -> Vec<u8> {
    let values = model
        .params
        .iter()
        .flat_map(|p| p.value.data())
        .chain(model.params.iter().flat_map(|p| p.momentum.data()))
        .chain(model.norm.layers.iter().flat_map(|l| l.mean.iter().chain(&l.var)));
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Writes `dir/manifest.txt` and `dir/params.bin`, creating `dir`.
pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = payload(&ck.model);
    let manifest = dir.join(MANIFEST);
    std::fs::write(&manifest, manifest_text(ck, bytes.len())).map_err(|e| Error::io(&manifest, e))?;
    let bin = dir.join(PAYLOAD);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn parse_list(path: &Path, s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|x| x.parse().map_err(|_| bad(path, format!("bad number list {s:?}")))).collect()
}

fn num<T: std::str::FromStr>(path: &Path, s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(path, format!("bad or missing {what}")))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut config_hash = String::new();
    let mut iteration = 0;
    let mut miou = None;
    let mut encoder = None;
    let mut decoder = None;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut norms: Vec<(String, usize, u64)> = Vec::new();
    let mut declared = None;
    let mut format_ok = false;
    for line in text.lines() {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let mut f = rest.split(' ');
        match key {
            "format" => format_ok = rest == FORMAT,
            "config_hash" => config_hash = rest.to_string(),
            "iteration" => iteration = num(&mpath, Some(rest), "iteration")?,
            "miou" => miou = if rest == "none" { None } else { Some(num(&mpath, Some(rest), "miou")?) },
            "dtype" if rest != "f32le" => return Err(bad(&mpath, format!("unsupported dtype {rest}"))),
            "dtype" => {}
            "encoder" => {
                let ch = parse_list(&mpath, f.next().unwrap_or(""))?;
                let channels: [usize; 4] = ch.try_into().map_err(|_| bad(&mpath, "encoder needs 4 channel counts"))?;
                encoder = Some(EncoderConfig {
                    channels,
                    blocks: num(&mpath, f.next(), "encoder blocks")?,
                });
            }
            "decoder" => {
                decoder = Some(DecoderConfig {
                    patch: num(&mpath, f.next(), "patch")?,
                    ratios: parse_list(&mpath, f.next().unwrap_or(""))?,
                    embed_dim: num(&mpath, f.next(), "embed dim")?,
                    heads: num(&mpath, f.next(), "heads")?,
                    low_level_dim: num(&mpath, f.next(), "low-level dim")?,
                    num_classes: num(&mpath, f.next(), "class count")?,
                });
            }
            "param" => {
                let name = f.next().unwrap_or("").to_string();
                shapes.push((name, parse_list(&mpath, f.next().unwrap_or(""))?));
            }
            "norm" => {
                let name = f.next().unwrap_or("").to_string();
                norms.push((name, num(&mpath, f.next(), "norm channels")?, num(&mpath, f.next(), "norm count")?));
            }
            "payload_bytes" => declared = Some(num::<usize>(&mpath, Some(rest), "payload size")?),
            "" => {}
            other => return Err(bad(&mpath, format!("unknown manifest key {other:?}"))),
        }
    }
    if !format_ok {
        return Err(bad(&mpath, format!("not a {FORMAT} manifest")));
    }
    let (encoder, decoder) = encoder.zip(decoder).ok_or_else(|| bad(&mpath, "missing model configuration"))?;

    let bpath = dir.join(PAYLOAD);
    let bytes = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let n_param: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let n_norm: usize = norms.iter().map(|n| 2 * n.1).sum();
    let expected = 4 * (2 * n_param + n_norm);
    if bytes.len() != expected || declared != Some(expected) {
        return Err(bad(
            &bpath,
            format!("payload is {} bytes, manifest shapes need {expected} (declared {declared:?})", bytes.len()),
        ));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
    let mut params: Vec<Parameter> = Vec::with_capacity(shapes.len());
    for (name, shape) in &shapes {
        let n = shape.iter().product();
        params.push(Parameter::new(name.clone(), Tensor::new(shape.clone(), take(n))?));
    }
    for p in &mut params {
        p.momentum = Tensor::new(p.value.shape().to_vec(), take(p.value.numel()))?;
    }
    let layers = norms
        .into_iter()
        .map(|(name, c, count)| LayerStats {
            name,
            mean: take(c),
            var: take(c),
            count,
        })
        .collect();
    let model = ModelParams::from_parts(encoder, decoder, params, NormStats { layers })
        .map_err(|e| bad(&mpath, format!("does not describe a valid model: {e}")))?;
    Ok(Checkpoint {
        model,
        config_hash,
        iteration,
        miou,
    })
}
