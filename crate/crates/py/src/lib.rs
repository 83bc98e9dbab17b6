//! Python bindings. Images cross the boundary as flat planar `[3, H, W]`
//! float lists and label maps as flat `[H, W]` id lists.

use std::path::PathBuf;

use mmuda_core::checkpoint::{self, Checkpoint};
use mmuda_core::data::{synth_generate, DomainSample, Image, LabelMap, SynthSpec};
use mmuda_core::eval::{count_flops as core_count_flops, iou_report, update_confusion, ConfusionMatrix, FlopsConfig};
use mmuda_core::mdms::{build_mix_mask, mix_pair, select_classes, PseudoLabel};
use mmuda_core::meta::{DeskBenchmark, Variant};
use mmuda_core::rng::seeded;
use mmuda_core::segnet::{argmax_ids, predict_logits, recalibrate_norm, DecoderConfig, EncoderConfig, ModelParams, NormMode};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: mmuda_core::Error) -> PyErr {
    if e.is_usage() || matches!(e, mmuda_core::Error::Contract { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn image(data: Vec<f32>, height: usize, width: usize) -> PyResult<Image> {
    Image::new(height, width, data).map_err(py_err)
}

fn label(ids: Vec<u8>, height: usize, width: usize) -> PyResult<LabelMap> {
    LabelMap::new(height, width, ids).map_err(py_err)
}

/// A segmentation network with its normalization statistics.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_classes, seed=0, encoder_channels=[16, 32, 64, 128], patch=2, ratios=vec![1, 2, 4], embed_dim=32, heads=2, low_level_dim=16))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_classes: usize,
        seed: u64,
        encoder_channels: [usize; 4],
        patch: usize,
        ratios: Vec<usize>,
        embed_dim: usize,
        heads: usize,
        low_level_dim: usize,
    ) -> PyResult<Self> {
        let encoder = EncoderConfig {
            channels: encoder_channels,
            blocks: 1,
        };
        let decoder = DecoderConfig {
            patch,
            ratios,
            embed_dim,
            heads,
            low_level_dim,
            num_classes,
        };
        Ok(PyModel {
            inner: ModelParams::new(encoder, decoder, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.inner.clone(),
            config_hash: String::new(),
            iteration: 0,
            miou: None,
        };
        checkpoint::save(&path, &ck).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    /// Replaces the running statistics with statistics of `images`, each a
    /// `(data, height, width)` triple.
    fn recalibrate(&mut self, images: Vec<(Vec<f32>, usize, usize)>) -> PyResult<()> {
        let tensors = images
            .into_iter()
            .map(|(d, h, w)| image(d, h, w).map(|i| i.to_tensor()))
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.norm = recalibrate_norm(&self.inner, &tensors).map_err(py_err)?;
        Ok(())
    }

    /// Per-pixel class ids using the stored statistics, or the image's own
    /// statistics when `batch_stats` is set.
    #[pyo3(signature = (data, height, width, batch_stats=false))]
    fn predict(&self, data: Vec<f32>, height: usize, width: usize, batch_stats: bool) -> PyResult<Vec<u8>> {
        let t = image(data, height, width)?.to_tensor();
        let mode = if batch_stats { NormMode::Batch } else { NormMode::Fixed(&self.inner.norm) };
        let logits = predict_logits(&self.inner, &t, mode).map_err(py_err)?;
        argmax_ids(&logits).map_err(py_err)
    }
}

/// Synthetic domain: list of `(id, image, label)` with the 5-class 64×64
/// benchmark settings.
#[pyfunction]
fn synth_domain(num_images: usize, seed: u64, shift_index: usize) -> PyResult<Vec<(String, Vec<f32>, Vec<u8>)>> {
    let set = synth_generate(&SynthSpec::desk(num_images, seed), shift_index).map_err(py_err)?;
    Ok(set
        .samples
        .into_iter()
        .map(|s| (s.id, s.image.data, s.label.map(|l| l.ids).unwrap_or_default()))
        .collect())
}

/// Mixes one source sample onto a target image. Returns `(image, label,
/// mask)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn mix(
    source_image: Vec<f32>,
    source_label: Vec<u8>,
    target_image: Vec<f32>,
    pseudo_label: Vec<u8>,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<u8>, Vec<bool>)> {
    let src_label = label(source_label, height, width)?;
    let selected = select_classes(&src_label, &mut seeded(seed)).map_err(py_err)?;
    let mask = build_mix_mask(&src_label, &selected);
    let src = DomainSample::new("source", image(source_image, height, width)?, Some(src_label)).map_err(py_err)?;
    let n = height * width;
    let pseudo = PseudoLabel {
        ids: label(pseudo_label, height, width)?,
        confidence: vec![1.0; n],
    };
    let out = mix_pair(&src, "source", &image(target_image, height, width)?, &pseudo, &mask).map_err(py_err)?;
    Ok((out.image.data, out.label.ids, out.mask.bits))
}

/// `(per-class IoU or None, mIoU)` of flat prediction/truth id lists.
#[pyfunction]
fn miou(predicted: Vec<u8>, truth: Vec<u8>, num_classes: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let n = truth.len();
    let mut cm = ConfusionMatrix::new(num_classes);
    update_confusion(&mut cm, &label(predicted, 1, n)?, &label(truth, 1, n)?).map_err(py_err)?;
    let r = iou_report(&cm).map_err(py_err)?;
    Ok((r.per_class, r.miou))
}

/// `(components as (name, MACs), total GFLOPs)` of a reference decoder.
#[pyfunction]
fn count_flops(decoder: &str, height: usize, width: usize) -> PyResult<(Vec<(String, u64)>, f64)> {
    let kind = decoder.parse().map_err(py_err)?;
    let r = core_count_flops(&FlopsConfig::reference(kind), height, width).map_err(py_err)?;
    let g = r.gflops();
    Ok((r.components, g))
}

#[pyfunction]
fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> PyResult<f64> {
    mmuda_core::meta::poly_lr(base, iteration, total, power).map_err(py_err)
}

/// Final target mIoU of one desk-scale ablation run.
#[pyfunction]
#[pyo3(signature = (seed, variant, iterations=300))]
fn desk_run(py: Python<'_>, seed: u64, variant: &str, iterations: usize) -> PyResult<f64> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let bench = DeskBenchmark {
        iterations,
        ..DeskBenchmark::default()
    };
    py.detach(|| {
        let data = bench.data(seed)?;
        bench.run(seed, variant, &data)
    })
    .map_err(py_err)
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    mmuda_core::cli::run(std::iter::once("mmuda".to_string()).chain(args))
}

#[pymodule]
pub fn mmuda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_domain, m)?)?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(desk_run, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
