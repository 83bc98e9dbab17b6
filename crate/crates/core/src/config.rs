//! Run and synthetic-dataset configuration files (TOML). Unknown keys are
//! rejected; relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationConfig, DomainShift, SynthSpec};
use crate::error::{Error, Result};
use crate::meta::{HyperParams, TrainConfig, Variant};
use crate::segnet::{DecoderConfig, EncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    /// Split directories holding `images/` and `labels/`.
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
    /// Labelled target images held out for evaluation.
    #[serde(default)]
    pub target_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub variant: String,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub alpha: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub recalibrate: bool,
    pub pseudo_threshold: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        TrainingSection {
            variant: Variant::Mmuda.id().to_string(),
            inner_lr: hp.inner_lr,
            outer_lr: hp.outer_lr,
            alpha: hp.alpha,
            poly_power: hp.poly_power,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
            epochs: hp.epochs,
            iterations: hp.iterations,
            batch_size: hp.batch_size,
            eval_interval: 0,
            recalibrate: true,
            pseudo_threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder_channels: [usize; 4],
    pub encoder_blocks: usize,
    pub patch: usize,
    pub ratios: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    pub low_level_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let d = DecoderConfig::desk(2);
        ModelSection {
            encoder_channels: e.channels,
            encoder_blocks: e.blocks,
            patch: d.patch,
            ratios: d.ratios,
            embed_dim: d.embed_dim,
            heads: d.heads,
            low_level_dim: d.low_level_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub ratio_range: (f64, f64),
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub crop: (usize, usize),
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentationConfig::desk();
        AugmentSection {
            ratio_range: a.ratio_range,
            flip_prob: a.flip_prob,
            blur_prob: a.blur_prob,
            blur_sigma: a.blur_sigma,
            crop: a.crop,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`, resolving relative data and output paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.data.sources.iter_mut().chain([&mut cfg.data.target, &mut cfg.output_dir]) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sources.is_empty() {
            return Err(Error::Config("data.sources must name at least one domain".into()));
        }
        self.train_config()?;
        self.decoder().validate()?;
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.model.encoder_channels,
            blocks: self.model.encoder_blocks,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            patch: self.model.patch,
            ratios: self.model.ratios.clone(),
            embed_dim: self.model.embed_dim,
            heads: self.model.heads,
            low_level_dim: self.model.low_level_dim,
            num_classes: self.data.num_classes,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let a = &self.augment;
        let cfg = TrainConfig {
            seed: self.seed,
            hyper: HyperParams {
                inner_lr: t.inner_lr,
                outer_lr: t.outer_lr,
                alpha: t.alpha,
                poly_power: t.poly_power,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                epochs: t.epochs,
                iterations: t.iterations,
                batch_size: t.batch_size,
            },
            variant: t.variant.parse()?,
            augment: AugmentationConfig {
                ratio_range: a.ratio_range,
                flip_prob: a.flip_prob,
                blur_prob: a.blur_prob,
                blur_sigma: a.blur_sigma,
                crop: a.crop,
            },
            eval_interval: t.eval_interval,
            recalibrate: t.recalibrate,
            pseudo_threshold: t.pseudo_threshold,
        };
        cfg.hyper.validate()?;
        cfg.augment.validate()?;
        if let Some(p) = cfg.pseudo_threshold {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("pseudo_threshold {p} outside [0, 1]")));
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let text = toml::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    #[serde(default)]
    pub hue_shift: f64,
    #[serde(default = "one")]
    pub brightness: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default)]
    pub warp_amplitude: f64,
}

fn one() -> f64 {
    1.0
}

impl From<&ShiftSection> for DomainShift {
    fn from(s: &ShiftSection) -> Self {
        DomainShift {
            hue_shift: s.hue_shift,
            brightness: s.brightness,
            noise_sigma: s.noise_sigma,
            blur_sigma: s.blur_sigma,
            warp_amplitude: s.warp_amplitude,
        }
    }
}

impl From<&DomainShift> for ShiftSection {
    fn from(s: &DomainShift) -> Self {
        ShiftSection {
            hue_shift: s.hue_shift,
            brightness: s.brightness,
            noise_sigma: s.noise_sigma,
            blur_sigma: s.blur_sigma,
            warp_amplitude: s.warp_amplitude,
        }
    }
}

/// Synthetic benchmark description: one shift per source domain and one
/// for the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub num_images: usize,
    pub shapes_per_image: (usize, usize),
    pub sources: Vec<ShiftSection>,
    pub target: ShiftSection,
}

impl SynthConfig {
    /// The built-in 3-source benchmark.
    pub fn desk(num_images: usize, seed: u64) -> Self {
        let spec = SynthSpec::desk(num_images, seed);
        let shifts: Vec<ShiftSection> = spec.shifts.iter().map(ShiftSection::from).collect();
        SynthConfig {
            seed,
            num_classes: spec.num_classes,
            height: spec.height,
            width: spec.width,
            num_images,
            shapes_per_image: spec.shapes_per_image,
            target: shifts[3].clone(),
            sources: shifts[..3].to_vec(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let cfg: SynthConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.spec()?;
        Ok(cfg)
    }

    /// Generator spec; shift `k` for `k` in `1..=K` is source `k`, `K + 1`
    /// is the target.
    pub fn spec(&self) -> Result<SynthSpec> {
        if self.sources.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one source".into()));
        }
        let spec = SynthSpec {
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
            num_images: self.num_images,
            shapes_per_image: self.shapes_per_image,
            shifts: self.sources.iter().chain([&self.target]).map(DomainShift::from).collect(),
            seed: self.seed,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}
