//! The `mmuda` command line. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::{GrayImage, ImageBuffer, Rgb};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, SynthConfig};
use crate::data::{
    load_domain, split_target, standard_augment, synth_generate, write_domain, DomainSample, Image,
    LabelMap, Role, IGNORE_ID,
};
use crate::error::{Error, Result};
use crate::eval::{count_flops, DecoderKind, FlopsConfig};
use crate::mdms::build_augmented_batch;
use crate::meta::{evaluate, train_with, TrainData};
use crate::rng::{stream_id, substream};
use crate::segnet::{recalibrate_norm, ModelParams, NormMode};

const SPLIT_STREAM: u64 = 0x5711;
const AUGMENT_STREAM: u64 = 0xa06;

#[derive(Debug, Parser)]
#[command(name = "mmuda", version, about = "Multi-source meta-learning domain adaptation for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metric logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class IoU of a checkpoint on a labelled dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Use the checkpoint's running statistics instead of statistics
        /// recomputed on the dataset images.
        #[arg(long)]
        no_recalibrate: bool,
        /// Config to check against the checkpoint's config hash.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Write mixed samples for inspection.
    Augment {
        #[arg(long)]
        config: PathBuf,
        /// Number of target images to mix; each yields one sample per source.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Pseudo-label with this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "augment")]
        out: PathBuf,
    },
    /// Analytic GFLOPs of the full-scale reference decoders.
    Flops {
        /// vanilla-mlp, lawin-aspp or hybrid-aspp; all three when omitted.
        #[arg(long)]
        decoder: Vec<String>,
        #[arg(long, default_value_t = 1024)]
        height: usize,
        #[arg(long, default_value_t = 2048)]
        width: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Generate a synthetic multi-domain benchmark.
    Synth {
        /// Synthetic spec file; the built-in 3-source benchmark when omitted.
        #[arg(long, alias = "config")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Images per domain for the built-in benchmark.
        #[arg(long, default_value_t = 48)]
        images: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Eval {
            checkpoint,
            dataset,
            no_recalibrate,
            config,
            out,
        } => cmd_eval(&checkpoint, &dataset, !no_recalibrate, config.as_deref(), &out).map(|_| ()),
        Command::Augment {
            config,
            count,
            checkpoint,
            seed,
            out,
        } => cmd_augment(&config, count, checkpoint.as_deref(), seed, &out),
        Command::Flops {
            decoder,
            height,
            width,
            csv,
        } => {
            print!("{}", cmd_flops(&decoder, height, width, csv)?);
            Ok(())
        }
        Command::Synth { spec, out, seed, images } => cmd_synth(spec.as_deref(), &out, seed, images).map(|_| ()),
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

/// Sources, unlabelled target training images and labelled target
/// evaluation images described by `cfg`.
pub fn load_train_data(cfg: &RunConfig) -> Result<TrainData> {
    let c = cfg.data.num_classes;
    let sources = cfg
        .data
        .sources
        .iter()
        .map(|p| load_domain(p, Role::Source, 0, c))
        .collect::<Result<Vec<_>>>()?;
    let target = load_domain(&cfg.data.target, Role::Target, cfg.data.target_eval, c)?;
    let mut rng = substream(cfg.seed, stream_id(&[SPLIT_STREAM]));
    let (target_eval, target_train) = split_target(&target, cfg.data.target_eval, &mut rng)?;
    Ok(TrainData {
        sources,
        target_train,
        target_eval,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `checkpoints/final`, `checkpoints/best` (when evaluated),
/// `metrics.csv`, `metrics.txt` and `config.toml` under the output
/// directory.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed, out)?;
    let train_cfg = cfg.train_config()?;
    let data = load_train_data(&cfg)?;
    let model = ModelParams::new(cfg.encoder(), cfg.decoder(), cfg.seed)?;
    let hash = cfg.hash();
    let outcome = train_with(model, &train_cfg, &data, |row| {
        let single = crate::meta::MetricLog { rows: vec![row.clone()] };
        print!("{}", single.to_text());
    })?;
    let dir = &cfg.output_dir;
    let last_miou = outcome.log.rows.last().and_then(|r| r.miou);
    checkpoint::save(
        &dir.join("checkpoints/final"),
        &Checkpoint {
            model: outcome.model,
            config_hash: hash.clone(),
            iteration: outcome.state.iteration,
            miou: last_miou,
        },
    )?;
    if let (Some(best), Some((it, m))) = (outcome.best_model, outcome.state.best) {
        checkpoint::save(
            &dir.join("checkpoints/best"),
            &Checkpoint {
                model: best,
                config_hash: hash,
                iteration: it,
                miou: Some(m),
            },
        )?;
    }
    write_file(&dir.join("metrics.csv"), &outcome.log.to_csv())?;
    write_file(&dir.join("metrics.txt"), &outcome.log.to_text())?;
    write_file(&dir.join("config.toml"), &toml::to_string(&cfg).expect("config serializes"))?;
    if let Some((it, m)) = outcome.state.best {
        println!("best mIoU {:.2} at iteration {it}", 100.0 * m);
    }
    Ok(())
}

/// Writes `report.txt` and `report.csv`; the first line of both names the
/// normalization mode.
pub fn cmd_eval(ck_dir: &Path, dataset: &Path, recalibrate: bool, config: Option<&Path>, out: &Path) -> Result<String> {
    let ck = checkpoint::load(ck_dir)?;
    if let Some(cfg_path) = config {
        let cfg = RunConfig::load(cfg_path)?;
        if cfg.hash() != ck.config_hash {
            eprintln!("warning: {} does not match the config the checkpoint was trained with", cfg_path.display());
        }
    }
    let c = ck.model.num_classes();
    let set = load_domain(dataset, Role::Target, 0, IGNORE_ID as usize)?;
    let labelled: Vec<DomainSample> = set.samples.iter().filter(|s| s.label.is_some()).cloned().collect();
    if labelled.is_empty() {
        return Err(Error::Config(format!("{} has no labelled images", dataset.display())));
    }
    if let Some(id) = labelled
        .iter()
        .flat_map(|s| s.label.as_ref().map(|l| l.ids.iter().copied()).into_iter().flatten())
        .find(|&id| id != IGNORE_ID && id as usize >= c)
    {
        return Err(Error::Config(format!(
            "{} has label id {id} but the checkpoint predicts {c} classes",
            dataset.display()
        )));
    }
    let (stats, mode) = if recalibrate {
        let images: Vec<_> = set.samples.iter().map(|s| s.image.to_tensor()).collect();
        let mode = format!("normalization: target statistics recalibrated on {} images", images.len());
        (recalibrate_norm(&ck.model, &images)?, mode)
    } else {
        (ck.model.norm.clone(), "normalization: stored running statistics".to_string())
    };
    let (_, report) = evaluate(&ck.model, &labelled, &stats)?;
    let text = format!("{mode}\n{}", report.to_text());
    print!("{text}");
    write_file(&out.join("report.txt"), &text)?;
    write_file(&out.join("report.csv"), &format!("# {mode}\n{}", report.to_csv()))?;
    Ok(text)
}

fn save_rgb(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let rgb = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    rgb.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let g = GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::State(format!("{}: buffer size mismatch", path.display())))?;
    g.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_label(path: &Path, l: &LabelMap) -> Result<()> {
    save_gray(path, l.height, l.width, l.ids.clone())
}

/// For each of `count` target crops and each source domain writes
/// `<i>_<domain>_{image,label,mask}.png` (mask 255 = pasted from the
/// source) plus the crops it was built from, `<i>_<domain>_source_{image,
/// label}.png` and `<i>_target.png`, and lists them in `index.csv`.
pub fn cmd_augment(config: &Path, count: usize, ck: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed, None)?;
    let train_cfg = cfg.train_config()?;
    let data = load_train_data(&cfg)?;
    let model = match ck {
        Some(dir) => checkpoint::load(dir)?.model,
        None => ModelParams::new(cfg.encoder(), cfg.decoder(), cfg.seed)?,
    };
    if data.target_train.is_empty() {
        return Err(Error::Data("no unlabelled target images to mix".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let crop = |s: &DomainSample, i: usize, d: usize| {
        let mut rng = substream(cfg.seed, stream_id(&[AUGMENT_STREAM, i as u64, d as u64]));
        standard_augment(s, &train_cfg.augment, &mut rng)
    };
    let k = data.sources.len();
    let mut index = String::from("target_id,source_domain,prefix\n");
    for i in 0..count {
        let target = crop(&data.target_train[i % data.target_train.len()], i, k);
        let crops: Vec<DomainSample> =
            data.sources.iter().enumerate().map(|(d, set)| crop(&set.samples[i % set.len()], i, d)).collect();
        let pairs: Vec<(&str, &DomainSample)> =
            data.sources.iter().map(|s| s.name.as_str()).zip(crops.iter()).collect();
        let mut rng = substream(cfg.seed, stream_id(&[AUGMENT_STREAM, i as u64, u64::MAX]));
        let batch =
            build_augmented_batch(&pairs, &target, &model, NormMode::Batch, &mut rng, train_cfg.pseudo_threshold)?;
        save_rgb(&out.join(format!("{i:04}_target.png")), &target.image)?;
        for (s, src) in batch.samples.iter().zip(&crops) {
            let prefix = format!("{i:04}_{}", s.source_domain);
            save_rgb(&out.join(format!("{prefix}_image.png")), &s.image)?;
            save_label(&out.join(format!("{prefix}_label.png")), &s.label)?;
            let bits = s.mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
            save_gray(&out.join(format!("{prefix}_mask.png")), s.mask.height, s.mask.width, bits)?;
            save_rgb(&out.join(format!("{prefix}_source_image.png")), &src.image)?;
            if let Some(l) = &src.label {
                save_label(&out.join(format!("{prefix}_source_label.png")), l)?;
            }
            let _ = writeln!(index, "{},{},{prefix}", batch.target_id, s.source_domain);
        }
    }
    write_file(&out.join("index.csv"), &index)
}

pub fn cmd_flops(decoders: &[String], height: usize, width: usize, csv: bool) -> Result<String> {
    let kinds: Vec<DecoderKind> = if decoders.is_empty() {
        DecoderKind::ALL.to_vec()
    } else {
        decoders.iter().map(|d| d.parse()).collect::<Result<_>>()?
    };
    let mut out = String::new();
    if csv {
        out.push_str("decoder,component,macs,gflops\n");
    }
    for kind in kinds {
        let report = count_flops(&FlopsConfig::reference(kind), height, width)?;
        if csv {
            for (name, macs) in report.components.iter().chain([&("total".to_string(), report.total_macs)]) {
                let _ = writeln!(out, "{},{name},{macs},{:.6}", kind.id(), 2.0 * *macs as f64 / 1e9);
            }
        } else {
            let _ = writeln!(out, "{} @ {height}x{width}", kind.id());
            out.push_str(&report.to_text());
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes `source<k>/train` for each source and `target/train`, and the
/// spec used as `synth.toml`. Returns the domain split directories.
pub fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>, images: usize) -> Result<Vec<PathBuf>> {
    let mut cfg = match spec {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::desk(images, 0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let synth = cfg.spec()?;
    let k = cfg.sources.len();
    let mut dirs = Vec::with_capacity(k + 1);
    for index in 1..=k + 1 {
        let name = if index <= k { format!("source{index}") } else { "target".to_string() };
        let dir = out.join(name).join("train");
        write_domain(&dir, &synth_generate(&synth, index)?.samples)?;
        dirs.push(dir);
    }
    write_file(&out.join("synth.toml"), &toml::to_string(&cfg).expect("spec serializes"))?;
    println!("wrote {} domains under {}", dirs.len(), out.display());
    Ok(dirs)
}
