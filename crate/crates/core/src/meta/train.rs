use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{
    compute_lds, finish_step, first_order_meta_update, meta_step_with_batch, HyperParams, MetaStepReport, TrainState,
};
use crate::data::{standard_augment, AugmentationConfig, DomainSample, DomainSet, LabelMap};
use crate::error::{Error, Result};
use crate::eval::{iou_report, update_confusion, ConfusionMatrix, IoUReport};
use crate::mdms::{generate_pseudo_label, mix_batch, AugmentedBatch};
use crate::rng::{stream_id, substream};
use crate::segnet::{argmax_ids, predict_logits, recalibrate_norm, ModelParams, NormMode, NormStats};

const SHUFFLE: u64 = 1;
const CROP: u64 = 2;
const MIX: u64 = 3;

/// Training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Supervised training on the pooled source crops.
    Baseline,
    /// Meta-learning across sources: each step holds one source out as
    /// meta-test data, rotating through them.
    MetaOnly,
    /// Meta-train on the sources, meta-test on mixed target samples.
    Mmuda,
}

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MetaOnly => "meta",
            Variant::Mmuda => "mmuda",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::Baseline, Variant::MetaOnly, Variant::Mmuda]
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected baseline, meta or mmuda")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub hyper: HyperParams,
    pub variant: Variant,
    pub augment: AugmentationConfig,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_interval: usize,
    /// Evaluate with statistics recomputed on the unlabelled target images.
    pub recalibrate: bool,
    pub pseudo_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub sources: Vec<DomainSet>,
    pub target_train: Vec<DomainSample>,
    pub target_eval: Vec<DomainSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    /// Loss means over the steps since the previous row.
    pub l_ds: f64,
    pub l_da: f64,
    pub l_total: f64,
    pub lr: f64,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub const CSV_HEADER: &'static str = "iteration,l_ds,l_da,l_total,lr,miou";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let miou = r.miou.map_or(String::new(), |m| format!("{m:?}"));
            let _ = writeln!(out, "{},{:?},{:?},{:?},{:?},{miou}", r.iteration, r.l_ds, r.l_da, r.l_total, r.lr);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let miou = r.miou.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
            let _ = writeln!(
                out,
                "iter {:>6}  L_ds {:.4}  L_da {:.4}  L_total {:.4}  lr {:.3e}  mIoU {miou}",
                r.iteration, r.l_ds, r.l_da, r.l_total, r.lr
            );
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub state: TrainState,
    pub log: MetricLog,
    /// Parameters at the best evaluation, when one happened.
    pub best_model: Option<ModelParams>,
}

/// Per-domain cyclic iterator, reshuffled at the start of every pass.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    domain: u64,
}

impl Cycle {
    fn new(len: usize, seed: u64, domain: u64) -> Self {
        let mut c = Cycle {
            order: (0..len).collect(),
            pos: 0,
            pass: 0,
            seed,
            domain,
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = substream(self.seed, stream_id(&[SHUFFLE, self.domain, self.pass]));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.pass += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Planned iteration count: the explicit override, or epochs of
/// `⌈largest domain / batch⌉` iterations.
pub fn total_iterations(hp: &HyperParams, data: &TrainData) -> usize {
    hp.iterations.unwrap_or_else(|| {
        let largest = data
            .sources
            .iter()
            .map(DomainSet::len)
            .chain([data.target_train.len()])
            .max()
            .unwrap_or(0);
        hp.epochs * largest.div_ceil(hp.batch_size)
    })
}

/// Confusion matrix and IoU of `model` on labelled samples.
pub fn evaluate(model: &ModelParams, samples: &[DomainSample], stats: &NormStats) -> Result<(ConfusionMatrix, IoUReport)> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let truth = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("evaluation sample {} has no label", s.id)))?;
        let logits = predict_logits(model, &s.image.to_tensor(), NormMode::Fixed(stats))?;
        let pred = LabelMap::new(s.image.height, s.image.width, argmax_ids(&logits)?)?;
        update_confusion(&mut cm, &pred, truth)?;
    }
    let report = iou_report(&cm)?;
    Ok((cm, report))
}

fn eval_stats(model: &ModelParams, cfg: &TrainConfig, data: &TrainData) -> Result<NormStats> {
    if cfg.recalibrate && !data.target_train.is_empty() {
        let images: Vec<_> = data.target_train.iter().map(|s| s.image.to_tensor()).collect();
        recalibrate_norm(model, &images)
    } else {
        Ok(model.norm.clone())
    }
}

/// Draws this iteration's crops: `batch_size` per source domain (outer
/// index = domain) and as many target crops.
fn draw(
    iteration: usize,
    cfg: &TrainConfig,
    data: &TrainData,
    cycles: &mut [Cycle],
) -> (Vec<Vec<DomainSample>>, Vec<DomainSample>) {
    let crop = |sample: &DomainSample, domain: usize, b: usize| {
        let mut rng = substream(cfg.seed, stream_id(&[CROP, iteration as u64, domain as u64, b as u64]));
        standard_augment(sample, &cfg.augment, &mut rng)
    };
    let k = data.sources.len();
    let b = cfg.hyper.batch_size;
    let sources = (0..k)
        .map(|d| (0..b).map(|i| crop(&data.sources[d].samples[cycles[d].next()], d, i)).collect())
        .collect();
    let targets = (0..b).map(|i| crop(&data.target_train[cycles[k].next()], k, i)).collect();
    (sources, targets)
}

fn step(
    state: &mut TrainState,
    model: &mut ModelParams,
    cfg: &TrainConfig,
    data: &TrainData,
    sources: &[Vec<DomainSample>],
    targets: &[DomainSample],
) -> Result<MetaStepReport> {
    let hp = &cfg.hyper;
    let k = sources.len();
    let flat: Vec<&DomainSample> = sources.iter().flatten().collect();
    match cfg.variant {
        Variant::Baseline => {
            let ds = compute_lds(model, &flat)?;
            finish_step(state, model, hp, &ds.moments, (ds.loss, 0.0, ds.loss))
        }
        Variant::MetaOnly => {
            if k < 2 {
                return Err(Error::Config("meta variant needs at least two source domains".into()));
            }
            let held = state.iteration % k;
            let train: Vec<&DomainSample> = (0..k).filter(|&d| d != held).flat_map(|d| &sources[d]).collect();
            let test: Vec<&DomainSample> = sources[held].iter().collect();
            let (lr_inner, _) = state.rates(hp)?;
            let (ds, da) = first_order_meta_update(
                model,
                lr_inner,
                hp.alpha,
                |m| compute_lds(m, &train),
                |c| compute_lds(c, &test),
            )?;
            let total = da.loss + hp.alpha * ds.loss;
            finish_step(state, model, hp, &ds.moments, (ds.loss, da.loss, total))
        }
        Variant::Mmuda => {
            let mut rng = substream(cfg.seed, stream_id(&[MIX, state.iteration as u64]));
            let mut batch = AugmentedBatch {
                target_id: String::new(),
                samples: Vec::new(),
            };
            for (b, target) in targets.iter().enumerate() {
                let pseudo = generate_pseudo_label(model, &target.image, NormMode::Batch)?;
                let pairs: Vec<(&str, &DomainSample)> =
                    (0..k).map(|d| (data.sources[d].name.as_str(), &sources[d][b])).collect();
                let mixed = mix_batch(&pairs, target, &pseudo, &mut rng, cfg.pseudo_threshold)?;
                if b == 0 {
                    batch.target_id = mixed.target_id;
                }
                batch.samples.extend(mixed.samples);
            }
            meta_step_with_batch(state, model, hp, &flat, &batch)
        }
    }
}

/// Runs the configured recipe for the planned number of iterations,
/// evaluating on `target_eval` every `eval_interval` iterations and at the
/// end. Deterministic given the seed.
pub fn train(model: ModelParams, cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with(model, cfg, data, |_| {})
}

/// [`train`] with a callback receiving each metric row as it is logged.
pub fn train_with(
    model: ModelParams,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    cfg.hyper.validate()?;
    cfg.augment.validate()?;
    if data.sources.is_empty() || data.sources.iter().any(DomainSet::is_empty) {
        return Err(Error::Data("training needs at least one non-empty source domain".into()));
    }
    if data.target_train.is_empty() {
        return Err(Error::Data("training needs unlabelled target images".into()));
    }
    let total = total_iterations(&cfg.hyper, data);
    let mut state = TrainState::new(cfg.seed, total);
    let mut model = model;
    let mut log = MetricLog::default();
    let mut best_model = None;
    let k = data.sources.len();
    let mut cycles: Vec<Cycle> = data
        .sources
        .iter()
        .map(DomainSet::len)
        .chain([data.target_train.len()])
        .enumerate()
        .map(|(d, n)| Cycle::new(n, cfg.seed, d as u64))
        .collect();
    debug_assert_eq!(cycles.len(), k + 1);

    let mut pending: Vec<MetaStepReport> = Vec::new();
    while state.iteration < total {
        let (sources, targets) = draw(state.iteration, cfg, data, &mut cycles);
        let report = step(&mut state, &mut model, cfg, data, &sources, &targets)?;
        pending.push(report);
        let due = cfg.eval_interval > 0 && state.iteration % cfg.eval_interval == 0;
        if due || state.iteration == total {
            let miou = if data.target_eval.is_empty() {
                None
            } else {
                let stats = eval_stats(&model, cfg, data)?;
                Some(evaluate(&model, &data.target_eval, &stats)?.1.miou)
            };
            if let Some(m) = miou {
                if state.best.is_none_or(|(_, b)| m > b) {
                    state.best = Some((state.iteration, m));
                    best_model = Some(model.clone());
                }
            }
            let n = pending.len() as f64;
            let mean = |f: fn(&MetaStepReport) -> f64| pending.iter().map(f).sum::<f64>() / n;
            log.rows.push(MetricRow {
                iteration: state.iteration,
                l_ds: mean(|r| r.l_ds),
                l_da: mean(|r| r.l_da),
                l_total: mean(|r| r.l_total),
                lr: pending.last().map_or(0.0, |r| r.lr_outer),
                miou,
            });
            on_row(log.rows.last().expect("row just pushed"));
            pending.clear();
        }
    }
    Ok(TrainOutcome {
        model,
        state,
        log,
        best_model,
    })
}
