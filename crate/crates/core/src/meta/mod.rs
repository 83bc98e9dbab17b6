//! First-order meta-learning across domains: a meta-train loss on source
//! crops drives an inner update of a cloned model, whose meta-test loss
//! gradient is added to the original model's update.

mod desk;
mod train;

pub use desk::DeskBenchmark;
pub use train::{
    evaluate, total_iterations, train, train_with, MetricLog, MetricRow, TrainConfig, TrainData, TrainOutcome, Variant,
};

use crate::data::{DomainSample, Image, LabelMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::mdms::{build_augmented_batch, AugmentedBatch};
use crate::rng::Rng;
use crate::segnet::{model_forward, ModelParams, Moments, Net, NormMode};
use crate::tensor::{sgd_update, Parameter, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Weight of the meta-train loss in the total.
    pub alpha: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub iterations: Option<usize>,
    /// Crops per domain per iteration.
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            inner_lr: 1e-3,
            outer_lr: 5e-3,
            alpha: 1.0,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 120,
            iterations: None,
            batch_size: 1,
        }
    }
}

impl HyperParams {
    /// `inner_lr = 0` is accepted: it reduces a meta step to joint training.
    pub fn validate(&self) -> Result<()> {
        let ok = self.inner_lr >= 0.0
            && self.outer_lr > 0.0
            && self.alpha >= 0.0
            && self.poly_power > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// `base · (1 − iteration/total)^power`.
pub fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("poly_lr", "total iterations must be positive"));
    }
    if iteration > total {
        return Err(Error::contract("poly_lr", format!("iteration {iteration} beyond total {total}")));
    }
    Ok(base * (1.0 - iteration as f64 / total as f64).powf(power))
}

/// Anything holding an ordered parameter list.
pub trait HasParams: Clone {
    fn params(&self) -> &[Parameter];
    fn params_mut(&mut self) -> &mut [Parameter];
}

impl HasParams for ModelParams {
    fn params(&self) -> &[Parameter] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }
}

impl HasParams for Vec<Parameter> {
    fn params(&self) -> &[Parameter] {
        self
    }

    fn params_mut(&mut self) -> &mut [Parameter] {
        self
    }
}

/// A loss value with the normalization moments its forward passes saw.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Every pixel of every sample was ignored.
    pub empty: bool,
    pub moments: Vec<Vec<Moments>>,
}

impl LossValue {
    pub fn scalar(loss: f64) -> Self {
        LossValue {
            loss,
            ..Default::default()
        }
    }
}

/// Copy of `model` after one plain gradient step `θ' = θ − η·∇θ`; the
/// copy's gradients are cleared and the original is left untouched.
pub fn inner_update<M: HasParams>(model: &M, inner_lr: f64) -> Result<M> {
    if let Some(p) = model.params().iter().find(|p| !p.has_grad()) {
        return Err(Error::State(format!("inner_update: no gradient for {}", p.name)));
    }
    let mut clone = model.clone();
    for p in clone.params_mut() {
        let step = p.grad.clone();
        for (t, g) in p.value.data_mut().iter_mut().zip(step.data()) {
            *t -= inner_lr * g;
        }
        p.clear_grad();
    }
    Ok(clone)
}

/// Runs `meta_train` on `model` (it must leave gradients on the
/// parameters), clones with an inner step, runs `meta_test` on the clone,
/// and leaves `α·∇θ L_train + ∇θ' L_test` as the gradient of `model`.
pub fn first_order_meta_update<M: HasParams>(
    model: &mut M,
    inner_lr: f64,
    alpha: f64,
    meta_train: impl FnOnce(&mut M) -> Result<LossValue>,
    meta_test: impl FnOnce(&mut M) -> Result<LossValue>,
) -> Result<(LossValue, LossValue)> {
    let ds = meta_train(model)?;
    let mut clone = inner_update(model, inner_lr)?;
    let da = meta_test(&mut clone)?;
    if !ds.loss.is_finite() || !da.loss.is_finite() {
        return Err(Error::NonFinite { op: "meta_step" });
    }
    for (p, c) in model.params_mut().iter_mut().zip(clone.params()) {
        if !c.has_grad() {
            return Err(Error::State(format!("meta-test left no gradient for {}", c.name)));
        }
        let mut g = p.grad.clone();
        g.scale_assign(alpha);
        g.add_assign(&c.grad);
        p.set_grad(g)?;
    }
    Ok((ds, da))
}

/// Mean over samples of the masked per-pixel cross-entropy at input
/// resolution, using batch statistics. Leaves the mean gradient on the
/// parameters. A sample whose pixels are all ignored contributes zero.
pub fn supervised_loss(model: &mut ModelParams, samples: &[(&Image, &LabelMap)]) -> Result<LossValue> {
    if samples.is_empty() {
        return Err(Error::contract("loss", "empty batch"));
    }
    let mut sum: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    let mut out = LossValue {
        empty: true,
        ..Default::default()
    };
    for &(image, label) in samples {
        let mut tape = Tape::new();
        let vars = tape.bind(&model.params, true);
        let mut net = Net::new(&mut tape, model, &vars, NormMode::Batch)?;
        let logits = model_forward(&mut net, &image.to_tensor())?;
        let moments = std::mem::take(&mut net.moments);
        let loss = tape.cross_entropy(logits, &label.ids, IGNORE_ID)?;
        out.loss += tape.value(loss.var).item();
        out.empty &= loss.empty;
        out.moments.push(moments);
        let grads = tape.backward(loss.var)?;
        for (i, acc) in sum.iter_mut().enumerate() {
            if let Some(g) = grads.param(i) {
                acc.add_assign(&g);
            }
        }
    }
    let k = samples.len() as f64;
    out.loss /= k;
    for (p, mut g) in model.params.iter_mut().zip(sum) {
        g.scale_assign(1.0 / k);
        p.set_grad(g)?;
    }
    Ok(out)
}

fn labelled<'a>(samples: &[&'a DomainSample]) -> Result<Vec<(&'a Image, &'a LabelMap)>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .as_ref()
                .map(|l| (&s.image, l))
                .ok_or_else(|| Error::contract("compute_lds", format!("sample {} is unlabelled", s.id)))
        })
        .collect()
}

/// Domain-specific (meta-train) loss over one labelled crop per source.
pub fn compute_lds(model: &mut ModelParams, sources: &[&DomainSample]) -> Result<LossValue> {
    supervised_loss(model, &labelled(sources)?)
}

/// Domain-adaptive (meta-test) loss of the cloned model on mixed samples.
pub fn compute_lda(cloned: &mut ModelParams, batch: &AugmentedBatch) -> Result<LossValue> {
    let pairs: Vec<_> = batch.samples.iter().map(|s| (&s.image, &s.label)).collect();
    supervised_loss(cloned, &pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepReport {
    pub iteration: usize,
    pub l_ds: f64,
    pub l_da: f64,
    pub l_total: f64,
    pub lr_inner: f64,
    pub lr_outer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub iteration: usize,
    pub total_iterations: usize,
    /// Best evaluation so far as `(iteration, mIoU)`.
    pub best: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(seed: u64, total_iterations: usize) -> Self {
        TrainState {
            seed,
            iteration: 0,
            total_iterations,
            best: None,
        }
    }

    /// `(inner, outer)` rates after poly decay.
    pub fn rates(&self, hp: &HyperParams) -> Result<(f64, f64)> {
        let f = poly_lr(1.0, self.iteration, self.total_iterations, hp.poly_power)?;
        Ok((hp.inner_lr * f, hp.outer_lr * f))
    }
}

/// Applies the outer update for a step whose gradients are in place and
/// advances the iteration.
pub(crate) fn finish_step(
    state: &mut TrainState,
    model: &mut ModelParams,
    hp: &HyperParams,
    moments: &[Vec<Moments>],
    (l_ds, l_da, l_total): (f64, f64, f64),
) -> Result<MetaStepReport> {
    if state.iteration >= state.total_iterations {
        return Err(Error::State(format!(
            "iteration {} reached the planned total {}",
            state.iteration, state.total_iterations
        )));
    }
    let (lr_inner, lr_outer) = state.rates(hp)?;
    sgd_update(&mut model.params, lr_outer, hp.momentum, hp.weight_decay)?;
    for m in moments {
        model.norm.update_running(m)?;
    }
    let report = MetaStepReport {
        iteration: state.iteration,
        l_ds,
        l_da,
        l_total,
        lr_inner,
        lr_outer,
    };
    state.iteration += 1;
    Ok(report)
}

/// One meta step against a prepared mixed batch.
pub fn meta_step_with_batch(
    state: &mut TrainState,
    model: &mut ModelParams,
    hp: &HyperParams,
    sources: &[&DomainSample],
    batch: &AugmentedBatch,
) -> Result<MetaStepReport> {
    let (lr_inner, _) = state.rates(hp)?;
    let (ds, da) = first_order_meta_update(
        model,
        lr_inner,
        hp.alpha,
        |m| compute_lds(m, sources),
        |c| compute_lda(c, batch),
    )?;
    let total = da.loss + hp.alpha * ds.loss;
    finish_step(state, model, hp, &ds.moments, (ds.loss, da.loss, total))
}

/// One full step: pseudo-label the target crop with the current model,
/// mix it with every source crop, then meta-train on the sources and
/// meta-test on the mixed samples.
pub fn meta_step(
    state: &mut TrainState,
    model: &mut ModelParams,
    hp: &HyperParams,
    sources: &[(&str, &DomainSample)],
    target: &DomainSample,
    rng: &mut Rng,
    threshold: Option<f64>,
) -> Result<MetaStepReport> {
    let batch = build_augmented_batch(sources, target, model, NormMode::Batch, rng, threshold)?;
    let crops: Vec<&DomainSample> = sources.iter().map(|&(_, s)| s).collect();
    meta_step_with_batch(state, model, hp, &crops, &batch)
}
