use mmuda_core::data::{synth_generate, DomainSample, DomainSet, DomainShift, SynthSpec, IGNORE_ID};
use mmuda_core::mdms::AugmentedBatch;
use mmuda_core::meta::{poly_lr, HyperParams, LossValue};
use mmuda_core::segnet::{model_forward, DecoderConfig, EncoderConfig, ModelParams, Net, NormMode};
use mmuda_core::tensor::{sgd_update, Parameter, Tape, Tensor};

pub fn tiny_model(seed: u64) -> ModelParams {
    ModelParams::new(EncoderConfig::tiny(), DecoderConfig::tiny(), seed).unwrap()
}

/// `k` 2-class 16×16 source domains followed by one target domain.
pub fn domains(k: usize, seed: u64) -> Vec<DomainSet> {
    let spec = SynthSpec {
        num_classes: 2,
        height: 16,
        width: 16,
        num_images: 3,
        shapes_per_image: (1, 2),
        shifts: (0..k)
            .map(|i| DomainShift {
                hue_shift: 15.0 * i as f64,
                brightness: 1.0 - 0.1 * i as f64,
                ..DomainShift::identity()
            })
            .collect(),
        seed,
    };
    (0..=k).map(|i| synth_generate(&spec, i).unwrap()).collect()
}

/// One step of plain joint training on `α·mean CE(sources) + mean
/// CE(mixed)`, all on a single tape.
pub fn joint_reference_step(
    model: &mut ModelParams,
    hp: &HyperParams,
    it: usize,
    sources: &[&DomainSample],
    batch: &AugmentedBatch,
) {
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params, true);
    let mut terms = Vec::new();
    let k_src = sources.len() as f64;
    let k_mix = batch.samples.len() as f64;
    let pairs = sources
        .iter()
        .map(|s| (&s.image, s.label.as_ref().unwrap(), hp.alpha / k_src))
        .chain(batch.samples.iter().map(|s| (&s.image, &s.label, 1.0 / k_mix)));
    for (image, label, weight) in pairs {
        let mut net = Net::new(&mut tape, model, &vars, NormMode::Batch).unwrap();
        let logits = model_forward(&mut net, &image.to_tensor()).unwrap();
        let ce = tape.cross_entropy(logits, &label.ids, IGNORE_ID).unwrap();
        terms.push(tape.scale(ce.var, weight).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).unwrap();
    }
    tape.backward_into(total, &mut model.params).unwrap();
    let lr = poly_lr(hp.outer_lr, it, hp.iterations.unwrap(), hp.poly_power).unwrap();
    sgd_update(&mut model.params, lr, hp.momentum, hp.weight_decay).unwrap();
}

pub fn scalar(name: &str, v: f64) -> Parameter {
    Parameter::new(name, Tensor::new([1], vec![v]).unwrap())
}

/// `½(a·x + b − t)²` with gradients from the tape.
pub fn half_square(params: &mut Vec<Parameter>, x: f64, t: f64) -> mmuda_core::Result<LossValue> {
    let mut tape = Tape::new();
    let v = tape.bind(params, true);
    let ax = tape.scale(v[0], x)?;
    let y = tape.add(ax, v[1])?;
    let target = tape.constant(Tensor::new([1], vec![t])?);
    let r = tape.sub(y, target)?;
    let sq = tape.mul(r, r)?;
    let l = tape.scale(sq, 0.5)?;
    let loss = tape.sum(l)?;
    let value = tape.value(loss).item();
    tape.backward_into(loss, params)?;
    Ok(LossValue::scalar(value))
}

fn hp_for_reduction() -> HyperParams {
    HyperParams {
        inner_lr: 0.0,
        outer_lr: 0.05,
        alpha: 0.7,
        iterations: Some(10),
        ..Default::default()
    }
}

/// Runs `steps` meta steps with η = 0 next to the joint-training reference
/// and returns the largest parameter difference seen after any step.
pub fn eta_zero_max_deviation(steps: usize) -> f64 {
    use mmuda_core::mdms::build_augmented_batch;
    use mmuda_core::meta::{meta_step, TrainState};
    use mmuda_core::rng::{stream_id, substream};

    let doms = domains(2, 4);
    let names = ["a", "b"];
    let target = &doms[2].samples;
    let hp = HyperParams {
        iterations: Some(steps),
        ..hp_for_reduction()
    };
    let mut meta = tiny_model(11);
    let mut joint = meta.clone();
    let mut state = TrainState::new(0, steps);
    let mut worst: f64 = 0.0;
    for it in 0..steps {
        let src: Vec<(&str, &DomainSample)> = (0..2).map(|d| (names[d], &doms[d].samples[(it + d) % 3])).collect();
        let tgt = &target[it % 3];
        let mut rng = substream(5, stream_id(&[it as u64]));
        let report = meta_step(&mut state, &mut meta, &hp, &src, tgt, &mut rng, None).unwrap();
        assert_eq!(report.l_total, report.l_da + hp.alpha * report.l_ds);

        let mut rng = substream(5, stream_id(&[it as u64]));
        let batch = build_augmented_batch(&src, tgt, &joint, NormMode::Batch, &mut rng, None).unwrap();
        let crops: Vec<&DomainSample> = src.iter().map(|p| p.1).collect();
        joint_reference_step(&mut joint, &hp, it, &crops, &batch);

        for (m, j) in meta.params.iter().zip(&joint.params) {
            for (x, y) in m.value.data().iter().zip(j.value.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert_ne!(meta.checksum(), tiny_model(11).checksum(), "trajectory never moved");
    worst
}

/// One meta step of a 2-parameter linear model against hand arithmetic;
/// returns the largest absolute error over losses, gradients, momentum
/// and updated values.
///
/// a=0.5 b=-0.25; meta-train point (2, 1), meta-test point (-1, 0.5),
/// η=0.1, α=0.7, lr=0.05, weight decay 0.01:
/// r1 = -0.25, g_ds = (-0.5, -0.25), L_ds = 0.03125;
/// θ' = (0.55, -0.225), r2 = -1.275, g_da = (1.275, -1.275), L_da = 0.8128125;
/// g = 0.7·g_ds + g_da = (0.925, -1.45); v = g + 0.01·θ = (0.93, -1.4525);
/// θ ← θ - 0.05·v = (0.4535, -0.177375).
pub fn toy_step_error() -> f64 {
    use mmuda_core::meta::first_order_meta_update;

    let mut params = vec![scalar("a", 0.5), scalar("b", -0.25)];
    let before = params.clone();
    let (ds, da) =
        first_order_meta_update(&mut params, 0.1, 0.7, |m| half_square(m, 2.0, 1.0), |c| half_square(c, -1.0, 0.5))
            .unwrap();
    assert_eq!(params[0].value, before[0].value, "meta update must not step the parameters");
    let mut errs = vec![
        ds.loss - 0.03125,
        da.loss - 0.8128125,
        params[0].grad.item() - 0.925,
        params[1].grad.item() + 1.45,
    ];
    sgd_update(&mut params, 0.05, 0.9, 0.01).unwrap();
    errs.extend([
        params[0].value.item() - 0.4535,
        params[1].value.item() + 0.177375,
        params[0].momentum.item() - 0.93,
        params[1].momentum.item() + 1.4525,
    ]);
    errs.iter().fold(0.0, |m: f64, e| m.max(e.abs()))
}
