//! The desk-scale ablation: three synthetic source styles and one strongly
//! shifted target style, 5 classes at 64×64.

use super::{train, HyperParams, TrainConfig, TrainData, Variant};
use crate::data::{split_target, synth_generate, AugmentationConfig, DomainSet, SynthSpec};
use crate::error::Result;
use crate::rng::{stream_id, substream};
use crate::segnet::{DecoderConfig, EncoderConfig, ModelParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DeskBenchmark {
    /// Images per domain; half of the target images are held out for
    /// evaluation.
    pub images_per_domain: usize,
    pub iterations: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub hyper: HyperParams,
    pub augment: AugmentationConfig,
}

impl Default for DeskBenchmark {
    fn default() -> Self {
        DeskBenchmark {
            images_per_domain: 48,
            iterations: 300,
            encoder: EncoderConfig {
                channels: [8, 16, 32, 64],
                blocks: 1,
            },
            decoder: DecoderConfig::desk(5),
            hyper: HyperParams {
                inner_lr: 0.01,
                outer_lr: 0.05,
                weight_decay: 1e-4,
                iterations: Some(300),
                ..HyperParams::default()
            },
            augment: AugmentationConfig {
                ratio_range: (0.75, 1.5),
                ..AugmentationConfig::desk()
            },
        }
    }
}

impl DeskBenchmark {
    /// Data is drawn from `seed`: the same seed gives the same domains for
    /// every variant.
    pub fn data(&self, seed: u64) -> Result<TrainData> {
        let spec = SynthSpec::desk(self.images_per_domain, seed);
        let sources = (1..=3).map(|k| synth_generate(&spec, k)).collect::<Result<Vec<_>>>()?;
        let target = synth_generate(&spec, 4)?;
        let target = DomainSet::target(target.name, target.samples, self.images_per_domain)?;
        let mut rng = substream(seed, stream_id(&[0xde5c]));
        let (target_eval, target_train) = split_target(&target, self.images_per_domain / 2, &mut rng)?;
        Ok(TrainData {
            sources,
            target_train,
            target_eval,
        })
    }

    pub fn config(&self, seed: u64, variant: Variant) -> TrainConfig {
        TrainConfig {
            seed,
            hyper: HyperParams {
                iterations: Some(self.iterations),
                ..self.hyper.clone()
            },
            variant,
            augment: self.augment.clone(),
            eval_interval: 0,
            recalibrate: true,
            pseudo_threshold: None,
        }
    }

    /// Final target mIoU of `variant` trained from the seed's initialization.
    pub fn run(&self, seed: u64, variant: Variant, data: &TrainData) -> Result<f64> {
        let model = ModelParams::new(self.encoder.clone(), self.decoder.clone(), seed)?;
        let out = train(model, &self.config(seed, variant), data)?;
        Ok(out.log.rows.last().and_then(|r| r.miou).unwrap_or(0.0))
    }
}
