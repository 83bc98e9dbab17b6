//! Multi-domain mixed sampling: pseudo-label a target crop, then for each
//! source domain paste half of the source crop's classes onto it.

use rand::seq::index::sample;

use crate::data::{DomainSample, Image, LabelMap, IGNORE_ID};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::segnet::{argmax_ids, dims3, predict_logits, ModelParams, NormMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub ids: LabelMap,
    /// Per-pixel maximum softmax probability.
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixMask {
    pub height: usize,
    pub width: usize,
    /// `true` where the source pixel is pasted.
    pub bits: Vec<bool>,
}

impl MixMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        MixMask {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    pub label: LabelMap,
    pub mask: MixMask,
    pub source_domain: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub target_id: String,
    pub samples: Vec<AugmentedSample>,
}

/// Argmax ids (lowest id on ties) and max-softmax confidence of `[C,H,W]`
/// logits.
pub fn pseudo_label_from_logits(logits: &Tensor) -> Result<PseudoLabel> {
    let (c, h, w) = dims3(logits.shape())?;
    if c > 255 {
        return Err(Error::contract("pseudo_label", format!("{c} classes do not fit 8-bit ids")));
    }
    let ids = argmax_ids(logits)?;
    let z = logits.data();
    let n = h * w;
    let confidence = (0..n)
        .map(|p| {
            let top = z[ids[p] as usize * n + p];
            let denom: f64 = (0..c).map(|k| (z[k * n + p] - top).exp()).sum();
            1.0 / denom
        })
        .collect();
    Ok(PseudoLabel {
        ids: LabelMap::new(h, w, ids)?,
        confidence,
    })
}

/// Runs the model without recording gradients and labels every pixel.
pub fn generate_pseudo_label(model: &ModelParams, image: &Image, mode: NormMode) -> Result<PseudoLabel> {
    let logits = predict_logits(model, &image.to_tensor(), mode)?;
    pseudo_label_from_logits(&logits)
}

/// Uniformly picks `⌈n/2⌉` of the `n` non-ignore classes present in
/// `label`, returned sorted.
pub fn select_classes(label: &LabelMap, rng: &mut Rng) -> Result<Vec<u8>> {
    let present = label.present_classes();
    if present.is_empty() {
        return Err(Error::Data("no mixable classes: label holds only ignore pixels".into()));
    }
    let k = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = sample(rng, present.len(), k).into_iter().map(|i| present[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Marks pixels whose source label is one of `selected`; ignore pixels are
/// never marked.
pub fn build_mix_mask(source_label: &LabelMap, selected: &[u8]) -> MixMask {
    let mut pick = [false; 256];
    for &id in selected {
        pick[id as usize] = true;
    }
    pick[IGNORE_ID as usize] = false;
    MixMask {
        height: source_label.height,
        width: source_label.width,
        bits: source_label.ids.iter().map(|&id| pick[id as usize]).collect(),
    }
}

/// Per-pixel selection between the source pair (mask set) and the target
/// image with its pseudo-label.
pub fn mix_pair(
    source: &DomainSample,
    source_domain: &str,
    target_image: &Image,
    pseudo: &PseudoLabel,
    mask: &MixMask,
) -> Result<AugmentedSample> {
    let src_label = source
        .label
        .as_ref()
        .ok_or_else(|| Error::contract("mix_pair", format!("source sample {} is unlabelled", source.id)))?;
    let dims = (source.image.height, source.image.width);
    let all = [
        dims,
        (target_image.height, target_image.width),
        (pseudo.ids.height, pseudo.ids.width),
        (mask.height, mask.width),
    ];
    if all.iter().any(|&d| d != dims) {
        return Err(Error::contract("mix_pair", format!("size mismatch among source, target, pseudo-label and mask: {all:?}")));
    }
    let plane = dims.0 * dims.1;
    let mut data = target_image.data.clone();
    let mut ids = pseudo.ids.ids.clone();
    for p in 0..plane {
        if mask.bits[p] {
            ids[p] = src_label.ids[p];
            for c in 0..3 {
                data[c * plane + p] = source.image.data[c * plane + p];
            }
        }
    }
    Ok(AugmentedSample {
        image: Image::new(dims.0, dims.1, data)?,
        label: LabelMap::new(dims.0, dims.1, ids)?,
        mask: mask.clone(),
        source_domain: source_domain.to_string(),
    })
}

/// Mixes one target crop with one crop per source domain. Each source
/// draws its own class selection from `rng` in order. With a threshold,
/// target pixels whose pseudo-label confidence falls below it are ignored.
pub fn mix_batch(
    sources: &[(&str, &DomainSample)],
    target: &DomainSample,
    pseudo: &PseudoLabel,
    rng: &mut Rng,
    threshold: Option<f64>,
) -> Result<AugmentedBatch> {
    let pseudo = match threshold {
        None => pseudo.clone(),
        Some(t) => {
            let mut p = pseudo.clone();
            for (id, &conf) in p.ids.ids.iter_mut().zip(&pseudo.confidence) {
                if conf < t {
                    *id = IGNORE_ID;
                }
            }
            p
        }
    };
    let samples = sources
        .iter()
        .map(|&(name, src)| {
            let label = src
                .label
                .as_ref()
                .ok_or_else(|| Error::contract("mix_batch", format!("source sample {} is unlabelled", src.id)))?;
            let selected = select_classes(label, rng)?;
            let mask = build_mix_mask(label, &selected);
            mix_pair(src, name, &target.image, &pseudo, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedBatch {
        target_id: target.id.clone(),
        samples,
    })
}

/// Pseudo-labels the target once with `model`, then mixes it with every
/// source crop.
pub fn build_augmented_batch(
    sources: &[(&str, &DomainSample)],
    target: &DomainSample,
    model: &ModelParams,
    mode: NormMode,
    rng: &mut Rng,
    threshold: Option<f64>,
) -> Result<AugmentedBatch> {
    let pseudo = generate_pseudo_label(model, &target.image, mode)?;
    mix_batch(sources, target, &pseudo, rng, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn label(h: usize, w: usize, ids: &[u8]) -> LabelMap {
        LabelMap::new(h, w, ids.to_vec()).unwrap()
    }

    fn image(h: usize, w: usize, base: f32) -> Image {
        Image::new(h, w, (0..3 * h * w).map(|i| base + i as f32 * 0.01).collect()).unwrap()
    }

    fn pseudo(l: LabelMap) -> PseudoLabel {
        let n = l.ids.len();
        PseudoLabel {
            ids: l,
            confidence: vec![1.0; n],
        }
    }

    #[test]
    fn softmax_confidence_example() {
        let logits = Tensor::new([3, 1, 1], vec![2.0, 0.0, -1.0]).unwrap();
        let p = pseudo_label_from_logits(&logits).unwrap();
        assert_eq!(p.ids.ids, [0]);
        let e = std::f64::consts::E;
        let want = e * e / (e * e + 1.0 + 1.0 / e);
        assert!((p.confidence[0] - want).abs() < 1e-15);
        assert!((p.confidence[0] - 0.844).abs() < 1e-3);
    }

    #[test]
    fn single_class_and_ties() {
        let p = pseudo_label_from_logits(&Tensor::new([1, 1, 2], vec![-3.0, 7.0]).unwrap()).unwrap();
        assert_eq!(p.ids.ids, [0, 0]);
        assert_eq!(p.confidence, [1.0, 1.0]);
        let p = pseudo_label_from_logits(&Tensor::new([3, 1, 1], vec![0.5, 1.5, 1.5]).unwrap()).unwrap();
        assert_eq!(p.ids.ids, [1]);
    }

    #[test]
    fn selection_rounds_up() {
        let mut rng = seeded(0);
        let l = label(1, 4, &[1, 3, 5, 255]);
        for _ in 0..20 {
            let s = select_classes(&l, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert!(s.iter().all(|c| [1, 3, 5].contains(c)));
        }
        assert_eq!(select_classes(&label(1, 2, &[4, 4]), &mut rng).unwrap(), [4]);
        let err = select_classes(&label(1, 2, &[255, 255]), &mut rng).unwrap_err();
        assert!(err.to_string().contains("no mixable classes"));
    }

    #[test]
    fn selection_is_seeded() {
        let l = label(2, 4, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let a = select_classes(&l, &mut seeded(5)).unwrap();
        let b = select_classes(&l, &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn mask_examples() {
        let l = label(2, 2, &[1, 2, 2, 3]);
        assert_eq!(build_mix_mask(&l, &[2]).bits, [false, true, true, false]);
        assert_eq!(build_mix_mask(&l, &[]).count(), 0);
        assert_eq!(build_mix_mask(&l, &[1, 2, 3]).count(), 4);
        assert_eq!(build_mix_mask(&label(1, 2, &[255, 1]), &[1, 255]).bits, [false, true]);
    }

    #[test]
    fn extreme_masks_select_one_side() {
        let src = DomainSample::new("s", image(2, 3, 0.0), Some(label(2, 3, &[1, 1, 2, 2, 0, 0]))).unwrap();
        let tgt = image(2, 3, 0.5);
        let ps = pseudo(label(2, 3, &[3, 3, 3, 3, 3, 3]));
        let none = mix_pair(&src, "a", &tgt, &ps, &MixMask::filled(2, 3, false)).unwrap();
        assert_eq!((none.image, none.label), (tgt.clone(), ps.ids.clone()));
        let all = mix_pair(&src, "a", &tgt, &ps, &MixMask::filled(2, 3, true)).unwrap();
        assert_eq!((&all.image, Some(&all.label)), (&src.image, src.label.as_ref()));
        assert_eq!(all.source_domain, "a");
        assert!(mix_pair(&src, "a", &image(3, 2, 0.0), &ps, &MixMask::filled(2, 3, true)).is_err());
    }

    #[test]
    fn threshold_ignores_unsure_target_pixels() {
        let src = DomainSample::new("s", image(1, 3, 0.0), Some(label(1, 3, &[1, 2, 255]))).unwrap();
        let tgt = DomainSample::new("t", image(1, 3, 0.5), None).unwrap();
        let ps = PseudoLabel {
            ids: label(1, 3, &[0, 0, 0]),
            confidence: vec![0.9, 0.2, 0.3],
        };
        let batch = mix_batch(&[("a", &src)], &tgt, &ps, &mut seeded(1), Some(0.5)).unwrap();
        let s = &batch.samples[0];
        for p in 0..3 {
            let want = if s.mask.bits[p] {
                src.label.as_ref().unwrap().ids[p]
            } else if ps.confidence[p] < 0.5 {
                255
            } else {
                0
            };
            assert_eq!(s.label.ids[p], want);
        }
    }
}
