use mmuda_core::data::{DomainSample, Image, LabelMap};
use mmuda_core::mdms::{build_mix_mask, mix_batch, mix_pair, PseudoLabel};
use mmuda_core::rng::seeded;
use proptest::prelude::*;

pub fn distinct_image(h: usize, w: usize, offset: f32) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|i| offset + i as f32).collect()).unwrap()
}

pub fn pseudo_of(ids: Vec<u8>, h: usize, w: usize) -> PseudoLabel {
    PseudoLabel {
        confidence: vec![1.0; ids.len()],
        ids: LabelMap::new(h, w, ids).unwrap(),
    }
}

/// Elementwise select written directly from the definition.
pub fn reference(src: &Image, src_ids: &[u8], tgt: &Image, tgt_ids: &[u8], selected: &[u8]) -> (Vec<f32>, Vec<u8>) {
    let plane = src_ids.len();
    let take = |p: usize| src_ids[p] != 255 && selected.contains(&src_ids[p]);
    let mut data = vec![0.0; 3 * plane];
    for c in 0..3 {
        for p in 0..plane {
            data[c * plane + p] = if take(p) { src.data[c * plane + p] } else { tgt.data[c * plane + p] };
        }
    }
    let ids = (0..plane).map(|p| if take(p) { src_ids[p] } else { tgt_ids[p] }).collect();
    (data, ids)
}

/// Compares `mix_pair` with the reference on every 2×2 label map over
/// `C ≤ 3` classes (plus ignore) and every class subset; returns the
/// number of cases checked.
pub fn exhaustive_two_by_two() -> usize {
    let src_img = distinct_image(2, 2, 0.0);
    let tgt_img = distinct_image(2, 2, 100.0);
    let mut cases = 0;
    for c in 1..=3u8 {
        let values: Vec<u8> = (0..c).chain([255]).collect();
        let v = values.len();
        for code in 0..v.pow(4) {
            let ids: Vec<u8> = (0..4).map(|p| values[code / v.pow(p as u32) % v]).collect();
            let src = DomainSample::new("s", src_img.clone(), Some(LabelMap::new(2, 2, ids.clone()).unwrap())).unwrap();
            let tgt_ids: Vec<u8> = ids.iter().map(|&i| if i == 255 { 0 } else { (i + 1) % c }).collect();
            let pseudo = pseudo_of(tgt_ids.clone(), 2, 2);
            for subset in 0..(1u32 << c) {
                let selected: Vec<u8> = (0..c).filter(|k| subset >> k & 1 == 1).collect();
                let mask = build_mix_mask(src.label.as_ref().unwrap(), &selected);
                let out = mix_pair(&src, "s", &tgt_img, &pseudo, &mask).unwrap();
                let (data, want_ids) = reference(&src_img, &ids, &tgt_img, &tgt_ids, &selected);
                assert_eq!(out.image.data, data);
                assert_eq!(out.label.ids, want_ids);
                cases += 1;
            }
        }
    }
    cases
}

pub type Instance = (usize, usize, usize, Vec<Vec<u8>>, u64);

/// `(h, w, K, K source label maps, seed)` with roughly 10% ignore pixels.
pub fn instance() -> impl Strategy<Value = Instance> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, k)| {
        let label = proptest::collection::vec(prop_oneof![9 => 0u8..6, 1 => Just(255u8)], h * w);
        (Just(h), Just(w), Just(k), proptest::collection::vec(label, k), any::<u64>())
    })
}

/// Provenance partition, mask/label consistency, ⌈n/2⌉ selection and
/// batch size for one mixed batch.
pub fn batch_properties((h, w, k, labels, seed): Instance) -> Result<(), TestCaseError> {
    prop_assume!(labels.iter().all(|l| l.iter().any(|&id| id != 255)));
    let sources: Vec<DomainSample> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            DomainSample::new(format!("s{i}"), distinct_image(h, w, 1000.0 * (i + 1) as f32), Some(LabelMap::new(h, w, l.clone()).unwrap())).unwrap()
        })
        .collect();
    let names: Vec<String> = (0..k).map(|i| format!("dom{i}")).collect();
    let pairs: Vec<(&str, &DomainSample)> = names.iter().map(String::as_str).zip(sources.iter()).collect();
    let target = DomainSample::new("t", distinct_image(h, w, 0.0), None).unwrap();
    let pseudo = pseudo_of((0..h * w).map(|p| (p % 5) as u8).collect(), h, w);
    let batch = mix_batch(&pairs, &target, &pseudo, &mut seeded(seed), None).unwrap();
    prop_assert_eq!(batch.samples.len(), k);
    prop_assert_eq!(&batch.target_id, "t");
    let plane = h * w;
    for (s, src) in batch.samples.iter().zip(&sources) {
        let src_ids = &src.label.as_ref().unwrap().ids;
        let present: std::collections::BTreeSet<u8> = src_ids.iter().copied().filter(|&i| i != 255).collect();
        let selected: std::collections::BTreeSet<u8> =
            (0..plane).filter(|&p| s.mask.bits[p]).map(|p| src_ids[p]).collect();
        prop_assert_eq!(selected.len(), present.len().div_ceil(2));
        for p in 0..plane {
            let from_src = (0..3).all(|c| s.image.data[c * plane + p] == src.image.data[c * plane + p]);
            let from_tgt = (0..3).all(|c| s.image.data[c * plane + p] == target.image.data[c * plane + p]);
            // provenance partition: exactly one side, never blended
            prop_assert!(from_src != from_tgt);
            prop_assert_eq!(from_src, s.mask.bits[p]);
            prop_assert_eq!(s.mask.bits[p], src_ids[p] != 255 && selected.contains(&src_ids[p]));
            let want = if s.mask.bits[p] { src_ids[p] } else { pseudo.ids.ids[p] };
            prop_assert_eq!(s.label.ids[p], want);
        }
    }
    Ok(())
}
