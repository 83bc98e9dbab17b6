//! Images, label maps, domain collections and label-id remapping.

pub(crate) mod augment;
mod io;
pub(crate) mod synth;

pub use augment::{hflip, resize_image, resize_label, standard_augment, AugmentationConfig};
pub use io::{load_domain, write_domain};
pub use synth::{synth_generate, DomainShift, SynthSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IGNORE_ID: u8 = 255;

/// The 19 evaluation classes, in train-id order.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Display name for class `id` under a `num_classes` convention.
pub fn class_name(id: usize, num_classes: usize) -> String {
    if num_classes == CITYSCAPES_CLASSES.len() {
        CITYSCAPES_CLASSES[id].to_string()
    } else {
        format!("class{id}")
    }
}

/// A three-channel image stored planar (`[3, H, W]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Data(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Per-pixel class ids; `255` marks ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    /// Checks every id is a valid class or the ignore id.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id != IGNORE_ID && id as usize >= num_classes) {
            Some(id) => Err(Error::Data(format!("label id {id} outside 0..{num_classes} and not {IGNORE_ID}"))),
            None => Ok(()),
        }
    }

    /// Sorted distinct non-ignore ids.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (0..255u8).filter(|&id| seen[id as usize]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub id: String,
    pub image: Image,
    pub label: Option<LabelMap>,
}

impl DomainSample {
    pub fn new(id: impl Into<String>, image: Image, label: Option<LabelMap>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &label {
            if (l.height, l.width) != (image.height, image.width) {
                return Err(Error::Data(format!(
                    "{id}: label {}x{} does not match image {}x{}",
                    l.height, l.width, image.height, image.width
                )));
            }
        }
        Ok(DomainSample { id, image, label })
    }

    pub fn unlabelled(&self) -> DomainSample {
        DomainSample {
            id: self.id.clone(),
            image: self.image.clone(),
            label: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// A named collection of samples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub name: String,
    pub role: Role,
    pub samples: Vec<DomainSample>,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
}

impl DomainSet {
    pub fn source(name: impl Into<String>, samples: Vec<DomainSample>) -> Result<Self> {
        let name = name.into();
        if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
            return Err(Error::Data(format!("source domain {name}: sample {} has no label", s.id)));
        }
        let n = samples.len();
        Ok(DomainSet {
            name,
            role: Role::Source,
            samples,
            n_labelled: n,
            n_unlabelled: 0,
        })
    }

    /// A target domain of which `n_labelled` samples are reserved for
    /// evaluation.
    pub fn target(name: impl Into<String>, samples: Vec<DomainSample>, n_labelled: usize) -> Result<Self> {
        let name = name.into();
        let available = samples.iter().filter(|s| s.label.is_some()).count();
        if n_labelled > available {
            return Err(Error::Data(format!(
                "target domain {name}: {n_labelled} labelled samples requested, {available} available"
            )));
        }
        let n = samples.len();
        Ok(DomainSet {
            name,
            role: Role::Target,
            samples,
            n_labelled,
            n_unlabelled: n - n_labelled,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Randomly reserves `n_labelled` labelled target samples for evaluation
/// and returns the rest, labels stripped, for unsupervised training.
/// Both halves keep the input order.
pub fn split_target(set: &DomainSet, n_labelled: usize, rng: &mut Rng) -> Result<(Vec<DomainSample>, Vec<DomainSample>)> {
    if set.role != Role::Target {
        return Err(Error::contract("split_target", format!("{} is not a target domain", set.name)));
    }
    let mut labelled: Vec<usize> = (0..set.len()).filter(|&i| set.samples[i].label.is_some()).collect();
    if n_labelled > labelled.len() {
        return Err(Error::Data(format!(
            "split_target: {n_labelled} labelled samples requested, {} available",
            labelled.len()
        )));
    }
    labelled.shuffle(rng);
    let mut chosen = vec![false; set.len()];
    for &i in &labelled[..n_labelled] {
        chosen[i] = true;
    }
    let mut eval = Vec::with_capacity(n_labelled);
    let mut train = Vec::with_capacity(set.len() - n_labelled);
    for (s, pick) in set.samples.iter().zip(chosen) {
        if pick {
            eval.push(s.clone());
        } else {
            train.push(s.unlabelled());
        }
    }
    Ok((eval, train))
}

/// Classes a dataset adds on top of the 19-class protocol, and the class
/// each one is merged into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtraClass {
    Van,
    Pickup,
    StreetLight,
    Billboard,
    EgoVehicle,
}

impl ExtraClass {
    pub fn merged_id(self) -> u8 {
        match self {
            ExtraClass::Van => 13,
            ExtraClass::Pickup => 14,
            ExtraClass::StreetLight => 5,
            ExtraClass::Billboard => 7,
            ExtraClass::EgoVehicle => IGNORE_ID,
        }
    }
}

/// An id substitution table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    map: BTreeMap<u8, u8>,
    num_classes: usize,
}

impl RemapTable {
    pub fn new(pairs: &[(u8, u8)], num_classes: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &(from, to) in pairs {
            if to != IGNORE_ID && to as usize >= num_classes {
                return Err(Error::Data(format!("remap target {to} outside 0..{num_classes}")));
            }
            if map.insert(from, to).is_some() {
                return Err(Error::Data(format!("remap source id {from} listed twice")));
            }
        }
        Ok(RemapTable { map, num_classes })
    }

    pub fn identity(num_classes: usize) -> Self {
        RemapTable {
            map: BTreeMap::new(),
            num_classes,
        }
    }

    /// Table merging a dataset's extra classes, given the raw id each one
    /// carries in that dataset.
    pub fn extra_class_merge(raw_ids: &[(ExtraClass, u8)], num_classes: usize) -> Result<Self> {
        let pairs: Vec<(u8, u8)> = raw_ids.iter().map(|&(c, raw)| (raw, c.merged_id())).collect();
        Self::new(&pairs, num_classes)
    }

    pub fn lookup(&self, id: u8) -> u8 {
        self.map.get(&id).copied().unwrap_or(id)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        self.map.iter().map(|(a, b)| (*a, *b))
    }
}

pub fn remap_labels(label: &LabelMap, table: &RemapTable) -> Result<LabelMap> {
    let ids: Vec<u8> = label.ids.iter().map(|&id| table.lookup(id)).collect();
    let out = LabelMap {
        height: label.height,
        width: label.width,
        ids,
    };
    out.validate(table.num_classes)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample(id: &str, labelled: bool) -> DomainSample {
        let label = labelled.then(|| LabelMap::filled(2, 2, 1));
        DomainSample::new(id, Image::filled(2, 2, [0.5; 3]), label).unwrap()
    }

    #[test]
    fn remap_identity_and_substitution() {
        let label = LabelMap::new(2, 2, vec![20, 1, 20, 255]).unwrap();
        let empty = RemapTable::identity(21);
        assert_eq!(remap_labels(&label, &empty).unwrap(), label);

        let table = RemapTable::new(&[(20, 13)], 19).unwrap();
        assert_eq!(remap_labels(&label, &table).unwrap().ids, vec![13, 1, 13, 255]);
    }

    #[test]
    fn remap_rejects_out_of_range_result() {
        let label = LabelMap::new(1, 2, vec![20, 1]).unwrap();
        assert!(remap_labels(&label, &RemapTable::identity(19)).is_err());
        assert!(RemapTable::new(&[(3, 40)], 19).is_err());
        assert!(RemapTable::new(&[(3, 4), (3, 5)], 19).is_err());
    }

    #[test]
    fn extra_classes_merge_into_parents() {
        let table = RemapTable::extra_class_merge(
            &[
                (ExtraClass::Van, 34),
                (ExtraClass::Pickup, 35),
                (ExtraClass::StreetLight, 36),
                (ExtraClass::Billboard, 37),
                (ExtraClass::EgoVehicle, 38),
            ],
            19,
        )
        .unwrap();
        let label = LabelMap::new(1, 5, vec![34, 35, 36, 37, 38]).unwrap();
        assert_eq!(remap_labels(&label, &table).unwrap().ids, vec![13, 14, 5, 7, 255]);
    }

    #[test]
    fn target_split_counts() {
        let samples: Vec<_> = (0..10).map(|i| sample(&format!("t{i}"), true)).collect();
        let set = DomainSet::target("t", samples, 2).unwrap();
        assert_eq!((set.n_labelled, set.n_unlabelled), (2, 8));

        let (eval, train) = split_target(&set, 10, &mut seeded(1)).unwrap();
        assert_eq!((eval.len(), train.len()), (10, 0));
        let (eval, train) = split_target(&set, 0, &mut seeded(1)).unwrap();
        assert_eq!((eval.len(), train.len()), (0, 10));
        assert!(train.iter().all(|s| s.label.is_none()));
        assert!(split_target(&set, 11, &mut seeded(1)).is_err());
    }

    #[test]
    fn source_requires_labels() {
        assert!(DomainSet::source("s", vec![sample("a", true), sample("b", false)]).is_err());
        assert_eq!(DomainSet::source("s", vec![sample("a", true)]).unwrap().n_labelled, 1);
    }

    #[test]
    fn sample_rejects_mismatched_label() {
        let label = LabelMap::filled(3, 2, 0);
        assert!(DomainSample::new("x", Image::filled(2, 2, [0.0; 3]), Some(label)).is_err());
    }
}
