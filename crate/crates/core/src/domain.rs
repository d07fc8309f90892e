//! Shared semantic types: the five-way label taxonomy, dense masks, boundary
//! maps and batched feature maps.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Number of foreground categories.
pub const NUM_CLASSES: usize = 5;

/// Label value used for background pixels.
pub const BACKGROUND: u8 = 0;

/// Foreground categories in label order (`label = index + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    LeftHand,
    RightHand,
    LeftObject,
    RightObject,
    TwoHandObject,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::LeftHand,
        Class::RightHand,
        Class::LeftObject,
        Class::RightObject,
        Class::TwoHandObject,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(index: usize) -> Option<Class> {
        Self::ALL.get(index).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Class::LeftHand => "lh",
            Class::RightHand => "rh",
            Class::LeftObject => "lo",
            Class::RightObject => "ro",
            Class::TwoHandObject => "to",
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, Class::LeftHand | Class::RightHand)
    }

    /// The class after a horizontal mirror: handedness swaps.
    pub fn mirrored(self) -> Class {
        match self {
            Class::LeftHand => Class::RightHand,
            Class::RightHand => Class::LeftHand,
            Class::LeftObject => Class::RightObject,
            Class::RightObject => Class::LeftObject,
            Class::TwoHandObject => Class::TwoHandObject,
        }
    }
}

/// Per-pixel class labels, `0` = background and `1..=5` = [`Class::label`].
pub type LabelMap = Array2<u8>;

pub fn validate_labels(labels: &LabelMap) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::validation("label map is empty"));
    }
    if let Some(((y, x), v)) = labels
        .indexed_iter()
        .find(|(_, &v)| v as usize > NUM_CLASSES)
    {
        return Err(Error::validation(format!(
            "label {v} at ({y}, {x}) outside 0..={NUM_CLASSES}"
        )));
    }
    Ok(())
}

/// A normalized RGB image with its dense ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `H×W×3`, already normalized.
    pub pixels: Array3<f32>,
    pub labels: LabelMap,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, labels: LabelMap) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::shape(format!("image must be H×W×3, got {h}×{w}×{c}")));
        }
        if labels.dim() != (h, w) {
            return Err(Error::shape(format!(
                "label map {:?} does not match image {h}×{w}",
                labels.dim()
            )));
        }
        validate_labels(&labels)?;
        Ok(Self {
            id: id.into(),
            pixels,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn masks(&self) -> MaskSet {
        labels_to_masks(&self.labels).expect("labels validated at construction")
    }
}

/// Stack image pixels into a `(B, H, W, 3)` tensor.
pub fn batch_pixels(samples: &[&ImageSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}×{w} and {}×{} images",
                s.height(),
                s.width()
            )));
        }
        data.extend(s.pixels.iter().copied());
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// Dense binary masks, one plane per [`Class`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    /// `5×H×W`, entries in `{0, 1}`.
    pub masks: Array3<u8>,
}

impl MaskSet {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            masks: Array3::zeros((NUM_CLASSES, height, width)),
        }
    }

    pub fn from_array(masks: Array3<u8>) -> Result<Self> {
        if masks.dim().0 != NUM_CLASSES {
            return Err(Error::shape(format!(
                "mask set needs {NUM_CLASSES} planes, got {}",
                masks.dim().0
            )));
        }
        if masks.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask entries must be 0 or 1"));
        }
        Ok(Self { masks })
    }

    pub fn height(&self) -> usize {
        self.masks.dim().1
    }

    pub fn width(&self) -> usize {
        self.masks.dim().2
    }

    pub fn plane(&self, class: Class) -> ndarray::ArrayView2<'_, u8> {
        self.masks.index_axis(Axis(0), class.index())
    }

    pub fn plane_mut(&mut self, class: Class) -> ndarray::ArrayViewMut2<'_, u8> {
        self.masks.index_axis_mut(Axis(0), class.index())
    }

    pub fn count(&self, class: Class) -> usize {
        self.plane(class).iter().filter(|&&v| v != 0).count()
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        Class::ALL.map(|c| self.count(c))
    }
}

/// Split a label map into one binary plane per class.
pub fn labels_to_masks(labels: &LabelMap) -> Result<MaskSet> {
    validate_labels(labels)?;
    let (h, w) = labels.dim();
    let mut out = MaskSet::zeros(h, w);
    for ((y, x), &v) in labels.indexed_iter() {
        if v != BACKGROUND {
            out.masks[[v as usize - 1, y, x]] = 1;
        }
    }
    Ok(out)
}

/// Inverse of [`labels_to_masks`]. Overlapping planes are rejected.
pub fn masks_to_labels(masks: &MaskSet) -> Result<LabelMap> {
    let (h, w) = (masks.height(), masks.width());
    let mut labels = LabelMap::zeros((h, w));
    for class in Class::ALL {
        for ((y, x), &v) in masks.plane(class).indexed_iter() {
            if v == 0 {
                continue;
            }
            let slot = &mut labels[[y, x]];
            if *slot != BACKGROUND {
                return Err(Error::validation(format!(
                    "masks overlap at ({y}, {x}): {} and {}",
                    Class::ALL[*slot as usize - 1].short_name(),
                    class.short_name()
                )));
            }
            *slot = class.label();
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    Probability,
    Binary,
}

/// Hand-object contact map, either predicted probabilities or binary truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap {
    pub map: Array2<f32>,
    pub mode: BoundaryMode,
}

impl BoundaryMap {
    pub fn binary(map: Array2<f32>) -> Result<Self> {
        if map.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation("binary boundary values must be 0 or 1"));
        }
        Ok(Self {
            map,
            mode: BoundaryMode::Binary,
        })
    }

    pub fn probability(map: Array2<f32>) -> Result<Self> {
        if map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::validation("boundary probabilities must lie in [0, 1]"));
        }
        Ok(Self {
            map,
            mode: BoundaryMode::Probability,
        })
    }

    /// `(1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.map.dim();
        let data: Vec<f32> = self.map.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, mode: BoundaryMode) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let map = Array2::from_shape_vec((h, w), data).map_err(|e| Error::shape(e.to_string()))?;
        match mode {
            BoundaryMode::Binary => Self::binary(map),
            BoundaryMode::Probability => Self::probability(map),
        }
    }
}

/// A batched channels-last feature map `(B, H, W, C)` at one pyramid level.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub level: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(format!(
                "feature map must be (B, H, W, C), got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data, level })
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    /// `(H, W, C)` without the batch axis.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self
            .data
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

/// Multi-scale features ordered finest to coarsest.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        for pair in levels.windows(2) {
            if pair[1].height() > pair[0].height() || pair[1].width() > pair[0].width() {
                return Err(Error::shape(format!(
                    "pyramid level {} ({}×{}) is finer than level {} ({}×{})",
                    pair[1].level,
                    pair[1].height(),
                    pair[1].width(),
                    pair[0].level,
                    pair[0].height(),
                    pair[0].width()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &FeatureMap {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &FeatureMap {
        self.levels.last().expect("non-empty pyramid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn all_zero_labels_give_empty_masks() {
        let m = labels_to_masks(&LabelMap::zeros((4, 5))).unwrap();
        assert!(m.masks.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_pixel_lands_in_one_plane() {
        let mut labels = LabelMap::zeros((3, 3));
        labels[[1, 2]] = 3;
        let m = labels_to_masks(&labels).unwrap();
        assert_eq!(m.plane(Class::LeftObject)[[1, 2]], 1);
        assert_eq!(m.masks.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn plane_counts_match_histogram() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let labels = LabelMap::from_shape_fn((8, 8), |_| rng.random_range(0..=5u8));
        let mut hist = [0usize; 6];
        for &v in labels.iter() {
            hist[v as usize] += 1;
        }
        let m = labels_to_masks(&labels).unwrap();
        for c in Class::ALL {
            assert_eq!(m.count(c), hist[c.label() as usize]);
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut labels = LabelMap::zeros((2, 2));
        labels[[0, 1]] = 6;
        assert!(matches!(labels_to_masks(&labels), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_masks_give_background() {
        let l = masks_to_labels(&MaskSet::zeros(3, 4)).unwrap();
        assert!(l.iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let mut m = MaskSet::zeros(2, 2);
        m.plane_mut(Class::LeftHand)[[0, 0]] = 1;
        m.plane_mut(Class::RightHand)[[0, 0]] = 1;
        assert!(matches!(masks_to_labels(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn mirrored_is_involution() {
        for c in Class::ALL {
            assert_eq!(c.mirrored().mirrored(), c);
        }
    }

    #[test]
    fn pyramid_rejects_finer_later_level() {
        let d = Device::Cpu;
        let a = FeatureMap::new(Tensor::zeros((1, 4, 4, 2), DType::F32, &d).unwrap(), 0).unwrap();
        let b = FeatureMap::new(Tensor::zeros((1, 8, 8, 2), DType::F32, &d).unwrap(), 1).unwrap();
        assert!(FeaturePyramid::new(vec![a, b]).is_err());
    }

    proptest! {
        #[test]
        fn labels_round_trip(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = LabelMap::from_shape_fn((h, w), |_| rng.random_range(0..=5u8));
            let masks = labels_to_masks(&labels).unwrap();
            let total: usize = masks.counts().iter().sum();
            prop_assert_eq!(total, labels.iter().filter(|&&v| v != 0).count());
            prop_assert_eq!(masks_to_labels(&masks).unwrap(), labels);
        }
    }
}
