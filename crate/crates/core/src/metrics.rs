//! Segmentation quality metrics and the interaction-illusion rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Class, MaskSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ipp::REFERENCE_SIZE;

fn check_shapes(pred: &MaskSet, gt: &MaskSet) -> Result<()> {
    if pred.masks.dim() != gt.masks.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.masks.dim(),
            gt.masks.dim()
        )));
    }
    Ok(())
}

/// `(|p ∩ g|, |p ∪ g|, |g|)` for one class plane.
fn overlap(pred: &MaskSet, gt: &MaskSet, class: Class) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    let mut truth = 0;
    for (&p, &g) in pred.plane(class).iter().zip(gt.plane(class).iter()) {
        let (p, g) = (p > 0, g > 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
        truth += g as usize;
    }
    (inter, union, truth)
}

/// Intersection over union; `None` when both masks are empty.
pub fn iou(pred: &MaskSet, gt: &MaskSet, class: Class) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let (i, u, _) = overlap(pred, gt, class);
    Ok((u > 0).then(|| i as f64 / u as f64))
}

/// Per-class recall `|p ∩ g| / |g|`; `None` when the ground truth is empty.
pub fn accuracy(pred: &MaskSet, gt: &MaskSet, class: Class) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let (i, _, g) = overlap(pred, gt, class);
    Ok((g > 0).then(|| i as f64 / g as f64))
}

/// True when an object is predicted without the hand(s) it depends on.
pub fn is_illusion(pred: &MaskSet, tau: usize) -> bool {
    let c = pred.counts();
    let left = c[Class::LeftHand.index()] > tau;
    let right = c[Class::RightHand.index()] > tau;
    (c[Class::LeftObject.index()] > 0 && !left)
        || (c[Class::RightObject.index()] > 0 && !right)
        || (c[Class::TwoHandObject.index()] > 0 && !(left && right))
}

pub fn illusion_rate(predictions: &[MaskSet], tau: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::validation("illusion rate of an empty prediction list"));
    }
    let n = predictions.iter().filter(|p| is_illusion(p, tau)).count();
    Ok(n as f64 / predictions.len() as f64)
}

/// Hand presence threshold for an `h×w` image, scaled from the training τ
/// by area relative to 448×448 and floored at 1.
pub fn scaled_presence_tau(tau: usize, height: usize, width: usize) -> usize {
    let area = (height * width) as f64 / (REFERENCE_SIZE * REFERENCE_SIZE) as f64;
    ((tau as f64 * area).floor() as usize).max(1)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    /// `null` where a class never occurs in prediction or truth.
    pub per_class_iou: [Option<f64>; NUM_CLASSES],
    pub miou: Option<f64>,
    pub per_class_acc: [Option<f64>; NUM_CLASSES],
    pub macc: Option<f64>,
    pub illusion_rate: f64,
    pub illusion_tau: usize,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<usize>,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Dataset-level accumulator: intersections and unions are summed over all
/// samples before dividing.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    tau: usize,
    inter: [usize; NUM_CLASSES],
    union: [usize; NUM_CLASSES],
    truth: [usize; NUM_CLASSES],
    illusions: usize,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(illusion_tau: usize) -> Self {
        Self {
            tau: illusion_tau,
            inter: [0; NUM_CLASSES],
            union: [0; NUM_CLASSES],
            truth: [0; NUM_CLASSES],
            illusions: 0,
            samples: 0,
        }
    }

    pub fn add(&mut self, pred: &MaskSet, gt: &MaskSet) -> Result<()> {
        check_shapes(pred, gt)?;
        for class in Class::ALL {
            let (i, u, g) = overlap(pred, gt, class);
            self.inter[class.index()] += i;
            self.union[class.index()] += u;
            self.truth[class.index()] += g;
        }
        self.illusions += is_illusion(pred, self.tau) as usize;
        self.samples += 1;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn finish(&self, name: impl Into<String>) -> Result<MetricReport> {
        if self.samples == 0 {
            return Err(Error::validation("no samples were evaluated"));
        }
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let per_class_iou: [Option<f64>; NUM_CLASSES] =
            std::array::from_fn(|k| ratio(self.inter[k], self.union[k]));
        let per_class_acc: [Option<f64>; NUM_CLASSES] =
            std::array::from_fn(|k| ratio(self.inter[k], self.truth[k]));
        Ok(MetricReport {
            name: name.into(),
            miou: mean_defined(&per_class_iou),
            macc: mean_defined(&per_class_acc),
            per_class_iou,
            per_class_acc,
            illusion_rate: self.illusions as f64 / self.samples as f64,
            illusion_tau: self.tau,
            sample_count: self.samples,
            parameter_count: None,
            config: BTreeMap::new(),
        })
    }
}
