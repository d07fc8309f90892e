//! Training objectives: the conditional co-occurrence penalty, the standard
//! mask/class losses and their weighted total.

use candle_core::{DType, Tensor, D};

use crate::domain::{Class, MaskSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ipp::BCE_EPS;
use crate::nn::{scalar, sigmoid, to_vec_f64};

pub const DICE_EPS: f64 = 1e-6;

/// Predicted pixel extent per class: hard counts of pixels above the
/// presence threshold and soft counts (sums of mask values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCounts {
    pub hard: [usize; NUM_CLASSES],
    pub soft: [f64; NUM_CLASSES],
}

impl PixelCounts {
    pub fn hard(&self, c: Class) -> usize {
        self.hard[c.index()]
    }

    pub fn soft(&self, c: Class) -> f64 {
        self.soft[c.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_co: f64,
    pub lambda_cls: f64,
    pub lambda_dic: f64,
    pub lambda_ce: f64,
    /// Hand presence threshold in pixels.
    pub tau: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_b: 1.0,
            lambda_co: 1.0,
            lambda_cls: 1.0,
            lambda_dic: 5.0,
            lambda_ce: 5.0,
            tau: 100,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_b,
            self.lambda_co,
            self.lambda_cls,
            self.lambda_dic,
            self.lambda_ce,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("loss.tau must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar loss values, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossComponents {
    pub boundary: f64,
    pub coco: f64,
    pub cls: f64,
    pub dice: f64,
    pub ce: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.boundary, self.coco, self.cls, self.dice, self.ce]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossComponents {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "b={:.5} co={:.5} cls={:.5} dic={:.5} ce={:.5}",
            self.boundary, self.coco, self.cls, self.dice, self.ce
        )
    }
}

/// `λ_b·L_b + λ_co·L_co + λ_cls·L_cls + λ_dic·L_dic + λ_ce·L_ce`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::validation(format!("non-finite loss component: {c}")));
    }
    Ok(w.lambda_b * c.boundary
        + w.lambda_co * c.coco
        + w.lambda_cls * c.cls
        + w.lambda_dic * c.dice
        + w.lambda_ce * c.ce)
}

/// Count pixels of a `(K, H, W)` composed-mask tensor.
pub fn pixel_counts(composed: &Tensor, presence_threshold: f64) -> Result<PixelCounts> {
    let (k, h, w) = composed.dims3()?;
    if k != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} planes, got {k}")));
    }
    let v = to_vec_f64(composed)?;
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::validation("composed mask values must lie in [0, 1]"));
    }
    let mut hard = [0usize; NUM_CLASSES];
    let mut soft = [0f64; NUM_CLASSES];
    for (c, plane) in v.chunks(h * w).enumerate() {
        hard[c] = plane.iter().filter(|&&p| p > presence_threshold).count();
        soft[c] = plane.iter().sum();
    }
    Ok(PixelCounts { hard, soft })
}

/// Per-class multipliers on the soft counts: 1 where the object class's
/// prerequisite hand(s) are absent (hard count ≤ τ), else 0. Hands are never
/// penalized.
pub fn coco_gates(hard: &[usize; NUM_CLASSES], tau: usize) -> [f64; NUM_CLASSES] {
    let left = hard[Class::LeftHand.index()] > tau;
    let right = hard[Class::RightHand.index()] > tau;
    let mut g = [0.0; NUM_CLASSES];
    g[Class::LeftObject.index()] = (!left) as u8 as f64;
    g[Class::RightObject.index()] = (!right) as u8 as f64;
    g[Class::TwoHandObject.index()] = (!(left && right)) as u8 as f64;
    g
}

/// `L_co = L_left + L_right + L_two` for one image.
pub fn coco_loss(counts: &PixelCounts, tau: usize) -> f64 {
    let g = coco_gates(&counts.hard, tau);
    g.iter().zip(&counts.soft).map(|(a, b)| a * b).sum()
}

/// Differentiable co-occurrence loss over a `(B, K, H, W)` batch, averaged
/// over images. Gates come from hard counts and carry no gradient; the soft
/// counts do. With `normalize`, soft counts are divided by `H·W`.
pub fn coco_loss_batch(
    composed: &Tensor,
    tau: usize,
    presence_threshold: f64,
    normalize: bool,
) -> Result<Tensor> {
    let (b, k, h, w) = composed.dims4()?;
    if k != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} planes, got {k}")));
    }
    let flat = composed.reshape((b, k, h * w))?;
    let values = to_vec_f64(&flat)?;
    let mut gates = Vec::with_capacity(b * k);
    for img in values.chunks(k * h * w) {
        let mut hard = [0usize; NUM_CLASSES];
        for (c, plane) in img.chunks(h * w).enumerate() {
            hard[c] = plane.iter().filter(|&&p| p > presence_threshold).count();
        }
        gates.extend(coco_gates(&hard, tau));
    }
    let gates = Tensor::from_vec(gates, (b, k), composed.device())?.to_dtype(composed.dtype())?;
    let mut soft = flat.sum(D::Minus1)?;
    if normalize {
        soft = (soft / (h * w) as f64)?;
    }
    Ok((soft.mul(&gates)?.sum_all()? / b as f64)?)
}

/// `1 − 2·Σ(p·g) / (Σp + Σg + ε)` over all elements.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("dice: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let inter = pred.mul(gt)?.sum_all()?;
    let denom = ((pred.sum_all()? + gt.sum_all()?)? + DICE_EPS)?;
    Ok(((inter * 2.0)?.div(&denom)?.neg()? + 1.0)?)
}

/// Element-wise binary cross-entropy on logits, `max(x,0) − x·y + ln(1+e^{−|x|})`.
fn bce_with_logits_elementwise(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - logits.mul(gt)?)? + softplus)?)
}

/// Mean per-pixel BCE between mask logits and a binary target.
pub fn ce_mask_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(format!("ce: {:?} vs {:?}", logits.dims(), gt.dims())));
    }
    Ok(bce_with_logits_elementwise(logits, gt)?.mean_all()?)
}

/// Mean categorical cross-entropy of `(…, N, K+1)` class distributions
/// against one target index per query row.
pub fn cls_loss(class_scores: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let cols = class_scores.dim(D::Minus1)?;
    let rows = class_scores.elem_count() / cols;
    if rows != targets.len() {
        return Err(Error::shape(format!("{rows} score rows vs {} targets", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= cols) {
        return Err(Error::validation(format!("target class {t} out of range")));
    }
    let idx = Tensor::from_vec(targets.to_vec(), (rows, 1), class_scores.device())?;
    let picked = class_scores
        .reshape((rows, cols))?
        .gather(&idx, 1)?
        .clamp(BCE_EPS, 1.0)?;
    Ok(picked.log()?.neg()?.mean_all()?)
}

/// Fixed query↔class assignment: query `i < K` targets class `i` if that class
/// appears in the ground truth, otherwise (and for every `i ≥ K`) no-object.
pub fn query_targets(gt: &[&MaskSet], num_queries: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(gt.len() * num_queries);
    for m in gt {
        let counts = m.counts();
        for i in 0..num_queries {
            let t = if i < NUM_CLASSES && counts[i] > 0 { i } else { NUM_CLASSES };
            out.push(t as u32);
        }
    }
    out
}

/// Batched training targets.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `(B, K, H, W)` binary masks.
    pub masks: Tensor,
    /// `(B, K)` 1 where the class occurs.
    pub present: Tensor,
    pub present_count: usize,
    /// `(B, H, W)` binary boundary truth.
    pub boundary: Tensor,
    /// Per-query class indices, row-major `(B, N)`.
    pub query_classes: Vec<u32>,
}

impl Targets {
    pub fn new(gt: &[&MaskSet], boundary: &[Tensor], num_queries: usize, dtype: DType) -> Result<Self> {
        let first = gt.first().ok_or_else(|| Error::validation("empty batch"))?;
        let (h, w) = (first.height(), first.width());
        let b = gt.len();
        let mut masks = Vec::with_capacity(b * NUM_CLASSES * h * w);
        let mut present = Vec::with_capacity(b * NUM_CLASSES);
        for m in gt {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape("targets differ in size"));
            }
            masks.extend(m.masks.iter().map(|&v| v as f32));
            present.extend(m.counts().iter().map(|&c| (c > 0) as u8 as f32));
        }
        let present_count = present.iter().filter(|&&p| p > 0.0).count();
        let device = boundary
            .first()
            .map(|t| t.device().clone())
            .unwrap_or(candle_core::Device::Cpu);
        Ok(Self {
            masks: Tensor::from_vec(masks, (b, NUM_CLASSES, h, w), &device)?.to_dtype(dtype)?,
            present: Tensor::from_vec(present, (b, NUM_CLASSES), &device)?.to_dtype(dtype)?,
            present_count,
            boundary: Tensor::cat(boundary, 0)?.to_dtype(dtype)?,
            query_classes: query_targets(gt, num_queries),
        })
    }
}

/// Dice and mask BCE for the first `K` queries against their assigned
/// classes, averaged over (image, class) pairs where the class is present.
pub fn matched_mask_losses(mask_logits: &Tensor, targets: &Targets) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = mask_logits.dims4()?;
    let logits = mask_logits.narrow(1, 0, NUM_CLASSES)?.reshape((b, NUM_CLASSES, h * w))?;
    let gt = targets.masks.reshape((b, NUM_CLASSES, h * w))?;
    if targets.present_count == 0 {
        let z = (logits.sum_all()? * 0.0)?;
        return Ok((z.clone(), z));
    }
    let probs = sigmoid(&logits)?;
    let inter = probs.mul(&gt)?.sum(D::Minus1)?;
    let denom = ((probs.sum(D::Minus1)? + gt.sum(D::Minus1)?)? + DICE_EPS)?;
    let dice = ((inter * 2.0)?.div(&denom)?.neg()? + 1.0)?;
    let ce = bce_with_logits_elementwise(&logits, &gt)?.mean(D::Minus1)?;
    let n = targets.present_count as f64;
    let dice = (dice.mul(&targets.present)?.sum_all()? / n)?;
    let ce = (ce.mul(&targets.present)?.sum_all()? / n)?;
    Ok((dice, ce))
}

pub fn to_f64(t: &Tensor) -> Result<f64> {
    scalar(t)
}
