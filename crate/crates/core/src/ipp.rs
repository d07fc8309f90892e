//! Interaction prior predictor: a U-Net-style decoder from the global feature
//! that localizes hand-object contact, plus the contact ground truth and its
//! loss.

use candle_core::{Tensor, D};
use ndarray::Array2;

use crate::domain::{BoundaryMap, Class, FeatureMap, FeaturePyramid, MaskSet};
use crate::encoder::{Backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{gelu, resize_bilinear, sigmoid, Conv2d, Linear, Scope};

/// Probability clamp used by the boundary BCE.
pub const BCE_EPS: f64 = 1e-7;

/// Image side at which [`IppConfig::dilation_radius`] is specified.
pub const REFERENCE_SIZE: usize = 448;

#[derive(Debug, Clone, PartialEq)]
pub struct IppConfig {
    /// Boundary-feature width per pyramid level, finest first.
    pub channels: Vec<usize>,
    pub head_channels: usize,
    /// Dilation radius at [`REFERENCE_SIZE`]; scaled to the working size.
    pub dilation_radius: usize,
}

impl Default for IppConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            head_channels: 16,
            dilation_radius: 3,
        }
    }
}

impl IppConfig {
    /// Radius in pixels for an image of side `size`: proportional to the
    /// reference radius, rounded, at least 1.
    pub fn scaled_radius(&self, size: usize) -> usize {
        let r = (self.dilation_radius as f64 * size as f64 / REFERENCE_SIZE as f64).round() as usize;
        r.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct IppOutput {
    /// `(B, H, W)` contact probabilities at input resolution.
    pub boundary: Tensor,
    /// Pre-sigmoid values of `boundary`.
    pub logits: Tensor,
    /// Boundary-guided features, one per pixel-pyramid level.
    pub features: FeaturePyramid,
}

#[derive(Debug, Clone)]
struct UpStage {
    fuse: Linear,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct InteractionPriorPredictor {
    strides: Vec<usize>,
    channels: Vec<usize>,
    bottom: Conv2d,
    ups: Vec<UpStage>,
    head_conv: Conv2d,
    head_out: Linear,
}

impl InteractionPriorPredictor {
    pub fn new(scope: Scope, enc: &EncoderConfig, cfg: &IppConfig) -> Result<Self> {
        let levels = enc.levels();
        if cfg.channels.len() != levels {
            return Err(Error::Config(format!(
                "ipp.channels has {} entries, encoder has {levels} levels",
                cfg.channels.len()
            )));
        }
        if cfg.channels.iter().any(|&c| c == 0) || cfg.head_channels == 0 {
            return Err(Error::Config("ipp widths must be positive".into()));
        }
        let last = levels - 1;
        let bottom = Conv2d::new(scope.pp("bottom"), enc.global_channels, cfg.channels[last], 3)?;
        let mut ups = Vec::with_capacity(last);
        for l in 0..last {
            let s = scope.pp(format!("up{l}"));
            let c = cfg.channels[l];
            ups.push(UpStage {
                fuse: Linear::new(s.pp("fuse"), cfg.channels[l + 1] + enc.channels[l], c)?,
                conv: Conv2d::new(s.pp("conv"), c, c, 3)?,
            });
        }
        Ok(Self {
            strides: enc.strides.clone(),
            channels: cfg.channels.clone(),
            bottom,
            ups,
            head_conv: Conv2d::new(scope.pp("head_conv"), cfg.channels[0], cfg.head_channels, 3)?,
            head_out: Linear::new(scope.pp("head_out"), cfg.head_channels, 1)?,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Predict the contact map and expose the decoder's per-level features.
    /// The decoder starts from the global feature and climbs one level at a
    /// time, concatenating the encoder stage at each resolution.
    pub fn forward(&self, backbone: &Backbone) -> Result<IppOutput> {
        let levels = self.strides.len();
        if backbone.stages.len() != levels {
            return Err(Error::shape(format!(
                "ipp configured for {levels} levels, backbone has {}",
                backbone.stages.len()
            )));
        }
        let global = &backbone.global.data;
        let (b, gh, gw, _) = global.dims4()?;
        let stride = *self.strides.last().unwrap();
        let (out_h, out_w) = (gh * stride, gw * stride);

        let mut feats: Vec<Option<FeatureMap>> = vec![None; levels];
        let mut x = gelu(&self.bottom.forward(global)?)?;
        feats[levels - 1] = Some(FeatureMap::new(x.clone(), levels - 1)?);
        for l in (0..levels - 1).rev() {
            let skip = &backbone.stages[l];
            let up = resize_bilinear(&x, skip.height(), skip.width())?;
            let cat = Tensor::cat(&[&up, &skip.data], 3)?;
            let stage = &self.ups[l];
            let h = gelu(&stage.fuse.forward(&cat)?)?;
            x = gelu(&stage.conv.forward(&h)?)?;
            feats[l] = Some(FeatureMap::new(x.clone(), l)?);
        }
        let head = gelu(&self.head_conv.forward(&x)?)?;
        let logits = self.head_out.forward(&head)?;
        let logits = resize_bilinear(&logits, out_h, out_w)?.reshape((b, out_h, out_w))?;
        let boundary = sigmoid(&logits)?;
        Ok(IppOutput {
            boundary,
            logits,
            features: FeaturePyramid::new(feats.into_iter().map(|f| f.expect("filled")).collect())?,
        })
    }
}

/// Square-element morphological dilation (side `2·radius + 1`), separable.
pub fn dilate(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.mapv(|v| (v != 0) as u8);
    }
    let (h, w) = mask.dim();
    let mut rows = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]] != 0) as u8;
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|yy| rows[[yy, x]] != 0) as u8;
        }
    }
    out
}

fn union(masks: &MaskSet, classes: &[Class]) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros((masks.height(), masks.width()));
    for &c in classes {
        out.zip_mut_with(&masks.plane(c), |o, &v| *o |= (v != 0) as u8);
    }
    out
}

/// Contact ground truth: `dilate(lh ∪ rh) ∩ dilate(lo ∪ ro ∪ to)`.
pub fn boundary_gt(masks: &MaskSet, radius: usize) -> BoundaryMap {
    let hands = dilate(&union(masks, &[Class::LeftHand, Class::RightHand]), radius);
    let objects = dilate(
        &union(
            masks,
            &[Class::LeftObject, Class::RightObject, Class::TwoHandObject],
        ),
        radius,
    );
    let map = ndarray::Zip::from(&hands)
        .and(&objects)
        .map_collect(|&a, &b| (a & b) as f32);
    BoundaryMap::binary(map).expect("intersection of binary maps is binary")
}

/// Mean binary cross-entropy between probabilities and binary targets of
/// the same shape, probabilities clamped to `[ε, 1 − ε]`.
pub fn bce(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let p = pred.clamp(eps, 1.0 - eps)?;
    let pos = target.mul(&p.log()?)?;
    let neg = target.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// `L_b`: BCE between the predicted contact map and its ground truth.
pub fn boundary_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    bce(pred, gt, BCE_EPS)
}

/// Per-sample boundary loss, `(B,)`, for the batched training path.
pub fn boundary_loss_per_sample(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("boundary prediction/target shape mismatch"));
    }
    let b = pred.dim(0)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let pos = g.mul(&p.log()?)?;
    let neg = g.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MaskSet;
    use crate::encoder::Encoder;
    use crate::nn::{scalar, to_vec_f64, ForwardCtx, ParamStore};
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    /// Brute-force set dilation: a pixel is set if any set pixel lies within
    /// Chebyshev distance `r`.
    fn oracle_dilate(m: &Array2<u8>, r: usize) -> Array2<u8> {
        let (h, w) = m.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut hit = 0;
            for yy in 0..h {
                for xx in 0..w {
                    if m[[yy, xx]] != 0
                        && (yy as isize - y as isize).unsigned_abs() <= r
                        && (xx as isize - x as isize).unsigned_abs() <= r
                    {
                        hit = 1;
                    }
                }
            }
            hit
        })
    }

    #[test]
    fn shapes_and_range_desk_scale() {
        let enc_cfg = EncoderConfig::default();
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let enc = Encoder::new(store.root().pp("enc"), &enc_cfg).unwrap();
        let ipp =
            InteractionPriorPredictor::new(store.root().pp("ipp"), &enc_cfg, &IppConfig::default())
                .unwrap();
        for seed in 0..100u64 {
            let img = Tensor::randn(0f32, 1.0 + seed as f32 * 0.05, (1, 64, 64, 3), &Device::Cpu)
                .unwrap();
            let bb = enc.forward(&img, &ForwardCtx::eval()).unwrap();
            let out = ipp.forward(&bb).unwrap();
            if seed == 0 {
                assert_eq!(bb.global.shape(), (4, 4, 32));
                assert_eq!(out.boundary.dims(), &[1, 64, 64]);
                let sizes: Vec<_> = out
                    .features
                    .levels
                    .iter()
                    .map(|f| (f.height(), f.width()))
                    .collect();
                assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4)]);
            }
            let v = to_vec_f64(&out.boundary).unwrap();
            assert!(v.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn far_apart_masks_have_no_boundary() {
        let mut m = MaskSet::zeros(12, 12);
        m.plane_mut(Class::LeftHand)[[0, 0]] = 1;
        // 2r + 2 = 6 columns apart with r = 2
        m.plane_mut(Class::LeftObject)[[0, 6]] = 1;
        assert!(boundary_gt(&m, 2).map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radius_zero_on_coincident_masks_is_the_mask() {
        let mut m = MaskSet::zeros(5, 5);
        for (y, x) in [(1, 1), (1, 2), (3, 4)] {
            m.plane_mut(Class::RightHand)[[y, x]] = 1;
            m.plane_mut(Class::TwoHandObject)[[y, x]] = 1;
        }
        let b = boundary_gt(&m, 0);
        let expect = m.plane(Class::RightHand).mapv(|v| v as f32);
        assert_eq!(b.map, expect);
    }

    #[test]
    fn adjacent_pixels_match_set_oracle() {
        let mut m = MaskSet::zeros(8, 8);
        m.plane_mut(Class::LeftHand)[[3, 3]] = 1;
        m.plane_mut(Class::LeftObject)[[3, 4]] = 1;
        let got = boundary_gt(&m, 1);
        let hands = oracle_dilate(&m.plane(Class::LeftHand).to_owned(), 1);
        let objs = oracle_dilate(&m.plane(Class::LeftObject).to_owned(), 1);
        let expect = Array2::from_shape_fn((8, 8), |(y, x)| (hands[[y, x]] & objs[[y, x]]) as f32);
        assert_eq!(got.map, expect);
        // the 3×2 band of rows 2..=4, columns 3..=4
        assert_eq!(got.map.iter().filter(|&&v| v == 1.0).count(), 6);
    }

    #[test]
    fn dilation_matches_oracle_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = Array2::from_shape_fn((9, 7), |_| (rng.random::<f64>() < 0.1) as u8);
            for r in 0..4 {
                assert_eq!(dilate(&m, r), oracle_dilate(&m, r));
            }
        }
    }

    #[test]
    fn scaled_radius_defaults() {
        let cfg = IppConfig::default();
        assert_eq!(cfg.scaled_radius(448), 3);
        assert_eq!(cfg.scaled_radius(64), 1);
        assert_eq!(cfg.scaled_radius(896), 6);
    }

    fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        let gt = tensor(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]);
        let l = scalar(&boundary_loss(&gt, &gt).unwrap()).unwrap();
        assert!(l < 1e-6 && l >= 0.0, "{l}");
    }

    #[test]
    fn uniform_half_is_ln2() {
        let gt = tensor(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &[2, 3]);
        let p = tensor(vec![0.5; 6], &[2, 3]);
        let l = scalar(&boundary_loss(&p, &gt).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_summation_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let g: Vec<f64> = (0..64).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
        let mut s = 0.0;
        for (&pi, &gi) in p.iter().zip(&g) {
            let c = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            s -= gi * c.ln() + (1.0 - gi) * (1.0 - c).ln();
        }
        let l = scalar(&boundary_loss(&tensor(p, &[8, 8]), &tensor(g, &[8, 8])).unwrap()).unwrap();
        assert!((l - s / 64.0).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = tensor(vec![0.5; 4], &[2, 2]);
        let b = tensor(vec![0.0; 6], &[2, 3]);
        assert!(matches!(boundary_loss(&a, &b), Err(Error::Shape(_))));
    }
}
