#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use interformer::domain::{labels_to_masks, Class, LabelMap, MaskSet};
use interformer::nn::{to_vec_f64, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller
            let u: f64 = rng.random_range(1e-12..1.0);
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (-2.0 * u.ln()).sqrt() * t.cos()
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn binary(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < p) as u8 as f64).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Random label map where each pixel is background with probability
/// `p_bg`, otherwise a class drawn with the given relative weights.
pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, p_bg: f64, weights: [f64; 5]) -> LabelMap {
    let total: f64 = weights.iter().sum();
    Array2::from_shape_fn((h, w), |_| {
        if rng.random::<f64>() < p_bg {
            return 0;
        }
        let mut r = rng.random::<f64>() * total;
        for (i, &wt) in weights.iter().enumerate() {
            if r < wt {
                return i as u8 + 1;
            }
            r -= wt;
        }
        5
    })
}

pub fn random_masks(rng: &mut impl Rng, h: usize, w: usize) -> MaskSet {
    let p_bg = rng.random_range(0.2..0.95);
    let weights = [0; 5].map(|_| if rng.random::<f64>() < 0.25 { 0.0 } else { rng.random::<f64>() });
    let weights = if weights.iter().sum::<f64>() == 0.0 { [1.0; 5] } else { weights };
    labels_to_masks(&random_labels(rng, h, w, p_bg, weights)).unwrap()
}

pub fn count(m: &MaskSet, c: Class) -> usize {
    let p = m.plane(c);
    let mut n = 0;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if p[[y, x]] == 1 {
                n += 1;
            }
        }
    }
    n
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-6;

/// Fourth-order central difference of `f` at `x` along one coordinate of `var`.
fn central_difference(var: &Var, index: usize, f: &dyn Fn() -> f64) -> f64 {
    let base = to_vec_f64(var.as_tensor()).unwrap();
    let shape = var.as_tensor().dims().to_vec();
    let eval = |delta: f64| {
        let mut v = base.clone();
        v[index] += delta;
        var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        f()
    };
    let h = FD_STEP;
    let d = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
    var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    d
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compare autograd against finite differences for up to `per_var`
/// coordinates of every variable in `vars`.
pub fn grad_check(vars: &[(String, Var)], per_var: usize, loss: &dyn Fn() -> Tensor) -> GradReport {
    let scalar = || loss().to_scalar::<f64>().unwrap();
    let grads = loss().backward().unwrap();
    let mut report = GradReport::default();
    for (name, var) in vars {
        let n = var.as_tensor().elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g).unwrap(),
            None => vec![0.0; n],
        };
        let stride = (n / per_var.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_var) {
            let numeric = central_difference(var, i, &scalar);
            let e = rel_err(analytic[i], numeric, FD_FLOOR);
            report.checked += 1;
            if e > report.max_rel || report.worst.is_empty() {
                report.max_rel = report.max_rel.max(e);
                if e >= report.max_rel {
                    report.worst = format!("{name}[{i}]: autograd {:.6e} vs fd {:.6e}", analytic[i], numeric);
                }
            }
        }
    }
    report
}

pub fn f64_store(seed: u64) -> ParamStore {
    ParamStore::new(seed, DType::F64, Device::Cpu)
}

/// `Σ out ⊙ r` with a fixed random `r`, to project a tensor output onto a scalar.
pub fn project(out: &Tensor, r: &Tensor) -> Tensor {
    (out * r).unwrap().sum_all().unwrap()
}

/// Set-arithmetic contact oracle: a pixel is on the boundary iff some hand
/// pixel and some object pixel both lie within Chebyshev distance `r`.
pub fn boundary_oracle(m: &MaskSet, r: usize) -> Array2<u8> {
    let (h, w) = (m.height(), m.width());
    let near = |classes: &[Class], y: usize, x: usize| {
        classes.iter().any(|&c| {
            let p = m.plane(c);
            (0..h).any(|yy| {
                (0..w).any(|xx| p[[yy, xx]] == 1 && yy.abs_diff(y) <= r && xx.abs_diff(x) <= r)
            })
        })
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        (near(&[Class::LeftHand, Class::RightHand], y, x)
            && near(&[Class::LeftObject, Class::RightObject, Class::TwoHandObject], y, x)) as u8
    })
}

/// The illusion predicate spelled out on raw counts.
pub fn illusion_oracle(m: &MaskSet, tau: usize) -> bool {
    let lh = count(m, Class::LeftHand);
    let rh = count(m, Class::RightHand);
    let lo = count(m, Class::LeftObject);
    let ro = count(m, Class::RightObject);
    let to = count(m, Class::TwoHandObject);
    (lo > 0 && lh <= tau) || (ro > 0 && rh <= tau) || (to > 0 && !(lh > tau && rh > tau))
}

/// Closed-form co-occurrence penalty on raw counts.
pub fn coco_oracle(hard: [usize; 5], soft: [f64; 5], tau: usize) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let l = hard[0] > tau;
    let r = hard[1] > tau;
    (1.0 - ind(l)) * soft[2] + (1.0 - ind(r)) * soft[3] + (1.0 - ind(r && l)) * soft[4]
}
