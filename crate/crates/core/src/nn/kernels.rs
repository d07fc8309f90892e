//! CPU kernels with hand-written backward passes for the ops whose
//! composed-graph gradients are too slow.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn dims4(layout: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

fn im2col_impl<T: Copy + Default>(src: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let kc = k * k * c;
    let mut dst = vec![T::default(); b * h * w * kc];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let out = ((n * h + y) * w + x) * kc;
                for dy in 0..k {
                    let yy = y + dy;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = x + dx;
                        if xx < p || xx - p >= w {
                            continue;
                        }
                        let s = ((n * h + yy - p) * w + xx - p) * c;
                        let d = out + (dy * k + dx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    dst
}

fn col2im_impl<T: Copy + Default + AddAssign>(src: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let kc = k * k * c;
    let mut dst = vec![T::default(); b * h * w * c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let inp = ((n * h + y) * w + x) * kc;
                for dy in 0..k {
                    let yy = y + dy;
                    if yy < p || yy - p >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = x + dx;
                        if xx < p || xx - p >= w {
                            continue;
                        }
                        let d = ((n * h + yy - p) * w + xx - p) * c;
                        let s = inp + (dy * k + dx) * c;
                        for i in 0..c {
                            dst[d + i] += src[s + i];
                        }
                    }
                }
            }
        }
    }
    dst
}

/// `(B, H, W, C)` → `(B, H, W, k·k·C)` zero-padded patches.
pub(crate) struct Im2Col {
    pub k: usize,
}

/// Adjoint of [`Im2Col`]: scatter-add patches back onto the grid.
pub(crate) struct Col2Im {
    pub k: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims4(layout)?;
        let k = self.k;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(contiguous(v, layout)?, b, h, w, c, k)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(contiguous(v, layout)?, b, h, w, c, k)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, Shape::from((b, h, w, k * k * c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im { k: self.k })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, kc) = dims4(layout)?;
        let k = self.k;
        let c = kc / (k * k);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(contiguous(v, layout)?, b, h, w, c, k)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(contiguous(v, layout)?, b, h, w, c, k)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col { k: self.k })?))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) struct Gelu;

/// `(x, dy) ↦ dy · gelu'(x)`.
struct GeluGrad;

fn gelu_fwd<T: Copy>(x: &[T], to: impl Fn(T) -> f64, from: impl Fn(f64) -> T) -> Vec<T> {
    x.iter()
        .map(|&v| {
            let v = to(v);
            let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
            from(0.5 * v * (1.0 + u.tanh()))
        })
        .collect()
}

fn gelu_bwd<T: Copy>(x: &[T], g: &[T], to: impl Fn(T) -> f64, from: impl Fn(f64) -> T) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &d)| {
            let v = to(v);
            let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
            from(to(d) * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
        })
        .collect()
}

fn f32_gelu(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| {
            let u = SQRT_2_OVER_PI as f32 * (v + GELU_C as f32 * v * v * v);
            0.5 * v * (1.0 + fast_tanh(u))
        })
        .collect()
}

fn f32_gelu_bwd(x: &[f32], g: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(g)
        .map(|(&v, &d)| {
            let u = SQRT_2_OVER_PI as f32 * (v + GELU_C as f32 * v * v * v);
            let t = fast_tanh(u);
            let du = SQRT_2_OVER_PI as f32 * (1.0 + 3.0 * GELU_C as f32 * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}

#[inline]
fn fast_tanh(u: f32) -> f32 {
    let u = u.clamp(-9.0, 9.0);
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(f32_gelu(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(gelu_fwd(contiguous(v, layout)?, |a| a, |a| a)),
            _ => candle_core::bail!("gelu supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(f32_gelu_bwd(contiguous(x, l1)?, contiguous(g, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(gelu_bwd(contiguous(x, l1)?, contiguous(g, l2)?, |a| a, |a| a))
            }
            _ => candle_core::bail!("gelu grad supports matching f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

trait Elem: Copy + Default + Into<f64> + Send + Sync + 'static {
    fn of(v: f64) -> Self;
}

impl Elem for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    fn of(v: f64) -> Self {
        v
    }
}

fn last_dim(layout: &Layout) -> candle_core::Result<usize> {
    match layout.shape().dims().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => candle_core::bail!("kernel needs a non-empty last axis"),
    }
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $l)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $l)?)),
            _ => candle_core::bail!("kernel supports f32 and f64"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            _ => candle_core::bail!("kernel supports matching f32 or f64"),
        }
    };
}

macro_rules! dispatch3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            _ => candle_core::bail!("kernel supports matching f32 or f64"),
        }
    };
}

/// `x + b` with `b` broadcast along every axis but the last.
pub(crate) struct BiasAdd;

/// Sum over every axis but the last.
struct ColumnSum;

fn bias_add<T: Elem + std::ops::Add<Output = T>>(x: &[T], b: &[T]) -> Vec<T> {
    let n = b.len();
    let mut y = x.to_vec();
    for row in y.chunks_mut(n) {
        for (v, &o) in row.iter_mut().zip(b) {
            *v = *v + o;
        }
    }
    y
}

fn column_sum<T: Elem>(x: &[T], n: usize) -> Vec<T> {
    let mut acc = vec![0f64; n];
    for row in x.chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.into();
        }
    }
    acc.into_iter().map(T::of).collect()
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        if l2.shape().dims() != [n] {
            candle_core::bail!("bias shape {:?} does not match last axis {n}", l2.shape());
        }
        Ok((dispatch2!(s1, l1, s2, l2, bias_add), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op1_no_bwd(&ColumnSum)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(layout)?;
        Ok((dispatch1!(storage, layout, |v| column_sum(v, n)), Shape::from(n)))
    }
}

/// Softmax along the last axis.
pub(crate) struct Softmax;

/// `(y, dy) ↦ y ⊙ (dy − Σ y·dy)` row-wise.
struct SoftmaxGrad;

fn softmax_rows<T: Elem>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![0f64; n];
    for row in x.chunks(n) {
        let max = row.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = (v.into() - max).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|&b| T::of(b / sum)));
    }
    out
}

fn softmax_grad<T: Elem>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a.into() * b.into()).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| T::of(a.into() * (b.into() - dot))));
    }
    out
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(layout)?;
        Ok((dispatch1!(storage, layout, |v| softmax_rows(v, n)), layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        Ok((dispatch2!(s1, l1, s2, l2, |a, b| softmax_grad(a, b, n)), l1.shape().clone()))
    }
}

/// Layer normalization over the last axis with affine `(gamma, beta)`.
pub(crate) struct LayerNorm {
    pub eps: f64,
}

/// `(x, gamma, dy) ↦ dx`.
struct LayerNormInputGrad {
    eps: f64,
}

/// `(x, dy) ↦ [dgamma; dbeta]` as a `(2, C)` tensor.
struct LayerNormParamGrad {
    eps: f64,
}

fn row_stats<T: Elem>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v.into()).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v.into() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_fwd<T: Elem>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let n = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let (mean, rstd) = row_stats(row, eps);
        out.extend(
            row.iter()
                .zip(gamma.iter().zip(beta))
                .map(|(&v, (&g, &b))| T::of((v.into() - mean) * rstd * g.into() + b.into())),
        );
    }
    out
}

fn layer_norm_dx<T: Elem>(x: &[T], gamma: &[T], g: &[T], eps: f64) -> Vec<T> {
    let n = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = vec![0f64; n];
    let mut dxhat = vec![0f64; n];
    for (row, grow) in x.chunks(n).zip(g.chunks(n)) {
        let (mean, rstd) = row_stats(row, eps);
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            xhat[i] = (row[i].into() - mean) * rstd;
            dxhat[i] = grow[i].into() * gamma[i].into();
            s1 += dxhat[i];
            s2 += dxhat[i] * xhat[i];
        }
        let (m1, m2) = (s1 / n as f64, s2 / n as f64);
        out.extend((0..n).map(|i| T::of(rstd * (dxhat[i] - m1 - xhat[i] * m2))));
    }
    out
}

fn layer_norm_dparams<T: Elem>(x: &[T], g: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut dgamma = vec![0f64; n];
    let mut dbeta = vec![0f64; n];
    for (row, grow) in x.chunks(n).zip(g.chunks(n)) {
        let (mean, rstd) = row_stats(row, eps);
        for i in 0..n {
            let d = grow[i].into();
            dgamma[i] += d * (row[i].into() - mean) * rstd;
            dbeta[i] += d;
        }
    }
    dgamma.into_iter().chain(dbeta).map(T::of).collect()
}

impl CustomOp3 for LayerNorm {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        if l2.shape().dims() != [n] || l3.shape().dims() != [n] {
            candle_core::bail!("layer norm parameters must have shape [{n}]");
        }
        let eps = self.eps;
        let out = dispatch3!(s1, l1, s2, l2, s3, l3, |a, b, c| layer_norm_fwd(a, b, c, eps));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let x = x.contiguous()?;
        let grad = grad.contiguous()?;
        let dx = x.apply_op3_no_bwd(&gamma.contiguous()?, &grad, &LayerNormInputGrad { eps: self.eps })?;
        let dp = x.apply_op2_no_bwd(&grad, &LayerNormParamGrad { eps: self.eps })?;
        Ok((Some(dx), Some(dp.get(0)?), Some(dp.get(1)?)))
    }
}

impl CustomOp3 for LayerNormInputGrad {
    fn name(&self) -> &'static str {
        "layer-norm-dx"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let eps = self.eps;
        let out = dispatch3!(s1, l1, s2, l2, s3, l3, |a, b, c| layer_norm_dx(a, b, c, eps));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for LayerNormParamGrad {
    fn name(&self) -> &'static str {
        "layer-norm-dparams"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        let eps = self.eps;
        let out = dispatch2!(s1, l1, s2, l2, |a, b| layer_norm_dparams(a, b, n, eps));
        Ok((out, Shape::from((2, n))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> = <x, col2im(y)>
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 2), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (2, 3, 4, 18), &Device::Cpu).unwrap();
        let lhs = (x.apply_op1(Im2Col { k: 3 }).unwrap() * &y).unwrap().sum_all().unwrap();
        let rhs = (y.apply_op1(Col2Im { k: 3 }).unwrap() * &x).unwrap().sum_all().unwrap();
        let (l, r) = (lhs.to_scalar::<f64>().unwrap(), rhs.to_scalar::<f64>().unwrap());
        assert!((l - r).abs() < 1e-10);
    }

    #[test]
    fn gelu_matches_reference_and_its_gradient() {
        let v: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.2).collect();
        let x = Var::from_tensor(&Tensor::new(v.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let y = x.as_tensor().apply_op1(Gelu).unwrap();
        let reference = x.as_tensor().gelu().unwrap();
        let diff = (y.clone() - reference).unwrap().abs().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (i, &xi) in v.iter().enumerate() {
            let h = 1e-6;
            let f = |a: f64| {
                let u = SQRT_2_OVER_PI * (a + GELU_C * a * a * a);
                0.5 * a * (1.0 + u.tanh())
            };
            let fd = (f(xi + h) - f(xi - h)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "{xi}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn f32_gelu_close_to_f64() {
        let v: Vec<f32> = (-40..=40).map(|i| i as f32 * 0.25).collect();
        let y = f32_gelu(&v);
        let r = gelu_fwd(&v, |a| a as f64, |a| a as f32);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn reference_layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        use candle_core::D;
        let mean = x.mean_keepdim(D::Minus1).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let n = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        n.broadcast_mul(g).unwrap().broadcast_add(b).unwrap()
    }

    #[test]
    fn fused_ops_match_composed_graphs() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 4, 7), &dev).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1f64, 0.3, 7, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.3, 7, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 7), &dev).unwrap();
        let cases: Vec<(Tensor, Tensor)> = vec![
            (
                x.apply_op3(g.as_tensor(), b.as_tensor(), LayerNorm { eps: 1e-5 }).unwrap(),
                reference_layer_norm(&x, &g, &b),
            ),
            (
                x.apply_op2(b.as_tensor(), BiasAdd).unwrap(),
                x.broadcast_add(&b).unwrap(),
            ),
            (
                x.apply_op1(Softmax).unwrap(),
                {
                    let e = x.exp().unwrap();
                    e.broadcast_div(&e.sum_keepdim(candle_core::D::Minus1).unwrap()).unwrap()
                },
            ),
        ];
        for (fused, reference) in cases {
            assert!(max_abs(&fused, &reference) < 1e-12);
            let gf = (&fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
            let gr = (&reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &g, &b] {
                match (gf.get(v.as_tensor()), gr.get(v.as_tensor())) {
                    (Some(a), Some(r)) => assert!(max_abs(a, r) < 1e-10),
                    (None, None) => {}
                    (a, r) => panic!("gradient presence differs: {} vs {}", a.is_some(), r.is_some()),
                }
            }
        }
    }
}
