use candle_core::{DType, Device, Tensor};

use super::kernels::{BiasAdd, Gelu, Im2Col, LayerNorm, Softmax};
use crate::error::{Error, Result};

/// Softmax along the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// `x + b` with `b` broadcast over every axis but the last.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(b, BiasAdd)?)
}

/// Normalize over the last axis, then scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(gamma, beta, LayerNorm { eps })?)
}

/// Row-stochastic bilinear interpolation weights mapping `input` samples to
/// `output` samples with half-pixel centres (the `align_corners = false`
/// convention), shape `(output, input)`.
pub fn interpolation_matrix(output: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

fn interp_tensor(output: usize, input: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interpolation_matrix(output, input), (output, input), device)?
        .to_dtype(dtype)?)
}

/// Bilinear resize of a `(B, H, W, C)` tensor, separable and expressed as
/// two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    let mut y = x.clone();
    if out_h != h {
        let ry = interp_tensor(out_h, h, x.dtype(), x.device())?;
        let cols = y.permute((1, 0, 2, 3))?.contiguous()?.reshape((h, b * w * c))?;
        y = ry
            .matmul(&cols)?
            .reshape((out_h, b, w, c))?
            .permute((1, 0, 2, 3))?;
    }
    if out_w != w {
        let rx = interp_tensor(out_w, w, x.dtype(), x.device())?;
        let cols = y.permute((2, 0, 1, 3))?.contiguous()?.reshape((w, b * out_h * c))?;
        y = rx
            .matmul(&cols)?
            .reshape((out_w, b, out_h, c))?
            .permute((1, 2, 0, 3))?;
    }
    Ok(y.contiguous()?)
}

/// Non-overlapping `k×k` mean pooling of a `(B, H, W, C)` tensor.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if k == 1 {
        return Ok(x.clone());
    }
    if h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!("{h}×{w} not divisible by pool size {k}")));
    }
    let y = x
        .reshape((b, h / k, k, w / k, k * c))?
        .sum(2)?
        .reshape((b, h / k, w / k, k, c))?
        .sum(3)?;
    Ok((y / (k * k) as f64)?)
}

/// Fold each `r×r` spatial block into channels: `(B, H, W, C)` to
/// `(B, H/r, W/r, r·r·C)` with channel order `(dy, dx, c)`.
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if r == 1 {
        return Ok(x.clone());
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!("{h}×{w} not divisible by factor {r}")));
    }
    Ok(x.reshape((b * (h / r), r, w / r, r * c))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, h / r, w / r, r * r * c))?)
}

/// Repeat a `(B, h, w, C)` tensor into an `n×n` grid of tiles.
pub fn tile_hw(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 1 {
        return Ok(x.clone());
    }
    let row = Tensor::cat(&vec![x.clone(); n], 2)?;
    Ok(Tensor::cat(&vec![row; n], 1)?)
}

/// `k×k` patches with zero padding `k/2` (stride 1): `(B, H, W, C)` to
/// `(B, H, W, k·k·C)` with channel order `(dy, dx, c)`.
pub fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    if k % 2 == 0 {
        return Err(Error::shape("im2col kernel size must be odd"));
    }
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Im2Col { k })?)
}
