use candle_core::{Tensor, D};

use super::ops::{bias_add, gelu, im2col, layer_norm, softmax_last_dim};
use super::{ForwardCtx, Scope};
use crate::error::{Error, Result};

/// Affine map over the last axis: `y = x W + b`, `W` stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(scope: Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[in_dim, out_dim], bound)?,
            bias: Some(scope.uniform("bias", &[out_dim], bound)?),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias(scope: Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[in_dim, out_dim], bound)?,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("linear input is a scalar"))?;
        if last != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, dims
            )));
        }
        let rows = x.elem_count() / last;
        let mut y = x.reshape((rows, last))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = bias_add(&y, b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Stride-1 `k×k` convolution with same padding on `(B, H, W, C)` input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    kernel: usize,
    proj: Linear,
}

impl Conv2d {
    pub fn new(scope: Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            kernel,
            proj: Linear::new(scope, kernel * kernel * in_ch, out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&im2col(x, self.kernel)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(scope: Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", &[dim], 1.0)?,
            beta: scope.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(scope: Scope, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(scope.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(scope.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Multi-head scaled dot-product attention over `(B, N, D)` sequences.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(scope: Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(scope.pp("q"), dim, dim)?,
            k: Linear::new(scope.pp("k"), dim, dim)?,
            v: Linear::new(scope.pp("v"), dim, dim)?,
            out: Linear::new(scope.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let hd = self.dim / self.heads;
        Ok(x.reshape((b, n, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * self.heads, n, hd))?)
    }

    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<Tensor> {
        let (b, nq, _) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let o = scaled_dot_attention(&q, &k, &v, ctx)?;
        let hd = self.dim / self.heads;
        let o = o
            .reshape((b, self.heads, nq, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.dim))?;
        self.out.forward(&o)
    }
}

/// `softmax(Q Kᵀ / √d) V` over contiguous `(B, N, d)` batches.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &ForwardCtx,
) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let kt = k.transpose(1, 2)?.contiguous()?;
    let logits = (q.contiguous()?.matmul(&kt)? / (d as f64).sqrt())?;
    let weights = softmax_last_dim(&logits)?;
    ctx.record_attention(&weights);
    Ok(weights.matmul(&v.contiguous()?)?)
}
