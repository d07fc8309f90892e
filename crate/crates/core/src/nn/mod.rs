//! Minimal differentiable building blocks on top of `candle-core`.
//!
//! All spatial tensors are channels-last `(B, H, W, C)`. Matrix products are
//! expressed as plain 2-D or contiguous 3-D matmuls; convolutions use an
//! explicit im2col so that their gradients stay on the matmul path.

mod kernels;
mod layers;
mod ops;
mod params;

pub use layers::{scaled_dot_attention as attention, Attention, Conv2d, LayerNorm, Linear, Mlp};
pub use ops::{
    avg_pool, bias_add, gelu, im2col, interpolation_matrix, layer_norm, resize_bilinear, sigmoid,
    softmax_last_dim, space_to_depth, tile_hw,
};
pub use params::{ParamStore, Scope};

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Per-forward-pass state: train/eval switch, the dropout stream, and an
/// optional recorder for attention matrices.
pub struct ForwardCtx {
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    trace: Option<RefCell<Vec<Tensor>>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            trace: None,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
            trace: None,
        }
    }

    /// Record every attention-weight matrix produced during the pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub(crate) fn record_attention(&self, weights: &Tensor) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push(weights.detach());
        }
    }

    pub fn attention_maps(&self) -> Vec<Tensor> {
        self.trace
            .as_ref()
            .map(|t| t.borrow().clone())
            .unwrap_or_default()
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Scalar tensor value as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
