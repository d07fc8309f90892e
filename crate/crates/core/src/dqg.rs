//! Dynamic query generator.
//!
//! The coarsest boundary feature is aligned to the pixel-feature width and
//! shrunk to one `H/n × W/n` tile. Every tile of the `n×n` partition of the
//! pixel feature is compared position-by-position against it (cosine), the
//! `N` most similar locations are gathered from the pixel feature, and a
//! learnable term is added.

use std::cmp::Ordering;

use candle_core::{Tensor, D};

use crate::domain::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, tile_hw, to_vec_f64, Mlp, Scope};

/// Denominator floor for the cosine; zero-norm operands yield similarity 0.
const NORM_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct DqgConfig {
    pub n_partition: usize,
    pub num_queries: usize,
}

impl Default for DqgConfig {
    fn default() -> Self {
        Self {
            n_partition: 4,
            num_queries: 5,
        }
    }
}

/// Dense cosine similarity, `(B, H, W)` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub values: Tensor,
    pub partition: usize,
}

impl SimilarityMap {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.values.dims3()?)
    }
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `(B, N, C)` gathered pixel features.
    pub selected: Tensor,
    /// `(N, C)` learnable term.
    pub learnable: Tensor,
    /// `(B, N, C)`: `selected + learnable`.
    pub fused: Tensor,
    /// Per batch element, the `(row, col)` of each selected location.
    pub positions: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct DynamicQueryGenerator {
    cfg: DqgConfig,
    align: Mlp,
    learnable: Tensor,
}

impl DynamicQueryGenerator {
    pub fn new(scope: Scope, cfg: &DqgConfig, boundary_channels: usize, pixel_channels: usize) -> Result<Self> {
        if cfg.n_partition == 0 || cfg.num_queries == 0 {
            return Err(Error::Config("dqg.n_partition and dqg.num_queries must be positive".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            align: Mlp::new(scope.pp("align"), boundary_channels, pixel_channels, pixel_channels)?,
            learnable: scope.normal("learnable", &[cfg.num_queries, pixel_channels], 1.0)?,
        })
    }

    pub fn config(&self) -> &DqgConfig {
        &self.cfg
    }

    pub fn learnable(&self) -> &Tensor {
        &self.learnable
    }

    /// Channel alignment followed by a bilinear resize to one tile.
    pub fn align_boundary_feature(&self, f_int: &FeatureMap) -> Result<FeatureMap> {
        let n = self.cfg.n_partition;
        let (h, w) = (f_int.height(), f_int.width());
        if h < n || w < n {
            return Err(Error::shape(format!(
                "{h}×{w} boundary feature cannot be split into {n}×{n} tiles"
            )));
        }
        let projected = self.align.forward(&f_int.data)?;
        FeatureMap::new(resize_bilinear(&projected, h / n, w / n)?, f_int.level)
    }

    pub fn forward(&self, f_pix: &FeatureMap, f_int: &FeatureMap) -> Result<QuerySet> {
        let aligned = self.align_boundary_feature(f_int)?;
        let s = similarity_map(f_pix, &aligned, self.cfg.n_partition)?;
        let (selected, positions) = select_queries(&s, f_pix, self.cfg.num_queries)?;
        make_queries(selected, &self.learnable, positions)
    }
}

/// Cosine similarity of each pixel feature against the co-located entry of
/// the tiled boundary feature.
pub fn similarity_map(f_pix: &FeatureMap, f_int: &FeatureMap, n: usize) -> Result<SimilarityMap> {
    let (h, w, c) = f_pix.shape();
    let (th, tw, tc) = f_int.shape();
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::shape(format!("{h}×{w} is not divisible into {n}×{n} tiles")));
    }
    if (th, tw) != (h / n, w / n) || tc != c || f_int.batch() != f_pix.batch() {
        return Err(Error::shape(format!(
            "tile feature {th}×{tw}×{tc} does not match {}×{}×{c}",
            h / n,
            w / n
        )));
    }
    let tiled = tile_hw(&f_int.data, n)?;
    let dot = (&f_pix.data * &tiled)?.sum(D::Minus1)?;
    let na = f_pix.data.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = tiled.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = (na * nb)?.clamp(NORM_FLOOR, f64::MAX)?;
    let values = dot.div(&denom)?.clamp(-1.0, 1.0)?;
    Ok(SimilarityMap {
        values,
        partition: n,
    })
}

/// Row-major indices of the `n` largest values; ties go to the smaller index.
pub fn top_n_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx
}

/// Gather the pixel features at the `n` highest-similarity locations. The
/// indices are constants; gradients reach the gathered features only.
pub fn select_queries(
    s: &SimilarityMap,
    f_pix: &FeatureMap,
    n: usize,
) -> Result<(Tensor, Vec<Vec<(usize, usize)>>)> {
    let (b, h, w) = s.dims()?;
    let c = f_pix.channels();
    if (f_pix.batch(), f_pix.height(), f_pix.width()) != (b, h, w) {
        return Err(Error::shape("similarity map and pixel feature differ in shape"));
    }
    if n > h * w {
        return Err(Error::validation(format!(
            "cannot select {n} queries from {h}×{w} = {} locations",
            h * w
        )));
    }
    let values = to_vec_f64(&s.values)?;
    let mut flat = Vec::with_capacity(b * n);
    let mut positions = Vec::with_capacity(b);
    for (bi, map) in values.chunks(h * w).enumerate() {
        let top = top_n_indices(map, n);
        positions.push(top.iter().map(|&i| (i / w, i % w)).collect());
        flat.extend(top.iter().map(|&i| (bi * h * w + i) as u32));
    }
    let index = Tensor::from_vec(flat, b * n, f_pix.data.device())?;
    let gathered = f_pix
        .data
        .reshape((b * h * w, c))?
        .index_select(&index, 0)?
        .reshape((b, n, c))?;
    Ok((gathered, positions))
}

pub fn make_queries(
    selected: Tensor,
    learnable: &Tensor,
    positions: Vec<Vec<(usize, usize)>>,
) -> Result<QuerySet> {
    let (_, n, c) = selected.dims3()?;
    if learnable.dims() != [n, c] {
        return Err(Error::shape(format!(
            "learnable queries {:?} vs selected {n}×{c}",
            learnable.dims()
        )));
    }
    let fused = selected.broadcast_add(learnable)?;
    Ok(QuerySet {
        selected,
        learnable: learnable.clone(),
        fused,
        positions,
    })
}
