use rayon::prelude::*;

use super::kernel::for_each_enclosing;
use super::{check_features, AnchorGrid, DeformableFilter, SeparableFilter};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::pointcloud::PointCloud;
use crate::scalar::Scalar;
use crate::spatial::NeighborTable;

/// Per-centroid scratch: `agg[a] = sum_x k(a, y - x) f(x)` for every anchor `a`
/// touched by the neighborhood of `y`.
///
/// Since the operator is linear in both the features and the anchor weights,
/// `h(y) = sum_a g(a)^T agg[a]`; gathering per anchor first costs one `D'`
/// axpy per (neighbor, anchor) pair instead of a `D'×D` product.
pub(crate) struct AnchorAccumulator<S> {
    dim: usize,
    agg: Vec<S>,
    seen: Vec<bool>,
    touched: Vec<usize>,
}

impl<S: Scalar> AnchorAccumulator<S> {
    pub(crate) fn new(grid: &AnchorGrid<S>, dim: usize) -> Self {
        Self {
            dim,
            agg: vec![S::zero(); grid.len() * dim],
            seen: vec![false; grid.len()],
            touched: Vec::with_capacity(64),
        }
    }

    /// Gathers the neighborhood of centroid `q`. Anchors are recorded in
    /// first-touch order, which follows the stored neighbor order.
    pub(crate) fn gather(
        &mut self,
        features: &Matrix<S>,
        neighbors: &NeighborTable<S>,
        q: usize,
        grid: &AnchorGrid<S>,
    ) {
        for &a in &self.touched {
            self.seen[a] = false;
        }
        self.touched.clear();
        let d = self.dim;
        let (agg, seen, touched) = (&mut self.agg, &mut self.seen, &mut self.touched);
        for (&x, z) in neighbors.indices(q).iter().zip(neighbors.offsets(q)) {
            let f = features.row(x as usize);
            for_each_enclosing(z, grid, |a, w| {
                let slot = &mut agg[a * d..(a + 1) * d];
                if !seen[a] {
                    seen[a] = true;
                    touched.push(a);
                    slot.iter_mut().for_each(|v| *v = S::zero());
                }
                for (s, &fv) in slot.iter_mut().zip(f) {
                    *s += w * fv;
                }
            });
        }
    }

    pub(crate) fn touched(&self) -> &[usize] {
        &self.touched
    }

    #[inline]
    pub(crate) fn agg(&self, a: usize) -> &[S] {
        &self.agg[a * self.dim..(a + 1) * self.dim]
    }
}

/// Applies the full filter to `neighbors` using the features of the cloud.
pub fn forward<S: Scalar>(
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
) -> Result<Matrix<S>> {
    forward_features(cloud.features(), neighbors, filter)
}

/// `h(y_q) = sum_{x in N(y_q)} ghat(y_q - x)^T f(x) + bias` for every query
/// `q` of the table. Rows are computed in parallel; each row is independent,
/// so the output does not depend on the thread count.
pub fn forward_features<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
) -> Result<Matrix<S>> {
    check_features(features, filter.in_dim(), neighbors)?;
    let (din, dout) = (filter.in_dim(), filter.out_dim());
    let grid = filter.grid();
    let mut out = Matrix::zeros(neighbors.num_queries(), dout);
    out.as_mut_slice()
        .par_chunks_mut(dout)
        .enumerate()
        .for_each_init(
            || AnchorAccumulator::new(grid, din),
            |acc, (q, h)| {
                if let Some(b) = filter.bias() {
                    h.copy_from_slice(b);
                }
                acc.gather(features, neighbors, q, grid);
                for &a in acc.touched() {
                    let w = filter.anchor_weights(a);
                    for (c, &v) in acc.agg(a).iter().enumerate() {
                        if v == S::zero() {
                            continue;
                        }
                        for (hd, &g) in h.iter_mut().zip(&w[c * dout..(c + 1) * dout]) {
                            *hd += v * g;
                        }
                    }
                }
            },
        );
    Ok(out)
}

pub fn forward_separable<S: Scalar>(
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
    filter: &SeparableFilter<S>,
) -> Result<Matrix<S>> {
    forward_separable_features(cloud.features(), neighbors, filter)
}

/// Per-channel spatial aggregation `m_c(y) = sum_x ghat_c(y - x) f_c(x)`
/// followed by `h = pointwise^T m + bias`.
pub fn forward_separable_features<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &SeparableFilter<S>,
) -> Result<Matrix<S>> {
    let spatial = separable_spatial(features, neighbors, filter)?;
    separable_pointwise(&spatial, filter)
}

/// The spatial stage `m` of a separable filter, `Q×D'`.
pub(crate) fn separable_spatial<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &SeparableFilter<S>,
) -> Result<Matrix<S>> {
    let din = filter.in_dim();
    check_features(features, din, neighbors)?;
    let grid = filter.grid();
    let spatial = filter.spatial();
    let mut m = Matrix::zeros(neighbors.num_queries(), din);
    m.as_mut_slice()
        .par_chunks_mut(din)
        .enumerate()
        .for_each_init(
            || AnchorAccumulator::new(grid, din),
            |acc, (q, row)| {
                acc.gather(features, neighbors, q, grid);
                for &a in acc.touched() {
                    let s = &spatial[a * din..(a + 1) * din];
                    for ((r, &v), &w) in row.iter_mut().zip(acc.agg(a)).zip(s) {
                        *r += v * w;
                    }
                }
            },
        );
    Ok(m)
}

pub(crate) fn separable_pointwise<S: Scalar>(spatial: &Matrix<S>, filter: &SeparableFilter<S>) -> Result<Matrix<S>> {
    let mut h = spatial.matmul(filter.pointwise())?;
    if let Some(b) = filter.bias() {
        for q in 0..h.rows() {
            for (v, &bv) in h.row_mut(q).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(h)
}
