//! Analytic gradients. The operator is bilinear in features and anchor
//! weights, so both gradients reuse the per-anchor gather of the forward pass.
//!
//! Reductions run in a fixed order independent of the thread count: centroids
//! are processed in blocks of [`BLOCK`], weight gradients are summed within a
//! block in ascending centroid order and block partials are added in block
//! order; feature gradients are scattered serially in ascending centroid
//! order, then stored neighbor order.

use rayon::prelude::*;

use super::forward::{separable_spatial, AnchorAccumulator};
use super::kernel::for_each_enclosing;
use super::{check_features, AnchorGrid, DeformableFilter, SeparableFilter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pointcloud::PointCloud;
use crate::scalar::Scalar;
use crate::spatial::NeighborTable;

const BLOCK: usize = 64;

/// Gradients of a scalar loss through [`super::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGrads<S> {
    /// `M×D'`, one row per source point.
    pub features: Matrix<S>,
    /// Same layout as [`DeformableFilter::weights`].
    pub weights: Vec<S>,
    /// Length `D`; the sum of the upstream rows whether or not the filter has a bias.
    pub bias: Vec<S>,
}

/// Gradients of a scalar loss through [`super::forward_separable`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableGrads<S> {
    pub features: Matrix<S>,
    pub spatial: Vec<S>,
    pub pointwise: Matrix<S>,
    pub bias: Vec<S>,
}

fn check_upstream<S: Scalar>(upstream: &Matrix<S>, neighbors: &NeighborTable<S>, dout: usize) -> Result<()> {
    if upstream.rows() != neighbors.num_queries() || upstream.cols() != dout {
        return Err(Error::shape(format!(
            "upstream gradient is {}x{}, expected {}x{dout}",
            upstream.rows(),
            upstream.cols(),
            neighbors.num_queries()
        )));
    }
    Ok(())
}

fn column_sums<S: Scalar>(m: &Matrix<S>) -> Vec<S> {
    let mut s = vec![S::zero(); m.cols()];
    for row in m.iter_rows() {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

/// Shared block-parallel driver.
///
/// `accumulate(q, acc, partial)` adds centroid `q`'s contribution to the
/// parameter gradient given its gathered anchors. `project(q, a, out)` writes
/// the `D'`-vector `d h(y_q) / d agg[a]` contracted with the upstream gradient;
/// the feature gradient of neighbor `x` at offset `z` is then
/// `sum_a k(a, z) project(q, a)`.
fn drive<S, A, P>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    grid: &AnchorGrid<S>,
    param_len: usize,
    accumulate: A,
    project: P,
) -> (Vec<S>, Matrix<S>)
where
    S: Scalar,
    A: Fn(usize, &AnchorAccumulator<S>, &mut [S]) + Sync,
    P: Fn(usize, usize, &mut [S]) + Sync,
{
    let din = features.cols();
    let nq = neighbors.num_queries();
    let partials: Vec<(Vec<S>, Vec<S>)> = (0..nq.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let (q0, q1) = (b * BLOCK, ((b + 1) * BLOCK).min(nq));
            let base = neighbors.pair_range(q0).start;
            let pairs = neighbors.pair_range(q1 - 1).end - base;
            let mut acc = AnchorAccumulator::new(grid, din);
            let mut grad = vec![S::zero(); param_len];
            let mut contrib = vec![S::zero(); pairs * din];
            let mut proj = vec![S::zero(); grid.len() * din];
            for q in q0..q1 {
                acc.gather(features, neighbors, q, grid);
                accumulate(q, &acc, &mut grad);
                for &a in acc.touched() {
                    project(q, a, &mut proj[a * din..(a + 1) * din]);
                }
                for (p, z) in neighbors.pair_range(q).zip(neighbors.offsets(q)) {
                    let c = &mut contrib[(p - base) * din..(p - base + 1) * din];
                    for_each_enclosing(z, grid, |a, w| {
                        for (cv, &pv) in c.iter_mut().zip(&proj[a * din..(a + 1) * din]) {
                            *cv += w * pv;
                        }
                    });
                }
            }
            (grad, contrib)
        })
        .collect();

    let mut grad = vec![S::zero(); param_len];
    let mut gf = Matrix::zeros(features.rows(), din);
    let mut q = 0;
    for (partial, contrib) in &partials {
        for (g, &p) in grad.iter_mut().zip(partial) {
            *g += p;
        }
        let base = neighbors.pair_range(q).start;
        let q_end = (q + BLOCK).min(nq);
        for qq in q..q_end {
            for (p, &x) in neighbors.pair_range(qq).zip(neighbors.indices(qq)) {
                let c = &contrib[(p - base) * din..(p - base + 1) * din];
                for (g, &v) in gf.row_mut(x as usize).iter_mut().zip(c) {
                    *g += v;
                }
            }
        }
        q = q_end;
    }
    (grad, gf)
}

pub fn backward<S: Scalar>(
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
    upstream: &Matrix<S>,
) -> Result<DeformGrads<S>> {
    backward_features(cloud.features(), neighbors, filter, upstream)
}

/// Gradients of `sum_q <upstream_q, h(y_q)>` with respect to the features,
/// the anchor weights and the bias.
pub fn backward_features<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
    upstream: &Matrix<S>,
) -> Result<DeformGrads<S>> {
    check_features(features, filter.in_dim(), neighbors)?;
    let (din, dout) = (filter.in_dim(), filter.out_dim());
    check_upstream(upstream, neighbors, dout)?;

    let (weights, gf) = drive(
        features,
        neighbors,
        filter.grid(),
        filter.weights().len(),
        |q, acc, grad| {
            let up = upstream.row(q);
            for &a in acc.touched() {
                let block = &mut grad[a * din * dout..(a + 1) * din * dout];
                for (c, &v) in acc.agg(a).iter().enumerate() {
                    if v == S::zero() {
                        continue;
                    }
                    for (g, &u) in block[c * dout..(c + 1) * dout].iter_mut().zip(up) {
                        *g += v * u;
                    }
                }
            }
        },
        |q, a, out| {
            let up = upstream.row(q);
            let w = filter.anchor_weights(a);
            for (c, o) in out.iter_mut().enumerate() {
                *o = w[c * dout..(c + 1) * dout]
                    .iter()
                    .zip(up)
                    .fold(S::zero(), |s, (&g, &u)| s + g * u);
            }
        },
    );
    Ok(DeformGrads {
        features: gf,
        weights,
        bias: column_sums(upstream),
    })
}

pub fn backward_separable<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &SeparableFilter<S>,
    upstream: &Matrix<S>,
) -> Result<SeparableGrads<S>> {
    let din = filter.in_dim();
    check_features(features, din, neighbors)?;
    check_upstream(upstream, neighbors, filter.out_dim())?;

    let spatial_out = separable_spatial(features, neighbors, filter)?;
    let pointwise = spatial_out.transpose().matmul(upstream)?;
    // d loss / d m, Q×D'
    let gm = upstream.matmul(&filter.pointwise().transpose())?;
    let spatial = filter.spatial();

    let (gs, gf) = drive(
        features,
        neighbors,
        filter.grid(),
        spatial.len(),
        |q, acc, grad| {
            let g = gm.row(q);
            for &a in acc.touched() {
                for ((o, &v), &gc) in grad[a * din..(a + 1) * din].iter_mut().zip(acc.agg(a)).zip(g) {
                    *o += v * gc;
                }
            }
        },
        |q, a, out| {
            let g = gm.row(q);
            for ((o, &s), &gc) in out.iter_mut().zip(&spatial[a * din..(a + 1) * din]).zip(g) {
                *o = s * gc;
            }
        },
    );
    Ok(SeparableGrads {
        features: gf,
        spatial: gs,
        pointwise,
        bias: column_sums(upstream),
    })
}
