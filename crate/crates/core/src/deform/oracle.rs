//! Reference evaluation: the double sum over neighbors and all `k³` anchors,
//! with no cell lookup and no reordering.

use super::kernel::trilinear_weight;
use super::{check_features, DeformableFilter};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::pointcloud::PointCloud;
use crate::scalar::Scalar;
use crate::spatial::NeighborTable;

pub fn oracle_forward<S: Scalar>(
    cloud: &PointCloud<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
) -> Result<Matrix<S>> {
    oracle_forward_features(cloud.features(), neighbors, filter)
}

pub fn oracle_forward_features<S: Scalar>(
    features: &Matrix<S>,
    neighbors: &NeighborTable<S>,
    filter: &DeformableFilter<S>,
) -> Result<Matrix<S>> {
    check_features(features, filter.in_dim(), neighbors)?;
    let (din, dout) = (filter.in_dim(), filter.out_dim());
    let grid = filter.grid();
    let unit = grid.unit();
    let anchors: Vec<_> = (0..grid.len()).map(|a| grid.position(a)).collect();
    let mut out = Matrix::zeros(neighbors.num_queries(), dout);
    let mut ghat = vec![S::zero(); din * dout];
    for q in 0..neighbors.num_queries() {
        let h = out.row_mut(q);
        if let Some(b) = filter.bias() {
            h.copy_from_slice(b);
        }
        for (&x, z) in neighbors.indices(q).iter().zip(neighbors.offsets(q)) {
            ghat.iter_mut().for_each(|v| *v = S::zero());
            for (a, anchor) in anchors.iter().enumerate() {
                let w = trilinear_weight(z, anchor, &unit);
                for (g, &wa) in ghat.iter_mut().zip(filter.anchor_weights(a)) {
                    *g += w * wa;
                }
            }
            let f = features.row(x as usize);
            for (c, &fc) in f.iter().enumerate() {
                for (hd, &g) in h.iter_mut().zip(&ghat[c * dout..(c + 1) * dout]) {
                    *hd += fc * g;
                }
            }
        }
    }
    Ok(out)
}
