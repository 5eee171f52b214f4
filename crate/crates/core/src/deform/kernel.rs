use smallvec::SmallVec;

use super::{AnchorGrid, DeformableFilter};
use crate::matrix::Matrix;
use crate::scalar::{Scalar, Vec3};

/// Nonzero `(anchor index, weight)` pairs for one offset.
pub type AnchorWeights<S> = SmallVec<[(usize, S); 8]>;

#[inline]
fn hat<S: Scalar>(z: S, anchor: S, a: S) -> S {
    (S::one() - (z - anchor).abs() / a).max(S::zero())
}

/// Trilinear interpolation weight `prod_d max(1 - |z_d - anchor_d| / a_d, 0)`.
#[inline]
pub fn trilinear_weight<S: Scalar>(z: &Vec3<S>, anchor: &Vec3<S>, a: &Vec3<S>) -> S {
    hat(z[0], anchor[0], a[0]) * hat(z[1], anchor[1], a[1]) * hat(z[2], anchor[2], a[2])
}

/// The anchors with a nonzero trilinear weight at `z`, in ascending anchor
/// index, with weights bit-identical to [`trilinear_weight`].
///
/// Only the lattice cell containing `z` can contribute, so at most two
/// candidates per dimension survive.
pub fn enclosing_anchors<S: Scalar>(z: &Vec3<S>, grid: &AnchorGrid<S>) -> AnchorWeights<S> {
    let mut out = AnchorWeights::new();
    for_each_enclosing(z, grid, |a, w| out.push((a, w)));
    out
}

/// Calls `visit(anchor, weight)` for each entry of [`enclosing_anchors`], in
/// the same order, without collecting them.
#[inline]
pub(crate) fn for_each_enclosing<S: Scalar>(z: &Vec3<S>, grid: &AnchorGrid<S>, mut visit: impl FnMut(usize, S)) {
    let h = grid.half();
    let k = grid.k() as i64;
    let reach = S::lit((h + 2) as f64);
    let unit = grid.unit();

    // Per-dimension (lattice index, 1D factor); the extra candidates on each
    // side absorb rounding in the floor.
    let mut axes = [[(0i64, S::zero()); 4]; 3];
    let mut lens = [0usize; 3];
    for d in 0..3 {
        let u = z[d] / unit[d];
        if !(u.abs() < reach) {
            return;
        }
        let j0 = u.floor().to_i64().expect("bounded lattice coordinate");
        for j in (j0 - 1).max(-h)..=(j0 + 2).min(h) {
            let f = hat(z[d], grid.coord(d, j), unit[d]);
            if f > S::zero() {
                axes[d][lens[d]] = (j + h, f);
                lens[d] += 1;
            }
        }
        if lens[d] == 0 {
            return;
        }
    }
    for &(i, fx) in &axes[0][..lens[0]] {
        for &(j, fy) in &axes[1][..lens[1]] {
            let row = (i * k + j) * k;
            for &(l, fz) in &axes[2][..lens[2]] {
                let w = fx * fy * fz;
                if w > S::zero() {
                    visit((row + l) as usize, w);
                }
            }
        }
    }
}

/// The deformed filter `sum_a k(a, z) g(a)` at offset `z`, as a `D'×D` matrix.
pub fn interpolate_filter<S: Scalar>(z: &Vec3<S>, filter: &DeformableFilter<S>) -> Matrix<S> {
    let mut m = Matrix::zeros(filter.in_dim(), filter.out_dim());
    for (a, w) in enclosing_anchors(z, filter.grid()) {
        for (o, &g) in m.as_mut_slice().iter_mut().zip(filter.anchor_weights(a)) {
            *o += w * g;
        }
    }
    m
}
