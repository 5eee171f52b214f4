//! Deformable-filter convolution.
//!
//! Filters are stored at a `k×k×k` lattice of anchors centered on the origin of
//! offset space. The filter seen by a neighbor at offset `z = y - x` is the
//! trilinear interpolation of the anchor weights at `z`, so only the (at most
//! eight) anchors of the lattice cell containing `z` contribute.

mod backward;
mod forward;
mod kernel;
mod oracle;

pub use backward::{backward, backward_features, backward_separable, DeformGrads, SeparableGrads};
pub use forward::{forward, forward_features, forward_separable, forward_separable_features};
pub use kernel::{enclosing_anchors, interpolate_filter, trilinear_weight, AnchorWeights};
pub use oracle::{oracle_forward, oracle_forward_features};

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal, SeededRng};
use crate::scalar::{Scalar, Vec3};

/// Default neighbor cap.
pub const DEFAULT_NEIGHBOR_CAP: usize = 16;
/// Default anchor spacing in meters.
pub const DEFAULT_UNIT: f64 = 0.2;

/// Anchor lattice `{(i, j, l) * a : i, j, l in -(k-1)/2 ..= (k-1)/2}`.
///
/// Anchor `(i, j, l)` has flat index `((i + h) * k + (j + h)) * k + (l + h)`
/// with `h = (k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid<S> {
    k: usize,
    unit: Vec3<S>,
}

impl<S: Scalar> AnchorGrid<S> {
    pub fn new(k: usize, unit: Vec3<S>) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::arg(format!("anchor count per dimension must be odd, got {k}")));
        }
        if !unit.iter().all(|&a| a > S::zero() && a.is_finite()) {
            return Err(Error::arg("anchor unit lengths must be positive and finite"));
        }
        Ok(Self { k, unit })
    }

    pub fn cubic(k: usize, unit: S) -> Result<Self> {
        Self::new(k, [unit; 3])
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn half(&self) -> i64 {
        (self.k as i64 - 1) / 2
    }

    #[inline]
    pub fn unit(&self) -> Vec3<S> {
        self.unit
    }

    /// Number of anchors, `k³`.
    #[inline]
    pub fn len(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center_index(&self) -> usize {
        self.len() / 2
    }

    /// Signed lattice coordinates of anchor `idx`.
    #[inline]
    pub fn lattice(&self, idx: usize) -> [i64; 3] {
        let k = self.k;
        let h = self.half();
        [
            (idx / (k * k)) as i64 - h,
            ((idx / k) % k) as i64 - h,
            (idx % k) as i64 - h,
        ]
    }

    /// Flat index of lattice point `(i, j, l)`, if it is on the grid.
    #[inline]
    pub fn index_of(&self, lattice: [i64; 3]) -> Option<usize> {
        let h = self.half();
        if lattice.iter().any(|c| c.abs() > h) {
            return None;
        }
        let k = self.k as i64;
        Some((((lattice[0] + h) * k + (lattice[1] + h)) * k + (lattice[2] + h)) as usize)
    }

    /// Coordinate of lattice index `j` along dimension `d`.
    #[inline]
    pub fn coord(&self, d: usize, j: i64) -> S {
        S::lit(j as f64) * self.unit[d]
    }

    /// Anchor position in meters.
    #[inline]
    pub fn position(&self, idx: usize) -> Vec3<S> {
        let l = self.lattice(idx);
        [self.coord(0, l[0]), self.coord(1, l[1]), self.coord(2, l[2])]
    }

    /// `|((k + 1) / 2) * a|`: every offset farther than this from the origin
    /// has a zero deformed filter.
    pub fn support_radius(&self) -> S {
        let s = S::lit(((self.k + 1) / 2) as f64);
        self.unit.iter().map(|&a| (s * a) * (s * a)).sum::<S>().sqrt()
    }

    /// Whether `z` lies strictly inside the convex hull of the anchors.
    pub fn strictly_inside_hull(&self, z: &Vec3<S>) -> bool {
        let h = S::lit(self.half() as f64);
        (0..3).all(|d| z[d].abs() < h * self.unit[d])
    }
}

/// Full filter: one `D'×D` matrix per anchor, plus an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableFilter<S> {
    grid: AnchorGrid<S>,
    in_dim: usize,
    out_dim: usize,
    /// Layout `[anchor][input channel][output channel]`.
    weights: Vec<S>,
    bias: Option<Vec<S>>,
}

fn check_dims(in_dim: usize, out_dim: usize) -> Result<()> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::arg("channel dimensions must be positive"));
    }
    Ok(())
}

fn check_finite<S: Scalar>(what: &str, v: &[S]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl<S: Scalar> DeformableFilter<S> {
    pub fn new(
        grid: AnchorGrid<S>,
        in_dim: usize,
        out_dim: usize,
        weights: Vec<S>,
        bias: Option<Vec<S>>,
    ) -> Result<Self> {
        check_dims(in_dim, out_dim)?;
        let expected = grid.len() * in_dim * out_dim;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "filter needs {expected} weights, got {}",
                weights.len()
            )));
        }
        check_finite("filter weight", &weights)?;
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::shape(format!("bias of length {} for {out_dim} outputs", b.len())));
            }
            check_finite("filter bias", b)?;
        }
        Ok(Self {
            grid,
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(grid: AnchorGrid<S>, in_dim: usize, out_dim: usize, with_bias: bool) -> Result<Self> {
        let n = grid.len() * in_dim * out_dim;
        Self::new(grid, in_dim, out_dim, vec![S::zero(); n], with_bias.then(|| vec![S::zero(); out_dim]))
    }

    /// Gaussian weights with standard deviation `std`; zero bias.
    pub fn random(
        grid: AnchorGrid<S>,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let n = grid.len() * in_dim * out_dim;
        let weights = (0..n).map(|_| normal::<S>(rng, std)).collect();
        Self::new(grid, in_dim, out_dim, weights, with_bias.then(|| vec![S::zero(); out_dim]))
    }

    pub fn grid(&self) -> &AnchorGrid<S> {
        &self.grid
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        &mut self.weights
    }

    /// The `D'×D` block of anchor `a`, row-major.
    #[inline]
    pub fn anchor_weights(&self, a: usize) -> &[S] {
        let n = self.in_dim * self.out_dim;
        &self.weights[a * n..(a + 1) * n]
    }

    pub fn anchor_matrix(&self, a: usize) -> Matrix<S> {
        Matrix::from_vec(self.in_dim, self.out_dim, self.anchor_weights(a).to_vec())
            .expect("anchor block shape")
    }

    pub fn bias(&self) -> Option<&[S]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [S]> {
        self.bias.as_deref_mut()
    }

    /// Weights and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut [S], Option<&mut [S]>) {
        (&mut self.weights, self.bias.as_deref_mut())
    }

    /// Same filter with every weight and the bias multiplied by `alpha`.
    pub fn scaled(&self, alpha: S) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= alpha);
        if let Some(b) = out.bias.as_mut() {
            b.iter_mut().for_each(|w| *w *= alpha);
        }
        out
    }
}

/// Depthwise-separable filter: per-anchor, per-input-channel spatial weights
/// followed by a `D'×D` pointwise channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableFilter<S> {
    grid: AnchorGrid<S>,
    /// Layout `[anchor][input channel]`.
    spatial: Vec<S>,
    pointwise: Matrix<S>,
    bias: Option<Vec<S>>,
}

impl<S: Scalar> SeparableFilter<S> {
    pub fn new(grid: AnchorGrid<S>, spatial: Vec<S>, pointwise: Matrix<S>, bias: Option<Vec<S>>) -> Result<Self> {
        check_dims(pointwise.rows(), pointwise.cols())?;
        let expected = grid.len() * pointwise.rows();
        if spatial.len() != expected {
            return Err(Error::shape(format!(
                "spatial filter needs {expected} weights, got {}",
                spatial.len()
            )));
        }
        check_finite("spatial weight", &spatial)?;
        check_finite("pointwise weight", pointwise.as_slice())?;
        if let Some(b) = &bias {
            if b.len() != pointwise.cols() {
                return Err(Error::shape(format!(
                    "bias of length {} for {} outputs",
                    b.len(),
                    pointwise.cols()
                )));
            }
            check_finite("filter bias", b)?;
        }
        Ok(Self {
            grid,
            spatial,
            pointwise,
            bias,
        })
    }

    pub fn random(
        grid: AnchorGrid<S>,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        spatial_std: f64,
        pointwise_std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_dims(in_dim, out_dim)?;
        let spatial = (0..grid.len() * in_dim).map(|_| normal::<S>(rng, spatial_std)).collect();
        let pw = (0..in_dim * out_dim).map(|_| normal::<S>(rng, pointwise_std)).collect();
        Self::new(
            grid,
            spatial,
            Matrix::from_vec(in_dim, out_dim, pw)?,
            with_bias.then(|| vec![S::zero(); out_dim]),
        )
    }

    pub fn grid(&self) -> &AnchorGrid<S> {
        &self.grid
    }

    pub fn in_dim(&self) -> usize {
        self.pointwise.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.pointwise.cols()
    }

    pub fn spatial(&self) -> &[S] {
        &self.spatial
    }

    pub fn spatial_mut(&mut self) -> &mut [S] {
        &mut self.spatial
    }

    pub fn pointwise(&self) -> &Matrix<S> {
        &self.pointwise
    }

    pub fn pointwise_mut(&mut self) -> &mut Matrix<S> {
        &mut self.pointwise
    }

    pub fn bias(&self) -> Option<&[S]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [S]> {
        self.bias.as_deref_mut()
    }

    /// Spatial weights, pointwise map and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut [S], &mut [S], Option<&mut [S]>) {
        (&mut self.spatial, self.pointwise.as_mut_slice(), self.bias.as_deref_mut())
    }

    /// The equivalent full filter, `W[a][c][d] = spatial[a][c] * pointwise[c][d]`.
    pub fn to_full(&self) -> DeformableFilter<S> {
        let (din, dout) = (self.in_dim(), self.out_dim());
        let mut w = Vec::with_capacity(self.grid.len() * din * dout);
        for a in 0..self.grid.len() {
            for c in 0..din {
                let s = self.spatial[a * din + c];
                w.extend(self.pointwise.row(c).iter().map(|&p| s * p));
            }
        }
        DeformableFilter::new(self.grid, din, dout, w, self.bias.clone()).expect("consistent shapes")
    }
}

/// Geometry of one convolution layer: anchors, query radius and neighbor cap.
/// The integration measure is fixed to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayerSpec<S> {
    pub grid: AnchorGrid<S>,
    pub radius: S,
    pub cap: usize,
}

impl<S: Scalar> ConvLayerSpec<S> {
    /// Requires `radius >= grid.support_radius()` so that every offset with a
    /// nonzero filter can be found by the neighborhood query.
    pub fn new(grid: AnchorGrid<S>, radius: S, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::arg("neighbor cap must be at least 1"));
        }
        let support = grid.support_radius();
        if !(radius >= support) || !radius.is_finite() {
            return Err(Error::arg(format!(
                "radius {radius} is below the filter support radius {support}"
            )));
        }
        Ok(Self { grid, radius, cap })
    }

    /// Smallest valid radius and the default cap of 16.
    pub fn with_defaults(grid: AnchorGrid<S>) -> Self {
        Self {
            grid,
            radius: grid.support_radius(),
            cap: DEFAULT_NEIGHBOR_CAP,
        }
    }
}

pub(crate) fn check_features<S: Scalar>(
    features: &Matrix<S>,
    in_dim: usize,
    neighbors: &crate::spatial::NeighborTable<S>,
) -> Result<()> {
    if features.cols() != in_dim {
        return Err(Error::shape(format!(
            "features have {} channels, filter expects {in_dim}",
            features.cols()
        )));
    }
    if features.rows() < neighbors.min_source_len() {
        return Err(Error::shape(format!(
            "neighbor table references point {} but only {} feature rows exist",
            neighbors.min_source_len() - 1,
            features.rows()
        )));
    }
    Ok(())
}

/// Random valid unit for tests and benches.
pub fn random_unit<S: Scalar>(rng: &mut SeededRng, lo: f64, hi: f64) -> Vec3<S> {
    std::array::from_fn(|_| S::lit(rng.random_range(lo..hi)))
}
