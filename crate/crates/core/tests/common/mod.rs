#![allow(dead_code)]

use deformconv_core::deform::{random_unit, AnchorGrid, DeformableFilter, SeparableFilter};
use deformconv_core::matrix::Matrix;
use deformconv_core::pointcloud::PointCloud;
use deformconv_core::rng::{normal, seeded, uniform, SeededRng};
use deformconv_core::spatial::{self_neighbors, NeighborTable};
use deformconv_core::Vec3;
use rand::Rng;

pub struct Instance {
    pub cloud: PointCloud<f64>,
    pub neighbors: NeighborTable<f64>,
    pub filter: DeformableFilter<f64>,
}

pub fn random_positions(rng: &mut SeededRng, m: usize, half_extent: f64) -> Vec<Vec3<f64>> {
    (0..m)
        .map(|_| std::array::from_fn(|_| uniform(rng, -half_extent, half_extent)))
        .collect()
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng, 1.0)).collect()).unwrap()
}

pub fn random_cloud(rng: &mut SeededRng, m: usize, din: usize, half_extent: f64) -> PointCloud<f64> {
    let positions = random_positions(rng, m, half_extent);
    let features = random_matrix(rng, m, din);
    PointCloud::new(positions, features, None).unwrap()
}

/// A random cloud packed densely enough that most points have several
/// neighbors inside the filter support, with an anisotropic grid and a
/// radius up to 20% past the support.
pub fn random_instance(rng: &mut SeededRng, m: usize, din: usize, dout: usize, k: usize, with_bias: bool) -> Instance {
    let grid = AnchorGrid::new(k, random_unit(rng, 0.1, 0.3)).unwrap();
    let support = grid.support_radius();
    let half = 0.5 * support * (m as f64).cbrt().max(1.0) * 0.6;
    let cloud = random_cloud(rng, m, din, half);
    let radius = support * uniform::<f64>(rng, 1.0, 1.2);
    let cap = rng.random_range(4..=20);
    let neighbors = self_neighbors(cloud.positions(), radius, cap).unwrap();
    let filter = DeformableFilter::random(grid, din, dout, with_bias, 1.0, rng).unwrap();
    Instance { cloud, neighbors, filter }
}

pub fn random_separable(rng: &mut SeededRng, grid: AnchorGrid<f64>, din: usize, dout: usize, with_bias: bool) -> SeparableFilter<f64> {
    SeparableFilter::random(grid, din, dout, with_bias, 1.0, 1.0, rng).unwrap()
}

/// `max |a - b| / max |b|`, falling back to the absolute difference when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Central finite differences of `loss` with respect to each entry of `params`.
pub fn finite_diff(params: &mut [f64], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + step;
            let up = loss(params);
            params[i] = orig - step;
            let down = loss(params);
            params[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn sum_sq(m: &Matrix<f64>) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}
