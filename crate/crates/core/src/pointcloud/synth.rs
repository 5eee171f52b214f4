//! Seeded synthetic datasets.
//!
//! All shapes are generated inside `[-1, 1]^3` before noise is added.
//! Per-point features are `[1, z]`: a constant channel and the point height.

use std::f64::consts::PI;

use super::{Dataset, PointCloud, Task};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal, seeded, SeededRng};
use crate::scalar::Scalar;
use rand::Rng;

/// Synthetic dataset family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Four-way classification: sphere, cube surface, plane patch, torus.
    Shapes4,
    /// Two-class segmentation of a horizontal plane (label 0) and a sphere
    /// (label 1) resting above it.
    TwoSurfacesSeg,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Shapes4 => "shapes4",
            SynthKind::TwoSurfacesSeg => "two-surfaces-seg",
        }
    }

    pub fn task(self) -> Task {
        match self {
            SynthKind::Shapes4 => Task::Classification,
            SynthKind::TwoSurfacesSeg => Task::Segmentation,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            SynthKind::Shapes4 => 4,
            SynthKind::TwoSurfacesSeg => 2,
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes4" => Ok(SynthKind::Shapes4),
            "two-surfaces-seg" => Ok(SynthKind::TwoSurfacesSeg),
            other => Err(Error::arg(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Number of feature channels produced by [`synth_dataset`].
pub const SYNTH_FEATURE_DIM: usize = 2;

pub fn synth_dataset<S: Scalar>(
    kind: SynthKind,
    n_clouds: usize,
    points_per_cloud: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if n_clouds == 0 {
        return Err(Error::arg("n_clouds must be at least 1"));
    }
    if points_per_cloud < 8 {
        return Err(Error::arg("points_per_cloud must be at least 8"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::arg("noise_sigma must be finite and non-negative"));
    }
    let mut rng = seeded(seed);
    let mut clouds = Vec::with_capacity(n_clouds);
    for i in 0..n_clouds {
        let (pts, labels) = match kind {
            SynthKind::Shapes4 => {
                let class = i % 4;
                let pts = match class {
                    0 => sphere_shell(&mut rng, points_per_cloud),
                    1 => cube_surface(&mut rng, points_per_cloud),
                    2 => plane_patch(&mut rng, points_per_cloud),
                    _ => torus(&mut rng, points_per_cloud),
                };
                (pts, vec![class; points_per_cloud])
            }
            SynthKind::TwoSurfacesSeg => plane_and_sphere(&mut rng, points_per_cloud),
        };
        clouds.push(finish(&mut rng, pts, labels, noise_sigma)?);
    }
    Dataset::new(clouds, kind.num_classes(), kind.task())
}

fn finish<S: Scalar>(
    rng: &mut SeededRng,
    pts: Vec<[f64; 3]>,
    labels: Vec<usize>,
    noise_sigma: f64,
) -> Result<PointCloud<S>> {
    let n = pts.len();
    let mut positions = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * SYNTH_FEATURE_DIM);
    for p in pts {
        let q: [S; 3] = if noise_sigma > 0.0 {
            let mut q = p.map(S::lit);
            for c in q.iter_mut() {
                *c += normal::<S>(rng, noise_sigma);
            }
            q
        } else {
            p.map(S::lit)
        };
        feats.push(S::one());
        feats.push(q[2]);
        positions.push(q);
    }
    PointCloud::new(positions, Matrix::from_vec(n, SYNTH_FEATURE_DIM, feats)?, Some(labels))
}

fn unit_gaussian_vec(rng: &mut SeededRng) -> [f64; 3] {
    loop {
        let v = [normal::<f64>(rng, 1.0), normal::<f64>(rng, 1.0), normal::<f64>(rng, 1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Uniformly random rotation matrix from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut SeededRng) -> [[f64; 3]; 3] {
    let (w, x, y, z) = loop {
        let q: [f64; 4] = std::array::from_fn(|_| normal::<f64>(rng, 1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-12 {
            break (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    };
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

/// Sphere centered at the origin, radius in `[0.5, 1.0)`.
fn sphere_shell(rng: &mut SeededRng, n: usize) -> Vec<[f64; 3]> {
    let radius = rng.random_range(0.5..1.0);
    (0..n)
        .map(|_| unit_gaussian_vec(rng).map(|c| c * radius))
        .collect()
}

/// Rotated cube surface; half edge below 1/sqrt(3) keeps corners in the unit ball.
fn cube_surface(rng: &mut SeededRng, n: usize) -> Vec<[f64; 3]> {
    let half = rng.random_range(0.4..0.57);
    let rot = random_rotation(rng);
    (0..n)
        .map(|_| {
            let face = rng.random_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (d, c) in p.iter_mut().enumerate() {
                *c = if d == axis {
                    sign * half
                } else {
                    rng.random_range(-half..half)
                };
            }
            rotate(&rot, p)
        })
        .collect()
}

/// Rotated square patch; half size below 1/sqrt(2).
fn plane_patch(rng: &mut SeededRng, n: usize) -> Vec<[f64; 3]> {
    let half = rng.random_range(0.5..0.7);
    let rot = random_rotation(rng);
    (0..n)
        .map(|_| {
            let p = [rng.random_range(-half..half), rng.random_range(-half..half), 0.0];
            rotate(&rot, p)
        })
        .collect()
}

/// Rotated torus with major + minor radius below 1.
fn torus(rng: &mut SeededRng, n: usize) -> Vec<[f64; 3]> {
    let major = rng.random_range(0.5..0.7);
    let minor = rng.random_range(0.15..0.3);
    let rot = random_rotation(rng);
    (0..n)
        .map(|_| {
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            let ring = major + minor * v.cos();
            rotate(&rot, [ring * u.cos(), ring * u.sin(), minor * v.sin()])
        })
        .collect()
}

/// Horizontal plane patch at a random height with a sphere floating above it.
/// Points are split between the surfaces in proportion to area, with each
/// surface receiving at least a quarter of them.
fn plane_and_sphere(rng: &mut SeededRng, n: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let floor = rng.random_range(-0.8..-0.4);
    let radius = rng.random_range(0.25..0.45);
    let cx = rng.random_range(-1.0 + radius..1.0 - radius);
    let cy = rng.random_range(-1.0 + radius..1.0 - radius);
    let cz = floor + radius + rng.random_range(0.0..0.3);
    let plane_area = 4.0;
    let sphere_area = 4.0 * PI * radius * radius;
    let share = sphere_area / (plane_area + sphere_area);
    let n_sphere = ((n as f64 * share).round() as usize).clamp(n / 4, n - n / 4);

    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n - n_sphere {
        pts.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), floor]);
        labels.push(0);
    }
    for _ in 0..n_sphere {
        let u = unit_gaussian_vec(rng);
        pts.push([cx + radius * u[0], cy + radius * u[1], cz + radius * u[2]]);
        labels.push(1);
    }
    (pts, labels)
}
