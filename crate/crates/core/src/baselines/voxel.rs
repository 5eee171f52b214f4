//! Nearest-cell voxelization: points are averaged into world-aligned cells
//! (extension) and read back from their containing cell (restriction).

use std::collections::BTreeMap;

use crate::deform::{forward, AnchorGrid, DeformableFilter, DEFAULT_NEIGHBOR_CAP};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pointcloud::PointCloud;
use crate::rng::{seeded, uniform};
use crate::scalar::{all_finite3, Scalar, Vec3};
use crate::spatial::self_neighbors;

/// A box of cells on the lattice `pitch * Z^3`. Cell `(i, j, l)` of the box
/// covers `[(base + (i, j, l)) * pitch, (base + (i, j, l) + 1) * pitch)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec<S> {
    pub pitch: S,
    pub base: [i64; 3],
    pub dims: [usize; 3],
}

impl<S: Scalar> GridSpec<S> {
    pub fn new(pitch: S, base: [i64; 3], dims: [usize; 3]) -> Result<Self> {
        if !(pitch > S::zero() && pitch.is_finite()) {
            return Err(Error::arg("voxel pitch must be positive and finite"));
        }
        if dims.contains(&0) {
            return Err(Error::arg("voxel grid dimensions must be positive"));
        }
        Ok(Self { pitch, base, dims })
    }

    /// Smallest box covering `positions`.
    pub fn covering(positions: &[Vec3<S>], pitch: S) -> Result<Self> {
        if !(pitch > S::zero() && pitch.is_finite()) {
            return Err(Error::arg("voxel pitch must be positive and finite"));
        }
        if positions.is_empty() {
            return Err(Error::arg("cannot cover an empty point set"));
        }
        if !positions.iter().all(all_finite3) {
            return Err(Error::NonFinite("voxelized position".into()));
        }
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for p in positions {
            let c = lattice_cell(p, pitch);
            for d in 0..3 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        Self::new(pitch, lo, std::array::from_fn(|d| (hi[d] - lo[d] + 1) as usize))
    }

    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn origin(&self) -> Vec3<S> {
        self.base.map(|b| S::lit(b as f64) * self.pitch)
    }

    /// Flat cell index containing `p`, or `None` outside the box.
    pub fn cell_index(&self, p: &Vec3<S>) -> Option<usize> {
        if !all_finite3(p) {
            return None;
        }
        let c = lattice_cell(p, self.pitch);
        let mut idx = 0usize;
        for d in 0..3 {
            let rel = c[d] - self.base[d];
            if rel < 0 || rel as usize >= self.dims[d] {
                return None;
            }
            idx = idx * self.dims[d] + rel as usize;
        }
        Some(idx)
    }

    /// Center of flat cell `idx`.
    pub fn cell_center(&self, idx: usize) -> Vec3<S> {
        let l = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        let half = S::lit(0.5);
        let rel = [i, j, l];
        std::array::from_fn(|d| (S::lit((self.base[d] + rel[d] as i64) as f64) + half) * self.pitch)
    }
}

fn lattice_cell<S: Scalar>(p: &Vec3<S>, pitch: S) -> [i64; 3] {
    p.map(|c| (c / pitch).floor().to_i64().expect("cell coordinate fits in i64"))
}

/// Dense voxel grid holding the mean feature of each cell's points.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<S> {
    pub spec: GridSpec<S>,
    /// `cells×D'`; unoccupied cells are zero.
    pub features: Matrix<S>,
    pub counts: Vec<u32>,
}

/// Extension: averages point features per cell. Points outside the box are
/// ignored.
pub fn voxelize_extend<S: Scalar>(cloud: &PointCloud<S>, spec: &GridSpec<S>) -> VoxelGrid<S> {
    let d = cloud.feature_dim();
    let mut features = Matrix::zeros(spec.num_cells(), d);
    let mut counts = vec![0u32; spec.num_cells()];
    for (i, p) in cloud.positions().iter().enumerate() {
        if let Some(c) = spec.cell_index(p) {
            counts[c] += 1;
            for (a, &f) in features.row_mut(c).iter_mut().zip(cloud.features().row(i)) {
                *a += f;
            }
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 1 {
            let inv = S::one() / S::lit(n as f64);
            features.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    VoxelGrid {
        spec: *spec,
        features,
        counts,
    }
}

/// Restriction: every point reads its containing cell's features.
pub fn restrict<S: Scalar>(grid: &VoxelGrid<S>, cloud: &PointCloud<S>) -> Result<Matrix<S>> {
    let d = grid.features.cols();
    let mut out = Matrix::zeros(cloud.len(), d);
    for (i, p) in cloud.positions().iter().enumerate() {
        let c = grid.spec.cell_index(p).ok_or(Error::OutsideGrid { index: i })?;
        out.row_mut(i).copy_from_slice(grid.features.row(c));
    }
    Ok(out)
}

/// A cloud replaced by its occupied cells.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelizedCloud<S> {
    /// One point per occupied cell at the cell center, carrying the mean
    /// feature and the majority label (ties to the smaller label).
    pub cloud: PointCloud<S>,
    /// For each original point, the row of its cell in `cloud`.
    pub point_to_cell: Vec<usize>,
}

/// Voxelizes a cloud onto `pitch * Z^3`, producing one point per occupied cell.
pub fn voxelize_to_cloud<S: Scalar>(cloud: &PointCloud<S>, pitch: S) -> Result<VoxelizedCloud<S>> {
    let spec = GridSpec::covering(cloud.positions(), pitch)?;
    let grid = voxelize_extend(cloud, &spec);
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for (c, &n) in grid.counts.iter().enumerate() {
        if n > 0 {
            let next = rows.len();
            rows.insert(c, next);
        }
    }
    let point_to_cell: Vec<usize> = cloud
        .positions()
        .iter()
        .map(|p| rows[&spec.cell_index(p).expect("covering grid")])
        .collect();
    let d = cloud.feature_dim();
    let mut feats = Vec::with_capacity(rows.len() * d);
    let mut positions = Vec::with_capacity(rows.len());
    for &c in rows.keys() {
        positions.push(spec.cell_center(c));
        feats.extend_from_slice(grid.features.row(c));
    }
    let labels = cloud.labels().map(|labels| {
        let n_labels = labels.iter().max().map_or(0, |&m| m + 1);
        let mut votes = vec![vec![0usize; n_labels]; rows.len()];
        for (&cell, &l) in point_to_cell.iter().zip(labels) {
            votes[cell][l] += 1;
        }
        votes
            .iter()
            .map(|v| {
                let best = *v.iter().max().unwrap_or(&0);
                v.iter().position(|&c| c == best).unwrap_or(0)
            })
            .collect()
    });
    Ok(VoxelizedCloud {
        cloud: PointCloud::new(positions, Matrix::from_vec(rows.len(), d, feats)?, labels)?,
        point_to_cell,
    })
}

/// Output differences between two clouds that differ by one sub-cell move.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminationReport<S> {
    /// Max abs per-point difference through extend→restrict.
    pub voxel_path_diff: S,
    /// Max abs per-point difference through the deformable forward pass.
    pub deform_path_diff: S,
    /// Index of the displaced point.
    pub moved_point: usize,
}

/// Points in the seeded discrimination cloud.
const DISCRIMINATION_POINTS: usize = 96;

/// Builds a seeded cloud, displaces one point by `displacement` along x
/// without leaving its cell, and compares both pipelines on the two clouds.
/// The deformable path uses a 3×3×3 filter with anchor spacing `pitch` and
/// fixed random weights.
pub fn subvoxel_discrimination<S: Scalar>(pitch: S, displacement: S, seed: u64) -> Result<DiscriminationReport<S>> {
    if !(pitch > S::zero() && pitch.is_finite()) {
        return Err(Error::arg("pitch must be positive and finite"));
    }
    if !(displacement >= S::zero() && displacement < pitch) {
        return Err(Error::arg("displacement must lie in [0, pitch)"));
    }
    let mut rng = seeded(seed);
    let n = DISCRIMINATION_POINTS;
    let positions: Vec<Vec3<S>> = (0..n)
        .map(|_| std::array::from_fn(|_| uniform(&mut rng, -0.6, 0.6)))
        .collect();
    let din = 2;
    let feats = (0..n * din).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let base = PointCloud::new(positions.clone(), Matrix::from_vec(n, din, feats)?, None)?;

    let near_other = |i: usize| {
        positions.iter().enumerate().any(|(j, q)| {
            j != i && {
                let d = crate::scalar::sub3(&positions[i], q);
                crate::scalar::norm_sq3(&d) < S::lit(0.16)
            }
        })
    };
    let stays = |p: &Vec3<S>| (p[0] / pitch).floor() == ((p[0] + displacement) / pitch).floor();
    let moved_point = (0..n)
        .find(|&i| stays(&positions[i]) && near_other(i))
        .ok_or_else(|| Error::arg("every candidate displacement crosses a cell boundary"))?;
    let mut moved_pos = positions;
    moved_pos[moved_point][0] += displacement;
    let moved = PointCloud::new(moved_pos, base.features().clone(), None)?;

    let spec = GridSpec::covering(&[base.positions(), moved.positions()].concat(), pitch)?;
    if spec.cell_index(&base.positions()[moved_point]) != spec.cell_index(&moved.positions()[moved_point]) {
        return Err(Error::arg("displaced point crossed a cell boundary"));
    }
    let v0 = restrict(&voxelize_extend(&base, &spec), &base)?;
    let v1 = restrict(&voxelize_extend(&moved, &spec), &moved)?;

    let grid = AnchorGrid::cubic(3, pitch)?;
    let filter = DeformableFilter::random(grid, din, 4, false, 1.0, &mut rng)?;
    let r = grid.support_radius();
    let h0 = forward(&base, &self_neighbors(base.positions(), r, DEFAULT_NEIGHBOR_CAP)?, &filter)?;
    let h1 = forward(&moved, &self_neighbors(moved.positions(), r, DEFAULT_NEIGHBOR_CAP)?, &filter)?;

    Ok(DiscriminationReport {
        voxel_path_diff: v0.max_abs_diff(&v1)?,
        deform_path_diff: h0.max_abs_diff(&h1)?,
        moved_point,
    })
}

/// Max abs per-point difference between extend→restrict of `cloud` and of
/// `cloud` translated by `shift`, each on its own covering grid. Zero for every
/// shift would mean the pipeline is translation equivariant.
pub fn voxel_translation_defect<S: Scalar>(cloud: &PointCloud<S>, pitch: S, shift: Vec3<S>) -> Result<S> {
    let moved = cloud.translated(shift);
    let a = restrict(&voxelize_extend(cloud, &GridSpec::covering(cloud.positions(), pitch)?), cloud)?;
    let b = restrict(&voxelize_extend(&moved, &GridSpec::covering(moved.positions(), pitch)?), &moved)?;
    a.max_abs_diff(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[([f64; 3], f64)]) -> PointCloud<f64> {
        PointCloud::new(
            points.iter().map(|p| p.0).collect(),
            Matrix::from_vec(points.len(), 1, points.iter().map(|p| p.1).collect()).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn one_point_one_cell() {
        let c = cloud(&[([0.05, 0.05, 0.05], 3.0)]);
        let spec = GridSpec::covering(c.positions(), 0.2).unwrap();
        let g = voxelize_extend(&c, &spec);
        assert_eq!(g.counts.iter().filter(|&&n| n > 0).count(), 1);
        assert_eq!(g.features.as_slice(), &[3.0]);
    }

    #[test]
    fn same_cell_points_average() {
        let c = cloud(&[([0.01, 0.01, 0.01], 1.0), ([0.15, 0.02, 0.1], 3.0)]);
        let spec = GridSpec::covering(c.positions(), 0.2).unwrap();
        let g = voxelize_extend(&c, &spec);
        assert_eq!(spec.num_cells(), 1);
        assert_eq!(g.features.as_slice(), &[2.0]);
        assert_eq!(restrict(&g, &c).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn sub_cell_move_is_invisible() {
        let a = cloud(&[([0.01, 0.01, 0.01], 1.0), ([0.5, 0.5, 0.5], 2.0)]);
        let b = cloud(&[([0.06, 0.01, 0.01], 1.0), ([0.5, 0.5, 0.5], 2.0)]);
        let spec = GridSpec::covering(a.positions(), 0.2).unwrap();
        assert_eq!(voxelize_extend(&a, &spec), voxelize_extend(&b, &spec));
    }

    #[test]
    fn restrict_outside_grid_errors() {
        let a = cloud(&[([0.01, 0.01, 0.01], 1.0)]);
        let spec = GridSpec::covering(a.positions(), 0.2).unwrap();
        let g = voxelize_extend(&a, &spec);
        let far = cloud(&[([1.0, 0.0, 0.0], 1.0)]);
        assert!(matches!(restrict(&g, &far), Err(Error::OutsideGrid { index: 0 })));
    }

    #[test]
    fn one_point_per_cell_round_trips() {
        let c = cloud(&[([0.1, 0.1, 0.1], 1.0), ([0.3, 0.1, 0.1], -2.0), ([0.1, 0.5, -0.3], 4.0)]);
        let spec = GridSpec::covering(c.positions(), 0.2).unwrap();
        assert_eq!(&restrict(&voxelize_extend(&c, &spec), &c).unwrap(), c.features());
    }

    #[test]
    fn voxelized_cloud_majority_labels() {
        let c = PointCloud::new(
            vec![[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.03, 0.0, 0.0], [0.5, 0.5, 0.5]],
            Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Some(vec![1, 1, 0, 0]),
        )
        .unwrap();
        let v = voxelize_to_cloud(&c, 0.2).unwrap();
        assert_eq!(v.cloud.len(), 2);
        assert_eq!(v.point_to_cell, vec![0, 0, 0, 1]);
        assert_eq!(v.cloud.labels().unwrap(), &[1, 0]);
        assert_eq!(v.cloud.features().row(0), &[2.0]);
        assert_eq!(v.cloud.positions()[0], [0.1, 0.1, 0.1]);
    }

    #[test]
    fn zero_displacement_changes_nothing() {
        let r = subvoxel_discrimination(0.2f64, 0.0, 1).unwrap();
        assert_eq!(r.voxel_path_diff, 0.0);
        assert_eq!(r.deform_path_diff, 0.0);
    }

    #[test]
    fn displacement_must_be_sub_pitch() {
        assert!(subvoxel_discrimination(0.2f64, 0.2, 1).is_err());
        assert!(subvoxel_discrimination(0.2f64, -0.01, 1).is_err());
    }
}
