//! Radius-limited, count-capped neighborhood queries.
//!
//! A query at `y` returns the points `x` with `|y - x| <= r`, keeps the `K`
//! nearest and orders them by `(squared distance, point index)`. Offsets are
//! stored as `y - x`, the argument the deformed filter is evaluated at.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{all_finite3, norm_sq3, sub3, Scalar, Vec3};

type CellKey = [i64; 3];

/// Uniform hash grid over a borrowed set of positions.
#[derive(Debug)]
pub struct GridHashIndex<'a, S> {
    cell_size: S,
    cells: HashMap<CellKey, Vec<u32>>,
    positions: &'a [Vec3<S>],
}

fn cell_of<S: Scalar>(p: &Vec3<S>, cell_size: S) -> CellKey {
    p.map(|c| (c / cell_size).floor().to_i64().expect("cell coordinate fits in i64"))
}

/// Builds the index. Every point lands in exactly one cell
/// `floor(position / cell_size)`.
pub fn build_index<S: Scalar>(positions: &[Vec3<S>], cell_size: S) -> Result<GridHashIndex<'_, S>> {
    if !(cell_size > S::zero() && cell_size.is_finite()) {
        return Err(Error::arg("cell_size must be positive and finite"));
    }
    if positions.len() > u32::MAX as usize {
        return Err(Error::arg("too many points for a u32 index"));
    }
    let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        if !all_finite3(p) {
            return Err(Error::NonFinite(format!("position of point {i}")));
        }
        let key = cell_of(p, cell_size);
        if key.iter().any(|k| k.unsigned_abs() > 1 << 52) {
            return Err(Error::arg(format!("point {i} is too far from the origin for cell size")));
        }
        cells.entry(key).or_default().push(i as u32);
    }
    Ok(GridHashIndex {
        cell_size,
        cells,
        positions,
    })
}

impl<S: Scalar> GridHashIndex<'_, S> {
    pub fn cell_size(&self) -> S {
        self.cell_size
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, key: [i64; 3]) -> Option<&[u32]> {
        self.cells.get(&key).map(Vec::as_slice)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&[i64; 3], &[u32])> {
        self.cells.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn positions(&self) -> &[Vec3<S>] {
        self.positions
    }

    fn candidates(&self, q: &Vec3<S>, r: S, out: &mut Vec<(S, u32)>) {
        let c = cell_of(q, self.cell_size);
        let reach = (r / self.cell_size).ceil().to_i64().expect("finite reach");
        let r2 = r * r;
        for cx in c[0] - reach..=c[0] + reach {
            for cy in c[1] - reach..=c[1] + reach {
                for cz in c[2] - reach..=c[2] + reach {
                    let Some(list) = self.cells.get(&[cx, cy, cz]) else {
                        continue;
                    };
                    for &i in list {
                        let d2 = norm_sq3(&sub3(q, &self.positions[i as usize]));
                        if d2 <= r2 {
                            out.push((d2, i));
                        }
                    }
                }
            }
        }
    }
}

/// Per-query neighbor lists in compressed row form.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable<S> {
    radius: S,
    cap: usize,
    starts: Vec<usize>,
    indices: Vec<u32>,
    offsets: Vec<Vec3<S>>,
}

impl<S: Scalar> NeighborTable<S> {
    fn from_lists(radius: S, cap: usize, lists: Vec<Vec<(u32, Vec3<S>)>>) -> Self {
        let total = lists.iter().map(Vec::len).sum();
        let mut starts = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(total);
        starts.push(0);
        for list in lists {
            for (i, o) in list {
                indices.push(i);
                offsets.push(o);
            }
            starts.push(indices.len());
        }
        Self {
            radius,
            cap,
            starts,
            indices,
            offsets,
        }
    }

    pub fn radius(&self) -> S {
        self.radius
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Number of query points (centroids).
    pub fn num_queries(&self) -> usize {
        self.starts.len() - 1
    }

    /// Total number of (centroid, neighbor) pairs.
    pub fn num_pairs(&self) -> usize {
        self.indices.len()
    }

    /// Neighbor point indices of query `q`, in stored order.
    pub fn indices(&self, q: usize) -> &[u32] {
        &self.indices[self.starts[q]..self.starts[q + 1]]
    }

    /// Offsets `y - x` of query `q`, aligned with [`Self::indices`].
    pub fn offsets(&self, q: usize) -> &[Vec3<S>] {
        &self.offsets[self.starts[q]..self.starts[q + 1]]
    }

    /// Position of query `q`'s neighbor list in the flattened pair arrays.
    pub fn pair_range(&self, q: usize) -> std::ops::Range<usize> {
        self.starts[q]..self.starts[q + 1]
    }

    /// Largest neighbor index plus one, i.e. the minimum size of the indexed set.
    pub fn min_source_len(&self) -> usize {
        self.indices.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

fn check_query_args<S: Scalar>(queries: &[Vec3<S>], r: S, cap: usize) -> Result<()> {
    if !(r > S::zero() && r.is_finite()) {
        return Err(Error::arg("radius must be positive and finite"));
    }
    if cap == 0 {
        return Err(Error::arg("neighbor cap must be at least 1"));
    }
    if let Some(i) = queries.iter().position(|q| !all_finite3(q)) {
        return Err(Error::NonFinite(format!("query {i}")));
    }
    Ok(())
}

/// Sorts by `(distance, index)`, truncates to `cap` and attaches offsets.
fn finalize<S: Scalar>(
    q: &Vec3<S>,
    positions: &[Vec3<S>],
    mut found: Vec<(S, u32)>,
    cap: usize,
) -> Vec<(u32, Vec3<S>)> {
    let key = |a: &(S, u32), b: &(S, u32)| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    };
    if found.len() > cap {
        found.select_nth_unstable_by(cap - 1, key);
        found.truncate(cap);
    }
    found.sort_unstable_by(key);
    found
        .into_iter()
        .map(|(_, i)| (i, sub3(q, &positions[i as usize])))
        .collect()
}

/// Radius query through the hash grid. Queries run in parallel on the current
/// rayon pool; the result does not depend on the thread count.
pub fn radius_neighbors<S: Scalar>(
    index: &GridHashIndex<'_, S>,
    queries: &[Vec3<S>],
    r: S,
    cap: usize,
) -> Result<NeighborTable<S>> {
    check_query_args(queries, r, cap)?;
    let lists = queries
        .par_iter()
        .map_init(Vec::new, |buf, q| {
            buf.clear();
            index.candidates(q, r, buf);
            finalize(q, index.positions, buf.clone(), cap)
        })
        .collect();
    Ok(NeighborTable::from_lists(r, cap, lists))
}

/// Direct O(Q·M) evaluation of the same query.
pub fn brute_force_neighbors<S: Scalar>(
    positions: &[Vec3<S>],
    queries: &[Vec3<S>],
    r: S,
    cap: usize,
) -> Result<NeighborTable<S>> {
    check_query_args(queries, r, cap)?;
    if let Some(i) = positions.iter().position(|p| !all_finite3(p)) {
        return Err(Error::NonFinite(format!("position of point {i}")));
    }
    let r2 = r * r;
    let lists = queries
        .iter()
        .map(|q| {
            let found: Vec<(S, u32)> = positions
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let d2 = norm_sq3(&sub3(q, p));
                    (d2 <= r2).then_some((d2, i as u32))
                })
                .collect();
            finalize(q, positions, found, cap)
        })
        .collect();
    Ok(NeighborTable::from_lists(r, cap, lists))
}

/// Neighborhoods of every point of `positions` among themselves, using a grid
/// with `cell_size = r`.
pub fn self_neighbors<S: Scalar>(positions: &[Vec3<S>], r: S, cap: usize) -> Result<NeighborTable<S>> {
    let index = build_index(positions, r)?;
    radius_neighbors(&index, positions, r, cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_single_cell() {
        let pts = [[0.0f64; 3]];
        let idx = build_index(&pts, 1.0).unwrap();
        assert_eq!(idx.num_cells(), 1);
        assert_eq!(idx.cell([0, 0, 0]), Some(&[0u32][..]));
    }

    #[test]
    fn floor_semantics_for_negative_coordinates() {
        let pts = [[-0.1f64, 0.0, 0.0]];
        let idx = build_index(&pts, 1.0).unwrap();
        assert_eq!(idx.cell([-1, 0, 0]), Some(&[0u32][..]));
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(build_index(&[[f64::NAN, 0.0, 0.0]], 1.0).is_err());
        assert!(build_index(&[[0.0f64; 3]], 0.0).is_err());
    }

    #[test]
    fn self_query_is_distance_zero() {
        let pts = [[0.3f64, -0.2, 5.0]];
        for r in [1e-3, 0.5, 10.0] {
            let t = self_neighbors(&pts, r, 4).unwrap();
            assert_eq!(t.indices(0), &[0]);
            assert_eq!(t.offsets(0), &[[0.0; 3]]);
        }
    }

    #[test]
    fn radius_excludes_far_point() {
        let pts = [[0.0f64; 3], [1.0, 0.0, 0.0]];
        let idx = build_index(&pts, 0.5).unwrap();
        let t = radius_neighbors(&idx, &pts[..1], 0.5, 16).unwrap();
        assert_eq!(t.indices(0), &[0]);
        let b = brute_force_neighbors(&pts, &pts[..1], 0.5, 16).unwrap();
        assert_eq!(b.indices(0), &[0]);
    }

    #[test]
    fn ties_break_by_index_and_cap_applies() {
        let pts = [[1.0f64, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3]];
        let t = brute_force_neighbors(&pts, &[[0.0; 3]], 1.5, 3).unwrap();
        assert_eq!(t.indices(0), &[3, 0, 1]);
        assert_eq!(t.offsets(0)[1], [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_query_args() {
        let pts = [[0.0f64; 3]];
        let idx = build_index(&pts, 1.0).unwrap();
        assert!(radius_neighbors(&idx, &pts, 0.0, 1).is_err());
        assert!(radius_neighbors(&idx, &pts, 1.0, 0).is_err());
        assert!(radius_neighbors(&idx, &[[f64::INFINITY, 0.0, 0.0]], 1.0, 1).is_err());
    }
}
