mod common;

use common::*;
use deformconv_core::deform::{
    backward, backward_separable, enclosing_anchors, forward, forward_features, forward_separable,
    forward_separable_features, interpolate_filter, oracle_forward, trilinear_weight, AnchorGrid, DeformableFilter,
    SeparableFilter,
};
use deformconv_core::matrix::Matrix;
use deformconv_core::pointcloud::PointCloud;
use deformconv_core::rng::uniform;
use deformconv_core::spatial::self_neighbors;
use rand::Rng;

fn center_only(k: usize, unit: f64, d: usize) -> DeformableFilter<f64> {
    let grid = AnchorGrid::cubic(k, unit).unwrap();
    let mut f = DeformableFilter::zeros(grid, d, d, false).unwrap();
    let c = f.grid().center_index();
    for i in 0..d {
        f.weights_mut()[(c * d + i) * d + i] = 1.0;
    }
    f
}

#[test]
fn two_point_hand_example() {
    let cloud = PointCloud::new(
        vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]],
        Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
        None,
    )
    .unwrap();
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let f = center_only(3, 0.2, 1);
    let fast = forward(&cloud, &nb, &f).unwrap();
    let slow = oracle_forward(&cloud, &nb, &f).unwrap();
    assert!((fast[(0, 0)] - 2.0).abs() < 1e-15);
    assert!((slow[(0, 0)] - 2.0).abs() < 1e-15);
    // symmetric for the second point: 2 + 0.5 * 1
    assert!((fast[(1, 0)] - 2.5).abs() < 1e-15);
}

#[test]
fn single_point_uses_center_anchor() {
    let mut r = rng(1);
    let grid = AnchorGrid::cubic(5, 0.3).unwrap();
    let f = DeformableFilter::random(grid, 3, 2, true, 1.0, &mut r).unwrap();
    let cloud = random_cloud(&mut r, 1, 3, 1.0);
    let nb = self_neighbors(cloud.positions(), f.grid().support_radius(), 16).unwrap();
    let h = forward(&cloud, &nb, &f).unwrap();
    let g = f.anchor_matrix(f.grid().center_index());
    let mut want = Matrix::from_vec(1, 3, cloud.features().row(0).to_vec())
        .unwrap()
        .matmul(&g)
        .unwrap();
    for (w, b) in want.row_mut(0).iter_mut().zip(f.bias().unwrap()) {
        *w += b;
    }
    assert!(h.max_abs_diff(&want).unwrap() < 1e-14);
}

#[test]
fn zero_features_give_zero_output() {
    let mut r = rng(2);
    let inst = random_instance(&mut r, 30, 3, 2, 3, false);
    let zero = Matrix::zeros(30, 3);
    let h = forward_features(&zero, &inst.neighbors, &inst.filter).unwrap();
    assert_eq!(h.max_abs(), 0.0);
}

#[test]
fn fast_path_matches_oracle_on_random_instances() {
    let mut r = rng(3);
    for _ in 0..100 {
        let m = r.random_range(1..=64);
        let din = r.random_range(1..=8);
        let dout = r.random_range(1..=8);
        let k = [1, 3, 7][r.random_range(0..3)];
        let bias = r.random_bool(0.5);
        let inst = random_instance(&mut r, m, din, dout, k, bias);
        let fast = forward(&inst.cloud, &inst.neighbors, &inst.filter).unwrap();
        let slow = oracle_forward(&inst.cloud, &inst.neighbors, &inst.filter).unwrap();
        assert!(fast.rel_diff(&slow).unwrap() <= 1e-12);
    }
}

#[test]
fn channel_mismatch_is_an_error() {
    let mut r = rng(4);
    let inst = random_instance(&mut r, 10, 3, 2, 3, false);
    let wrong = Matrix::zeros(10, 4);
    assert!(forward_features(&wrong, &inst.neighbors, &inst.filter).is_err());
    let short = Matrix::zeros(9, 3);
    assert!(forward_features(&short, &inst.neighbors, &inst.filter).is_err());
}

#[test]
fn linear_in_features() {
    let mut r = rng(5);
    for _ in 0..10 {
        let inst = random_instance(&mut r, 40, 3, 4, 3, false);
        let f1 = inst.cloud.features().clone();
        let f2 = random_matrix(&mut r, 40, 3);
        let (a, b) = (uniform::<f64>(&mut r, -2.0, 2.0), uniform::<f64>(&mut r, -2.0, 2.0));
        let mixed = f1.lincomb(a, &f2, b).unwrap();
        let lhs = forward_features(&mixed, &inst.neighbors, &inst.filter).unwrap();
        let h1 = forward_features(&f1, &inst.neighbors, &inst.filter).unwrap();
        let h2 = forward_features(&f2, &inst.neighbors, &inst.filter).unwrap();
        let rhs = h1.lincomb(a, &h2, b).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * rhs.max_abs().max(1.0));
    }
}

#[test]
fn linear_in_weights() {
    let mut r = rng(6);
    for _ in 0..10 {
        let inst = random_instance(&mut r, 40, 3, 4, 3, false);
        let alpha = uniform::<f64>(&mut r, -3.0, 3.0);
        let lhs = forward(&inst.cloud, &inst.neighbors, &inst.filter.scaled(alpha)).unwrap();
        let rhs = forward(&inst.cloud, &inst.neighbors, &inst.filter).unwrap().scale(alpha);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * rhs.max_abs().max(1.0));
    }
}

#[test]
fn point_beyond_support_does_not_change_output() {
    let mut r = rng(7);
    for _ in 0..20 {
        let inst = random_instance(&mut r, 20, 2, 3, 3, true);
        let support = inst.filter.grid().support_radius();
        let y = inst.cloud.positions()[0];
        let dir: [f64; 3] = std::array::from_fn(|_| uniform(&mut r, -1.0, 1.0));
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = support * uniform::<f64>(&mut r, 1.001, 1.5);
        let extra: [f64; 3] = std::array::from_fn(|d| y[d] + dir[d] / n * dist);

        let mut positions = inst.cloud.positions().to_vec();
        positions.push(extra);
        let mut rows: Vec<Vec<f64>> = inst.cloud.features().iter_rows().map(<[f64]>::to_vec).collect();
        rows.push(vec![uniform(&mut r, -5.0, 5.0), uniform(&mut r, -5.0, 5.0)]);
        let grown = PointCloud::new(positions, Matrix::from_rows(&rows).unwrap(), None).unwrap();
        let nb = self_neighbors(grown.positions(), 2.0 * dist, 64).unwrap();
        assert!(nb.indices(0).contains(&20));
        let nb_small = self_neighbors(inst.cloud.positions(), 2.0 * dist, 64).unwrap();

        let before = forward(&inst.cloud, &nb_small, &inst.filter).unwrap();
        let after = forward(&grown, &nb, &inst.filter).unwrap();
        let diff = before.row(0).iter().zip(after.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn interpolation_hand_value() {
    let f = center_only(3, 0.2, 1);
    let g = interpolate_filter(&[-0.1, 0.0, 0.0], &f);
    assert!((g[(0, 0)] - 0.5).abs() < 1e-15);
    let scan: f64 = (0..27)
        .map(|a| trilinear_weight(&[-0.1, 0.0, 0.0], &f.grid().position(a), &f.grid().unit()) * f.weights()[a])
        .sum();
    assert!((g[(0, 0)] - scan).abs() < 1e-15);
}

#[test]
fn interpolation_at_anchor_returns_that_anchor() {
    let mut r = rng(8);
    let grid = AnchorGrid::cubic(3, 0.2).unwrap();
    let f = DeformableFilter::random(grid, 2, 3, false, 1.0, &mut r).unwrap();
    for a in 0..27 {
        let g = interpolate_filter(&f.grid().position(a), &f);
        assert!(g.max_abs_diff(&f.anchor_matrix(a)).unwrap() < 1e-15);
    }
    let far = interpolate_filter(&[1.0, 1.0, 1.0], &f);
    assert_eq!(far.max_abs(), 0.0);
}

#[test]
fn partition_of_unity_and_zero_outside() {
    let mut r = rng(9);
    for _ in 0..1000 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let unit = deformconv_core::deform::random_unit(&mut r, 0.05, 0.5);
        let grid = AnchorGrid::new(k, unit).unwrap();
        let h = grid.half() as f64;
        let z: [f64; 3] = if k == 1 {
            [0.0; 3]
        } else {
            std::array::from_fn(|d| uniform::<f64>(&mut r, -h, h) * unit[d] * 0.999_999)
        };
        let scan: f64 = (0..grid.len()).map(|a| trilinear_weight(&z, &grid.position(a), &unit)).sum();
        assert!((scan - 1.0).abs() <= 1e-12);
        let fast: f64 = enclosing_anchors(&z, &grid).iter().map(|&(_, w)| w).sum();
        assert!((fast - 1.0).abs() <= 1e-12);

        let mut out = z;
        let d = r.random_range(0..3);
        let reach = (h + 1.0) * unit[d];
        out[d] = if r.random_bool(0.5) { 1.0 } else { -1.0 } * uniform::<f64>(&mut r, reach, reach + 2.0);
        assert!(enclosing_anchors(&out, &grid).is_empty());
        assert!((0..grid.len()).all(|a| trilinear_weight(&out, &grid.position(a), &unit) == 0.0));
    }
}

fn rank_one_pair(r: &mut deformconv_core::rng::SeededRng, din: usize, dout: usize) -> (DeformableFilter<f64>, SeparableFilter<f64>) {
    let grid = AnchorGrid::new(3, deformconv_core::deform::random_unit(r, 0.1, 0.3)).unwrap();
    let s = random_separable(r, grid, din, dout, true);
    (s.to_full(), s)
}

#[test]
fn separable_equals_its_full_expansion() {
    let mut r = rng(10);
    for _ in 0..50 {
        let m = r.random_range(1..=48);
        let (din, dout) = (r.random_range(1..=6), r.random_range(1..=6));
        let (full, sep) = rank_one_pair(&mut r, din, dout);
        let support = sep.grid().support_radius();
        let cloud = random_cloud(&mut r, m, din, support);
        let nb = self_neighbors(cloud.positions(), support, 16).unwrap();
        let a = forward(&cloud, &nb, &full).unwrap();
        let b = forward_separable(&cloud, &nb, &sep).unwrap();
        assert!(b.rel_diff(&a).unwrap() <= 1e-12);
    }
}

#[test]
fn separable_identity_and_zero_pointwise() {
    let grid = AnchorGrid::cubic(3, 0.2).unwrap();
    let mut spatial = vec![0.0; 27 * 2];
    let c = grid.center_index();
    spatial[c * 2] = 1.0;
    spatial[c * 2 + 1] = 1.0;
    let sep = SeparableFilter::new(grid.clone(), spatial.clone(), Matrix::identity(2), None).unwrap();
    let cloud = PointCloud::new(vec![[0.3, -0.1, 2.0]], Matrix::from_rows(&[vec![1.5, -4.0]]).unwrap(), None).unwrap();
    let nb = self_neighbors(cloud.positions(), 1.0, 4).unwrap();
    let h = forward_separable(&cloud, &nb, &sep).unwrap();
    assert_eq!(h.row(0), cloud.features().row(0));

    let zero = SeparableFilter::new(grid, spatial, Matrix::zeros(2, 3), None).unwrap();
    let mut r = rng(11);
    let big = random_cloud(&mut r, 30, 2, 0.5);
    let nb = self_neighbors(big.positions(), 0.7, 16).unwrap();
    assert_eq!(forward_separable_features(big.features(), &nb, &zero).unwrap().max_abs(), 0.0);
}

#[test]
fn backward_trivial_cases() {
    let mut r = rng(12);
    let inst = random_instance(&mut r, 12, 2, 3, 3, true);
    let g = backward(&inst.cloud, &inst.neighbors, &inst.filter, &Matrix::zeros(12, 3)).unwrap();
    assert_eq!(g.features.max_abs(), 0.0);
    assert!(g.weights.iter().all(|&w| w == 0.0));
    assert!(g.bias.iter().all(|&b| b == 0.0));

    let grid = AnchorGrid::cubic(3, 0.2).unwrap();
    let f = DeformableFilter::random(grid, 2, 3, true, 1.0, &mut r).unwrap();
    let cloud = PointCloud::new(vec![[0.0; 3]], Matrix::from_rows(&[vec![2.0, -3.0]]).unwrap(), None).unwrap();
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let up = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
    let g = backward(&cloud, &nb, &f, &up).unwrap();
    let c = f.grid().center_index();
    for (i, w) in g.weights.iter().enumerate() {
        let (a, rest) = (i / 6, i % 6);
        let want = if a == c && rest % 3 == 1 { [2.0, -3.0][rest / 3] } else { 0.0 };
        assert_eq!(*w, want, "entry {i}");
    }
    assert!(backward(&cloud, &nb, &f, &Matrix::zeros(1, 2)).is_err());
}

#[test]
fn backward_matches_finite_differences() {
    let mut r = rng(13);
    for case in 0..20 {
        let m = if case == 0 { 8 } else { r.random_range(1..=16) };
        let (din, dout) = if case == 0 { (2, 3) } else { (r.random_range(1..=4), r.random_range(1..=4)) };
        let k = if case == 0 { 3 } else { [1, 3, 5][r.random_range(0..3)] };
        let inst = random_instance(&mut r, m, din, dout, k, true);
        let nb = &inst.neighbors;
        let h = forward(&inst.cloud, nb, &inst.filter).unwrap();
        let g = backward(&inst.cloud, nb, &inst.filter, &h.scale(2.0)).unwrap();

        let mut feats = inst.cloud.features().as_slice().to_vec();
        let fd = finite_diff(&mut feats, 1e-5, |p| {
            let f = Matrix::from_vec(m, din, p.to_vec()).unwrap();
            sum_sq(&forward_features(&f, nb, &inst.filter).unwrap())
        });
        assert!(rel_err(g.features.as_slice(), &fd) <= 1e-6, "features, case {case}");

        let mut filt = inst.filter.clone();
        let mut w = filt.weights().to_vec();
        let fd = finite_diff(&mut w, 1e-5, |p| {
            filt.weights_mut().copy_from_slice(p);
            sum_sq(&forward(&inst.cloud, nb, &filt).unwrap())
        });
        assert!(rel_err(&g.weights, &fd) <= 1e-6, "weights, case {case}");

        let mut filt = inst.filter.clone();
        let mut b = filt.bias().unwrap().to_vec();
        let fd = finite_diff(&mut b, 1e-5, |p| {
            filt.bias_mut().unwrap().copy_from_slice(p);
            sum_sq(&forward(&inst.cloud, nb, &filt).unwrap())
        });
        assert!(rel_err(&g.bias, &fd) <= 1e-6, "bias, case {case}");
    }
}

#[test]
fn separable_backward_matches_finite_differences() {
    let mut r = rng(14);
    for case in 0..10 {
        let m = r.random_range(1..=16);
        let (din, dout) = (r.random_range(1..=4), r.random_range(1..=4));
        let inst = random_instance(&mut r, m, din, dout, 3, false);
        let sep = random_separable(&mut r, inst.filter.grid().clone(), din, dout, true);
        let nb = &inst.neighbors;
        let feats = inst.cloud.features();
        let h = forward_separable_features(feats, nb, &sep).unwrap();
        let g = backward_separable(feats, nb, &sep, &h.scale(2.0)).unwrap();
        let loss = |f: &Matrix<f64>, s: &SeparableFilter<f64>| sum_sq(&forward_separable_features(f, nb, s).unwrap());

        let mut p = feats.as_slice().to_vec();
        let fd = finite_diff(&mut p, 1e-5, |p| loss(&Matrix::from_vec(m, din, p.to_vec()).unwrap(), &sep));
        assert!(rel_err(g.features.as_slice(), &fd) <= 1e-6, "features, case {case}");

        let mut s = sep.clone();
        let mut p = s.spatial().to_vec();
        let fd = finite_diff(&mut p, 1e-5, |p| {
            s.spatial_mut().copy_from_slice(p);
            loss(feats, &s)
        });
        assert!(rel_err(&g.spatial, &fd) <= 1e-6, "spatial, case {case}");

        let mut s = sep.clone();
        let mut p = s.pointwise().as_slice().to_vec();
        let fd = finite_diff(&mut p, 1e-5, |p| {
            s.pointwise_mut().as_mut_slice().copy_from_slice(p);
            loss(feats, &s)
        });
        assert!(rel_err(g.pointwise.as_slice(), &fd) <= 1e-6, "pointwise, case {case}");

        let mut s = sep.clone();
        let mut p = s.bias().unwrap().to_vec();
        let fd = finite_diff(&mut p, 1e-5, |p| {
            s.bias_mut().unwrap().copy_from_slice(p);
            loss(feats, &s)
        });
        assert!(rel_err(&g.bias, &fd) <= 1e-6, "bias, case {case}");
    }
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let mut r = rng(15);
    let inst = random_instance(&mut r, 300, 4, 5, 3, true);
    let up = random_matrix(&mut r, 300, 5);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                (
                    forward(&inst.cloud, &inst.neighbors, &inst.filter).unwrap(),
                    backward(&inst.cloud, &inst.neighbors, &inst.filter, &up).unwrap(),
                )
            })
    };
    let (h1, g1) = run(1);
    let (h4, g4) = run(4);
    assert_eq!(h1, h4);
    assert_eq!(g1, g4);
}

#[test]
fn single_precision_tracks_double() {
    let mut r = rng(16);
    let inst = random_instance(&mut r, 40, 3, 2, 3, true);
    let h64 = forward(&inst.cloud, &inst.neighbors, &inst.filter).unwrap();

    let pos32: Vec<[f32; 3]> = inst.cloud.positions().iter().map(|p| p.map(|v| v as f32)).collect();
    let feat32 = Matrix::from_vec(40, 3, inst.cloud.features().as_slice().iter().map(|&v| v as f32).collect()).unwrap();
    let cloud32 = PointCloud::new(pos32, feat32, None).unwrap();
    let u = inst.filter.grid().unit();
    let grid32 = AnchorGrid::new(3, u.map(|v| v as f32)).unwrap();
    let f32_filter = DeformableFilter::new(
        grid32,
        3,
        2,
        inst.filter.weights().iter().map(|&v| v as f32).collect(),
        inst.filter.bias().map(|b| b.iter().map(|&v| v as f32).collect()),
    )
    .unwrap();
    let nb32 = self_neighbors(cloud32.positions(), inst.neighbors.radius() as f32, inst.neighbors.cap()).unwrap();
    let h32 = forward(&cloud32, &nb32, &f32_filter).unwrap();
    let back: Vec<f64> = h32.as_slice().iter().map(|&v| v as f64).collect();
    assert!(rel_err(&back, h64.as_slice()) < 1e-4);
}
