mod common;

use common::*;
use deformconv_core::rng::{permutation, uniform};
use deformconv_core::spatial::{brute_force_neighbors, build_index, radius_neighbors, self_neighbors};
use rand::Rng;

#[test]
fn grid_index_membership() {
    let mut r = rng(200);
    let pts = random_positions(&mut r, 1000, 3.0);
    let idx = build_index(&pts, 0.37).unwrap();
    let mut seen: Vec<u32> = idx.cells().flat_map(|(_, v)| v.iter().copied()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..1000).collect::<Vec<u32>>());
    for (key, members) in idx.cells() {
        for &i in members {
            let want: [i64; 3] = std::array::from_fn(|d| (pts[i as usize][d] / 0.37).floor() as i64);
            assert_eq!(*key, want);
        }
    }
}

#[test]
fn floor_semantics() {
    let idx = build_index(&[[-0.1, 0.0, 0.0]], 1.0).unwrap();
    assert_eq!(idx.cell([-1, 0, 0]), Some(&[0u32][..]));
    assert!(build_index(&[[f64::NAN, 0.0, 0.0]], 1.0).is_err());
}

#[test]
fn radius_exclusion() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let idx = build_index(&pts, 0.5).unwrap();
    let nb = radius_neighbors(&idx, &pts[..1], 0.5, 16).unwrap();
    assert_eq!(nb.indices(0), &[0]);
    assert_eq!(nb.offsets(0), &[[0.0; 3]]);
}

#[test]
fn grid_search_matches_brute_force() {
    let mut r = rng(201);
    for trial in 0..40 {
        let m = if trial == 0 { 200 } else { r.random_range(1..400) };
        let pts = random_positions(&mut r, m, 1.0);
        let queries = random_positions(&mut r, 50, 1.2);
        let radius = if trial == 0 { 0.3 } else { uniform(&mut r, 0.05, 0.8) };
        let cap = if trial == 0 { 16 } else { r.random_range(1..40) };
        let cell = radius * uniform::<f64>(&mut r, 0.3, 2.0);
        let idx = build_index(&pts, cell).unwrap();
        let fast = radius_neighbors(&idx, &queries, radius, cap).unwrap();
        let slow = brute_force_neighbors(&pts, &queries, radius, cap).unwrap();
        assert_eq!(fast, slow, "trial {trial}");
    }
}

#[test]
fn table_invariants() {
    let mut r = rng(202);
    let pts = random_positions(&mut r, 500, 1.0);
    let nb = self_neighbors(&pts, 0.25, 12).unwrap();
    for q in 0..500 {
        let ids = nb.indices(q);
        assert!(ids.len() <= 12 && !ids.is_empty());
        assert_eq!(ids[0] as usize, q);
        let d: Vec<f64> = nb.offsets(q).iter().map(|o| o.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        assert!(d.iter().all(|&x| x <= 0.25));
        for w in 1..ids.len() {
            assert!((d[w - 1], ids[w - 1]) < (d[w], ids[w]));
        }
        for (&i, o) in ids.iter().zip(nb.offsets(q)) {
            let want: [f64; 3] = std::array::from_fn(|c| pts[q][c] - pts[i as usize][c]);
            assert_eq!(*o, want);
        }
    }
}

#[test]
fn translation_stability() {
    let mut r = rng(203);
    for _ in 0..20 {
        let pts = random_positions(&mut r, 300, 1.0);
        let nb = self_neighbors(&pts, 0.3, 16).unwrap();
        let delta: [f64; 3] = std::array::from_fn(|_| uniform(&mut r, -100.0, 100.0));
        let moved: Vec<[f64; 3]> = pts.iter().map(|p| std::array::from_fn(|d| p[d] + delta[d])).collect();
        let nb2 = self_neighbors(&moved, 0.3, 16).unwrap();
        for q in 0..300 {
            assert_eq!(nb.indices(q), nb2.indices(q));
            for (a, b) in nb.offsets(q).iter().zip(nb2.offsets(q)) {
                assert!((0..3).all(|d| (a[d] - b[d]).abs() <= 1e-12));
            }
        }
    }
}

#[test]
fn permutation_covariance() {
    let mut r = rng(204);
    let pts = random_positions(&mut r, 300, 1.0);
    let nb = self_neighbors(&pts, 0.3, 8).unwrap();
    let order = permutation(&mut r, 300);
    let mut inverse = vec![0u32; 300];
    for (new, &old) in order.iter().enumerate() {
        inverse[old] = new as u32;
    }
    let shuffled: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
    let nb2 = self_neighbors(&shuffled, 0.3, 8).unwrap();
    for (new, &old) in order.iter().enumerate() {
        let mapped: Vec<u32> = nb.indices(old).iter().map(|&i| inverse[i as usize]).collect();
        assert_eq!(nb2.indices(new), &mapped[..]);
    }
}

#[test]
fn thread_count_does_not_change_table() {
    let mut r = rng(205);
    let pts = random_positions(&mut r, 2000, 1.0);
    let run = |t| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| self_neighbors(&pts, 0.2, 16).unwrap())
    };
    assert_eq!(run(1), run(3));
}
