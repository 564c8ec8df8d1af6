mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{bits, random_ps, rng};
use tdconvs::geom::{
    cylindricize, fps, grid_arrange, grid_arrange_3d, grid_sample_2d, grid_sample_3d, knn, knn_coords, spheroidize,
    GridSpec2D, GridSpec3D, Membership, PointSet,
};
use tdconvs::Tensor;

fn permuted(ps: &PointSet, seed: u64) -> (PointSet, Vec<usize>) {
    let mut perm: Vec<usize> = (0..ps.len()).collect();
    perm.shuffle(&mut rng(seed));
    (ps.subset(&perm).unwrap(), perm)
}

/// Member sets per cell, expressed in original point indices.
fn member_sets(m: &Membership, perm: &[usize]) -> Vec<BTreeSet<usize>> {
    (0..m.cells()).map(|j| m.members(j).iter().map(|&i| perm[i]).collect()).collect()
}

fn naive_knn(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|x| x.1).collect()
}

/// Points in a box of the given extents, optionally snapped onto a coarse
/// lattice to create duplicates and distance ties.
fn shaped_points(n: usize, extent: [f64; 3], lattice: Option<f64>, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for d in 0..3 {
                let v: f64 = r.random::<f64>() * extent[d];
                p[d] = lattice.map_or(v, |s| (v / s).round() * s);
            }
            p
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cylindricize_is_permutation_invariant(seed in 0u64..1_000_000, n in 1usize..300, h in 1usize..9, w in 1usize..9) {
        let ps = random_ps(n, 3, 0, seed);
        let (qs, perm) = permuted(&ps, seed ^ 0x5eed);
        let a = cylindricize(&ps, GridSpec2D::new(h, w));
        let b = cylindricize(&qs, GridSpec2D::new(h, w));
        prop_assert_eq!(bits(&a.values.to_vec()), bits(&b.values.to_vec()));
        prop_assert_eq!(&a.counts, &b.counts);
        let identity: Vec<usize> = (0..n).collect();
        prop_assert_eq!(member_sets(&a.membership, &identity), member_sets(&b.membership, &perm));
    }

    #[test]
    fn spheroidize_is_permutation_invariant(
        seed in 0u64..1_000_000, n in 1usize..300, h in 1usize..7, w in 1usize..7, z in 1usize..4,
    ) {
        let ps = random_ps(n, 2, 0, seed);
        let (qs, perm) = permuted(&ps, seed ^ 0x5eed);
        let a = spheroidize(&ps, GridSpec3D::new(h, w, z));
        let b = spheroidize(&qs, GridSpec3D::new(h, w, z));
        prop_assert_eq!(bits(&a.values.to_vec()), bits(&b.values.to_vec()));
        prop_assert_eq!(&a.counts, &b.counts);
        let identity: Vec<usize> = (0..n).collect();
        prop_assert_eq!(member_sets(&a.membership, &identity), member_sets(&b.membership, &perm));
    }

    #[test]
    fn half_diagonal_radius_covers_every_point(seed in 0u64..1_000_000, n in 1usize..300, h in 1usize..12, w in 1usize..12, z in 1usize..5) {
        let ps = random_ps(n, 1, 0, seed);
        let map = cylindricize(&ps, GridSpec2D::new(h, w));
        let vol = spheroidize(&ps, GridSpec3D::new(h, w, z));
        for m in [&map.membership, &vol.membership] {
            let mut seen = vec![false; n];
            for &i in &m.indices {
                seen[i] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
        prop_assert!(map.counts.iter().sum::<usize>() >= n);
        prop_assert!(vol.counts.iter().sum::<usize>() >= n);
    }

    #[test]
    fn empty_cells_hold_zero_vectors(seed in 0u64..1_000_000, n in 1usize..40, h in 1usize..10, w in 1usize..10) {
        let ps = random_ps(n, 2, 0, seed);
        let map = cylindricize(&ps, GridSpec2D::new(h, w).with_radius(0.3 / h.max(w) as f64));
        let v = map.values.to_vec();
        for (j, &c) in map.counts.iter().enumerate() {
            if c == 0 {
                prop_assert_eq!(&v[j * 2..j * 2 + 2], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn sampling_reproduces_nodes_and_is_affine_between_them(
        seed in 0u64..1_000_000, h in 2usize..7, w in 2usize..7, z in 2usize..4, t in 0.0f64..=1.0,
    ) {
        let mut r = rng(seed);
        let m = 2;
        let ps = random_ps(200, m, 0, seed);
        let mut map = cylindricize(&ps, GridSpec2D::new(h, w));
        map.values = Tensor::new(&[h, w, m], (0..h * w * m).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let centers = grid_arrange(h, w);
        let coords: Vec<f64> = centers.iter().flatten().copied().collect();
        let out = grid_sample_2d(&map, &Tensor::new(&[centers.len(), 1, 2], coords).unwrap()).unwrap();
        prop_assert_eq!(bits(&out.to_vec()), bits(&map.values.to_vec()));

        // along a row of centers, between (i, j) and (i, j + 1)
        let (i, j) = (r.random_range(0..h), r.random_range(0..w - 1));
        let (a, b) = (centers[i * w + j], centers[i * w + j + 1]);
        let q = [a[0], a[1] + t * (b[1] - a[1])];
        let out = grid_sample_2d(&map, &Tensor::new(&[1, 1, 2], q.to_vec()).unwrap()).unwrap().to_vec();
        let v = map.values.to_vec();
        for c in 0..m {
            let want = (1.0 - t) * v[(i * w + j) * m + c] + t * v[(i * w + j + 1) * m + c];
            prop_assert!((out[c] - want).abs() < 1e-12, "{} vs {}", out[c], want);
        }

        let mut vol = spheroidize(&ps, GridSpec3D::new(h, w, z));
        vol.values = Tensor::new(&[h, w, z, m], (0..h * w * z * m).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let centers = grid_arrange_3d(h, w, z);
        let coords: Vec<f64> = centers.iter().flatten().copied().collect();
        let out = grid_sample_3d(&vol, &Tensor::new(&[centers.len(), 1, 3], coords).unwrap()).unwrap();
        prop_assert_eq!(bits(&out.to_vec()), bits(&vol.values.to_vec()));

        // along the altitude axis, between (i, j, 0) and (i, j, 1)
        let (i, j) = (r.random_range(0..h), r.random_range(0..w));
        let base = (i * w + j) * z;
        let (a, b) = (centers[base], centers[base + 1]);
        let q = [a[0], a[1], a[2] + t * (b[2] - a[2])];
        let out = grid_sample_3d(&vol, &Tensor::new(&[1, 1, 3], q.to_vec()).unwrap()).unwrap().to_vec();
        let v = vol.values.to_vec();
        for c in 0..m {
            let want = (1.0 - t) * v[base * m + c] + t * v[(base + 1) * m + c];
            prop_assert!((out[c] - want).abs() < 1e-12, "{} vs {}", out[c], want);
        }
    }

    #[test]
    fn knn_matches_naive_sort(
        seed in 0u64..1_000_000,
        n in 1usize..400,
        k_frac in 0.0f64..1.0,
        flat in any::<bool>(),
        lattice in any::<bool>(),
    ) {
        let extent = if flat { [1.0, 1.0, 1e-3] } else { [1.0, 0.3, 1.0] };
        let pts = shaped_points(n, extent, lattice.then_some(0.1), seed);
        let queries = shaped_points(50, [1.2, 1.2, 1.2], None, seed ^ 1);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let got = knn_coords(&pts, &queries, k).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            prop_assert_eq!(got.row(qi), &naive_knn(&pts, q, k)[..]);
        }
        let own = knn_coords(&pts, &pts, k).unwrap();
        for (qi, q) in pts.iter().enumerate() {
            prop_assert_eq!(own.row(qi), &naive_knn(&pts, q, k)[..]);
        }
    }

    #[test]
    fn knn_and_fps_ignore_features(seed in 0u64..1_000_000, n in 2usize..200, k in 1usize..16) {
        let a = random_ps(n, 3, 0, seed);
        let b = a.with_feats(random_ps(n, 5, 0, seed + 1).feats).unwrap();
        let k = k.min(n);
        prop_assert_eq!(knn(&a, k).unwrap(), knn(&b, k).unwrap());
        let m = (n / 2).max(1);
        prop_assert_eq!(fps(&a, m).unwrap(), fps(&b, m).unwrap());
    }

    #[test]
    fn fps_selects_distinct_points_greedily(seed in 0u64..1_000_000, n in 2usize..200, frac in 0.0f64..1.0) {
        let ps = random_ps(n, 1, 0, seed);
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let sel = fps(&ps, m).unwrap();
        prop_assert_eq!(sel.len(), m);
        prop_assert_eq!(sel.iter().collect::<BTreeSet<_>>().len(), m);
        let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>();
        // each pick is a farthest point from the ones before it
        for s in 1..m {
            let min_to_sel = |i: usize| sel[..s].iter().map(|&j| d2(&ps.coords[i], &ps.coords[j])).fold(f64::INFINITY, f64::min);
            let best = (0..n).map(min_to_sel).fold(0.0, f64::max);
            prop_assert_eq!(min_to_sel(sel[s]), best);
        }
        prop_assert_eq!(fps(&ps, m).unwrap(), sel);
    }
}
