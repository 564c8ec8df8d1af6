//! Scatter-mean rasterization of point features into cylinder maps and
//! sphere volumes.
//!
//! A point belongs to every cell whose center lies strictly closer than the
//! radius (planar distance for cylinders, full 3D distance for spheres), so
//! overlapping cells share points. Each cell stores the mean of its members'
//! features, or zeros when empty.
//!
//! Members of a cell are summed in a canonical order (coordinates, then
//! feature values, then index, all by `total_cmp`) so the result is
//! bit-identical under any permutation of the input points.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::{dist2, grid_arrange, grid_arrange_3d, GridSpec2D, GridSpec3D, PointSet};
use crate::tensor::Tensor;

/// Cell memberships in compressed row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    /// `offsets[j]..offsets[j + 1]` indexes `indices` for cell `j`.
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Membership {
    pub fn cells(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Member point indices of cell `j` in summation order.
    pub fn members(&self, j: usize) -> &[usize] {
        &self.indices[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CylinderMap {
    pub spec: GridSpec2D,
    /// `[H_c, W_c, M]`
    pub values: Tensor,
    /// `[H_c · W_c]`, row-major.
    pub counts: Vec<usize>,
    pub membership: Membership,
}

#[derive(Debug, Clone)]
pub struct SphereVolume {
    pub spec: GridSpec3D,
    /// `[H_s, W_s, Z_s, M]`
    pub values: Tensor,
    /// `[H_s · W_s · Z_s]`, row-major.
    pub counts: Vec<usize>,
    pub membership: Membership,
}

impl CylinderMap {
    pub fn feat_dim(&self) -> usize {
        self.values.shape()[2]
    }
}

impl SphereVolume {
    pub fn feat_dim(&self) -> usize {
        self.values.shape()[3]
    }
}

#[derive(Clone, Copy)]
enum Search {
    Hashed,
    Brute,
}

fn bucket_key<const D: usize>(p: &[f64; D], inv: f64) -> [i64; D] {
    let mut k = [0i64; D];
    for d in 0..D {
        k[d] = (p[d] * inv).floor() as i64;
    }
    k
}

/// Offsets of the 3^D neighborhood of a bucket.
fn neighborhood<const D: usize>() -> Vec<[i64; D]> {
    let mut out = vec![[0i64; D]];
    for d in 0..D {
        out = out
            .into_iter()
            .flat_map(|o| {
                (-1i64..=1).map(move |s| {
                    let mut n = o;
                    n[d] = s;
                    n
                })
            })
            .collect();
    }
    out
}

fn find_members<const D: usize>(
    points: &[[f64; D]],
    centers: &[[f64; D]],
    radius: f64,
    search: Search,
) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    match search {
        Search::Brute => {
            centers.iter().map(|c| (0..points.len()).filter(|&i| dist2(&points[i], c) < r2).collect()).collect()
        }
        Search::Hashed => {
            // Bucket edge equals the radius, so any member of a center lies in
            // the 3^D buckets around the center's bucket.
            let inv = 1.0 / radius;
            let mut buckets: HashMap<[i64; D], Vec<usize>> = HashMap::new();
            for (i, p) in points.iter().enumerate() {
                buckets.entry(bucket_key(p, inv)).or_default().push(i);
            }
            let offsets = neighborhood::<D>();
            centers
                .iter()
                .map(|c| {
                    let key = bucket_key(c, inv);
                    let mut members = Vec::new();
                    for o in &offsets {
                        let mut k = key;
                        for d in 0..D {
                            k[d] += o[d];
                        }
                        if let Some(b) = buckets.get(&k) {
                            members.extend(b.iter().copied().filter(|&i| dist2(&points[i], c) < r2));
                        }
                    }
                    members
                })
                .collect()
        }
    }
}

fn canonical_order<const D: usize>(a: usize, b: usize, points: &[[f64; D]], feats: &[f64], m: usize) -> Ordering {
    for (pa, pb) in points[a].iter().zip(&points[b]) {
        match pa.total_cmp(pb) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    for c in 0..m {
        match feats[a * m + c].total_cmp(&feats[b * m + c]) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.cmp(&b)
}

/// Shared scatter-mean; `out_shape` is the grid shape followed by M.
fn scatter_mean<const D: usize>(
    points: &[[f64; D]],
    feats: &Tensor,
    centers: &[[f64; D]],
    radius: f64,
    mut out_shape: Vec<usize>,
    search: Search,
    op: &'static str,
) -> (Tensor, Membership) {
    let n = points.len();
    let m = feats.shape()[1];
    let mut lists = find_members(points, centers, radius, search);
    let fd = feats.data();
    for l in &mut lists {
        l.sort_unstable_by(|&a, &b| canonical_order(a, b, points, &fd, m));
    }
    let mut offsets = Vec::with_capacity(centers.len() + 1);
    offsets.push(0);
    let mut indices = Vec::new();
    for l in &lists {
        indices.extend_from_slice(l);
        offsets.push(indices.len());
    }
    let membership = Membership { offsets, indices };

    let cells = centers.len();
    let mut values = vec![0.0; cells * m];
    for j in 0..cells {
        let mem = membership.members(j);
        if mem.is_empty() {
            continue;
        }
        let out = &mut values[j * m..(j + 1) * m];
        for &i in mem {
            out.iter_mut().zip(&fd[i * m..(i + 1) * m]).for_each(|(o, f)| *o += f);
        }
        let cnt = mem.len() as f64;
        out.iter_mut().for_each(|o| *o /= cnt);
    }
    drop(fd);
    out_shape.push(m);
    let mem = membership.clone();
    let t = Tensor::from_op(out_shape, values, op, vec![feats.clone()], move |g| {
        let mut gf = vec![0.0; n * m];
        for j in 0..mem.cells() {
            let members = mem.members(j);
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let gj = &g[j * m..(j + 1) * m];
            for &i in members {
                gf[i * m..(i + 1) * m].iter_mut().zip(gj).for_each(|(a, g)| *a += g * inv);
            }
        }
        vec![Some(gf)]
    });
    (t, membership)
}

fn build_map(ps: &PointSet, spec: GridSpec2D, search: Search) -> CylinderMap {
    let centers = grid_arrange(spec.h, spec.w);
    let (values, membership) =
        scatter_mean(&ps.xy(), &ps.feats, &centers, spec.radius, vec![spec.h, spec.w], search, "cylindricize");
    CylinderMap { spec, values, counts: membership.counts(), membership }
}

fn build_volume(ps: &PointSet, spec: GridSpec3D, search: Search) -> SphereVolume {
    let centers = grid_arrange_3d(spec.h, spec.w, spec.z);
    let (values, membership) =
        scatter_mean(&ps.coords, &ps.feats, &centers, spec.radius, vec![spec.h, spec.w, spec.z], search, "spheroidize");
    SphereVolume { spec, values, counts: membership.counts(), membership }
}

/// Mean-pools point features into cylinders around each 2D cell center,
/// using spatial hashing with bucket edge equal to the radius.
pub fn cylindricize(ps: &PointSet, spec: GridSpec2D) -> CylinderMap {
    build_map(ps, spec, Search::Hashed)
}

/// [`cylindricize`] with an O(N·cells) membership scan.
pub fn cylindricize_brute(ps: &PointSet, spec: GridSpec2D) -> CylinderMap {
    build_map(ps, spec, Search::Brute)
}

/// Mean-pools point features into spheres around each 3D cell center.
pub fn spheroidize(ps: &PointSet, spec: GridSpec3D) -> SphereVolume {
    build_volume(ps, spec, Search::Hashed)
}

pub fn spheroidize_brute(ps: &PointSet, spec: GridSpec3D) -> SphereVolume {
    build_volume(ps, spec, Search::Brute)
}
