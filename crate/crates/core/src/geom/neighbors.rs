//! Nearest-neighbor search, farthest point sampling, grouping and
//! inverse-distance feature interpolation.

use std::cmp::Ordering;

use super::{dist2, Point3, PointSet};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Regularizer in the inverse-distance weights `1 / (d + ε)`.
pub const INTERP_EPS: f64 = 1e-8;

/// Flat `[N, k]` neighbor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Uniform-grid index over a point cloud for exact k-NN queries.
struct GridIndex {
    lo: [f64; 3],
    size: [f64; 3],
    dims: [usize; 3],
    /// Cell start offsets into `order`, length cells + 1.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl GridIndex {
    fn build(points: &[Point3], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|d| hi[d] - lo[d]).collect();
        let max_ext = extent.iter().copied().fold(0.0, f64::max);
        // about k/4 points per occupied cell in the uniform case
        let target = (k.max(4) as f64 / 4.0).max(1.0);
        let n = points.len() as f64;
        let mut dims = [1usize; 3];
        if max_ext > 0.0 {
            let floor = max_ext * 1e-6;
            let vol: f64 = extent.iter().map(|e| e.max(floor)).product();
            let edge = (vol * target / n).cbrt();
            for d in 0..3 {
                dims[d] = ((extent[d] / edge).ceil() as usize).clamp(1, 128);
            }
        }
        let mut size = [0.0; 3];
        for d in 0..3 {
            size[d] = if dims[d] > 1 { extent[d] / dims[d] as f64 } else { f64::INFINITY };
        }
        let mut idx = GridIndex { lo, size, dims, starts: Vec::new(), order: Vec::new() };
        let cells = dims.iter().product::<usize>();
        let mut count = vec![0usize; cells + 1];
        let cell_of: Vec<usize> = points.iter().map(|p| idx.flat(idx.cell(p))).collect();
        for &c in &cell_of {
            count[c + 1] += 1;
        }
        for c in 0..cells {
            count[c + 1] += count[c];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        idx.starts = count;
        idx.order = order;
        idx
    }

    fn cell(&self, p: &Point3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for d in 0..3 {
            if self.dims[d] > 1 {
                let v = ((p[d] - self.lo[d]) / self.size[d]).floor();
                c[d] = if v.is_nan() || v < 0.0 { 0 } else { (v as usize).min(self.dims[d] - 1) };
            }
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Lower bound on the distance from `q` to any cell outside the box of
    /// Chebyshev radius `r` around `qc`; infinite once the box covers the grid.
    fn unvisited_distance(&self, q: &Point3, qc: [usize; 3], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for d in 0..3 {
            if self.dims[d] == 1 {
                continue;
            }
            if qc[d] > r {
                let edge = self.lo[d] + (qc[d] - r) as f64 * self.size[d];
                bound = bound.min((q[d] - edge).max(0.0));
            }
            if qc[d] + r + 1 < self.dims[d] {
                let edge = self.lo[d] + (qc[d] + r + 1) as f64 * self.size[d];
                bound = bound.min((edge - q[d]).max(0.0));
            }
        }
        bound
    }

    fn query(&self, points: &[Point3], q: &Point3, k: usize, out: &mut Vec<usize>) {
        let qc = self.cell(q);
        let max_r = *self.dims.iter().max().expect("3 dims");
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(4 * k);
        for r in 0..max_r {
            let ri = r as isize;
            let range = |d: usize| {
                let c = qc[d] as isize;
                (c - ri).max(0) as usize..=((c + ri) as usize).min(self.dims[d] - 1)
            };
            for x in range(0) {
                for y in range(1) {
                    for z in range(2) {
                        let cheb = (x as isize - qc[0] as isize)
                            .abs()
                            .max((y as isize - qc[1] as isize).abs())
                            .max((z as isize - qc[2] as isize).abs());
                        if cheb != ri {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            best.push((dist2(&points[i], q), i));
                        }
                    }
                }
            }
            if best.len() > k {
                best.select_nth_unstable_by(k - 1, by_dist_then_index);
                best.truncate(k);
            }
            let bound = self.unvisited_distance(q, qc, r);
            if best.len() == k && best.iter().all(|b| b.0 < bound * bound * (1.0 - 1e-9)) {
                break;
            }
        }
        best.sort_unstable_by(by_dist_then_index);
        out.extend(best.iter().map(|b| b.1));
    }
}

/// `k` nearest entries of `points` for every query, ascending by
/// (squared distance, index).
pub fn knn_coords(points: &[Point3], queries: &[Point3], k: usize) -> Result<Neighbors> {
    if k > points.len() {
        return contract_err(format!("knn: k = {k} exceeds the {} available points", points.len()));
    }
    if k == 0 {
        return Ok(Neighbors { k, indices: Vec::new() });
    }
    let index = GridIndex::build(points, k);
    let mut indices = Vec::with_capacity(queries.len() * k);
    for q in queries {
        index.query(points, q, k, &mut indices);
    }
    Ok(Neighbors { k, indices })
}

/// [`knn_coords`] by a full scan of every point per query.
pub fn knn_coords_brute(points: &[Point3], queries: &[Point3], k: usize) -> Result<Neighbors> {
    if k > points.len() {
        return contract_err(format!("knn: k = {k} exceeds the {} available points", points.len()));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for q in queries {
        all.clear();
        all.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, q), i)));
        if k > 0 && k < all.len() {
            all.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        all.truncate(k);
        all.sort_unstable_by(by_dist_then_index);
        indices.extend(all.iter().map(|b| b.1));
    }
    Ok(Neighbors { k, indices })
}

/// k nearest neighbors of every point, the point itself included.
pub fn knn(ps: &PointSet, k: usize) -> Result<Neighbors> {
    knn_coords(&ps.coords, &ps.coords, k)
}

/// Farthest point sampling.
///
/// Starts from the point farthest from the centroid and repeatedly adds the
/// point with the largest distance to the selected set; ties go to the lowest
/// index.
pub fn fps(ps: &PointSet, n: usize) -> Result<Vec<usize>> {
    let pts = &ps.coords;
    if n == 0 || n > pts.len() {
        return contract_err(format!("fps: cannot select {n} of {} points", pts.len()));
    }
    let mut centroid = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= pts.len() as f64);

    let argmax = |vals: &[f64]| {
        let mut best = 0;
        for i in 1..vals.len() {
            if vals[i] > vals[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = pts.iter().map(|p| dist2(p, &centroid)).collect();
    let mut chosen = Vec::with_capacity(n);
    chosen.push(argmax(&from_centroid));
    let mut min_d: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[chosen[0]])).collect();
    while chosen.len() < n {
        let next = argmax(&min_d);
        chosen.push(next);
        let c = pts[next];
        for (m, p) in min_d.iter_mut().zip(pts) {
            let d = dist2(p, &c);
            if d < *m {
                *m = d;
            }
        }
    }
    Ok(chosen)
}

/// Per-neighbor `[relative xyz, neighbor features]`, shape `[N, k, 3 + M]`.
/// Gradients flow to the features only.
pub fn group(ps: &PointSet, nb: &Neighbors) -> Result<Tensor> {
    let n = ps.len();
    let k = nb.k;
    if nb.indices.len() != n * k {
        return contract_err(format!("group: neighbor table has {} entries for {n}×{k}", nb.indices.len()));
    }
    if let Some(&bad) = nb.indices.iter().find(|&&i| i >= n) {
        return contract_err(format!("group: neighbor index {bad} out of range for {n} points"));
    }
    let m = ps.feat_dim();
    let w = 3 + m;
    let mut out = vec![0.0; n * k * w];
    {
        let f = ps.feats.data();
        for i in 0..n {
            let c = ps.coords[i];
            for (j, &nbr) in nb.row(i).iter().enumerate() {
                let o = &mut out[(i * k + j) * w..(i * k + j + 1) * w];
                let p = ps.coords[nbr];
                o[0] = p[0] - c[0];
                o[1] = p[1] - c[1];
                o[2] = p[2] - c[2];
                o[3..].copy_from_slice(&f[nbr * m..(nbr + 1) * m]);
            }
        }
    }
    let idx = nb.indices.clone();
    Ok(Tensor::from_op(vec![n, k, w], out, "group", vec![ps.feats.clone()], move |g| {
        let mut gf = vec![0.0; n * m];
        for (s, &nbr) in idx.iter().enumerate() {
            gf[nbr * m..(nbr + 1) * m].iter_mut().zip(&g[s * w + 3..(s + 1) * w]).for_each(|(a, g)| *a += g);
        }
        vec![Some(gf)]
    }))
}

/// Inverse-distance-weighted average of the three nearest source features at
/// each destination; sources with fewer than three points are padded by
/// repetition. Differentiable with respect to the source features.
pub fn interpolate_3nn(src: &PointSet, dst: &[Point3]) -> Result<Tensor> {
    let n_src = src.len();
    if n_src == 0 {
        return contract_err("interpolate_3nn: empty source set");
    }
    let k = n_src.min(3);
    let nb = knn_coords(&src.coords, dst, k)?;
    let n = dst.len();
    let m = src.feat_dim();
    let mut idx = Vec::with_capacity(n * 3);
    let mut wts = Vec::with_capacity(n * 3);
    for (q, p) in dst.iter().enumerate() {
        let row = nb.row(q);
        let picked: Vec<usize> = (0..3).map(|j| row[j % k]).collect();
        let inv: Vec<f64> = picked.iter().map(|&i| 1.0 / (dist2(&src.coords[i], p).sqrt() + INTERP_EPS)).collect();
        let total: f64 = inv.iter().sum();
        idx.extend_from_slice(&picked);
        wts.extend(inv.iter().map(|v| v / total));
    }
    let mut out = vec![0.0; n * m];
    {
        let f = src.feats.data();
        for q in 0..n {
            let o = &mut out[q * m..(q + 1) * m];
            for j in 0..3 {
                let (i, w) = (idx[q * 3 + j], wts[q * 3 + j]);
                o.iter_mut().zip(&f[i * m..(i + 1) * m]).for_each(|(o, f)| *o += w * f);
            }
        }
    }
    Ok(Tensor::from_op(vec![n, m], out, "interpolate_3nn", vec![src.feats.clone()], move |g| {
        let mut gf = vec![0.0; n_src * m];
        for q in 0..n {
            let gq = &g[q * m..(q + 1) * m];
            for j in 0..3 {
                let (i, w) = (idx[q * 3 + j], wts[q * 3 + j]);
                gf[i * m..(i + 1) * m].iter_mut().zip(gq).for_each(|(a, g)| *a += w * g);
            }
        }
        vec![Some(gf)]
    }))
}
