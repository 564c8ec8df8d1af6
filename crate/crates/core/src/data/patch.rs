use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PointTable;
use crate::error::{contract_err, Error, Result};
use crate::geom::PointSet;
use crate::tensor::Tensor;

/// A square tile of raw points.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    /// Raw coordinates.
    pub coords: Vec<[f64; 3]>,
    /// Row-major `[N, feat_dim]`.
    pub feats: Vec<f64>,
    pub feat_dim: usize,
    pub labels: Option<Vec<usize>>,
    /// Row of each point in the source table.
    pub rows: Vec<usize>,
    pub source_id: String,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Tile index of offset `d` for tiles of size `s`: tiles cover `(k·s, (k+1)·s]`
/// except the first, which also holds `d = 0`.
fn tile_index(d: f64, s: f64, n_tiles: usize) -> usize {
    let mut k = ((d / s).ceil() as isize - 1).max(0) as usize;
    k = k.min(n_tiles - 1);
    // guard against rounding in the division
    if k > 0 && d <= k as f64 * s {
        k -= 1;
    } else if k + 1 < n_tiles && d > (k + 1) as f64 * s {
        k += 1;
    }
    k
}

/// Splits `table` into `size × size` tiles anchored at the minimum xy corner.
///
/// Points on an edge shared by two tiles go to the tile with the lower index.
/// Tiles are emitted row-major by (x tile, y tile); empty tiles are dropped and
/// points keep their table order within a tile.
pub fn tile_patches(table: &PointTable, size: f64, source_id: &str) -> Result<Vec<Patch>> {
    if table.is_empty() {
        return Err(Error::Data(format!("{source_id}: no points to tile")));
    }
    if size.is_nan() || size <= 0.0 {
        return Err(Error::Config(format!("patch size must be positive, got {size}")));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &table.xyz {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let n_tiles = [0, 1].map(|d| (((hi[d] - lo[d]) / size).ceil() as usize).max(1));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n_tiles[0] * n_tiles[1]];
    for (i, p) in table.xyz.iter().enumerate() {
        let kx = tile_index(p[0] - lo[0], size, n_tiles[0]);
        let ky = tile_index(p[1] - lo[1], size, n_tiles[1]);
        buckets[kx * n_tiles[1] + ky].push(i);
    }
    let m = table.feat_dim;
    let patches = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(b, rows)| {
            let (kx, ky) = (b / n_tiles[1], b % n_tiles[1]);
            Patch {
                origin: [lo[0] + kx as f64 * size, lo[1] + ky as f64 * size],
                extent: [size, size],
                coords: rows.iter().map(|&i| table.xyz[i]).collect(),
                feats: rows.iter().flat_map(|&i| table.feats[i * m..(i + 1) * m].iter().copied()).collect(),
                feat_dim: m,
                labels: table.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
                rows,
                source_id: format!("{source_id}#{kx}_{ky}"),
            }
        })
        .collect();
    Ok(patches)
}

/// What [`normalize_patch`] needs to map coordinates back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormInfo {
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

/// Maps coordinates into the unit cube and standardizes features.
///
/// x and y are scaled by the tile extent so tiles keep their geometry; z is
/// min-max scaled over the patch, landing on 0.5 when all points share one
/// altitude. Each feature gets zero mean and unit variance over the patch, or
/// is zeroed when constant. Patches without features receive a constant 1.
pub fn normalize_patch(patch: &Patch) -> Result<(PointSet, NormInfo)> {
    let n = patch.len();
    if n == 0 {
        return contract_err("cannot normalize an empty patch");
    }
    let z_min = patch.coords.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let z_max = patch.coords.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let info = NormInfo { origin: patch.origin, extent: patch.extent, z_min, z_max };
    let coords = patch
        .coords
        .iter()
        .map(|p| {
            let z = if z_max > z_min { (p[2] - z_min) / (z_max - z_min) } else { 0.5 };
            [
                ((p[0] - info.origin[0]) / info.extent[0]).clamp(0.0, 1.0),
                ((p[1] - info.origin[1]) / info.extent[1]).clamp(0.0, 1.0),
                z,
            ]
        })
        .collect();
    let m = patch.feat_dim;
    let feats = if m == 0 {
        Tensor::full(&[n, 1], 1.0)
    } else {
        let mut f = patch.feats.clone();
        for c in 0..m {
            let mean = (0..n).map(|i| f[i * m + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (f[i * m + c] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            for i in 0..n {
                let v = &mut f[i * m + c];
                *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
            }
        }
        Tensor::new(&[n, m], f)?
    };
    Ok((PointSet::new(coords, feats, patch.labels.clone())?, info))
}

/// Inverse of the coordinate part of [`normalize_patch`].
pub fn denormalize(coords: &[[f64; 3]], info: &NormInfo) -> Vec<[f64; 3]> {
    coords
        .iter()
        .map(|p| {
            let z = if info.z_max > info.z_min { info.z_min + p[2] * (info.z_max - info.z_min) } else { info.z_min };
            [info.origin[0] + p[0] * info.extent[0], info.origin[1] + p[1] * info.extent[1], z]
        })
        .collect()
}

/// Normalizes patches, in parallel when `threads > 0`, preserving order.
pub fn prepare_patches(patches: &[Patch], threads: usize) -> Result<Vec<(PointSet, NormInfo)>> {
    // Tensors are not Send, so workers return plain data and the tensors are
    // built on this thread.
    type Plain = (Vec<[f64; 3]>, Vec<usize>, Vec<f64>, Option<Vec<usize>>, NormInfo);
    let work = |p: &Patch| -> Result<Plain> {
        let (ps, info) = normalize_patch(p)?;
        Ok((ps.coords.clone(), ps.feats.shape().to_vec(), ps.feats.to_vec(), ps.labels.clone(), info))
    };
    let plain: Vec<Result<Plain>> = if threads == 0 {
        patches.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
        pool.install(|| patches.par_iter().map(work).collect())
    };
    plain
        .into_iter()
        .map(|r| {
            let (coords, shape, feats, labels, info) = r?;
            Ok((PointSet::new(coords, Tensor::new(&shape, feats)?, labels)?, info))
        })
        .collect()
}

/// Draws `n` points: without replacement when the set is large enough, with
/// replacement otherwise. Returns the sample and the chosen indices.
pub fn sample_fixed(ps: &PointSet, n: usize, seed: u64) -> Result<(PointSet, Vec<usize>)> {
    if ps.is_empty() {
        return contract_err("cannot sample from an empty point set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if ps.len() >= n {
        index::sample(&mut rng, ps.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..ps.len())).collect()
    };
    Ok((ps.subset(&idx)?, idx))
}

/// Labels of each level of a subset chain; every entry of `chain` indexes the
/// full-resolution `labels`.
pub fn label_pyramid(labels: &[usize], chain: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    chain
        .iter()
        .map(|level| {
            level
                .iter()
                .map(|&i| match labels.get(i) {
                    Some(&l) => Ok(l),
                    None => contract_err(format!("index {i} outside {} labels", labels.len())),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(xyz: Vec<[f64; 3]>) -> PointTable {
        let n = xyz.len();
        PointTable { xyz, feats: (0..n).map(|i| i as f64).collect(), feat_dim: 1, labels: Some(vec![0; n]) }
    }

    #[test]
    fn single_tile() {
        let t = table(vec![[1.0, 1.0, 0.0], [20.0, 5.0, 1.0], [3.0, 29.0, 2.0]]);
        let p = tile_patches(&t, 30.0, "t").unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].rows, vec![0, 1, 2]);
    }

    #[test]
    fn shared_edge_goes_to_lower_tile() {
        let t = table(vec![[0.0, 0.0, 0.0], [30.0, 0.0, 0.0], [30.5, 0.0, 0.0], [60.0, 0.0, 0.0]]);
        let p = tile_patches(&t, 30.0, "t").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].rows, vec![0, 1]);
        assert_eq!(p[1].rows, vec![2, 3]);
        for patch in &p {
            for c in &patch.coords {
                assert!(c[0] >= patch.origin[0] && c[0] <= patch.origin[0] + patch.extent[0]);
            }
        }
    }

    #[test]
    fn normalize_single_point() {
        let patch = Patch {
            origin: [10.0, 20.0],
            extent: [30.0, 30.0],
            coords: vec![[25.0, 26.0, 7.0]],
            feats: vec![3.0],
            feat_dim: 1,
            labels: None,
            rows: vec![0],
            source_id: "p".into(),
        };
        let (ps, info) = normalize_patch(&patch).unwrap();
        assert_eq!(ps.coords, vec![[0.5, 0.2, 0.5]]);
        assert_eq!(ps.feats.to_vec(), vec![0.0]);
        assert_eq!(denormalize(&ps.coords, &info), vec![[25.0, 26.0, 7.0]]);
    }

    #[test]
    fn featureless_patch_gets_constant() {
        let patch = Patch {
            origin: [0.0, 0.0],
            extent: [1.0, 1.0],
            coords: vec![[0.0, 0.0, 0.0], [1.0, 1.0, 2.0]],
            feats: vec![],
            feat_dim: 0,
            labels: None,
            rows: vec![0, 1],
            source_id: "p".into(),
        };
        let (ps, _) = normalize_patch(&patch).unwrap();
        assert_eq!(ps.coords, vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        assert_eq!(ps.feats.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn sample_sizes() {
        let n = 10;
        let coords = (0..n).map(|i| [i as f64 / 10.0, 0.0, 0.0]).collect();
        let ps = PointSet::new(coords, Tensor::zeros(&[n, 1]), None).unwrap();
        let (all, idx) = sample_fixed(&ps, 10, 3).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(all.len(), 10);
        let (big, idx) = sample_fixed(&ps, 4096, 3).unwrap();
        assert_eq!(big.len(), 4096);
        assert!(idx.iter().all(|&i| i < 10));
        assert_eq!(sample_fixed(&ps, 4096, 3).unwrap().1, idx);
    }

    #[test]
    fn pyramid_gathers() {
        let labels = vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let p = label_pyramid(&labels, &[(0..10).collect(), vec![0, 5, 9]]).unwrap();
        assert_eq!(p[0], labels);
        assert_eq!(p[1], vec![3, 9, 3]);
        assert!(label_pyramid(&labels, &[vec![10]]).is_err());
    }
}
