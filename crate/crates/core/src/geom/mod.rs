//! Spatial primitives on normalized point sets.
//!
//! Coordinates are `[x, y, z]` with x the latitude axis, y the longitude axis
//! and z altitude. After patch normalization every coordinate lies in `[0, 1]`.
//! Grid cell `(i, j)` of an `h × w` partition of the unit square is centered at
//! `((i + 0.5) / h, (j + 0.5) / w)`; the first index runs along x.

mod grid;
mod neighbors;
mod raster;
mod sample;

pub use grid::{grid_arrange, grid_arrange_3d, GridSpec2D, GridSpec3D};
pub use neighbors::{fps, group, interpolate_3nn, knn, knn_coords, knn_coords_brute, Neighbors, INTERP_EPS};
pub use raster::{
    cylindricize, cylindricize_brute, spheroidize, spheroidize_brute, CylinderMap, Membership, SphereVolume,
};
pub use sample::{grid_sample, grid_sample_2d, grid_sample_3d};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

/// Points with per-point features and optional class labels.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub coords: Vec<Point3>,
    /// `[N, M]`
    pub feats: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl PointSet {
    pub fn new(coords: Vec<Point3>, feats: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if feats.rank() != 2 || feats.shape()[0] != coords.len() {
            return contract_err(format!(
                "point set has {} coordinates but features of shape {:?}",
                coords.len(),
                feats.shape()
            ));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return contract_err(format!("{} labels for {} points", l.len(), coords.len()));
            }
        }
        Ok(PointSet { coords, feats, labels })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.shape()[1]
    }

    /// True when every coordinate lies in the unit cube.
    pub fn is_normalized(&self) -> bool {
        self.coords.iter().all(|p| p.iter().all(|v| (0.0..=1.0).contains(v)))
    }

    /// Same points with different features.
    pub fn with_feats(&self, feats: Tensor) -> Result<PointSet> {
        PointSet::new(self.coords.clone(), feats, self.labels.clone())
    }

    /// Rows `indices`, keeping the feature graph linkage.
    pub fn subset(&self, indices: &[usize]) -> Result<PointSet> {
        let feats = self.feats.gather_rows(indices)?;
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        PointSet::new(coords, feats, labels)
    }

    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.coords.iter().map(|p| [p[0], p[1]]).collect()
    }
}

pub(crate) fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let v = a[d] - b[d];
        s += v * v;
    }
    s
}
