use serde::{Deserialize, Serialize};

/// A cylinder map layout over the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec2D {
    pub h: usize,
    pub w: usize,
    pub radius: f64,
}

impl GridSpec2D {
    /// Radius defaults to the cell half-diagonal, the smallest radius at which
    /// the cylinders cover the whole square.
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "grid must have at least one cell per axis");
        let radius = 0.5 * ((1.0 / h as f64).powi(2) + (1.0 / w as f64).powi(2)).sqrt();
        GridSpec2D { h, w, radius }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        self.radius = radius;
        self
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.h, self.w]
    }
}

/// A sphere volume layout over the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec3D {
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub radius: f64,
}

impl GridSpec3D {
    /// Radius defaults to the 3D cell half-diagonal.
    pub fn new(h: usize, w: usize, z: usize) -> Self {
        assert!(h >= 1 && w >= 1 && z >= 1, "grid must have at least one cell per axis");
        let radius = 0.5 * ((1.0 / h as f64).powi(2) + (1.0 / w as f64).powi(2) + (1.0 / z as f64).powi(2)).sqrt();
        GridSpec3D { h, w, z, radius }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        self.radius = radius;
        self
    }

    pub fn cells(&self) -> usize {
        self.h * self.w * self.z
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.h, self.w, self.z]
    }
}

/// Cell centers of an `h × w` partition of the unit square, row-major `[h, w]`.
pub fn grid_arrange(h: usize, w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push([(i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64]);
        }
    }
    out
}

/// Cell centers of an `h × w × z` partition of the unit cube, row-major `[h, w, z]`.
pub fn grid_arrange_3d(h: usize, w: usize, z: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(h * w * z);
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                out.push([(i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64, (k as f64 + 0.5) / z as f64]);
            }
        }
    }
    out
}
