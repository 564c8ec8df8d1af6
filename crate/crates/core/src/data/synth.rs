//! Deterministic synthetic airborne scene.
//!
//! One square tile with ground, building roofs, trees, cars and powerlines.
//! Objects sit in separate parts of the tile and at class-specific altitudes;
//! a single intensity feature is drawn around a per-class mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PointTable;
use crate::error::{contract_err, Result};

pub const SYNTH_TILE_M: f64 = 30.0;
pub const SYNTH_CLASS_NAMES: [&str; 5] = ["ground", "roof", "tree", "car", "powerline"];
/// Percentage of points per class before renormalizing to the requested
/// classes.
pub const SYNTH_PROPORTIONS: [usize; 5] = [40, 25, 20, 7, 8];
const INTENSITY_MEAN: [f64; 5] = [0.2, 0.65, 0.35, 0.85, 0.5];
const INTENSITY_SD: f64 = 0.08;

/// Points per class, the remainder going to ground.
fn class_counts(n_points: usize, n_classes: usize) -> Vec<usize> {
    let total: usize = SYNTH_PROPORTIONS[..n_classes].iter().sum();
    let mut counts: Vec<usize> = SYNTH_PROPORTIONS[..n_classes].iter().map(|p| p * n_points / total).collect();
    counts[0] += n_points - counts.iter().sum::<usize>();
    counts
}

fn ground(rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> [f64; 3] {
    let (x, y) = (rng.random_range(0.0..SYNTH_TILE_M), rng.random_range(0.0..SYNTH_TILE_M));
    let z = 0.3 * (x / 5.0).sin() + 0.2 * (y / 7.0).cos() + noise.sample(rng);
    [x, y, z]
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]` with an attribute.
struct Block {
    x: (f64, f64),
    y: (f64, f64),
    level: f64,
}

fn in_block(rng: &mut ChaCha8Rng, b: &Block) -> (f64, f64) {
    (rng.random_range(b.x.0..b.x.1), rng.random_range(b.y.0..b.y.1))
}

/// Generates `n_points` labeled points (`n_classes ≤ 5`, first classes of
/// [`SYNTH_CLASS_NAMES`]) in a 30 m tile, shuffled.
pub fn synth_scene(seed: u64, n_points: usize, n_classes: usize) -> Result<PointTable> {
    if !(1..=5).contains(&n_classes) {
        return contract_err(format!("synthetic scenes have 1 to 5 classes, asked for {n_classes}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0, 0.05).expect("valid sd");
    let intensity = Normal::new(0.0, INTENSITY_SD).expect("valid sd");

    // Buildings in the west half, trees in the east half, cars on a road
    // along the south edge, powerlines along the north edge.
    let buildings: Vec<Block> = (0..3)
        .map(|i| {
            let x0 = 2.0 + 4.5 * i as f64 + rng.random_range(0.0..0.5);
            let y0 = 8.0 + rng.random_range(0.0..4.0);
            Block { x: (x0, x0 + 3.5), y: (y0, y0 + rng.random_range(5.0..8.0)), level: rng.random_range(5.5..11.5) }
        })
        .collect();
    let trees: Vec<[f64; 3]> = (0..4)
        .map(|i| {
            let cx = 17.5 + 6.0 * (i % 2) as f64 + rng.random_range(-0.5..0.5);
            let cy = 10.0 + 6.5 * (i / 2) as f64 + rng.random_range(-0.5..0.5);
            [cx, cy, rng.random_range(7.0..11.0)]
        })
        .collect();
    let cars: Vec<Block> = (0..4)
        .map(|i| {
            let x0 = 3.0 + 6.5 * i as f64 + rng.random_range(0.0..1.0);
            let y0 = 2.0 + rng.random_range(0.0..1.0);
            Block { x: (x0, x0 + 4.5), y: (y0, y0 + 1.8), level: 0.0 }
        })
        .collect();
    let strands: Vec<f64> = (0..3).map(|i| 26.0 + 1.2 * i as f64).collect();

    let counts = class_counts(n_points, n_classes);
    let mut pts: Vec<([f64; 3], usize)> = Vec::with_capacity(n_points);
    for (class, &count) in counts.iter().enumerate() {
        for j in 0..count {
            let p = match class {
                0 => ground(&mut rng, &small),
                1 => {
                    let b = &buildings[j % buildings.len()];
                    let (x, y) = in_block(&mut rng, b);
                    // gable roof rising 0.5 m towards the ridge
                    let ridge = 1.0 - ((y - b.y.0) / (b.y.1 - b.y.0) - 0.5).abs() * 2.0;
                    [x, y, (b.level + 0.5 * ridge + small.sample(&mut rng)).clamp(5.0, 12.0)]
                }
                2 => {
                    let t = trees[j % trees.len()];
                    let spread = Normal::new(0.0, 1.4).expect("valid sd");
                    [
                        t[0] + spread.sample(&mut rng),
                        t[1] + spread.sample(&mut rng),
                        (t[2] + spread.sample(&mut rng)).clamp(3.0, 15.0),
                    ]
                }
                3 => {
                    let c = &cars[j % cars.len()];
                    let (x, y) = in_block(&mut rng, c);
                    [x, y, rng.random_range(0.0..1.5)]
                }
                _ => {
                    let y = strands[j % strands.len()] + small.sample(&mut rng);
                    let x = rng.random_range(0.0..SYNTH_TILE_M);
                    let sag = ((x - SYNTH_TILE_M / 2.0) / (SYNTH_TILE_M / 2.0)).powi(2);
                    [x, y, (10.0 + 4.0 * sag + small.sample(&mut rng)).clamp(10.0, 14.0)]
                }
            };
            let p = [p[0].clamp(0.0, SYNTH_TILE_M), p[1].clamp(0.0, SYNTH_TILE_M), p[2]];
            pts.push((p, class));
        }
    }
    pts.shuffle(&mut rng);
    let feats = pts.iter().map(|(_, c)| (INTENSITY_MEAN[*c] + intensity.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    Ok(PointTable {
        xyz: pts.iter().map(|(p, _)| *p).collect(),
        feats,
        feat_dim: 1,
        labels: Some(pts.iter().map(|(_, c)| *c).collect()),
    })
}
