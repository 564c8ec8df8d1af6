//! Operator timings with oracle self-checks.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdconvs::geom::{
    cylindricize, cylindricize_brute, fps, grid_sample_2d, grid_sample_3d, knn_coords, knn_coords_brute, spheroidize,
    spheroidize_brute, GridSpec2D, GridSpec3D, PointSet,
};
use tdconvs::{Error, Result, Tensor};

pub const DEFAULT_SIZES: [usize; 3] = [1000, 4000, 16000];
pub const HEADER: &str = "op,n_points,grid,median_us,p95_us";
/// Above this size the hashed rasterizer must beat the brute-force scan.
pub const HASH_ADVANTAGE_FROM: usize = 10_000;
const MAP: (usize, usize) = (40, 40);
const VOLUME: (usize, usize, usize) = (40, 40, 5);
const FEATS: usize = 4;
const SAMPLES_PER_POINT: usize = 4;
const K: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub op: &'static str,
    pub n_points: usize,
    pub grid: String,
    pub median_us: f64,
    pub p95_us: f64,
}

pub struct Report {
    pub rows: Vec<Row>,
    /// Failed self-checks, empty when everything held.
    pub failures: Vec<String>,
}

/// Runs `f` `reps` times; returns its last output and (median, p95) in µs.
fn time<T>(reps: usize, mut f: impl FnMut() -> T) -> (T, f64, f64) {
    let mut us = Vec::with_capacity(reps);
    let mut out = None;
    for _ in 0..reps {
        let t = Instant::now();
        out = Some(f());
        us.push(t.elapsed().as_secs_f64() * 1e6);
    }
    us.sort_by(f64::total_cmp);
    let p95 = us[((0.95 * reps as f64).ceil() as usize).clamp(1, reps) - 1];
    (out.expect("at least one repetition"), us[reps / 2], p95)
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Result<PointSet> {
    let coords = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let feats = (0..n * FEATS).map(|_| rng.random_range(-1.0..1.0)).collect();
    PointSet::new(coords, Tensor::new(&[n, FEATS], feats)?, None)
}

fn random_coords(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v = (0..n * SAMPLES_PER_POINT * d).map(|_| rng.random()).collect();
    Tensor::new(&[n, SAMPLES_PER_POINT, d], v)
}

pub fn run(sizes: &[usize], reps: usize, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let map = GridSpec2D::new(MAP.0, MAP.1);
    let vol = GridSpec3D::new(VOLUME.0, VOLUME.1, VOLUME.2);
    let map_name = format!("{}x{}", MAP.0, MAP.1);
    let vol_name = format!("{}x{}x{}", VOLUME.0, VOLUME.1, VOLUME.2);
    for &n in sizes {
        let ps = random_points(n, &mut rng)?;
        let mut push = |op, grid: &str, med, p95| {
            rows.push(Row { op, n_points: n, grid: grid.to_string(), median_us: med, p95_us: p95 });
        };

        let (hashed, m_hash, p) = time(reps, || cylindricize(&ps, map));
        push("cylindricize", &map_name, m_hash, p);
        let (brute, m_brute, p) = time(reps, || cylindricize_brute(&ps, map));
        push("cylindricize_brute", &map_name, m_brute, p);
        if hashed.membership != brute.membership
            || hashed.counts != brute.counts
            || hashed.values.data()[..] != brute.values.data()[..]
        {
            failures.push(format!("cylindricize differs from brute force at {n} points"));
        }
        if n > HASH_ADVANTAGE_FROM && m_hash >= m_brute {
            failures.push(format!(
                "hashed cylindricize ({m_hash:.0} us) not faster than brute force ({m_brute:.0} us) at {n} points"
            ));
        }

        let (hashed, m, p) = time(reps, || spheroidize(&ps, vol));
        push("spheroidize", &vol_name, m, p);
        let (brute, m, p) = time(reps, || spheroidize_brute(&ps, vol));
        push("spheroidize_brute", &vol_name, m, p);
        if hashed.membership != brute.membership
            || hashed.counts != brute.counts
            || hashed.values.data()[..] != brute.values.data()[..]
        {
            failures.push(format!("spheroidize differs from brute force at {n} points"));
        }

        let cmap = cylindricize(&ps, map);
        let coords = random_coords(n, 2, &mut rng)?;
        let (r, m, p) = time(reps, || grid_sample_2d(&cmap, &coords));
        r?;
        push("grid_sample_2d", &map_name, m, p);
        let svol = spheroidize(&ps, vol);
        let coords = random_coords(n, 3, &mut rng)?;
        let (r, m, p) = time(reps, || grid_sample_3d(&svol, &coords));
        r?;
        push("grid_sample_3d", &vol_name, m, p);

        let k_name = format!("k{K}");
        let (fast, m, p) = time(reps, || knn_coords(&ps.coords, &ps.coords, K.min(n)));
        push("knn", &k_name, m, p);
        let (brute, m, p) = time(reps, || knn_coords_brute(&ps.coords, &ps.coords, K.min(n)));
        push("knn_brute", &k_name, m, p);
        if fast?.indices != brute?.indices {
            failures.push(format!("knn differs from brute force at {n} points"));
        }

        let n_fps = (n / 4).max(1);
        let (r, m, p) = time(reps, || fps(&ps, n_fps));
        r?;
        push("fps", &format!("n{n_fps}"), m, p);
    }
    let mut brute: Vec<&Row> = rows.iter().filter(|r| r.op == "knn_brute").collect();
    brute.sort_by_key(|r| r.n_points);
    for w in brute.windows(2) {
        if w[1].n_points > w[0].n_points && w[1].median_us < w[0].median_us {
            failures.push(format!(
                "knn_brute median fell from {:.0} us at {} points to {:.0} us at {} points",
                w[0].median_us, w[0].n_points, w[1].median_us, w[1].n_points
            ));
        }
    }
    Ok(Report { rows, failures })
}

pub fn csv_lines(rows: &[Row]) -> Vec<String> {
    let mut lines = vec![HEADER.to_string()];
    lines.extend(rows.iter().map(|r| format!("{},{},{},{:.1},{:.1}", r.op, r.n_points, r.grid, r.median_us, r.p95_us)));
    lines
}

pub fn write_csv(rows: &[Row], path: &Path) -> Result<()> {
    let mut text = csv_lines(rows).join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
