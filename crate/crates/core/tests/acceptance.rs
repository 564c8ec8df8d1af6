//! Acceptance criteria, one PASS/FAIL line each. Runs without the test
//! harness so the lines always reach the output.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{bits, random_ps, rng};
use tdconvs::config::{parse_config_str, Profile, RunConfig};
use tdconvs::cydconv::{aggregate_map_features, CyDConvParams};
use tdconvs::data::{prepare_patches, synth_scene, tile_patches, SYNTH_CLASS_NAMES};
use tdconvs::evalkit::{confusion, f1_scores, overall_accuracy, precision_recall, ConfusionMatrix};
use tdconvs::geom::{
    cylindricize, grid_sample_2d, grid_sample_3d, knn_coords, spheroidize, GridSpec2D, GridSpec3D, Membership, PointSet,
};
use tdconvs::gradcheck::{registry, run_suite};
use tdconvs::infer::evaluate;
use tdconvs::net::build_network;
use tdconvs::spdconv::{aggregate_volume_features, SpDConvParams};
use tdconvs::tensor::linear;
use tdconvs::train::{train, TrainOptions, LOSS_CSV};
use tdconvs::{Result, Tensor};

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const OP_TOLERANCE: f64 = 1e-5;
const NETWORK_TOLERANCE: f64 = 1e-4;
const ORACLE_POINTS: usize = 1000;
const MAP_GRIDS: [(usize, usize); 3] = [(2, 2), (10, 10), (40, 40)];
const VOLUME_GRIDS: [(usize, usize, usize); 2] = [(4, 4, 2), (40, 40, 5)];
const KNN_POINTS: usize = 500;
const KNN_SIZES: [usize; 3] = [1, 16, 64];
const MIDPOINT_TOLERANCE: f64 = 1e-12;
const OVERFIT_POINTS: usize = 4096;
const OVERFIT_STEPS: usize = 300;
const OVERFIT_LR: f64 = 0.0002;
const OVERFIT_OA: f64 = 0.95;
const OVERFIT_MF1: f64 = 0.85;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const DETERMINISM_STEPS: usize = 50;
const METRIC_TRIALS: usize = 100;
const METRIC_TOLERANCE: f64 = 1e-12;

/// Classes told apart mainly by height above ground in the synthetic scene.
const ALTITUDE_CLASSES: [&str; 3] = ["roof", "tree", "powerline"];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let results = run_suite(&registry(), GRAD_SEEDS)?;
    let elapsed = start.elapsed();
    let required = [
        "linear",
        "batch_norm",
        "relu",
        "sigmoid",
        "grid_sample_2d.values",
        "grid_sample_2d.coords",
        "grid_sample_3d.values",
        "grid_sample_3d.coords",
        "cylindricize.feats",
        "spheroidize.feats",
        "interpolate_3nn",
        "cydconv",
        "spdconv",
        "seg_loss",
        "network",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !results.iter().any(|c| c.name == *r)).collect();
    let mut failed = Vec::new();
    let (mut worst_op, mut worst_net) = (0.0f64, 0.0f64);
    for r in &results {
        let tol = if r.name == "network" { NETWORK_TOLERANCE } else { OP_TOLERANCE };
        if r.name == "network" {
            worst_net = worst_net.max(r.max_rel_err);
        } else {
            worst_op = worst_op.max(r.max_rel_err);
        }
        if r.max_rel_err.is_nan() || r.max_rel_err >= tol || r.seeds < GRAD_SEEDS {
            failed.push(format!("{} ({:.2e})", r.name, r.max_rel_err));
        }
    }
    let passed = missing.is_empty() && failed.is_empty() && elapsed < GRAD_BUDGET;
    Ok(outcome(
        passed,
        format!(
            "{} ops x {GRAD_SEEDS} seeds, worst op {worst_op:.2e} (< {OP_TOLERANCE:e}), network {worst_net:.2e} \
             (< {NETWORK_TOLERANCE:e}), {:.1}s (< {}s){}{}",
            results.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") },
            if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") },
        ),
    ))
}

/// Members of each cell by a full distance scan, summed in the documented
/// canonical order: coordinates, then features, then index.
fn scan_oracle<const D: usize>(
    pts: &[[f64; D]],
    feats: &[f64],
    m: usize,
    centers: &[[f64; D]],
    radius: f64,
) -> (Vec<Vec<usize>>, Vec<f64>) {
    let key = |i: usize| {
        let mut k: Vec<f64> = pts[i].to_vec();
        k.extend_from_slice(&feats[i * m..(i + 1) * m]);
        k
    };
    let mut members = Vec::with_capacity(centers.len());
    let mut means = vec![0.0; centers.len() * m];
    for (j, c) in centers.iter().enumerate() {
        let mut mem: Vec<usize> = (0..pts.len())
            .filter(|&i| (0..D).map(|d| (pts[i][d] - c[d]) * (pts[i][d] - c[d])).sum::<f64>() < radius * radius)
            .collect();
        mem.sort_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(a.cmp(&b))
        });
        for &i in &mem {
            for f in 0..m {
                means[j * m + f] += feats[i * m + f];
            }
        }
        if !mem.is_empty() {
            for f in 0..m {
                means[j * m + f] /= mem.len() as f64;
            }
        }
        members.push(mem);
    }
    (members, means)
}

fn memberships(m: &Membership) -> Vec<Vec<usize>> {
    (0..m.cells()).map(|j| m.members(j).to_vec()).collect()
}

fn naive_knn(pts: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(pts.len() * k);
    for q in pts {
        let mut d: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(d[..k].iter().map(|x| x.1));
    }
    out
}

fn criterion_2() -> Result<Outcome> {
    let ps = random_ps(ORACLE_POINTS, 3, 0, 2024);
    let feats = ps.feats.to_vec();
    let mut mismatches = Vec::new();
    for (h, w) in MAP_GRIDS {
        let spec = GridSpec2D::new(h, w);
        let map = cylindricize(&ps, spec);
        let centers: Vec<[f64; 2]> = (0..h)
            .flat_map(|i| (0..w).map(move |j| [(i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64]))
            .collect();
        let (mem, means) = scan_oracle(&ps.xy(), &feats, 3, &centers, spec.radius);
        let counts: Vec<usize> = mem.iter().map(Vec::len).collect();
        if memberships(&map.membership) != mem || map.counts != counts || bits(&map.values.to_vec()) != bits(&means) {
            mismatches.push(format!("{h}x{w}"));
        }
    }
    for (h, w, z) in VOLUME_GRIDS {
        let spec = GridSpec3D::new(h, w, z);
        let vol = spheroidize(&ps, spec);
        let mut centers = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    centers.push([
                        (i as f64 + 0.5) / h as f64,
                        (j as f64 + 0.5) / w as f64,
                        (k as f64 + 0.5) / z as f64,
                    ]);
                }
            }
        }
        let (mem, means) = scan_oracle(&ps.coords, &feats, 3, &centers, spec.radius);
        let counts: Vec<usize> = mem.iter().map(Vec::len).collect();
        if memberships(&vol.membership) != mem || vol.counts != counts || bits(&vol.values.to_vec()) != bits(&means) {
            mismatches.push(format!("{h}x{w}x{z}"));
        }
    }
    let kp = random_ps(KNN_POINTS, 1, 0, 77);
    for k in KNN_SIZES {
        if knn_coords(&kp.coords, &kp.coords, k)?.indices != naive_knn(&kp.coords, k) {
            mismatches.push(format!("knn k={k}"));
        }
    }
    Ok(outcome(
        mismatches.is_empty(),
        format!(
            "{ORACLE_POINTS} points on maps {MAP_GRIDS:?} and volumes {VOLUME_GRIDS:?}, knn on {KNN_POINTS} points for k in \
             {KNN_SIZES:?}; mismatches: {mismatches:?}"
        ),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let mut r = rng(3);
    let base = random_ps(50, 2, 0, 3);
    let mut worst_mid = 0.0f64;
    let mut node_failures = Vec::new();
    let m = 2;
    for (h, w) in [(2, 2), (5, 7), (40, 40)] {
        let mut map = cylindricize(&base, GridSpec2D::new(h, w));
        map.values = Tensor::new(&[h, w, m], (0..h * w * m).map(|_| r.random_range(-5.0..5.0)).collect())?;
        let v = map.values.to_vec();
        let centers: Vec<[f64; 2]> = (0..h)
            .flat_map(|i| (0..w).map(move |j| [(i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64]))
            .collect();
        let q = Tensor::new(&[h * w, 1, 2], centers.iter().flatten().copied().collect())?;
        if bits(&grid_sample_2d(&map, &q)?.to_vec()) != bits(&v) {
            node_failures.push(format!("{h}x{w}"));
        }
        for i in 0..h {
            for j in 0..w {
                let a = i * w + j;
                for (b, mid) in [
                    (i + 1 < h).then(|| ((i + 1) * w + j, [(i as f64 + 1.0) / h as f64, centers[a][1]])),
                    (j + 1 < w).then(|| (i * w + j + 1, [centers[a][0], (j as f64 + 1.0) / w as f64])),
                ]
                .into_iter()
                .flatten()
                {
                    let out = grid_sample_2d(&map, &Tensor::new(&[1, 1, 2], mid.to_vec())?)?.to_vec();
                    for c in 0..m {
                        worst_mid = worst_mid.max((out[c] - 0.5 * (v[a * m + c] + v[b * m + c])).abs());
                    }
                }
            }
        }
    }
    for (h, w, z) in [(4, 4, 2), (3, 5, 2), (40, 40, 5)] {
        let mut vol = spheroidize(&base, GridSpec3D::new(h, w, z));
        vol.values = Tensor::new(&[h, w, z, m], (0..h * w * z * m).map(|_| r.random_range(-5.0..5.0)).collect())?;
        let v = vol.values.to_vec();
        let center = |i: usize, j: usize, k: usize| {
            [(i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64, (k as f64 + 0.5) / z as f64]
        };
        let mut q = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    q.extend(center(i, j, k));
                }
            }
        }
        if bits(&grid_sample_3d(&vol, &Tensor::new(&[h * w * z, 1, 3], q)?)?.to_vec()) != bits(&v) {
            node_failures.push(format!("{h}x{w}x{z}"));
        }
        let flat = |i: usize, j: usize, k: usize| (i * w + j) * z + k;
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    let c0 = center(i, j, k);
                    let steps = [
                        (i + 1 < h).then(|| (flat(i + 1, j, k), [(i as f64 + 1.0) / h as f64, c0[1], c0[2]])),
                        (j + 1 < w).then(|| (flat(i, j + 1, k), [c0[0], (j as f64 + 1.0) / w as f64, c0[2]])),
                        (k + 1 < z).then(|| (flat(i, j, k + 1), [c0[0], c0[1], (k as f64 + 1.0) / z as f64])),
                    ];
                    for (b, mid) in steps.into_iter().flatten() {
                        let out = grid_sample_3d(&vol, &Tensor::new(&[1, 1, 3], mid.to_vec())?)?.to_vec();
                        let a = flat(i, j, k);
                        for c in 0..m {
                            worst_mid = worst_mid.max((out[c] - 0.5 * (v[a * m + c] + v[b * m + c])).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(outcome(
        node_failures.is_empty() && worst_mid < MIDPOINT_TOLERANCE,
        format!(
            "cell centers bit-exact (failures: {node_failures:?}), worst midpoint error {worst_mid:.1e} (< {MIDPOINT_TOLERANCE:e})"
        ),
    ))
}

fn criterion_4() -> Result<Outcome> {
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let ps: PointSet = random_ps(64, 4, 0, seed);
        let cyd = CyDConvParams::new(4, 8, 16, 4, [2, 4, 8], GridSpec2D::new(5, 5), &mut r)?;
        let spd = SpDConvParams::new(4, 4, 8, 8, GridSpec3D::new(4, 4, 2), true, &mut r)?;
        // offsets are irrelevant once the weights vanish
        for t in [&cyd.offset_head.weight, &cyd.offset_head.bias, &spd.offset_head.weight, &spd.offset_head.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
        for t in [&cyd.weight_head.weight, &cyd.weight_head.bias, &spd.weight_head.weight, &spd.weight_head.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let fa = aggregate_map_features(&ps, &cylindricize(&ps, cyd.grid), &cyd)?;
        if bits(&fa.to_vec()) != bits(&linear(&ps.feats, &cyd.agg_proj)?.to_vec()) {
            failures.push(format!("cylinder seed {seed}"));
        }
        let fs = aggregate_volume_features(&ps, &spheroidize(&ps, spd.grid), &spd)?;
        if bits(&fs.to_vec()) != bits(&ps.feats.to_vec()) {
            failures.push(format!("sphere seed {seed}"));
        }
    }
    Ok(outcome(
        failures.is_empty(),
        format!("zero weight heads over 10 seeds: F_a == agg_proj(F) and F_s == F bit-exact; failures: {failures:?}"),
    ))
}

fn criterion_5() -> Result<Outcome> {
    let cfg = parse_config_str("", Profile::Isprs)?;
    let n = &cfg.net;
    let checks: [(&str, bool); 9] = [
        ("map_specs", n.map_specs == [(40, 40), (20, 20), (10, 10), (5, 5)]),
        ("volume_spec", n.volume_spec == (40, 40, 5)),
        ("k_c", n.k_c == 4),
        ("k_s", n.k_s == 8),
        ("knn_sizes", n.knn_sizes == [16, 32, 64]),
        ("loss_weights", n.loss_weights == [1.0, 2.0, 2.0, 2.0, 2.0]),
        ("batch_size", cfg.train.batch_size == 4),
        ("lr", cfg.train.lr == 0.0002),
        ("patch_size_m", cfg.data.patch_size_m == 30.0),
    ];
    let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok(outcome(bad.is_empty(), format!("{} fields checked, wrong: {bad:?}", checks.len())))
}

struct OverfitRun {
    cm: ConfusionMatrix,
    seconds: f64,
}

fn overfit(spdconv: bool) -> Result<OverfitRun> {
    let mut cfg = RunConfig::profile(Profile::Synth);
    cfg.net.spdconv = spdconv;
    let table = synth_scene(cfg.train.seed, OVERFIT_POINTS, cfg.data.n_classes)?;
    let patches = tile_patches(&table, cfg.data.patch_size_m, "synth")?;
    let sets: Vec<PointSet> = prepare_patches(&patches, 0)?.into_iter().map(|(ps, _)| ps).collect();
    let start = Instant::now();
    let mut net = build_network(&cfg.net, cfg.train.seed)?;
    let opts = TrainOptions {
        steps: OVERFIT_STEPS,
        batch_size: cfg.train.batch_size,
        lr: OVERFIT_LR,
        seed: cfg.train.seed,
        checkpoint_every: usize::MAX,
        out_dir: None,
    };
    train(&mut net, &sets, &opts)?;
    let cm = evaluate(&net, &sets, cfg.train.seed)?;
    Ok(OverfitRun { cm, seconds: start.elapsed().as_secs_f64() })
}

fn per_class(cm: &ConfusionMatrix) -> String {
    let (f1, _) = f1_scores(cm);
    SYNTH_CLASS_NAMES.iter().zip(&f1).map(|(n, f)| format!("{n} {f:.3}")).collect::<Vec<_>>().join(", ")
}

fn criterion_6() -> Result<(Outcome, String)> {
    let cfg = RunConfig::profile(Profile::Synth);
    let widths_ok = cfg.net.channel_widths == [16, 32, 64, 128] && cfg.net.n_input_points == OVERFIT_POINTS;
    let full = overfit(true)?;
    let oa = overall_accuracy(&full.cm)?;
    let (f1_full, mf1) = f1_scores(&full.cm);
    let passed = widths_ok && oa >= OVERFIT_OA && mf1 >= OVERFIT_MF1 && full.seconds < OVERFIT_BUDGET.as_secs_f64();
    let main = outcome(
        passed,
        format!(
            "OA {oa:.4} (>= {OVERFIT_OA}), mF1 {mf1:.4} (>= {OVERFIT_MF1}), {:.0}s (< {}s); per class: {}",
            full.seconds,
            OVERFIT_BUDGET.as_secs(),
            per_class(&full.cm)
        ),
    );

    let ablated = overfit(false)?;
    let (f1_abl, mf1_abl) = f1_scores(&ablated.cm);
    let idx = |n: &str| SYNTH_CLASS_NAMES.iter().position(|c| *c == n).expect("known class");
    let mean_on = |f: &[f64]| ALTITUDE_CLASSES.iter().map(|c| f[idx(c)]).sum::<f64>() / ALTITUDE_CLASSES.len() as f64;
    let (alt_full, alt_abl) = (mean_on(&f1_full), mean_on(&f1_abl));
    let ablation = format!(
        "ablation without sphere-wise fusion completed: OA {:.4}, mF1 {mf1_abl:.4}, {:.0}s; per class: {}; \
         mean F1 on {ALTITUDE_CLASSES:?} {alt_abl:.4} vs {alt_full:.4} with it ({} as expected; not required)",
        overall_accuracy(&ablated.cm)?,
        ablated.seconds,
        per_class(&ablated.cm),
        if alt_abl < alt_full { "lower," } else { "not lower," },
    );
    Ok((main, ablation))
}

fn criterion_7() -> Result<Outcome> {
    let cfg = RunConfig::profile(Profile::Synth);
    let table = synth_scene(cfg.train.seed, cfg.data.synth_points, cfg.data.n_classes)?;
    let patches = tile_patches(&table, cfg.data.patch_size_m, "synth")?;
    let sets: Vec<PointSet> = prepare_patches(&patches, 0)?.into_iter().map(|(ps, _)| ps).collect();
    let run = || -> Result<Vec<u8>> {
        let dir = tempfile::tempdir().map_err(|e| tdconvs::Error::io("tempdir", e))?;
        let mut net = build_network(&cfg.net, cfg.train.seed)?;
        let mut opts = TrainOptions::from_config(&cfg, sets.len());
        opts.steps = DETERMINISM_STEPS;
        opts.out_dir = Some(dir.path().to_path_buf());
        train(&mut net, &sets, &opts)?;
        let p = dir.path().join(LOSS_CSV);
        std::fs::read(&p).map_err(|e| tdconvs::Error::io(p, e))
    };
    let (a, b) = (run()?, run()?);
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    Ok(outcome(
        a == b,
        format!("{DETERMINISM_STEPS}-step loss logs, {rows} lines, {} bytes each, identical: {}", a.len(), a == b),
    ))
}

fn criterion_8() -> Result<Outcome> {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..METRIC_TRIALS {
        let c = r.random_range(2..9);
        let n = r.random_range(1..300);
        let gt: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let cm = confusion(&gt, &pred, c)?;
        let hits = gt.iter().zip(&pred).filter(|(g, p)| g == p).count();
        worst = worst.max((overall_accuracy(&cm)? - hits as f64 / n as f64).abs());
        let (f1, mf1) = f1_scores(&cm);
        let mut f1_sum = 0.0;
        for (k, &f1k) in f1.iter().enumerate() {
            let tp = gt.iter().zip(&pred).filter(|&(&g, &p)| g == k && p == k).count() as f64;
            let pk = pred.iter().filter(|&&p| p == k).count() as f64;
            let gk = gt.iter().filter(|&&g| g == k).count() as f64;
            let prec = if pk > 0.0 { tp / pk } else { 0.0 };
            let rec = if gk > 0.0 { tp / gk } else { 0.0 };
            let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            let (p2, r2) = precision_recall(&cm, k);
            worst = worst.max((p2 - prec).abs()).max((r2 - rec).abs()).max((f1k - f).abs());
            f1_sum += f;
        }
        worst = worst.max((mf1 - f1_sum / c as f64).abs());
    }
    let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 3]]);
    let oa = overall_accuracy(&cm)?;
    let (f1, _) = f1_scores(&cm);
    let worked = (oa - 5.0 / 6.0).abs() < METRIC_TOLERANCE
        && (f1[0] - 0.8).abs() < METRIC_TOLERANCE
        && (f1[1] - 6.0 / 7.0).abs() < METRIC_TOLERANCE;
    Ok(outcome(
        worst < METRIC_TOLERANCE && worked,
        format!(
            "{METRIC_TRIALS} random label pairs, worst deviation from recount {worst:.1e} (< {METRIC_TOLERANCE:e}); \
             [[2,1],[0,3]] gives OA {oa:.6}, F1 ({:.6}, {:.6})",
            f1[0], f1[1]
        ),
    ))
}

const STATEMENT: &str = "the benchmark scores (ISPRS Vaihingen 3D: OA 84.5%, mF1 73.4%; LASDU: mF1 77.85%) are not \
    reproduced here; they need the licensed datasets and 500 epochs of GPU training, so criteria 1-8 stand in as \
    property-based checks";

fn line(id: &str, name: &str, o: &Outcome) {
    println!("criterion {id} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let mut all = true;
    let mut record = |id: &str, name: &str, r: Result<Outcome>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        all &= o.passed;
        line(id, name, &o);
    };
    record("1", "gradient suite", criterion_1());
    record("2", "oracle equivalence", criterion_2());
    record("3", "interpolation exactness", criterion_3());
    record("4", "residual identities", criterion_4());
    record("5", "ISPRS profile", criterion_5());
    match criterion_6() {
        Ok((main, ablation)) => {
            record("6", "end-to-end overfit", Ok(main));
            println!("criterion 6 [INFO] {ablation}");
        }
        Err(e) => record("6", "end-to-end overfit", Err(e)),
    }
    record("7", "determinism", criterion_7());
    record("8", "metrics oracle", criterion_8());
    record("9", "non-reproducibility statement", Ok(outcome(true, STATEMENT)));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
