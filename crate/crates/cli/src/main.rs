//! `tdconvs` command-line entry point.

mod bench;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tdconvs::config::{parse_config, Profile, RunConfig};
use tdconvs::data::{
    load_ascii_points, prepare_patches, synth_scene, tile_patches, write_ascii_points, ColumnSchema, Patch, PointTable,
};
use tdconvs::evalkit::{emit_report, ConfusionMatrix, MetricsReport, ReportFormat};
use tdconvs::geom::PointSet;
use tdconvs::gradcheck::{faulty_case, registry, run_suite, DEFAULT_SEEDS};
use tdconvs::infer::{evaluate, predict_patch};
use tdconvs::net::build_network;
use tdconvs::tensor::load_checkpoint;
use tdconvs::train::{train, TrainOptions, FINAL_CHECKPOINT};
use tdconvs::Error;

const THREADS_ENV: &str = "TDCONVS_THREADS";

#[derive(Parser)]
#[command(
    name = "tdconvs",
    version,
    about = "Airborne lidar point-cloud segmentation with twin deformable convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic scene to the first training file.
    Synth(Common),
    /// Train on the configured files, writing logs and checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the evaluation files.
    Eval(Infer),
    /// Append predicted classes to each evaluation file.
    Predict(Infer),
    /// Check every backward rule against finite differences.
    Gradcheck(Gradcheck),
    /// Time the spatial operators.
    Bench(Bench),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[command(flatten)]
    common: Common,
    /// Defaults to the final checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: u64,
    /// Adds a case with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Data(_) | Error::Io { .. }) => 3,
            Failure::Core(_) => 1,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Verification(m) => ("verification", m.clone()),
            Failure::Core(e) => (e.kind(), e.to_string()),
        };
        format!("error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn threads() -> Result<usize, Error> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}: expected a non-negative integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(0, |n| n.get())),
    }
}

/// Resolved configuration with command-line overrides, echoed to the output
/// directory.
fn resolve(c: &Common, required: bool) -> Result<RunConfig, Error> {
    threads()?;
    let mut cfg = match &c.config {
        Some(p) => parse_config(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None if required => return Err(Error::Config("--config is required for this command".into())),
        None => RunConfig::profile(Profile::Custom),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    let echoed = cfg.echo(&cfg.output_dir)?;
    info!("resolved configuration written to {}", echoed.display());
    Ok(cfg)
}

struct Loaded {
    path: PathBuf,
    table: PointTable,
    patches: Vec<Patch>,
    sets: Vec<PointSet>,
}

fn load_files(files: &[PathBuf], key: &str, cfg: &RunConfig) -> Result<Vec<Loaded>, Error> {
    if files.is_empty() {
        return Err(Error::Config(format!("{key}: no files configured")));
    }
    let schema = cfg.schema()?;
    let threads = threads()?;
    files
        .iter()
        .map(|path| {
            let table = load_ascii_points(path, &schema)?;
            let patches = tile_patches(&table, cfg.data.patch_size_m, &path.display().to_string())?;
            let sets = prepare_patches(&patches, threads)?.into_iter().map(|(ps, _)| ps).collect();
            info!("{}: {} points in {} patches", path.display(), table.len(), patches.len());
            Ok(Loaded { path: path.clone(), table, patches, sets })
        })
        .collect()
}

fn load_network(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<tdconvs::net::Network, Error> {
    let net = build_network(&cfg.net, cfg.train.seed)?;
    let path = checkpoint.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    load_checkpoint(&path, &net.named_tensors())?;
    info!("loaded {}", path.display());
    Ok(net)
}

fn cmd_synth(args: &Common) -> CliResult<()> {
    let cfg = resolve(args, true)?;
    let c = cfg.data.n_classes;
    if c > 5 {
        return Err(Error::Config(format!("data.n_classes: synthetic scenes have at most 5 classes, got {c}")).into());
    }
    if cfg.data.columns != ColumnSchema::standard(1, c).columns {
        return Err(Error::Config("data.columns: synthetic scenes are written as x y z feature label".into()).into());
    }
    let Some(path) = cfg.data.train_files.first() else {
        return Err(Error::Config("data.train_files: synth writes to the first training file".into()).into());
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let table = synth_scene(cfg.train.seed, cfg.data.synth_points, c)?;
    write_ascii_points(path, &table, None)?;
    println!("wrote {} points to {}", table.len(), path.display());
    Ok(())
}

fn cmd_train(args: &Common) -> CliResult<()> {
    let cfg = resolve(args, true)?;
    let sets: Vec<PointSet> =
        load_files(&cfg.data.train_files, "data.train_files", &cfg)?.into_iter().flat_map(|l| l.sets).collect();
    let mut net = build_network(&cfg.net, cfg.train.seed)?;
    info!("{} trainable values", net.param_count());
    let opts = TrainOptions::from_config(&cfg, sets.len());
    let history = train(&mut net, &sets, &opts)?;
    let last = history.last().map_or(f64::NAN, |h| h.loss);
    println!(
        "trained {} steps, final loss {last:.6}, checkpoint {}",
        history.len(),
        cfg.output_dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_eval(args: &Infer) -> CliResult<()> {
    let cfg = resolve(&args.common, true)?;
    let net = load_network(&cfg, args.checkpoint.as_deref())?;
    let mut cm = ConfusionMatrix::new(cfg.data.n_classes);
    for l in load_files(&cfg.data.eval_files, "data.eval_files", &cfg)? {
        cm.merge(&evaluate(&net, &l.sets, cfg.train.seed)?)?;
    }
    let report = MetricsReport::from_confusion(&cm, &cfg.data.class_names)?;
    for name in ["metrics.csv", "metrics.json"] {
        let path = cfg.output_dir.join(name);
        emit_report(&report, &path, ReportFormat::from_path(&path))?;
    }
    println!(
        "OA {:.6} mF1 {:.6} over {} points, report {}",
        report.overall_accuracy,
        report.mean_f1,
        report.total,
        cfg.output_dir.join("metrics.csv").display()
    );
    Ok(())
}

fn cmd_predict(args: &Infer) -> CliResult<()> {
    let cfg = resolve(&args.common, true)?;
    let net = load_network(&cfg, args.checkpoint.as_deref())?;
    for l in load_files(&cfg.data.eval_files, "data.eval_files", &cfg)? {
        let mut pred = vec![None; l.table.len()];
        for (k, (patch, ps)) in l.patches.iter().zip(&l.sets).enumerate() {
            let p = predict_patch(&net, ps, cfg.train.seed.wrapping_add(k as u64))?;
            for (&row, c) in patch.rows.iter().zip(p) {
                pred[row] = Some(c);
            }
        }
        let pred: Vec<usize> = pred
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Contract(format!("{}: some points fell outside every patch", l.path.display())))?;
        let stem = l.path.file_stem().map_or_else(|| "points".into(), |s| s.to_string_lossy().into_owned());
        let out = cfg.output_dir.join(format!("{stem}.pred.txt"));
        write_ascii_points(&out, &l.table, Some(&pred))?;
        println!("wrote {} predictions to {}", pred.len(), out.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &Gradcheck) -> CliResult<()> {
    let cfg = resolve(&args.common, false)?;
    let mut cases = registry();
    if args.inject_fault {
        cases.push(faulty_case());
    }
    let results = run_suite(&cases, args.seeds)?;
    let mut lines = vec!["op,max_rel_err,tolerance,kinks,status".to_string()];
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        lines.push(format!("{},{:.3e},{:e},{},{status}", r.name, r.max_rel_err, r.tolerance, r.kinks));
    }
    for line in &lines {
        println!("{line}");
    }
    let path = cfg.output_dir.join("gradcheck.csv");
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_bench(args: &Bench) -> CliResult<()> {
    let cfg = resolve(&args.common, false)?;
    if args.reps == 0 || args.sizes.is_empty() {
        return Err(Error::Config("bench: --reps and --sizes must be non-empty".into()).into());
    }
    let report = bench::run(&args.sizes, args.reps, cfg.train.seed)?;
    let path = cfg.output_dir.join("bench.csv");
    bench::write_csv(&report.rows, &path)?;
    for line in bench::csv_lines(&report.rows) {
        println!("{line}");
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(report.failures.join("; ")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code())
        }
    }
}
