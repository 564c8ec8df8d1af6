//! Training loop with CSV logging and periodic checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::sample_fixed;
use crate::error::{contract_err, Error, Result};
use crate::geom::PointSet;
use crate::net::{forward, seg_loss, Network, OUTPUTS};
use crate::tensor::{adam_step, save_checkpoint, AdamState};

/// `step,loss,loss_scale0..4,lr`; identical across runs with the same seed.
pub const LOSS_CSV: &str = "loss.csv";
/// The loss columns followed by wall-clock seconds since the start.
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.tdcv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Logs and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig, n_patches: usize) -> Self {
        let t = &cfg.train;
        let steps = if t.steps > 0 { t.steps } else { t.epochs * n_patches.div_ceil(t.batch_size) };
        TrainOptions {
            steps,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            out_dir: Some(cfg.output_dir.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Batch mean of the weighted total.
    pub loss: f64,
    /// Batch mean of each unweighted output loss, in output order.
    pub scales: [f64; OUTPUTS],
    pub lr: f64,
    pub seconds: f64,
}

impl StepLog {
    fn loss_fields(&self) -> String {
        let mut s = format!("{},{}", self.step, self.loss);
        for v in &self.scales {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", self.lr));
        s
    }
}

fn loss_header() -> String {
    let mut h = "step,loss".to_string();
    for i in 0..OUTPUTS {
        h.push_str(&format!(",loss_scale{i}"));
    }
    h + ",lr"
}

struct Logs {
    loss: BufWriter<File>,
    timed: BufWriter<File>,
    dir: PathBuf,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(&p, e))
        };
        let mut logs = Logs { loss: open(LOSS_CSV)?, timed: open(TRAIN_LOG_CSV)?, dir: dir.to_path_buf() };
        let h = loss_header();
        logs.write(&h, &format!("{h},seconds"))?;
        Ok(logs)
    }

    fn write(&mut self, loss_line: &str, timed_line: &str) -> Result<()> {
        writeln!(self.loss, "{loss_line}").map_err(|e| Error::io(self.dir.join(LOSS_CSV), e))?;
        writeln!(self.timed, "{timed_line}").map_err(|e| Error::io(self.dir.join(TRAIN_LOG_CSV), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.loss.flush().map_err(|e| Error::io(self.dir.join(LOSS_CSV), e))?;
        self.timed.flush().map_err(|e| Error::io(self.dir.join(TRAIN_LOG_CSV), e))
    }
}

/// Cycles through the patches in a fresh seeded order every epoch.
struct PatchOrder {
    order: Vec<usize>,
    pos: usize,
}

impl PatchOrder {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains `net` with Adam on randomly sampled fixed-size subsets of the
/// labeled `patches`. Each step averages the loss over `batch_size` samples.
pub fn train(net: &mut Network, patches: &[PointSet], opts: &TrainOptions) -> Result<Vec<StepLog>> {
    if patches.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    if let Some(i) = patches.iter().position(|p| p.labels.is_none()) {
        return Err(Error::Data(format!("training patch {i} has no labels")));
    }
    if opts.batch_size == 0 {
        return contract_err("batch size must be at least 1");
    }
    net.set_training(true);
    let params = net.trainable();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order = PatchOrder { order: (0..patches.len()).collect(), pos: patches.len() };
    let mut logs = opts.out_dir.as_deref().map(Logs::create).transpose()?;
    let n_in = net.cfg.n_input_points;
    let lambda = net.cfg.loss_weights;
    let start = Instant::now();
    let mut history = Vec::with_capacity(opts.steps);

    for step in 1..=opts.steps {
        net.zero_grad();
        let mut loss = 0.0;
        let mut scales = [0.0; OUTPUTS];
        for _ in 0..opts.batch_size {
            let patch = &patches[order.next(&mut rng)];
            let (sample, _) = sample_fixed(patch, n_in, rng.random())?;
            let labels = sample.labels.clone().expect("checked above");
            let out = forward(&sample, net)?;
            let (total, parts) = seg_loss(&out, &labels, &lambda)?;
            if !total.item().is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            total.scale(1.0 / opts.batch_size as f64).backward()?;
            loss += total.item() / opts.batch_size as f64;
            for (s, p) in scales.iter_mut().zip(&parts) {
                *s += p / opts.batch_size as f64;
            }
        }
        adam_step(&params, &mut adam, opts.lr)?;
        let entry = StepLog { step, loss, scales, lr: opts.lr, seconds: start.elapsed().as_secs_f64() };
        if let Some(l) = logs.as_mut() {
            let fields = entry.loss_fields();
            l.write(&fields, &format!("{fields},{:.3}", entry.seconds))?;
            if step % opts.checkpoint_every == 0 {
                let p = l.dir.join(format!("step_{step:06}.tdcv"));
                save_checkpoint(&p, &net.named_tensors())?;
            }
        }
        if step % 10 == 0 || step == opts.steps {
            log::info!("step {step}/{} loss {loss:.5} ({:.1}s)", opts.steps, entry.seconds);
        }
        history.push(entry);
    }
    if let Some(l) = logs.as_mut() {
        l.flush()?;
        save_checkpoint(&l.dir.join(FINAL_CHECKPOINT), &net.named_tensors())?;
    }
    Ok(history)
}
