//! Run configuration.
//!
//! Files are TOML. Keys may be written dotted (`net.k_c = 8`) or under
//! section headers (`[net]`). A file names a profile whose defaults fill every
//! key it leaves out; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{ColumnRole, ColumnSchema, SYNTH_CLASS_NAMES};
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, LEVELS, OUTPUTS};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Isprs,
    Lasdu,
    Synth,
    Custom,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "isprs" => Profile::Isprs,
            "lasdu" => Profile::Lasdu,
            "synth" => Profile::Synth,
            "custom" => Profile::Custom,
            other => return Err(Error::Config(format!("profile: unknown profile {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_files: Vec<PathBuf>,
    pub eval_files: Vec<PathBuf>,
    pub columns: Vec<ColumnRole>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub patch_size_m: f64,
    /// Points in a generated synthetic scene.
    pub synth_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Optimizer steps; 0 means `epochs` passes over the patches.
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn roles(v: &[&str]) -> Vec<ColumnRole> {
    v.iter().map(|s| ColumnRole::parse(s).expect("built-in role")).collect()
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let isprs = [
            "powerline",
            "low_vegetation",
            "impervious_surfaces",
            "car",
            "fence_hedge",
            "roof",
            "facade",
            "shrub",
            "tree",
        ];
        let (data, lambda) = match profile {
            Profile::Isprs | Profile::Custom => (
                DataConfig {
                    train_files: vec![],
                    eval_files: vec![],
                    columns: roles(&["x", "y", "z", "feature", "ignore", "ignore", "label"]),
                    n_classes: 9,
                    class_names: names(&isprs),
                    patch_size_m: 30.0,
                    synth_points: 4096,
                },
                [1.0, 2.0, 2.0, 2.0, 2.0],
            ),
            Profile::Lasdu => (
                DataConfig {
                    train_files: vec![],
                    eval_files: vec![],
                    columns: roles(&["x", "y", "z", "feature", "label"]),
                    n_classes: 5,
                    class_names: names(&["ground", "building", "tree", "low_vegetation", "artifact"]),
                    patch_size_m: 50.0,
                    synth_points: 4096,
                },
                [1.0, 5.0, 5.0, 5.0, 5.0],
            ),
            Profile::Synth => (
                DataConfig {
                    train_files: vec![PathBuf::from("synth.txt")],
                    eval_files: vec![PathBuf::from("synth.txt")],
                    columns: roles(&["x", "y", "z", "feature", "label"]),
                    n_classes: 5,
                    class_names: names(&SYNTH_CLASS_NAMES),
                    patch_size_m: 30.0,
                    synth_points: 4096,
                },
                [1.0, 2.0, 2.0, 2.0, 2.0],
            ),
        };
        let schema_feats = data.columns.iter().filter(|&&c| c == ColumnRole::Feature).count();
        let mut net = NetworkConfig::new(data.n_classes, schema_feats.max(1));
        net.loss_weights = lambda;
        let mut train =
            TrainConfig { batch_size: 4, lr: 0.0002, epochs: 500, steps: 0, seed: 0, checkpoint_every: 100 };
        if profile == Profile::Synth {
            net.channel_widths = [16, 32, 64, 128];
            train.batch_size = 1;
            train.steps = 300;
        }
        RunConfig { profile, output_dir: PathBuf::from("runs"), data, net, train }
    }

    pub fn schema(&self) -> Result<ColumnSchema> {
        ColumnSchema::new(self.data.columns.clone(), self.data.n_classes, self.data.class_names.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        if self.data.patch_size_m.is_nan() || self.data.patch_size_m <= 0.0 {
            return Err(Error::Config("data.patch_size_m: must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size: must be at least 1".into()));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr: must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every: must be at least 1".into()));
        }
        self.net.validate()
    }

    /// TOML text that parses back to this configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn mismatch<T>(key: &str, want: &str, v: &Value) -> Result<T> {
    Err(Error::Config(format!("{key}: expected {want}, got {}", v.type_str())))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => mismatch(key, "a non-negative integer", v),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => mismatch(key, "a number", v),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().map_or_else(|| mismatch(key, "a boolean", v), Ok)
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().map_or_else(|| mismatch(key, "a string", v), Ok)
}

fn as_list<T>(key: &str, v: &Value, len: Option<usize>, each: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    let Some(items) = v.as_array() else {
        return mismatch(key, "an array", v);
    };
    if let Some(n) = len {
        if items.len() != n {
            return Err(Error::Config(format!("{key}: expected {n} entries, got {}", items.len())));
        }
    }
    items.iter().map(|x| each(key, x)).collect()
}

fn fixed<T: Copy + Default, const N: usize>(v: Vec<T>) -> [T; N] {
    let mut a = [T::default(); N];
    a.copy_from_slice(&v);
    a
}

fn apply(cfg: &mut RunConfig, key: &str, v: &Value) -> Result<()> {
    let paths = |v: &Value| as_list(key, v, None, |k, x| as_str(k, x).map(PathBuf::from));
    match key {
        "output_dir" => cfg.output_dir = PathBuf::from(as_str(key, v)?),
        "data.train_files" => cfg.data.train_files = paths(v)?,
        "data.eval_files" => cfg.data.eval_files = paths(v)?,
        "data.columns" => {
            cfg.data.columns = as_list(key, v, None, |k, x| {
                ColumnRole::parse(as_str(k, x)?).map_err(|e| Error::Config(format!("{k}: {e}")))
            })?
        }
        "data.n_classes" => cfg.data.n_classes = as_usize(key, v)?,
        "data.class_names" => cfg.data.class_names = as_list(key, v, None, |k, x| as_str(k, x).map(String::from))?,
        "data.patch_size_m" => cfg.data.patch_size_m = as_f64(key, v)?,
        "data.synth_points" => cfg.data.synth_points = as_usize(key, v)?,
        // derived from the data section; accepted so resolved files re-parse
        "net.n_classes" | "net.input_feat_dim" => {
            as_usize(key, v)?;
        }
        "net.n_input_points" => cfg.net.n_input_points = as_usize(key, v)?,
        "net.level_sizes" => cfg.net.level_sizes = fixed(as_list(key, v, Some(LEVELS), as_usize)?),
        "net.map_specs" => {
            let specs = as_list(key, v, Some(LEVELS), |k, x| as_list(k, x, Some(2), as_usize))?;
            for (l, s) in specs.iter().enumerate() {
                cfg.net.map_specs[l] = (s[0], s[1]);
            }
        }
        "net.volume_spec" => {
            let s = as_list(key, v, Some(3), as_usize)?;
            cfg.net.volume_spec = (s[0], s[1], s[2]);
        }
        "net.map_radius_scale" => cfg.net.map_radius_scale = as_f64(key, v)?,
        "net.volume_radius_scale" => cfg.net.volume_radius_scale = as_f64(key, v)?,
        "net.channel_widths" => cfg.net.channel_widths = fixed(as_list(key, v, Some(LEVELS), as_usize)?),
        "net.k_c" => cfg.net.k_c = as_usize(key, v)?,
        "net.k_s" => cfg.net.k_s = as_usize(key, v)?,
        "net.knn_sizes" => cfg.net.knn_sizes = fixed(as_list(key, v, Some(3), as_usize)?),
        "net.loss_weights" => cfg.net.loss_weights = fixed(as_list(key, v, Some(OUTPUTS), as_f64)?),
        "net.spdconv" => cfg.net.spdconv = as_bool(key, v)?,
        "net.softmax_weights" => cfg.net.softmax_weights = as_bool(key, v)?,
        "train.batch_size" => cfg.train.batch_size = as_usize(key, v)?,
        "train.lr" => cfg.train.lr = as_f64(key, v)?,
        "train.epochs" => cfg.train.epochs = as_usize(key, v)?,
        "train.steps" => cfg.train.steps = as_usize(key, v)?,
        "train.seed" => cfg.train.seed = as_usize(key, v)? as u64,
        "train.checkpoint_every" => cfg.train.checkpoint_every = as_usize(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Resolves configuration text against its profile (`default_profile` when
/// the text names none).
pub fn parse_config_str(text: &str, default_profile: Profile) -> Result<RunConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut flat = Vec::new();
    flatten("", &table, &mut flat);
    let profile = match flat.iter().find(|(k, _)| k == "profile") {
        Some((k, v)) => Profile::parse(as_str(k, v)?)?,
        None => default_profile,
    };
    let mut cfg = RunConfig::profile(profile);
    for (k, v) in flat.iter().filter(|(k, _)| k != "profile") {
        apply(&mut cfg, k, v)?;
    }
    // the network's class count and input width follow the data
    let derived = [
        ("net.n_classes", cfg.data.n_classes),
        ("net.input_feat_dim", cfg.data.columns.iter().filter(|&&c| c == ColumnRole::Feature).count().max(1)),
    ];
    for (key, want) in derived {
        if let Some((_, v)) = flat.iter().find(|(k, _)| k == key) {
            if as_usize(key, v)? != want {
                return Err(Error::Config(format!("{key}: must match the data section ({want})")));
            }
        }
    }
    cfg.net.n_classes = derived[0].1;
    cfg.net.input_feat_dim = derived[1].1;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and resolves a configuration file. Relative data paths are taken
/// relative to the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text, Profile::Custom)?;
    if let Some(base) = path.parent() {
        for p in cfg.data.train_files.iter_mut().chain(cfg.data.eval_files.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}
