//! Point-cloud ingestion, tiling, normalization, sampling and caching.

mod cache;
mod patch;
mod synth;

pub use cache::{read_patch_cache, write_patch_cache, PATCH_CACHE_MAGIC, PATCH_CACHE_VERSION};
pub use patch::{
    denormalize, label_pyramid, normalize_patch, prepare_patches, sample_fixed, tile_patches, NormInfo, Patch,
};
pub use synth::{synth_scene, SYNTH_CLASS_NAMES, SYNTH_PROPORTIONS, SYNTH_TILE_M};

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    X,
    Y,
    Z,
    Feature,
    Label,
    Ignore,
}

impl ColumnRole {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "x" => ColumnRole::X,
            "y" => ColumnRole::Y,
            "z" => ColumnRole::Z,
            "feature" => ColumnRole::Feature,
            "label" => ColumnRole::Label,
            "ignore" => ColumnRole::Ignore,
            other => return Err(Error::Config(format!("unknown column role {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub columns: Vec<ColumnRole>,
    pub n_classes: usize,
    /// May be empty, in which case class ids are used as names.
    pub class_names: Vec<String>,
}

impl ColumnSchema {
    pub fn new(columns: Vec<ColumnRole>, n_classes: usize, class_names: Vec<String>) -> Result<Self> {
        let count = |r: ColumnRole| columns.iter().filter(|&&c| c == r).count();
        for (role, name) in [(ColumnRole::X, "x"), (ColumnRole::Y, "y"), (ColumnRole::Z, "z")] {
            if count(role) != 1 {
                return Err(Error::Config(format!("schema needs exactly one {name} column, found {}", count(role))));
            }
        }
        if count(ColumnRole::Label) > 1 {
            return Err(Error::Config("schema has more than one label column".into()));
        }
        if !class_names.is_empty() && class_names.len() != n_classes {
            return Err(Error::Config(format!("{} class names for {n_classes} classes", class_names.len())));
        }
        Ok(ColumnSchema { columns, n_classes, class_names })
    }

    /// `x y z feature… label` with `n_feats` feature columns.
    pub fn standard(n_feats: usize, n_classes: usize) -> Self {
        let mut columns = vec![ColumnRole::X, ColumnRole::Y, ColumnRole::Z];
        columns.extend(std::iter::repeat_n(ColumnRole::Feature, n_feats));
        columns.push(ColumnRole::Label);
        ColumnSchema { columns, n_classes, class_names: Vec::new() }
    }

    pub fn has_label(&self) -> bool {
        self.columns.contains(&ColumnRole::Label)
    }

    pub fn feat_dim(&self) -> usize {
        self.columns.iter().filter(|&&c| c == ColumnRole::Feature).count()
    }

    pub fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| c.to_string())
    }
}

/// Raw points in file units.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub xyz: Vec<[f64; 3]>,
    /// Row-major `[N, feat_dim]`.
    pub feats: Vec<f64>,
    pub feat_dim: usize,
    pub labels: Option<Vec<usize>>,
}

impl PointTable {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

/// Parses whitespace-separated rows; blank lines and lines starting with `#`
/// are skipped. `source` names the input in error messages.
pub fn parse_ascii_points<R: BufRead>(reader: R, schema: &ColumnSchema, source: &str) -> Result<PointTable> {
    let mut table = PointTable {
        xyz: Vec::new(),
        feats: Vec::new(),
        feat_dim: schema.feat_dim(),
        labels: schema.has_label().then(Vec::new),
    };
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("{source}: line {}: {e}", ln + 1)))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != schema.columns.len() {
            return Err(Error::Data(format!(
                "{source}: line {}: expected {} columns, found {}",
                ln + 1,
                schema.columns.len(),
                tokens.len()
            )));
        }
        let mut p = [0.0; 3];
        for (col, (tok, role)) in tokens.iter().zip(&schema.columns).enumerate() {
            if *role == ColumnRole::Ignore {
                continue;
            }
            let v: f64 = tok.parse().map_err(|_| {
                Error::Data(format!("{source}: line {}, column {}: cannot parse {tok:?}", ln + 1, col + 1))
            })?;
            match role {
                ColumnRole::X => p[0] = v,
                ColumnRole::Y => p[1] = v,
                ColumnRole::Z => p[2] = v,
                ColumnRole::Feature => table.feats.push(v),
                ColumnRole::Label => {
                    if v < 0.0 || v.fract() != 0.0 || v >= schema.n_classes as f64 {
                        return Err(Error::Data(format!(
                            "{source}: line {}, column {}: label {tok} outside [0, {})",
                            ln + 1,
                            col + 1,
                            schema.n_classes
                        )));
                    }
                    table.labels.as_mut().expect("schema has a label").push(v as usize);
                }
                ColumnRole::Ignore => unreachable!(),
            }
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{source}: line {}: non-finite coordinate", ln + 1)));
        }
        table.xyz.push(p);
    }
    Ok(table)
}

pub fn load_ascii_points(path: &Path, schema: &ColumnSchema) -> Result<PointTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let table = parse_ascii_points(BufReader::new(file), schema, &path.display().to_string())?;
    log::info!("loaded {} points from {}", table.len(), path.display());
    Ok(table)
}

/// Writes `x y z feature… [label] [extra]` rows. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_ascii_points(path: &Path, table: &PointTable, extra: Option<&[usize]>) -> Result<()> {
    let m = table.feat_dim;
    let mut out = String::new();
    for (i, p) in table.xyz.iter().enumerate() {
        write!(out, "{} {} {}", p[0], p[1], p[2]).expect("string write");
        for v in &table.feats[i * m..(i + 1) * m] {
            write!(out, " {v}").expect("string write");
        }
        if let Some(l) = &table.labels {
            write!(out, " {}", l[i]).expect("string write");
        }
        if let Some(e) = extra {
            write!(out, " {}", e[i]).expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> ColumnSchema {
        ColumnSchema::new(vec![ColumnRole::X, ColumnRole::Y, ColumnRole::Z, ColumnRole::Label], 3, vec![]).unwrap()
    }

    #[test]
    fn three_rows_no_features() {
        let t = parse_ascii_points("0 0 0 1\n1 2 3 2\n\n4 5 6 0\n".as_bytes(), &schema(), "mem").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.feat_dim, 0);
        assert_eq!(t.labels, Some(vec![1, 2, 0]));
    }

    #[test]
    fn text_token_names_the_line() {
        let err = parse_ascii_points("0 0 0 1\n1 a 3 2\n".as_bytes(), &schema(), "mem").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn label_out_of_range() {
        let err = parse_ascii_points("0 0 0 3\n".as_bytes(), &schema(), "mem").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn schema_validation() {
        assert!(ColumnSchema::new(vec![ColumnRole::X, ColumnRole::Y], 2, vec![]).is_err());
        assert!(ColumnSchema::new(
            vec![ColumnRole::X, ColumnRole::Y, ColumnRole::Z, ColumnRole::Label, ColumnRole::Label],
            2,
            vec![]
        )
        .is_err());
        assert!(ColumnRole::parse("intensity").is_err());
        assert_eq!(ColumnSchema::standard(2, 5).feat_dim(), 2);
    }
}
