//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TDCV"  u32 version  u64 record_count
//! per record: u64 name_len, name (UTF-8), u64 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCV";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> std::io::Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u64(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(Record { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params).map_err(|e| Error::io(path, e))
}

/// Copies stored values into `params`, matching by name. Every parameter must
/// be present with an identical shape.
pub fn load_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_checkpoint(BufReader::new(f)).map_err(|e| Error::io(path, e))?;
    let by_name: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    for (name, t) in params {
        let rec = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint {} lacks parameter {name}", path.display())))?;
        if rec.shape != t.shape() {
            return Err(Error::Data(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                rec.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}
