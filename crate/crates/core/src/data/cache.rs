//! Binary patch cache.
//!
//! Layout, all little-endian: magic `TDPC`, `u32` version, `u64` patch count,
//! then per patch: origin and extent (4 × `f64`), point count, feature width
//! and label flag (3 × `u64`), source id (`u64` length + UTF-8), coordinates
//! (`f64`), features (`f64`), labels (`u32`, only when flagged) and source rows
//! (`u64`).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Patch;
use crate::error::{Error, Result};

pub const PATCH_CACHE_MAGIC: &[u8; 4] = b"TDPC";
pub const PATCH_CACHE_VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get<const B: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; B]> {
    let mut b = [0u8; B];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}

fn write_all<W: Write>(w: &mut W, patches: &[Patch]) -> std::io::Result<()> {
    w.write_all(PATCH_CACHE_MAGIC)?;
    w.write_all(&PATCH_CACHE_VERSION.to_le_bytes())?;
    put_u64(w, patches.len() as u64)?;
    for p in patches {
        for v in p.origin.iter().chain(&p.extent) {
            put_f64(w, *v)?;
        }
        put_u64(w, p.len() as u64)?;
        put_u64(w, p.feat_dim as u64)?;
        put_u64(w, p.labels.is_some() as u64)?;
        put_u64(w, p.source_id.len() as u64)?;
        w.write_all(p.source_id.as_bytes())?;
        for v in p.coords.iter().flatten().chain(&p.feats) {
            put_f64(w, *v)?;
        }
        if let Some(l) = &p.labels {
            for &v in l {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        for &r in &p.rows {
            put_u64(w, r as u64)?;
        }
    }
    w.flush()
}

pub fn write_patch_cache(path: &Path, patches: &[Patch]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_all(&mut BufWriter::new(f), patches).map_err(|e| Error::io(path, e))
}

fn read_all<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Vec<Patch>, String>> {
    if &get::<4, _>(r)? != PATCH_CACHE_MAGIC {
        return Ok(Err("not a patch cache (bad magic)".into()));
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != PATCH_CACHE_VERSION {
        return Ok(Err(format!("unsupported patch cache version {version}")));
    }
    let count = get_u64(r)?;
    let mut patches = Vec::new();
    for _ in 0..count {
        let mut hdr = [0.0; 4];
        for v in &mut hdr {
            *v = get_f64(r)?;
        }
        let n = get_u64(r)? as usize;
        let m = get_u64(r)? as usize;
        let labeled = get_u64(r)? != 0;
        let mut id = vec![0u8; get_u64(r)? as usize];
        r.read_exact(&mut id)?;
        let Ok(source_id) = String::from_utf8(id) else {
            return Ok(Err("source id is not UTF-8".into()));
        };
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push([get_f64(r)?, get_f64(r)?, get_f64(r)?]);
        }
        let feats = (0..n * m).map(|_| get_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
        let labels = if labeled {
            Some((0..n).map(|_| Ok(u32::from_le_bytes(get(r)?) as usize)).collect::<std::io::Result<Vec<_>>>()?)
        } else {
            None
        };
        let rows = (0..n).map(|_| Ok(get_u64(r)? as usize)).collect::<std::io::Result<Vec<_>>>()?;
        patches.push(Patch {
            origin: [hdr[0], hdr[1]],
            extent: [hdr[2], hdr[3]],
            coords,
            feats,
            feat_dim: m,
            labels,
            rows,
            source_id,
        });
    }
    Ok(Ok(patches))
}

pub fn read_patch_cache(path: &Path) -> Result<Vec<Patch>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match read_all(&mut BufReader::new(f)) {
        Ok(Ok(p)) => Ok(p),
        Ok(Err(msg)) => Err(Error::Data(format!("{}: {msg}", path.display()))),
        Err(e) => Err(Error::Data(format!("{}: truncated patch cache ({e})", path.display()))),
    }
}
