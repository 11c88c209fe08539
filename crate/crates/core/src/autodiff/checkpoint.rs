//! Binary checkpoint format: "IFNC" magic, version byte, a manifest of
//! (name, shape) entries, then the raw little-endian f64 blocks in manifest
//! order.

use super::Tensor;
use crate::error::{CoreError, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFNC";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CoreError::invalid("checkpoint entry name too long"));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in entries {
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Format(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != CHECKPOINT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {}",
            ver[0]
        )));
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let n = u32::from_le_bytes(cnt) as usize;

    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CoreError::Format("non-UTF8 checkpoint entry name".into()))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd)?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        manifest.push((name, shape));
    }

    let mut out = Vec::with_capacity(n);
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
