//! Parameter checkpoint file.
//!
//! Layout: magic "HPRNCKPT", u32 LE version, u32 LE entry count, then per
//! entry: u16 LE name length, name bytes, u8 rank, u32 LE dims, values in
//! little-endian. Version 1 stores 32-bit values (the interchange format
//! for model weights); version 2 stores 64-bit values and is used for
//! optimizer resume state in 64-bit runs, where narrowing would break
//! bit-exact resumption.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{HprnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"HPRNCKPT";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

const MAX_ENTRY_VALUES: u64 = 1 << 31;

/// One named tensor; values are carried as f64, which holds every f32
/// exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckpointEntry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        CheckpointEntry {
            name: name.to_string(),
            dims: t.dims().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn scalar(name: &str, v: f64) -> Self {
        CheckpointEntry {
            name: name.to_string(),
            dims: vec![1],
            values: vec![v],
        }
    }
}

pub fn entries_from_params<T: Scalar>(params: &[(String, Tensor<T>)]) -> Vec<CheckpointEntry> {
    params
        .iter()
        .map(|(name, t)| CheckpointEntry::from_tensor(name, t))
        .collect()
}

/// `wide` selects the 64-bit payload (version 2).
pub fn write_checkpoint(entries: &[CheckpointEntry], path: &Path, wide: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let version = if wide { VERSION_F64 } else { VERSION_F32 };
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name_bytes = e.name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(HprnError::contract(
                "write_checkpoint",
                format!("parameter name too long: {}", e.name),
            ));
        }
        if e.dims.len() > u8::MAX as usize {
            return Err(HprnError::contract(
                "write_checkpoint",
                format!("rank {} too large for {}", e.dims.len(), e.name),
            ));
        }
        let numel: usize = e.dims.iter().product();
        if numel != e.values.len() {
            return Err(HprnError::contract(
                "write_checkpoint",
                format!("entry {} dims/value mismatch", e.name),
            ));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[e.dims.len() as u8])?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        if wide {
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        } else {
            for &v in &e.values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the entries and whether the payload was 64-bit.
pub fn read_checkpoint(path: &Path) -> Result<(Vec<CheckpointEntry>, bool)> {
    let err_at = |offset: u64, msg: String| HprnError::Parse {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| err_at(0, "file shorter than magic".to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(err_at(0, format!("bad magic {magic:?}, expected \"HPRNCKPT\"")));
    }
    let version = r.read_u32().map_err(|_| err_at(8, "truncated version".into()))?;
    let wide = match version {
        VERSION_F32 => false,
        VERSION_F64 => true,
        other => return Err(err_at(8, format!("unsupported version {other}"))),
    };
    let count = r.read_u32().map_err(|_| err_at(12, "truncated count".into()))? as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset;
        let name_len = r.read_u16().map_err(|_| err_at(at, "truncated name length".into()))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| err_at(at, "truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| err_at(at, "parameter name is not utf-8".into()))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)
            .map_err(|_| err_at(at, "truncated rank".into()))?;
        let rank = rank_buf[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.read_u32().map_err(|_| err_at(at, "truncated dims".into()))? as u64;
            numel = numel
                .checked_mul(d)
                .filter(|&v| v <= MAX_ENTRY_VALUES)
                .ok_or_else(|| err_at(at, format!("dims overflow in {name}")))?;
            dims.push(d as usize);
        }
        let mut values = Vec::with_capacity(numel as usize);
        if wide {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| err_at(at, format!("truncated values in {name}")))?;
                values.push(f64::from_le_bytes(buf));
            }
        } else {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| err_at(at, format!("truncated values in {name}")))?;
                values.push(f32::from_le_bytes(buf) as f64);
            }
        }
        entries.push(CheckpointEntry { name, dims, values });
    }
    Ok((entries, wide))
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }
    fn read_u16(&mut self) -> std::io::Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
    fn read_u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}
