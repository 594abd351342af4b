//! Binary grid and tensor files, little-endian throughout.
//!
//! OCCG: `"OCCG"`, version `u32 = 1`, `nx ny nz L` as `u32`, then one label
//! byte per voxel, x slowest. Visibility masks use the same layout with `L = 2`.
//!
//! TNSR: `"TNSR"`, version `u32 = 1`, `ndim: u32`, each dim as `u32`, dtype
//! tag `u8` (1 = f32, 2 = f64), then the row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabeledOccupancy, VisibilityMask};

const OCCG_MAGIC: &[u8; 4] = b"OCCG";
const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!("{}: bad magic", self.what)));
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(Error::Format(format!("{}: unsupported version {v}", self.what))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} does not fit in u32")))
}

fn occg_bytes(dims: [usize; 3], classes: usize, labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + labels.len());
    out.extend_from_slice(OCCG_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in dims {
        out.extend_from_slice(&dim_u32(n)?.to_le_bytes());
    }
    out.extend_from_slice(&dim_u32(classes)?.to_le_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

fn parse_occg(bytes: &[u8]) -> Result<([usize; 3], usize, Vec<u8>)> {
    let mut r = Reader::new(bytes, "OCCG");
    r.header(OCCG_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let classes = r.u32()? as usize;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("OCCG: grid size overflows".into()))?;
    let labels = r.take(n)?.to_vec();
    r.finish()?;
    Ok((dims, classes, labels))
}

pub fn encode_occg(labels: &LabeledOccupancy) -> Result<Vec<u8>> {
    occg_bytes(labels.dims(), labels.classes(), labels.labels())
}

pub fn decode_occg(bytes: &[u8]) -> Result<LabeledOccupancy> {
    let (dims, classes, labels) = parse_occg(bytes)?;
    LabeledOccupancy::new(dims, classes, labels)
}

pub fn encode_mask(mask: &VisibilityMask) -> Result<Vec<u8>> {
    let flags: Vec<u8> = mask.flags().iter().map(|&v| v as u8).collect();
    occg_bytes(mask.dims(), 2, &flags)
}

pub fn decode_mask(bytes: &[u8]) -> Result<VisibilityMask> {
    let (dims, classes, flags) = parse_occg(bytes)?;
    if classes != 2 || flags.iter().any(|&f| f > 1) {
        return Err(Error::Format("visibility grid must hold 0/1 with L = 2".into()));
    }
    VisibilityMask::new(dims, flags.into_iter().map(|f| f == 1).collect())
}

pub fn encode_tnsr<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 4 * t.ndim() + t.len() * std::mem::size_of::<T>());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(t.ndim())?.to_le_bytes());
    for &n in t.shape() {
        out.extend_from_slice(&dim_u32(n)?.to_le_bytes());
    }
    out.push(T::DTYPE);
    out.extend_from_slice(&t.payload_bytes());
    Ok(out)
}

/// Reads a tensor of exactly type `T`; a dtype mismatch is an error.
pub fn decode_tnsr<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes, "TNSR");
    r.header(TNSR_MAGIC)?;
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("TNSR: dtype tag {dtype}, expected {} ({})", T::DTYPE, T::NAME)));
    }
    let width = std::mem::size_of::<T>();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Format("TNSR: size overflows".into()))?;
    let data = r.take(n)?.chunks_exact(width).map(T::read_le).collect();
    r.finish()?;
    Tensor::from_vec(&shape, data)
}

/// Dtype tag of a TNSR payload without decoding it.
pub fn tnsr_dtype(bytes: &[u8]) -> Result<u8> {
    let mut r = Reader::new(bytes, "TNSR");
    r.header(TNSR_MAGIC)?;
    let ndim = r.u32()? as usize;
    r.take(ndim.checked_mul(4).ok_or_else(|| Error::Format("TNSR: ndim overflows".into()))?)?;
    Ok(r.take(1)?[0])
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_occg(path: &Path, labels: &LabeledOccupancy) -> Result<()> {
    write_bytes(path, &encode_occg(labels)?)
}

pub fn read_occg(path: &Path) -> Result<LabeledOccupancy> {
    decode_occg(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_mask(path: &Path, mask: &VisibilityMask) -> Result<()> {
    write_bytes(path, &encode_mask(mask)?)
}

pub fn read_mask(path: &Path) -> Result<VisibilityMask> {
    decode_mask(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_tnsr<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_tnsr(t)?)
}

pub fn read_tnsr<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tnsr(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

/// Reads a TNSR file of either precision, converting to `T`.
pub fn read_tnsr_as<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read_bytes(path)?;
    let converted = match tnsr_dtype(&bytes) {
        Ok(1) => decode_tnsr::<f32>(&bytes).map(|t| t.cast()),
        Ok(2) => decode_tnsr::<f64>(&bytes).map(|t| t.cast()),
        Ok(tag) => Err(Error::Format(format!("TNSR: unknown dtype tag {tag}"))),
        Err(e) => Err(e),
    };
    converted.map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}
