//! Dataset files: magic "AVITDATA", version, dtype tag, geometry,
//! domain id, then per-sample label byte + little-endian pixel block.

use std::path::Path;

use crate::data::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const DATA_MAGIC: &[u8; 8] = b"AVITDATA";
pub const DATA_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn save_dataset<T: Scalar>(path: &Path, ds: &DomainDataset<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(ds.image_size as u32).to_le_bytes());
    out.extend_from_slice(&(ds.channels as u32).to_le_bytes());
    out.extend_from_slice(&(ds.domain_id.len() as u32).to_le_bytes());
    out.extend_from_slice(ds.domain_id.as_bytes());
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for s in &ds.samples {
        out.push(s.label as u8);
        for &v in &s.pixels {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a dataset, widening f32 files into f64 runs exactly. A f64 file
/// cannot load into an f32 run (lossy) and is rejected as a format error.
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<DomainDataset<T>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != DATA_MAGIC {
        return Err(Error::format(format!(
            "{}: not a dataset file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    let tag = r.u8()?;
    let fdt = Dtype::from_tag(tag)
        .filter(|d| *d != Dtype::U8)
        .ok_or_else(|| {
            Error::format(format!("{}: unknown pixel dtype tag {tag}", path.display()))
        })?;
    if fdt == Dtype::F64 && T::DTYPE == Dtype::F32 {
        return Err(Error::format(format!(
            "{}: refusing to narrow f64 pixels into an f32 run",
            path.display()
        )));
    }
    let image_size = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let id_len = r.u32()? as usize;
    let domain_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::format(format!("{}: domain id is not utf-8", path.display())))?;
    let count = r.u32()? as usize;
    let ppi = image_size * image_size * channels;

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = r.u8()?;
        if label > 1 {
            return Err(Error::format(format!(
                "{}: sample {i} has label {label}",
                path.display()
            )));
        }
        let mut pixels = Vec::with_capacity(ppi);
        for _ in 0..ppi {
            let v = match fdt {
                Dtype::F32 => f32::read_le(r.take(4)?) as f64,
                Dtype::F64 => f64::read_le(r.take(8)?),
                Dtype::U8 => unreachable!(),
            };
            pixels.push(T::from_f64(v));
        }
        samples.push(Sample {
            pixels,
            label: label as usize,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!(
            "{}: {} trailing bytes after the last sample",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(DomainDataset {
        domain_id,
        image_size,
        channels,
        samples,
    })
}
