//! Checkpoint container: magic "AVITCKPT", version, then length-prefixed
//! named tensor records. Besides one record per parameter, three reserved
//! name families round-trip training state exactly:
//!   __meta__/trainable      u8 mask, one byte per parameter in store order
//!   __adam__/step           f64 scalar
//!   __adam__/{m,v}/<name>   moment buffers of each trainable parameter

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{AdamState, ParamStore};

pub const CKPT_MAGIC: &[u8; 8] = b"AVITCKPT";
pub const CKPT_VERSION: u32 = 1;

const TRAINABLE_KEY: &str = "__meta__/trainable";
const STEP_KEY: &str = "__adam__/step";

fn push_record_header(out: &mut Vec<u8>, name: &str, dtype: Dtype, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn push_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        v.write_le(out);
    }
}

pub fn save_model<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    let mut records = store.len() + 1;
    if let Some(state) = adam {
        records += 1 + 2 * state.m.iter().filter(|m| !m.is_empty()).count();
    }
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records as u32).to_le_bytes());

    for (_, p) in store.iter() {
        push_record_header(&mut out, &p.name, T::DTYPE, &p.shape);
        push_values(&mut out, &p.values);
    }

    let mask: Vec<u8> = store.iter().map(|(_, p)| p.trainable as u8).collect();
    push_record_header(&mut out, TRAINABLE_KEY, Dtype::U8, &[mask.len()]);
    out.extend_from_slice(&mask);

    if let Some(state) = adam {
        push_record_header(&mut out, STEP_KEY, Dtype::F64, &[1]);
        push_values(&mut out, &[state.step as f64]);
        for (i, (_, p)) in store.iter().enumerate() {
            if state.m[i].is_empty() {
                continue;
            }
            for (prefix, buf) in [("m", &state.m[i]), ("v", &state.v[i])] {
                let name = format!("__adam__/{prefix}/{}", p.name);
                push_record_header(&mut out, &name, T::DTYPE, &[buf.len()]);
                push_values(&mut out, buf);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

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

    /// Reads one numeric payload, widening f32 exactly and refusing to
    /// narrow f64 into an f32 run.
    fn values<T: Scalar>(&mut self, name: &str, dtype: Dtype, len: usize) -> Result<Vec<T>> {
        if dtype == Dtype::F64 && T::DTYPE == Dtype::F32 {
            return Err(Error::format(format!(
                "{}: tensor {name} is f64; refusing to narrow into an f32 run",
                self.path
            )));
        }
        let mut vals = Vec::with_capacity(len);
        for _ in 0..len {
            let v = match dtype {
                Dtype::F32 => f32::read_le(self.take(4)?) as f64,
                Dtype::F64 => f64::read_le(self.take(8)?),
                Dtype::U8 => self.take(1)?[0] as f64,
            };
            vals.push(T::from_f64(v));
        }
        Ok(vals)
    }
}

/// Loads parameter values (and the trainable mask) into `store`, which must
/// already hold the same tensors: unknown, missing, or reshaped tensors are
/// format errors naming the offender. Returns the optimizer state if the
/// file carries one.
pub fn load_model<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<Option<AdamState<T>>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let records = r.u32()? as usize;

    let mut seen: HashSet<String> = HashSet::new();
    let mut mask: Option<Vec<u8>> = None;
    let mut step: Option<u64> = None;
    let mut moments: HashMap<String, Vec<T>> = HashMap::new();

    for _ in 0..records {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(format!("{}: record name is not utf-8", path.display())))?;
        let tag = r.take(1)?[0];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| {
            Error::format(format!("{}: tensor {name} has unknown dtype tag {tag}", path.display()))
        })?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        if !seen.insert(name.clone()) {
            return Err(Error::format(format!(
                "{}: duplicate tensor {name}",
                path.display()
            )));
        }

        if name == TRAINABLE_KEY {
            let m = r.take(len)?.to_vec();
            if m.len() != store.len() || m.iter().any(|&b| b > 1) {
                return Err(Error::format(format!(
                    "{}: trainable mask covers {} parameters, store has {}",
                    path.display(),
                    m.len(),
                    store.len()
                )));
            }
            mask = Some(m);
        } else if name == STEP_KEY {
            let v: Vec<f64> = r.values(&name, dtype, len)?;
            step = Some(v.first().copied().unwrap_or(0.0) as u64);
        } else if let Some(rest) = name.strip_prefix("__adam__/") {
            let vals: Vec<T> = r.values(&name, dtype, len)?;
            if !(rest.starts_with("m/") || rest.starts_with("v/")) {
                return Err(Error::format(format!(
                    "{}: unknown reserved tensor {name}",
                    path.display()
                )));
            }
            moments.insert(rest.to_string(), vals);
        } else {
            let id = store.lookup(&name).ok_or_else(|| {
                Error::format(format!(
                    "{}: tensor {name} does not exist in this model",
                    path.display()
                ))
            })?;
            let vals: Vec<T> = r.values(&name, dtype, len)?;
            let p = store.get_mut(id);
            if p.shape != dims {
                return Err(Error::format(format!(
                    "{}: tensor {name} has shape {dims:?}, model expects {:?}",
                    path.display(),
                    p.shape
                )));
            }
            p.values = vals;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!(
            "{}: {} trailing bytes after the last record",
            path.display(),
            buf.len() - r.pos
        )));
    }

    let missing: Vec<&str> = store
        .iter()
        .map(|(_, p)| p.name.as_str())
        .filter(|n| !seen.contains(*n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "{}: checkpoint is missing tensor {}",
            path.display(),
            missing[0]
        )));
    }

    if let Some(mask) = mask {
        for (byte, id) in mask.iter().zip(store.ids()) {
            store.get_mut(id).trainable = *byte == 1;
        }
    }

    if step.is_none() && moments.is_empty() {
        return Ok(None);
    }
    let step = step.ok_or_else(|| {
        Error::format(format!(
            "{}: optimizer moments present but {STEP_KEY} is missing",
            path.display()
        ))
    })?;
    let mut state = AdamState::new(store);
    state.step = step;
    for (i, (_, p)) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let key = format!("{prefix}/{}", p.name);
            let buf = moments.remove(&key).ok_or_else(|| {
                Error::format(format!(
                    "{}: missing optimizer buffer __adam__/{key}",
                    path.display()
                ))
            })?;
            if buf.len() != p.values.len() {
                return Err(Error::format(format!(
                    "{}: optimizer buffer __adam__/{key} has {} values, expected {}",
                    path.display(),
                    buf.len(),
                    p.values.len()
                )));
            }
            *slot = buf;
        }
    }
    if let Some(stray) = moments.keys().next() {
        return Err(Error::format(format!(
            "{}: optimizer buffer __adam__/{stray} does not match a trainable parameter",
            path.display()
        )));
    }
    Ok(Some(state))
}
