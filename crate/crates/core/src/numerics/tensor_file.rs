//! Portable binary tensor container.
//!
//! ```text
//! magic    4 bytes   "SSTN"
//! version  u32 LE    1
//! count    u32 LE    number of tensors
//! repeated count times:
//!   name_len u32 LE, name (UTF-8, name_len bytes)
//!   rank     u32 LE, dims (u64 LE each, rank of them)
//!   data     f64 LE, product(dims) values, row-major
//! ```

use std::io::{Read, Write};

use super::{NumericsError, ParamSet};

const MAGIC: &[u8; 4] = b"SSTN";
const VERSION: u32 = 1;
// Guards allocation against corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let elements: usize = t.shape.iter().product();
        if elements != t.data.len() {
            return Err(NumericsError::Format(format!(
                "tensor `{}` has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len.min(4096)];
        if name_len > 4096 {
            return Err(NumericsError::Format("tensor name too long".into()));
        }
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumericsError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > 8 {
            return Err(NumericsError::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            elements = elements.saturating_mul(d);
            shape.push(d as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(NumericsError::Format(format!("tensor `{name}` is too large")));
        }
        let mut data = Vec::with_capacity(elements as usize);
        let mut b = [0u8; 8];
        for _ in 0..elements {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_params<P: ParamSet, W: Write>(params: &P, w: W) -> Result<(), NumericsError> {
    let tensors: Vec<NamedTensor> = params
        .layout()
        .into_iter()
        .zip(params.tensors())
        .map(|((name, shape), data)| NamedTensor { name, shape, data: data.to_vec() })
        .collect();
    write_tensors(w, &tensors)
}

/// Loads tensors into `params`, requiring names and shapes to match its layout.
pub fn load_params<P: ParamSet, R: Read>(params: &mut P, r: R) -> Result<(), NumericsError> {
    let tensors = read_tensors(r)?;
    let layout = params.layout();
    if tensors.len() != layout.len() {
        return Err(NumericsError::Format(format!("expected {} tensors, found {}", layout.len(), tensors.len())));
    }
    for ((name, shape), t) in layout.iter().zip(&tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(NumericsError::Format(format!(
                "expected `{name}` {shape:?}, found `{}` {:?}",
                t.name, t.shape
            )));
        }
    }
    for (dst, t) in params.tensors_mut().into_iter().zip(tensors) {
        dst.copy_from_slice(&t.data);
    }
    Ok(())
}
