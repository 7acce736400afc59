//! Binary tensor dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"HAKD" | version: u32 = 1 | dtype: u8 (0 = f32, 1 = f64) | ndim: u8
//! | dims: ndim x u64 | payload: row-major values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"HAKD";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dims: {}", t.ndim())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[t.dtype().code(), t.ndim() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[0])))?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut len: usize = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        dims.push(d);
    }
    let mut data = Vec::with_capacity(len);
    match dtype {
        DType::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        DType::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let t = Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(t.to_dtype(dtype))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let f = File::create(path)?;
    write_tensor(BufWriter::new(f), t)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let f = File::open(path)?;
    read_tensor(BufReader::new(f))
}
