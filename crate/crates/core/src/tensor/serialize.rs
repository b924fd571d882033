//! Named-tensor container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"DCLR"
//! version u32      currently 1
//! hlen    u32      header length in bytes
//! header  hlen     UTF-8 JSON, caller-defined metadata
//! count   u32      number of tensors
//! entry*  count times:
//!   nlen  u16      name length
//!   name  nlen     UTF-8
//!   ndim  u8
//!   dims  ndim*u64
//!   data  product(dims) * f64, little-endian
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCLR";
pub const VERSION: u32 = 1;

pub fn write_container<W: Write>(
    out: &mut W,
    header: &str,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::format(format!("tensor name too long: {} bytes", nb.len())));
        }
        out.write_all(&(nb.len() as u16).to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&[t.shape().len() as u8])?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(input: &mut R) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported container version {version}")));
    }
    let hlen = read_u32(input)? as usize;
    let mut hbuf = vec![0u8; hlen];
    input.read_exact(&mut hbuf)?;
    let header = String::from_utf8(hbuf).map_err(|e| Error::format(format!("header not utf-8: {e}")))?;
    let count = read_u32(input)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut nlen = [0u8; 2];
        input.read_exact(&mut nlen)?;
        let mut nbuf = vec![0u8; u16::from_le_bytes(nlen) as usize];
        input.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|e| Error::format(format!("name not utf-8: {e}")))?;
        let mut ndim = [0u8; 1];
        input.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut d = [0u8; 8];
            input.read_exact(&mut d)?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok((header, tensors))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
