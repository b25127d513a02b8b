//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"DCKP"
//! u32    format version
//! u32    model-name length, then UTF-8 bytes
//! u32    tensor count
//! per tensor: u32 name length, name bytes, u64 rows, u64 cols
//! then every tensor's values as f64, in header order
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::graph::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const FORMAT_VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("checkpoint string: {e}")))
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_str(&mut w, model)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.names.iter().zip(&store.tensors) {
        write_str(&mut w, name)?;
        w.write_all(&(t.shape[0] as u64).to_le_bytes())?;
        w.write_all(&(t.shape[1] as u64).to_le_bytes())?;
    }
    for t in &store.tensors {
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the model name and its parameters.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let model = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        headers.push((name, rows, cols));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in headers {
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        store.add(name, Tensor::new([rows, cols], values)?);
    }
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.25]).unwrap());
        store.add("bias", Tensor::zeros([1, 3]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "deepar", &store).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (name, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(name, "deepar");
        assert_eq!(back.names, store.names);
        for (a, b) in back.tensors.iter().zip(&store.tensors) {
            assert_eq!(a.shape, b.shape);
            let bits = |t: &Tensor| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
