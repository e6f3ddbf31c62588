//! `JCKP1` checkpoint files.
//!
//! Layout (little-endian): the five magic bytes `JCKP1`, version `u32`,
//! tensor count `u32`, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` rank, one `u32` per dimension and the `f32` data.

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"JCKP1";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 5] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let [rank] = read_array::<1>(&mut r)?;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data for {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store<W: Write>(w: W, store: &ParamStore) -> Result<()> {
    write_tensors(w, store.named_values())
}

/// Overwrite the values of `store` with the tensors in a checkpoint. Every
/// parameter must be present with a matching shape.
pub fn load_into_store<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    let tensors = read_tensors(r)?;
    if tensors.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(&name)?;
        store.set_value(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::matrix(2, 2, vec![0.5, -1.25, 3.0, 1e-3f32 as f64]).unwrap()).unwrap();
        store.add("b.bias", Tensor::row_vector(vec![7.0])).unwrap();
        let mut buf = Vec::new();
        save_store(&mut buf, &store).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(&back[0].1, store.value(store.id("a").unwrap()));
        assert_eq!(back[1].1.shape(), &[1, 1]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensors(&b"JCKP2\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("x", &Tensor::zeros(3, 3))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensors(&buf[..]).is_err());
    }
}
