//! Binary container for named tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//! `b"QGENTSR\0"`, `u32` version, `u64` header length, header JSON bytes,
//! `u64` tensor count, then per tensor: `u32` name length, name bytes,
//! `u32` rank, `u64` per dimension, `f64` values.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

use super::ModelError;

pub const MAGIC: &[u8; 8] = b"QGENTSR\0";
pub const VERSION: u32 = 1;

/// Writes the container to a sibling temporary file and renames it into
/// place, so readers never observe a partial file.
pub fn write_container(path: &Path, header: &str, tensors: &[(&str, &Tensor)]) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        encode(&mut w, header, tensors).map_err(io)?;
        w.flush().map_err(io)?;
        w.get_ref().sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn encode(w: &mut impl Write, header: &str, tensors: &[(&str, &Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Reads a container written by [`write_container`].
pub fn read_container(path: &Path) -> Result<(String, Vec<(String, Tensor)>), ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let bad = |message: &str| ModelError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a tensor container"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated version"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let header = r.take(hlen).ok_or_else(|| bad("truncated header"))?;
    let header = String::from_utf8(header.to_vec()).map_err(|_| bad("header is not UTF-8"))?;
    let count = r.u64().ok_or_else(|| bad("truncated tensor count"))?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u32().ok_or_else(|| bad("truncated name"))? as usize;
        let name = r.take(nlen).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(|| bad("truncated shape"))? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape"))?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let raw = r
            .take(len.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        write_container(&path, "{\"k\":1}", &[("a", &a), ("b", &b)]).unwrap();
        let (header, tensors) = read_container(&path).unwrap();
        assert_eq!(header, "{\"k\":1}");
        assert_eq!(tensors[0].0, "a");
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&tensors[0].1), bits(&a));
        assert_eq!(tensors[1].1.shape(), [3]);
        let again = dir.path().join("d.bin");
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_container(&again, &header, &refs).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_container(&path), Err(ModelError::Format { .. })));
        let t = Tensor::zeros(&[4]);
        write_container(&path, "", &[("t", &t)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_container(&path), Err(ModelError::Format { .. })));
    }
}
