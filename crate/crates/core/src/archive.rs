//! Named-tensor archive: the on-disk container for checkpoints and optional
//! weight files. Keys are written in sorted order and every field is fixed
//! little-endian, so identical contents are byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"UMBARCH1";

pub fn write_archive(
    path: &Path,
    meta: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::io(format!("{}: truncated archive", self.path.display())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::io(format!("{}: invalid utf-8 in archive", self.path.display())))
    }
}

pub fn read_archive(
    path: &Path,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, Tensor<f32>>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::io(format!("{}: not a tensor archive", path.display())));
    }
    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let mut shape: Shape = [0; 4];
        for d in shape.iter_mut() {
            *d = r.u32()? as usize;
        }
        let count = shape.iter().product::<usize>();
        let bytes = r.take(count * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::io(format!("{}: trailing bytes in archive", path.display())));
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        let mut tensors = BTreeMap::new();
        tensors.insert("b.w".to_string(), Tensor::from_fn([2, 1, 2, 2], |i| i as f32 * 0.5));
        tensors.insert("a.w".to_string(), Tensor::full([1, 1, 1, 1], -3.25f32));

        let p1 = dir.path().join("one.bin");
        write_archive(&p1, &meta, &tensors).unwrap();
        let (m2, t2) = read_archive(&p1).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(t2["b.w"].as_slice(), tensors["b.w"].as_slice());

        let p2 = dir.path().join("two.bin");
        write_archive(&p2, &m2, &t2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"definitely not an archive").unwrap();
        assert!(read_archive(&p).is_err());
    }
}
