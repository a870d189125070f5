//! Binary tensor container used for weights and raw input tensors.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "HIRE" | version u32 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | rank u8 | dims u64 * rank | f32 * numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, FeatureMap};

pub const MAGIC: &[u8; 4] = b"HIRE";
pub const VERSION: u32 = 1;

pub fn write_tensors<T: Element>(
    mut w: impl Write,
    tensors: &[(String, &FeatureMap<T>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("unexpected end of file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensors<T: Element>(mut r: impl Read) -> Result<Vec<(String, FeatureMap<T>)>> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic, expected \"HIRE\"".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_array::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(&mut r)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let mut bytes = vec![0u8; numel.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated data for tensor `{name}`")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, FeatureMap::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors<T: Element>(path: &Path, tensors: &[(String, &FeatureMap<T>)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors<T: Element>(path: &Path) -> Result<Vec<(String, FeatureMap<T>)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Writes a single unnamed tensor (the raw input format).
pub fn save_raw<T: Element>(path: &Path, tensor: &FeatureMap<T>) -> Result<()> {
    save_tensors(path, &[(String::new(), tensor)])
}

pub fn load_raw<T: Element>(path: &Path) -> Result<FeatureMap<T>> {
    let mut tensors = load_tensors(path)?;
    match tensors.len() {
        1 => Ok(tensors.remove(0).1),
        n => Err(Error::Format(format!("raw input must hold exactly one tensor, found {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = FeatureMap::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".to_string(), &t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"HIRE");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn roundtrip() {
        let a = FeatureMap::<f32>::from_fn(vec![2, 3, 1], |i| i as f32 * 0.5);
        let b = FeatureMap::<f32>::scalar(7.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), &a), (String::new(), &b)]).unwrap();
        let back = read_tensors::<f32>(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), (String::new(), b)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors::<f32>(&b"HIRX\x01\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let t = FeatureMap::<f32>::zeros(vec![4]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("t".into(), &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors::<f32>(buf.as_slice()), Err(Error::Format(_))));
    }
}
