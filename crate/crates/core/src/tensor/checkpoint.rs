//! Parameter checkpoints.
//!
//! Layout (all integers unsigned 32-bit little-endian):
//! `"MVRE"`, version, tensor count, then per tensor: name byte length, UTF-8
//! name, rank, dims, and the payload as little-endian IEEE-754 `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVRE";
const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 1 << 16;

pub type NamedTensor = (String, Tensor<f32>);

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in 32 bits")))
}

pub fn write_checkpoint<'a>(
    w: &mut impl Write,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, to_u32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        put_u32(w, to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, to_u32(t.shape().len(), "rank")?)?;
        for &d in t.shape() {
            put_u32(w, to_u32(d, "dimension")?)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = get_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = get_u32(r)?;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let mut bytes = Vec::new();
        r.by_ref().take(numel as u64 * 4).read_to_end(&mut bytes)?;
        if bytes.len() != numel * 4 {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload of tensor {name} is truncated"),
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        (0..10)
            .map(|i| {
                let data = (0..i + 1).map(|v| v as f32 * 0.1 - 0.3).collect();
                (format!("t{i}"), Tensor::new(&[i + 1], data).unwrap())
            })
            .collect()
    }

    fn encode(ts: &[NamedTensor]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, ts.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = encode(&sample());
        let back = read_checkpoint(&mut &a[..]).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), a);
    }

    #[test]
    fn special_values_survive() {
        let t = Tensor::new(&[4], vec![f32::NAN, -0.0, f32::MIN_POSITIVE / 2.0, f32::INFINITY]).unwrap();
        let a = encode(&[("x".into(), t.clone())]);
        let back = read_checkpoint(&mut &a[..]).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&t));
    }

    #[test]
    fn header_layout() {
        let a = encode(&[("ab".into(), Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap())]);
        assert_eq!(&a[..4], b"MVRE");
        assert_eq!(&a[4..8], &1u32.to_le_bytes());
        assert_eq!(&a[8..12], &1u32.to_le_bytes());
        assert_eq!(&a[12..16], &2u32.to_le_bytes());
        assert_eq!(&a[16..18], b"ab");
        assert_eq!(&a[18..22], &2u32.to_le_bytes());
        assert_eq!(&a[30..34], &1.0f32.to_le_bytes());
        assert_eq!(a.len(), 38);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut a = encode(&sample());
        a[0] = b'X';
        assert!(matches!(read_checkpoint(&mut &a[..]), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut a = encode(&sample());
        a[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut &a[..]),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn missing_tensor_is_truncation() {
        let full = sample();
        // Header says ten tensors, body only carries nine.
        let mut a = encode(&full[..9]);
        a[8..12].copy_from_slice(&10u32.to_le_bytes());
        match read_checkpoint(&mut &a[..]) {
            Err(Error::Io(e)) => assert_eq!(e.kind(), std::io::ErrorKind::UnexpectedEof),
            other => panic!("expected truncation, got {other:?}"),
        }
        let a = encode(&full);
        assert!(matches!(read_checkpoint(&mut &a[..a.len() - 2]), Err(Error::Io(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ts = sample();
        save_checkpoint(&p1, ts.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
