//! Flat binary tensor format used for weight checkpoints.
//!
//! Layout (all little-endian): magic `b"TTSN"`, format version `u32`, `ndim: u32`,
//! `ndim` dimension sizes as `u32`, then the row-major `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::DenseTensor;

pub const MAGIC: &[u8; 4] = b"TTSN";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &DenseTensor<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<DenseTensor<f32>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {word:?}")));
    }
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor format version {version}")));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(Error::Format(format!("implausible tensor rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    DenseTensor::new(shape, data)
}

/// Writes to `path` atomically (temp file in the same directory, then rename).
pub fn save_tensor(path: &Path, t: &DenseTensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    write_atomic(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<DenseTensor<f32>> {
    read_tensor(std::io::BufReader::new(fs::File::open(path)?))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let t = DenseTensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut want = b"TTSN".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let t = DenseTensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_tensor(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = DenseTensor::<f32>::randn(&shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }
    }
}
