//! `HTSR` binary tensor files.
//!
//! Layout: magic `b"HTSR"`, `u8` version, `u8` dtype tag (0 = f32), `u8`
//! rank, `rank` little-endian `u32` extents, then the little-endian IEEE-754
//! payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"HTSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Format(msg.into()))
}

/// Writes `t` as f32 (values are rounded when `T = f64`).
pub fn write_tensor<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return format_err("rank exceeds 255");
    }
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F32, t.rank() as u8]);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return format_err("bad magic");
    }
    if head[4] != VERSION {
        return format_err(format!("unsupported version {}", head[4]));
    }
    if head[5] != DTYPE_F32 {
        return format_err(format!("unsupported dtype tag {}", head[5]));
    }
    let rank = head[6] as usize;
    let mut dims = vec![0u8; 4 * rank];
    r.read_exact(&mut dims)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let mut payload = vec![0u8; 4 * numel(&shape)];
    r.read_exact(&mut payload)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return format_err("trailing bytes after payload");
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(f), t)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"HTSR");
        assert_eq!(&buf[4..7], &[1, 0, 2]);
        assert_eq!(&buf[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[15..19], &1.0f32.to_le_bytes());
        assert_eq!(&buf[19..], &(-2.5f32).to_le_bytes());
        assert_eq!(read_tensor::<f32, _>(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::zeros([3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor::<f32, _>(&bad[..]).is_err());
        assert!(read_tensor::<f32, _>(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_tensor::<f32, _>(&long[..]).is_err());
    }
}
