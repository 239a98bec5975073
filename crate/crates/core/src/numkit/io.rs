//! Binary matrix interchange format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MOEK"
//! 4       4     rows   (u32 LE)
//! 8       4     cols   (u32 LE)
//! 12      4     dtype  (u32 LE, 0 = float32, 1 = float64)
//! 16      ...   row-major payload, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RealMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOEK";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Parse(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn write_matrix<W: Write>(mut w: W, m: &RealMatrix, dtype: Dtype) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Shape("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Shape("too many columns".into()))?;
    let mut buf = Vec::with_capacity(16 + m.as_slice().len() * dtype.width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    buf.extend_from_slice(&(dtype as u32).to_le_bytes());
    for &v in m.as_slice() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<(RealMatrix, Dtype)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|e| Error::Parse(format!("truncated header: {e}")))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Parse("bad magic, expected \"MOEK\"".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let rows = word(4) as usize;
    let cols = word(8) as usize;
    let dtype = Dtype::from_tag(word(12))?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Parse("dimensions overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * dtype.width() {
        return Err(Error::Parse(format!(
            "payload is {} bytes, expected {} for {rows}x{cols} {:?}",
            payload.len(),
            n * dtype.width(),
            dtype
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let m = RealMatrix::new(rows, cols, data).map_err(|e| Error::Parse(e.to_string()))?;
    Ok((m, dtype))
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &RealMatrix, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<RealMatrix> {
    let f = File::open(path)?;
    Ok(read_matrix(BufReader::new(f))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let m = RealMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, Dtype::F32).unwrap();
        assert_eq!(&buf[..4], b"MOEK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..16], &0u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 12);
    }

    #[test]
    fn roundtrip_f64_is_exact() {
        let m = RealMatrix::from_rows(&[[0.1, -2.5e-7], [1e300, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, Dtype::F64).unwrap();
        let (back, dtype) = read_matrix(buf.as_slice()).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(read_matrix(&b"MOE"[..]), Err(Error::Parse(_))));
        let mut buf = Vec::new();
        write_matrix(&mut buf, &RealMatrix::identity(2), Dtype::F64).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_matrix(buf.as_slice()), Err(Error::Parse(_))));
        buf[0] = b'M';
        buf.pop();
        assert!(matches!(read_matrix(buf.as_slice()), Err(Error::Parse(_))));
        buf[12] = 7;
        assert!(matches!(read_matrix(buf.as_slice()), Err(Error::Parse(_))));
    }
}
