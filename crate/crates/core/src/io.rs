//! Tensor container files, CSV export and 16-bit PGM images.
//!
//! Container layout: the 8 magic bytes `SPAMOE01`, one `u8` rank, `rank`
//! little-endian `u32` dims, then the row-major little-endian `f64` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Field2D, Tensor};

pub const MAGIC: &[u8; 8] = b"SPAMOE01";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|_| Error::Format("missing rank".into()))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(|_| Error::Format("truncated dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 8 * n {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            r.len(),
            shape,
            8 * n
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field2D> {
    Field2D::from_tensor(&read_tensor(path)?)
}

/// One CSV row per grid row.
pub fn field_to_csv(f: &Field2D) -> String {
    let mut s = String::new();
    for i in 0..f.height() {
        let row: Vec<String> = (0..f.width()).map(|j| format!("{}", f.get(i, j))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Binary 16-bit PGM (P5, maxval 65535). Values are scaled linearly from
/// `[min, max]` onto the full range; a flat image maps to zero.
pub fn encode_pgm16(f: &Field2D) -> Vec<u8> {
    let (lo, hi) = f
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", f.width(), f.height()).into_bytes();
    for &v in f.data() {
        let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, f: &Field2D) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_pgm16(f))?;
    Ok(())
}
