//! Little-endian helpers shared by the binary checkpoint and embedding formats.

use std::io::{self, Read, Write};

use ndarray::Array2;

use crate::error::{KpeError, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_len<W: Write>(w: &mut W, v: usize, kind: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| KpeError::Format {
        kind,
        message: format!("length {v} does not fit in 32 bits"),
    })?;
    Ok(write_u32(w, v)?)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Row-major f32 dump of an f64 matrix.
pub(crate) fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> io::Result<()> {
    write_f32s(w, m.iter().map(|&x| x as f32))
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], kind: &'static str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => KpeError::Format {
            kind,
            message: format!("truncated while reading {what}"),
        },
        _ => KpeError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, kind: &'static str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, kind, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], kind: &'static str) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, kind, "magic")?;
    if &b != magic {
        return Err(KpeError::Format {
            kind,
            message: format!("expected magic {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(&b)),
        });
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, kind: &'static str, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact_or(r, &mut buf, kind, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_matrix<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
    kind: &'static str,
    what: &str,
) -> Result<Array2<f64>> {
    let data = read_f32s(r, rows * cols, kind, what)?;
    Ok(Array2::from_shape_vec((rows, cols), data.into_iter().map(f64::from).collect())
        .expect("buffer sized to shape"))
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R, kind: &'static str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(KpeError::Format {
            kind,
            message: "trailing bytes after last matrix".into(),
        }),
    }
}
