//! Grayscale PFM disparity files: `Pf`, `W H`, scale (negative means
//! little-endian), then 32-bit floats with rows stored bottom to top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::DisparityMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

pub fn encode(map: &DisparityMap, endian: Endian) -> Result<Vec<u8>> {
    if let Some(i) = map.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite disparity at index {i}")));
    }
    let scale = match endian {
        Endian::Little => "-1.0",
        Endian::Big => "1.0",
    };
    let mut out = format!("Pf\n{} {}\n{scale}\n", map.width, map.height).into_bytes();
    out.reserve(map.data.len() * 4);
    for row in map.data.chunks(map.width.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&match endian {
                Endian::Little => v.to_le_bytes(),
                Endian::Big => v.to_be_bytes(),
            });
        }
    }
    Ok(out)
}

/// Next whitespace-delimited header token and the offset just past it.
fn token(bytes: &[u8], mut pos: usize) -> Result<(&str, usize)> {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return Err(Error::format(start, "unexpected end of header"));
    }
    let s = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(start, "header is not ASCII"))?;
    Ok((s, pos))
}

pub fn decode(bytes: &[u8]) -> Result<DisparityMap> {
    let (magic, pos) = token(bytes, 0)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::format(0, "colour PFM is not a disparity map")),
        _ => return Err(Error::format(0, format!("expected `Pf`, found {magic:?}"))),
    }
    let dims = |pos: usize| -> Result<(usize, usize)> {
        let (t, next) = token(bytes, pos)?;
        let v = t.parse::<usize>().map_err(|_| Error::format(next - t.len(), format!("bad extent {t:?}")))?;
        Ok((v, next))
    };
    let (width, pos) = dims(pos)?;
    let (height, pos) = dims(pos)?;
    let (s, pos) = token(bytes, pos)?;
    let scale: f32 = s.parse().map_err(|_| Error::format(pos - s.len(), format!("bad scale {s:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(pos - s.len(), "scale must be non-zero and finite"));
    }
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(pos, "missing newline after scale"));
    }
    let start = pos + 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(start, "extents overflow"))?;
    let need = n * 4;
    if bytes.len() - start < need {
        return Err(Error::format(bytes.len(), format!("truncated payload: {} of {need} bytes", bytes.len() - start)));
    }
    let mut data = vec![0f32; n];
    for (i, c) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    DisparityMap::new(height, width, data)
}

pub fn write_pfm(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(map, Endian::Little)?)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityMap> {
    decode(&std::fs::read(path)?)
}
