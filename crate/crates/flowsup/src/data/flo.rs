//! Middlebury `.flo` flow file format.
//!
//! Layout: float32 magic 202021.25, int32 width, int32 height, then
//! row-major interleaved float32 (dx, dy). Little-endian throughout.

use crate::{Error, Result};
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

const FLO_MAGIC: f32 = 202021.25;

pub fn write_flo(path: &Path, flow: &Array3<f64>) -> Result<()> {
    let (h, w, c) = flow.dim();
    if c != 2 {
        return Err(Error::Data("flow must have 2 channels".into()));
    }
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h {
        for j in 0..w {
            buf.extend_from_slice(&(flow[[i, j, 0]] as f32).to_le_bytes());
            buf.extend_from_slice(&(flow[[i, j, 1]] as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("{}: truncated .flo header", path.display())));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::Data(format!("{}: bad .flo magic {magic}", path.display())));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Data(format!("{}: bad .flo dims {w}x{h}", path.display())));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + h * w * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: .flo payload is {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut flow = Array3::<f64>::zeros((h, w, 2));
    let mut off = 12;
    for i in 0..h {
        for j in 0..w {
            let u = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            flow[[i, j, 0]] = u as f64;
            flow[[i, j, 1]] = v as f64;
            off += 8;
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flo");
        let flow = Array3::from_shape_fn((6, 4, 2), |(i, j, c)| {
            ((i as f32 * 1.5 - j as f32 * 0.25 + c as f32) as f64 * 0.125) as f32 as f64
        });
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back, flow);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, [0u8; 24]).unwrap();
        assert!(read_flo(&path).is_err());
    }
}
