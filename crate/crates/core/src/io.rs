//! Raw grid files and PNG export.
//!
//! A raw grid is a 16-byte little-endian header followed by row-major
//! samples:
//!
//! | offset | content                                  |
//! |--------|------------------------------------------|
//! | 0      | magic `TOM1`                             |
//! | 4      | `u32` rows                               |
//! | 8      | `u32` cols                               |
//! | 12     | `u32` dtype tag (1 = `f32`, 2 = `f64`)   |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tomo::{Image, Sinogram};

pub const MAGIC: &[u8; 4] = b"TOM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded raw grid. Values are widened to `f64` regardless of dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

pub fn encode_grid(rows: usize, cols: usize, data: &[f64], dtype: Dtype) -> Vec<u8> {
    assert_eq!(rows * cols, data.len());
    let mut out = Vec::with_capacity(16 + data.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    for &v in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Decodes a raw grid; `Err(reason)` describes the first malformation.
pub fn decode_grid(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.len() < 16 {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic, expected TOM1".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let tag = word(12) as u32;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
    let expected =
        rows.checked_mul(cols).and_then(|n| n.checked_mul(dtype.width())).ok_or("grid dimensions overflow")?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(format!("{rows}x{cols} grid needs {expected} payload bytes, found {}", body.len()));
    }
    let data = match dtype {
        Dtype::F32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(Grid { rows, cols, dtype, data })
}

pub fn write_grid(path: &Path, rows: usize, cols: usize, data: &[f64], dtype: Dtype) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_grid(rows, cols, data, dtype))?;
    f.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_grid(&bytes).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
}

pub fn save_image(path: &Path, img: &Image, dtype: Dtype) -> Result<()> {
    write_grid(path, img.height(), img.width(), img.data(), dtype)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let g = read_grid(path)?;
    Image::from_vec(g.rows, g.cols, g.data)
}

/// The angle ids are not stored; rows map to `angle_ids` on load.
pub fn save_sinogram(path: &Path, sino: &Sinogram, dtype: Dtype) -> Result<()> {
    write_grid(path, sino.n_rows(), sino.n_detectors(), sino.data(), dtype)
}

pub fn load_sinogram(path: &Path, angle_ids: Vec<usize>) -> Result<Sinogram> {
    let g = read_grid(path)?;
    if g.rows != angle_ids.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} rows but {} angle ids", g.rows, angle_ids.len()),
        });
    }
    Sinogram::from_vec(angle_ids, g.cols, g.data)
}

/// 8-bit grayscale PNG, min-max windowed. Constant images map to black.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (lo, hi) = img.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> =
        img.data().iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

/// Places same-height images side by side with a one-pixel gap filled with
/// the global minimum.
pub fn montage(images: &[Image]) -> Result<Image> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("montage needs at least one image".into()));
    };
    let h = first.height();
    if images.iter().any(|im| im.height() != h) {
        return Err(Error::InvalidArgument("montage images must share a height".into()));
    }
    let fill = images.iter().map(|im| im.min_max().0).fold(f64::INFINITY, f64::min);
    let w: usize = images.iter().map(|im| im.width()).sum::<usize>() + images.len() - 1;
    let mut out = Image::from_fn(h, w, |_, _| fill);
    let mut x0 = 0;
    for im in images {
        for r in 0..h {
            let dst = &mut out.data_mut()[r * w + x0..r * w + x0 + im.width()];
            dst.copy_from_slice(&im.data()[r * im.width()..(r + 1) * im.width()]);
        }
        x0 += im.width() + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode_grid(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.5], Dtype::F32);
        assert_eq!(&bytes[..4], b"TOM1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[36..40], &5.5f32.to_le_bytes());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let data = vec![0.1, -3.25e-7, 1.0 / 3.0, f64::MAX];
        let g = decode_grid(&encode_grid(2, 2, &data, Dtype::F64)).unwrap();
        assert_eq!(g.data, data);
        assert_eq!(g.dtype, Dtype::F64);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_grid(b"TOM1").is_err());
        let mut bytes = encode_grid(1, 2, &[1.0, 2.0], Dtype::F32);
        bytes[0] = b'X';
        assert!(decode_grid(&bytes).unwrap_err().contains("magic"));
        let mut bytes = encode_grid(1, 2, &[1.0, 2.0], Dtype::F32);
        bytes[12] = 9;
        assert!(decode_grid(&bytes).unwrap_err().contains("dtype"));
        let bytes = encode_grid(1, 2, &[1.0, 2.0], Dtype::F32);
        assert!(decode_grid(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_and_montage() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::from_fn(4, 5, |r, c| (r + c) as f64);
        let m = montage(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(m.shape(), (4, 11));
        assert_eq!(m.get(1, 7), a.get(1, 1));
        let path = dir.path().join("m.png");
        write_png(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
