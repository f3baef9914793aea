//! IDX image/label files (the classic big-endian handwritten-digit layout).
//!
//! Images: magic `0x00000803`, then three big-endian u32 dimensions
//! `[n, rows, cols]`, then `n*rows*cols` unsigned bytes. Labels: magic
//! `0x00000801`, one dimension `[n]`, then `n` bytes. Parse errors carry
//! the byte offset at which the file stopped making sense.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// A stack of equally sized grayscale images with pixels scaled to [0, 1].
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `n * rows * cols` values in [0, 1].
    pub pixels: Vec<f32>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.rows * self.cols;
        &self.pixels[i * d..(i + 1) * d]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} (wanted 4 more for a u32 field)",
                self.path, self.pos
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes"));
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} ({} of {} {} bytes present)",
                self.path,
                self.pos,
                self.bytes.len() - self.pos,
                n,
                what
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after offset {}",
                self.path,
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = c.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x} at byte 0, expected {IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let raw = c.payload(n * rows * cols, "pixel")?;
    c.finish()?;
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = c.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x} at byte 0, expected {LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = c.u32_be()? as usize;
    let raw = c.payload(n, "label")?;
    c.finish()?;
    Ok(raw.to_vec())
}

/// Write images from raw u8 pixels (`images.len() == n * rows * cols`).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[u8]) -> Result<()> {
    if rows * cols == 0 || images.len() % (rows * cols) != 0 {
        return Err(Error::Input(format!(
            "pixel buffer of {} bytes is not a multiple of {rows}x{cols}",
            images.len()
        )));
    }
    let n = images.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(images);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_write_read_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.idx3");
        // Two 2x3 images covering the full byte range.
        let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60];
        write_idx_images(&path, 2, 3, &pixels).unwrap();

        let imgs = read_idx_images(&path).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!((imgs.rows, imgs.cols), (2, 3));
        assert!((imgs.pixels[1] - 51.0 / 255.0).abs() < 1e-7);

        // Re-encode from the parsed values and compare the files.
        let requantized: Vec<u8> =
            imgs.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let path2 = dir.path().join("two-again.idx3");
        write_idx_images(&path2, imgs.rows, imgs.cols, &requantized).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx1");
        write_idx_labels(&path, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(read_idx_labels(&path).unwrap(), vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn bad_magic_is_reported_with_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx3");
        std::fs::write(&path, [0u8, 0, 8, 2, 0, 0, 0, 1]).unwrap();
        let err = read_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "unexpected error: {err}");
        assert!(err.contains("byte 0"), "unexpected error: {err}");
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8; 5]); // needs 8 pixel bytes
        std::fs::write(&path, bytes).unwrap();
        let err = read_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("truncated at byte 16"), "unexpected error: {err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.idx1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&[1u8, 99]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_idx_labels(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "unexpected error: {err}");
    }
}
