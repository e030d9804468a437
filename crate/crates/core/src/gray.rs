//! Grayscale image buffer shared by the renderer and the preprocessing
//! pipeline.
//!
//! Pixels are stored row-major as `f32` intensities in `[0, 1]`. Pixel
//! coordinates follow the UV convention: `u` is the column, `v` the row,
//! origin at the top-left corner. The pixel with index `(u, v)` samples the
//! continuous image plane at exactly `(u, v)`; projections, centroids, and
//! resampling all share that convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.width)
    }

    /// Quantizes in place to 8-bit levels `k/255`.
    pub fn quantize_8bit(&mut self) {
        for p in &mut self.data {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
        for (v, row) in self.rows().enumerate() {
            for (u, &p) in row.iter().enumerate() {
                let byte = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(u as u32, v as u32, image::Luma([byte]));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        GrayImage::from_vec(w, h, data)
    }

    /// Raw little-endian f32 plane, no header.
    pub fn save_raw_f32(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for &p in &self.data {
            w.write_all(&p.to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        w.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load_raw_f32(path: &Path, width: usize, height: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() != width * height * 4 {
            return Err(Error::ShapeMismatch(format!(
                "raw image {} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                width * height * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        GrayImage::from_vec(width, height, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = GrayImage::from_fn(17, 9, |u, v| ((u * 13 + v * 7) % 256) as f32 / 255.0);
        img.quantize_8bit();
        img.save_png(&path).unwrap();
        let back = GrayImage::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn raw_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let img = GrayImage::from_fn(5, 4, |u, v| (u as f32 + 10.0 * v as f32) / 100.0);
        img.save_raw_f32(&path).unwrap();
        let back = GrayImage::load_raw_f32(&path, 5, 4).unwrap();
        assert_eq!(img, back);
    }
}
