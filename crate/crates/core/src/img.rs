//! Float image buffers plus PNG (8-bit) and PFM (float) IO.
//!
//! Images are stored row-major, interleaved RGB, double precision, with
//! values nominally in [0, 1] (normal maps use [-1, 1]). PFM is the lossless
//! interchange format; PNG is for eyeballing.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image, f64 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width as usize) * (height as usize) * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn n_pixels(&self) -> usize {
        (self.width as usize) * (self.height as usize)
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        ((y as usize) * (self.width as usize) + (x as usize)) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// 8-bit PNG; values clamped to [0, 1] and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width, self.height, bytes)
            .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ingestion(path, format!("png read: {e}")))?
            .into_rgb8();
        let (width, height) = (img.width(), img.height());
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f64::from(b) / 255.0)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Color PFM ("PF"), little-endian f32, bottom-to-top rows per the spec
    /// of the format.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y) {
                    w.write_all(&(c as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        let (header, body) = parse_pfm_header(&raw, path)?;
        if !header.color {
            return Err(Error::ingestion(path, "expected color PFM (PF)"));
        }
        let n = (header.width as usize) * (header.height as usize) * 3;
        let vals = read_pfm_samples(body, n, header.little_endian, path)?;
        let mut img = Self::new(header.width, header.height);
        for y in 0..header.height {
            let src_row = (header.height - 1 - y) as usize;
            for x in 0..header.width {
                let i = (src_row * header.width as usize + x as usize) * 3;
                img.set(x, y, [vals[i], vals[i + 1], vals[i + 2]]);
            }
        }
        Ok(img)
    }
}

/// Grayscale f64 buffer (accumulated opacities, scalar maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y as usize) * (self.width as usize) + (x as usize)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.data[(y as usize) * (self.width as usize) + (x as usize)] = v;
    }
}

/// Binary mask IO as 8-bit grayscale PNG: >= 128 is true.
pub fn save_mask_png(mask: &[bool], width: u32, height: u32, path: &Path) -> Result<()> {
    if mask.len() != (width as usize) * (height as usize) {
        return Err(Error::InvalidInput(format!(
            "mask length {} != {}x{}",
            mask.len(),
            width,
            height
        )));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(width, height, bytes)
        .ok_or_else(|| Error::Format("mask buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

pub fn load_mask_png(path: &Path) -> Result<(Vec<bool>, u32, u32)> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(path, format!("png read: {e}")))?
        .into_luma8();
    let (w, h) = (img.width(), img.height());
    let mask = img.into_raw().into_iter().map(|b| b >= 128).collect();
    Ok((mask, w, h))
}

struct PfmHeader {
    color: bool,
    width: u32,
    height: u32,
    little_endian: bool,
}

fn parse_pfm_header<'a>(raw: &'a [u8], path: &Path) -> Result<(PfmHeader, &'a [u8])> {
    // header = three whitespace-terminated tokens after the magic line
    let mut pos = 0usize;
    let mut token = |raw: &'a [u8]| -> Result<&'a str> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        std::str::from_utf8(&raw[start..pos])
            .map_err(|_| Error::ingestion(path, "non-utf8 PFM header"))
    };
    let magic = token(raw)?;
    let color = match magic {
        "PF" => true,
        "Pf" => false,
        other => {
            return Err(Error::ingestion(path, format!("bad PFM magic {other:?}")));
        }
    };
    let width: u32 = token(raw)?
        .parse()
        .map_err(|_| Error::ingestion(path, "bad PFM width"))?;
    let height: u32 = token(raw)?
        .parse()
        .map_err(|_| Error::ingestion(path, "bad PFM height"))?;
    let scale: f64 = token(raw)?
        .parse()
        .map_err(|_| Error::ingestion(path, "bad PFM scale"))?;
    // exactly one whitespace byte separates header and raster
    pos += 1;
    if pos > raw.len() {
        return Err(Error::ingestion(path, "truncated PFM"));
    }
    Ok((
        PfmHeader {
            color,
            width,
            height,
            little_endian: scale < 0.0,
        },
        &raw[pos..],
    ))
}

fn read_pfm_samples(body: &[u8], n: usize, little_endian: bool, path: &Path) -> Result<Vec<f64>> {
    if body.len() < n * 4 {
        return Err(Error::ingestion(
            path,
            format!("PFM raster too short: {} < {}", body.len(), n * 4),
        ));
    }
    let mut vals = Vec::with_capacity(n);
    let mut bytes = [0u8; 4];
    let mut cursor = &body[..n * 4];
    for _ in 0..n {
        cursor.read_exact(&mut bytes)?;
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        vals.push(f64::from(v));
    }
    Ok(vals)
}

/// Grayscale PFM ("Pf") write for scalar maps such as depth.
pub fn save_gray_pfm(data: &[f64], width: u32, height: u32, path: &Path) -> Result<()> {
    if data.len() != (width as usize) * (height as usize) {
        return Err(Error::InvalidInput(format!(
            "buffer length {} != {}x{}",
            data.len(),
            width,
            height
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for y in (0..height).rev() {
        let row = (y as usize) * (width as usize);
        for x in 0..width as usize {
            w.write_all(&(data[row + x] as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_gray_pfm(path: &Path) -> Result<(Vec<f64>, u32, u32)> {
    let raw = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let (header, body) = parse_pfm_header(&raw, path)?;
    if header.color {
        return Err(Error::ingestion(path, "expected grayscale PFM (Pf)"));
    }
    let n = (header.width as usize) * (header.height as usize);
    let vals = read_pfm_samples(body, n, header.little_endian, path)?;
    let mut out = vec![0.0; n];
    for y in 0..header.height as usize {
        let src_row = header.height as usize - 1 - y;
        let w = header.width as usize;
        out[y * w..(y + 1) * w].copy_from_slice(&vals[src_row * w..(src_row + 1) * w]);
    }
    Ok((out, header.width, header.height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pfm_round_trip_is_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let mut rng = crate::seeds::rng(9, "pfm");
        let mut img = ImageRgb::new(7, 5);
        for v in img.data.iter_mut() {
            *v = f64::from(rng.gen_range(-1.0f32..1.0f32));
        }
        img.save_pfm(&path).unwrap();
        let back = ImageRgb::load_pfm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageRgb::new(4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64) / 35.0;
        }
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = vec![true, false, true, true, false, false];
        save_mask_png(&mask, 3, 2, &path).unwrap();
        let (back, w, h) = load_mask_png(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(mask, back);
    }

    #[test]
    fn gray_pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pfm");
        let data = vec![1.0, 2.5, 0.0, -3.25, 9.0, 0.5];
        save_gray_pfm(&data, 2, 3, &path).unwrap();
        let (back, w, h) = load_gray_pfm(&path).unwrap();
        assert_eq!((w, h), (2, 3));
        assert_eq!(data, back);
    }
}
