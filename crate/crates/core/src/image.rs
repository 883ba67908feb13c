//! Image and depth containers shared by the renderer, priors, and texture
//! pipeline, plus binary PPM/PGM serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("channel count {0} unsupported here (want 1 or 3)")]
    Channels(usize),
}

/// Float image, row-major, channel-interleaved. Values live in [0, 1] by
/// convention but are only clamped at export time.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self { h, w, c, data: vec![v; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = img.idx(y, x, ch);
                    img.data[i] = f(y, x, ch);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    pub fn npix(&self) -> usize {
        self.h * self.w
    }

    /// Rec.601 luminance; for single-channel images this is the channel itself.
    pub fn luminance(&self) -> Vec<f64> {
        match self.c {
            1 => self.data.clone(),
            3 => (0..self.npix())
                .map(|p| {
                    0.299 * self.data[3 * p] + 0.587 * self.data[3 * p + 1] + 0.114 * self.data[3 * p + 2]
                })
                .collect(),
            c => panic!("luminance undefined for {c}-channel image"),
        }
    }

    /// Per-pixel mean over channels.
    pub fn channel_mean(&self) -> Vec<f64> {
        let c = self.c as f64;
        (0..self.npix())
            .map(|p| self.data[p * self.c..(p + 1) * self.c].iter().sum::<f64>() / c)
            .collect()
    }

    /// Bilinear fetch at continuous pixel coordinates (x right, y down),
    /// clamped at the border. Coordinates are in pixel-center units.
    pub fn bilinear(&self, y: f64, x: f64, ch: usize) -> f64 {
        let cl = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0);
        let yc = cl(y, self.h);
        let xc = cl(x, self.w);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let fy = yc - y0 as f64;
        let fx = xc - x0 as f64;
        let v00 = self.get(y0, x0, ch);
        let v01 = self.get(y0, x1, ch);
        let v10 = self.get(y1, x0, ch);
        let v11 = self.get(y1, x1, ch);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    /// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and rounded
    /// here; the in-memory buffer is left untouched.
    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P6\n{} {}\n255\n", self.w, self.h)?;
        let mut bytes = Vec::with_capacity(self.npix() * 3);
        for p in 0..self.npix() {
            for ch in 0..3 {
                let v = match self.c {
                    3 => self.data[p * 3 + ch],
                    1 => self.data[p],
                    c => return Err(ImageError::Channels(c)),
                };
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut raw = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
        let bad = |reason: &str| ImageError::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let mut token = || -> Result<String, ImageError> {
            loop {
                while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < raw.len() && raw[pos] == b'#' {
                    while pos < raw.len() && raw[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Format {
                    path: path.display().to_string(),
                    reason: "truncated header".into(),
                });
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1;
        if raw.len() < pos + w * h * 3 {
            return Err(bad("truncated pixel data"));
        }
        let data = raw[pos..pos + w * h * 3].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { h, w, c: 3, data })
    }
}

/// Per-pixel expected ray-termination distance plus accumulated opacity.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub depth: Vec<f64>,
    pub coverage: Vec<f64>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, depth: vec![0.0; h * w], coverage: vec![0.0; h * w] }
    }

    /// Binary 16-bit PGM (P5, maxval 65535, big-endian samples); depth is
    /// mapped linearly from [near, far]. Uncovered pixels export as far.
    pub fn write_pgm16(&self, path: &Path, near: f64, far: f64) -> Result<(), ImageError> {
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P5\n{} {}\n65535\n", self.w, self.h)?;
        let mut bytes = Vec::with_capacity(self.depth.len() * 2);
        for (i, &d) in self.depth.iter().enumerate() {
            let d = if self.coverage[i] > 0.0 { d } else { far };
            let t = ((d - near) / (far - near)).clamp(0.0, 1.0);
            let q = (t * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Largest absolute componentwise difference between two equally sized images.
pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "image size mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_grid() {
        let img = ImageBuffer::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = ImageBuffer::read_ppm(&path).unwrap();
        assert_eq!(back.h, 5);
        assert_eq!(back.w, 7);
        assert!(max_abs_diff(&img, &back) < 1e-12);
    }

    #[test]
    fn export_clamps_but_buffer_keeps_out_of_range_values() {
        let mut img = ImageBuffer::new(1, 2, 3);
        img.set(0, 0, 0, -0.5);
        img.set(0, 1, 0, 1.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = ImageBuffer::read_ppm(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert_eq!(back.get(0, 1, 0), 1.0);
        assert_eq!(img.get(0, 0, 0), -0.5);
    }

    #[test]
    fn pgm16_is_big_endian_linear() {
        let mut d = DepthMap::new(1, 2);
        d.depth[0] = 1.0;
        d.depth[1] = 3.0;
        d.coverage = vec![1.0, 1.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        d.write_pgm16(&path, 1.0, 3.0).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let header_end = raw.len() - 4;
        assert_eq!(&raw[header_end..], &[0x00, 0x00, 0xff, 0xff]);
    }

    #[test]
    fn bilinear_center_of_2x2_averages() {
        let img = ImageBuffer::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64);
        assert!((img.bilinear(0.5, 0.5, 0) - 1.5).abs() < 1e-12);
    }
}
