//! Image container formats: binary PPM (P6), the raw float `.fsapimg` container, and
//! ASCII PGM (P2) output for attention maps.

use std::io::Write;
use std::path::Path;

use crate::error::{bail, Error, Result};

pub const FSAPIMG_MAGIC: &[u8] = b"FSAPIMG1\n";

/// `height x width x 3` pixels in row-major order, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(InvalidInput, "image must have a positive size");
        }
        if data.len() != height * width * 3 {
            bail!(
                InvalidInput,
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            );
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, rgb);
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour resampling to `size x size`.
    pub fn resize_nearest(&self, size: usize) -> Self {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let mut out = Self::zeros(size, size);
        for y in 0..size {
            let sy = (y * self.height) / size;
            for x in 0..size {
                let sx = (x * self.width) / size;
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Mean colour over a rectangle of pixels.
    pub fn mean_rgb(&self, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0.0f64;
        for y in ys {
            for x in xs.clone() {
                let p = self.get(y, x);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n.max(1.0))
    }

    pub fn to_fsapimg(&self) -> Vec<u8> {
        let mut out = FSAPIMG_MAGIC.to_vec();
        out.extend_from_slice(format!("{} {}\n", self.height, self.width).as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_fsapimg(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(FSAPIMG_MAGIC)
            .ok_or_else(|| Error::Format("missing FSAPIMG1 magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated fsapimg header".into()))?;
        let header = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("non-ASCII fsapimg header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad fsapimg dimension `{t}`"))))
            .collect::<Result<_>>()?;
        let [h, w] = dims[..] else {
            bail!(Format, "fsapimg header must hold height and width");
        };
        let body = &rest[nl + 1..];
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(12))
            .ok_or_else(|| Error::Format("fsapimg dimensions overflow".into()))?;
        if body.len() != expected {
            bail!(Format, "fsapimg body has {} bytes, expected {expected}", body.len());
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h, w, data).map_err(|e| Error::Format(e.to_string()))
    }

    /// Binary PPM, values clamped to [0, 1] and quantized to 8 bits.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                bail!(Format, "truncated PPM header");
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P6" {
            bail!(Format, "not a binary PPM (P6) file");
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field `{s}`")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            bail!(Format, "only maxval 255 is supported, got {maxval}");
        }
        // exactly one whitespace byte separates the header from the raster
        let body = bytes.get(pos + 1..).unwrap_or(&[]);
        let expected = w * h * 3;
        if body.len() != expected {
            bail!(Format, "PPM raster has {} bytes, expected {expected}", body.len());
        }
        let data = body.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h, w, data).map_err(|e| Error::Format(e.to_string()))
    }

    /// Loads `.ppm` or `.fsapimg` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let with_path = |e: Error| Error::Format(format!("{}: {e}", path.display()));
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Self::from_ppm(&bytes).map_err(with_path),
            Some("fsapimg") => Self::from_fsapimg(&bytes).map_err(with_path),
            _ => bail!(Format, "{}: unsupported image extension", path.display()),
        }
    }

    /// Loads and resizes to `size x size`.
    pub fn load_resized(path: &Path, size: usize) -> Result<Self> {
        Ok(Self::load(path)?.resize_nearest(size))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.to_ppm(),
            Some("fsapimg") => self.to_fsapimg(),
            _ => bail!(Format, "{}: unsupported image extension", path.display()),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// ASCII PGM (P2), 8-bit, min-max normalized over the grid.
pub fn write_pgm(path: &Path, grid: &[Vec<f64>]) -> Result<()> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in grid {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
                (level.round() as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
