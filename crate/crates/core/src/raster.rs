//! Grayscale rasters: PGM I/O, thresholding and sketch rasterization.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::sketch::VectorSketch;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("PGM format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    /// Foreground test with out-of-bounds treated as background.
    pub fn is_on(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.values[y as usize * self.width + x as usize] > 0
    }

    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0).count()
    }

    /// Values `>= threshold` become 255, the rest 0.
    pub fn binarize(&self, threshold: u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 255 } else { 0 })
                .collect(),
        }
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut out = Self::new(width, height);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    /// Draws a 1-pixel line with Bresenham's algorithm, clipping to the image.
    pub fn draw_line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                self.set(x as usize, y as usize, v);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.values);
        out
    }

    /// Parses plain (`P2`) or binary (`P5`) PGM. Values are rescaled to 0-255
    /// when the file's maxval differs.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, RasterError> {
        let fmt = |m: &str| RasterError::Format(m.to_string());
        let mut pos = 0;
        let mut header = Vec::new();
        // magic + width + height + maxval, skipping whitespace and comments
        while header.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt("truncated header"));
            }
            header.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fmt("non-ASCII header"))?);
        }
        let magic = header[0];
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| RasterError::Format(format!("bad {what} {s:?}")))
        };
        let width = parse(header[1], "width")?;
        let height = parse(header[2], "height")?;
        let maxval = parse(header[3], "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(fmt("maxval must be in 1..=255"));
        }
        let n = width * height;
        let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
        let raw: Vec<usize> = match magic {
            "P5" => {
                pos += 1; // single whitespace after maxval
                let data = bytes.get(pos..pos + n).ok_or_else(|| fmt("truncated pixel data"))?;
                data.iter().map(|&b| b as usize).collect()
            }
            "P2" => {
                let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| fmt("non-ASCII body"))?;
                let vals = text
                    .split_whitespace()
                    .take(n)
                    .map(|t| parse(t, "pixel"))
                    .collect::<Result<Vec<_>, _>>()?;
                if vals.len() != n {
                    return Err(fmt("truncated pixel data"));
                }
                vals
            }
            other => return Err(RasterError::Format(format!("unsupported magic {other:?}"))),
        };
        if raw.iter().any(|&v| v > maxval) {
            return Err(fmt("pixel exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            values: raw.into_iter().map(scale).collect(),
        })
    }
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<RasterImage, RasterError> {
    RasterImage::from_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &RasterImage) -> Result<(), RasterError> {
    fs::write(path, image.to_pgm())?;
    Ok(())
}

/// Draws a sketch into a `size x size` binary raster, fitting its bounding
/// box (aspect preserved) inside a margin of `margin` pixels.
pub fn rasterize(sketch: &VectorSketch, size: usize, margin: usize) -> RasterImage {
    let mut img = RasterImage::new(size, size);
    let Some(bbox) = sketch.bounding_box() else {
        return img;
    };
    let usable = size.saturating_sub(2 * margin + 1).max(1) as f64;
    let extent = bbox.extent();
    let scale = if extent > 0.0 { usable / extent } else { 0.0 };
    let (cx, cy) = bbox.center();
    let mid = (size as f64 - 1.0) / 2.0;
    let to_px = |x: f64, y: f64| {
        (
            ((x - cx) * scale + mid).round() as i64,
            ((y - cy) * scale + mid).round() as i64,
        )
    };
    for stroke in sketch.absolute_strokes() {
        let mut prev = to_px(stroke[0].0, stroke[0].1);
        img.draw_line(prev.0, prev.1, prev.0, prev.1, 255);
        for &(x, y) in &stroke[1..] {
            let p = to_px(x, y);
            img.draw_line(prev.0, prev.1, p.0, p.1, 255);
            prev = p;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::StrokePoint;

    #[test]
    fn binarize_edges() {
        let img = RasterImage {
            width: 3,
            height: 1,
            values: vec![0, 127, 128],
        };
        assert_eq!(img.binarize(128).values, vec![0, 0, 255]);
        assert_eq!(img.binarize(0).values, vec![255, 255, 255]);
        assert_eq!(RasterImage::new(4, 4).binarize(128).count_on(), 0);
    }

    #[test]
    fn pgm_round_trip_binary_and_plain() {
        let img = RasterImage {
            width: 4,
            height: 2,
            values: vec![0, 10, 20, 255, 7, 128, 9, 1],
        };
        assert_eq!(RasterImage::from_pgm(&img.to_pgm()).unwrap(), img);
        let plain = b"P2\n# comment\n4 2\n255\n0 10 20 255\n7 128 9 1\n";
        assert_eq!(RasterImage::from_pgm(plain).unwrap(), img);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img).unwrap();
        assert_eq!(load_pgm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_bad_headers() {
        assert!(RasterImage::from_pgm(b"P3\n1 1\n255\n0").is_err());
        assert!(RasterImage::from_pgm(b"P2\n2 x\n255\n0 0").is_err());
        assert!(RasterImage::from_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(RasterImage::from_pgm(b"P2\n1 1\n").is_err());
    }

    #[test]
    fn pgm_rescales_maxval() {
        let img = RasterImage::from_pgm(b"P2 2 1 1 0 1").unwrap();
        assert_eq!(img.values, vec![0, 255]);
    }

    #[test]
    fn rasterize_line() {
        let s = VectorSketch::new(vec![
            StrokePoint::new(0.0, 0.0, false),
            StrokePoint::new(10.0, 0.0, true),
        ]);
        let img = rasterize(&s, 16, 1);
        assert!(img.count_on() >= 13);
        assert!(rasterize(&VectorSketch::default(), 8, 0).count_on() == 0);
    }
}
