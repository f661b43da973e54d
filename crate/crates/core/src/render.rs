//! Signed red/blue heatmaps and binary PPM/PGM encoding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Nearest-neighbour enlargement by integer factors.
    pub fn upscale(&self, fy: usize, fx: usize) -> Self {
        let (w, h) = (self.width * fx, self.height * fy);
        let mut pixels = Vec::with_capacity(3 * w * h);
        for r in 0..h {
            for c in 0..w {
                pixels.extend_from_slice(&self.pixel(r / fy, c / fx));
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        if magic != "P6" {
            return Err(Error::Malformed(format!("expected P6, found {magic}")));
        }
        if body.len() != 3 * width * height {
            return Err(Error::Malformed("PPM pixel data length".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }

    /// Converts a `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn from_tensor(image: &Tensor) -> Result<Self> {
        let &[3, h, w] = image.shape() else {
            return Err(Error::Shape(format!(
                "expected [3, H, W], got {:?}",
                image.shape()
            )));
        };
        let plane = h * w;
        let d = image.data();
        let mut pixels = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(to_byte(d[c * plane + p]));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

impl GrayImage {
    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, body) = parse_netpbm(bytes)?;
        if magic != "P5" || body.len() != width * height {
            return Err(Error::Malformed("not a binary 8-bit PGM".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_netpbm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    // magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("bad netpbm header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Malformed("only maxval 255 is supported".into()));
    }
    Ok((
        fields[0].clone(),
        w,
        h,
        &bytes[(pos + 1).min(bytes.len())..],
    ))
}

/// How values are scaled to colour intensity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Normalization {
    /// Divide by the largest magnitude in the map.
    #[default]
    MaxAbs,
    /// Divide by a fixed value, clamping to full intensity.
    Fixed(f64),
}

/// Collapses a map to a signed `[H, W]` grid: rank 3 sums channels, rank 2
/// is used as is and rank 1 becomes a single row of segments.
pub fn signed_grid(map: &Tensor) -> (usize, usize, Vec<f64>) {
    match *map.shape() {
        [c, h, w] => {
            let plane = h * w;
            let mut grid = vec![0.0; plane];
            for ch in 0..c {
                for (g, v) in grid
                    .iter_mut()
                    .zip(&map.data()[ch * plane..(ch + 1) * plane])
                {
                    *g += v;
                }
            }
            (h, w, grid)
        }
        [h, w] => (h, w, map.data().to_vec()),
        _ => (1, map.len(), map.data().to_vec()),
    }
}

/// Red for positive values, blue for negative, white for zero.
pub fn render_signed_map(map: &Tensor, normalization: Normalization) -> RgbImage {
    let (h, w, grid) = signed_grid(map);
    let scale = match normalization {
        Normalization::MaxAbs => grid.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Normalization::Fixed(s) => s.abs(),
    };
    let mut pixels = Vec::with_capacity(3 * h * w);
    for &v in &grid {
        let t = if scale > 0.0 && scale.is_finite() {
            (v.abs() / scale).min(1.0)
        } else {
            0.0
        };
        let fade = (255.0 * (1.0 - t)).round() as u8;
        let px = if v > 0.0 && t > 0.0 {
            [255, fade, fade]
        } else if v < 0.0 && t > 0.0 {
            [fade, fade, 255]
        } else {
            [255, 255, 255]
        };
        pixels.extend_from_slice(&px);
    }
    RgbImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Grayscale magnitude of a `[H, W]` grid, brightest at the maximum.
pub fn render_magnitude(grid: &Tensor) -> Result<GrayImage> {
    let &[h, w] = grid.shape() else {
        return Err(Error::Shape(format!(
            "expected [H, W], got {:?}",
            grid.shape()
        )));
    };
    let m = grid.max_abs();
    let pixels = grid
        .data()
        .iter()
        .map(|v| if m > 0.0 { to_byte(v.abs() / m) } else { 0 })
        .collect();
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}
