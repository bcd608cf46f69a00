//! Grayscale image buffers with portable-map file IO and bilinear resize.
//!
//! P5 (binary PGM) is the native on-disk format; P6 (binary PPM) loads via
//! Rec.601 luma. Intensities live in [0,1].

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Flattened row-major (h·w, 1) tensor for the feature extractor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.width * self.height, 1], self.pixels.clone())
            .expect("image pixels are finite")
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes =
            format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GrayImage> {
        let data = fs::read(path)?;
        parse_netpbm(&data)
            .map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))
    }

    /// Bilinear resample with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = GrayImage::zeros(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - wx) + self.get(x1, y0) * wx;
                let bot = self.get(x0, y1) * (1.0 - wx) + self.get(x1, y1) * wx;
                out.set(x, y, top * (1.0 - wy) + bot * wy);
            }
        }
        out
    }
}

fn parse_netpbm(data: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let magic = take_token(data, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let width: usize = take_token(data, &mut pos)
        .ok_or("missing width")?
        .parse()
        .map_err(|e| format!("bad width: {e}"))?;
    let height: usize = take_token(data, &mut pos)
        .ok_or("missing height")?
        .parse()
        .map_err(|e| format!("bad height: {e}"))?;
    let maxval: usize = take_token(data, &mut pos)
        .ok_or("missing maxval")?
        .parse()
        .map_err(|e| format!("bad maxval: {e}"))?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let need = width * height * channels;
    let raster = data
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let scale = 1.0 / maxval as f64;
    let pixels: Vec<f64> = if channels == 1 {
        raster.iter().map(|&b| b as f64 * scale).collect()
    } else {
        raster
            .chunks(3)
            .map(|rgb| {
                (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) * scale
            })
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

fn take_token(data: &[u8], pos: &mut usize) -> Option<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
}
