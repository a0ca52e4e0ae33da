//! 8-bit RGB images, written as PPM (P6) or PNG.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SdgError};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, rgb: vec![0; width * height * 3] }
    }

    /// From channel-major float planes in [0,1]; values are clamped.
    pub fn from_float_chw(data: &[Real], height: usize, width: usize) -> Image {
        assert_eq!(data.len(), 3 * height * width);
        let mut rgb = vec![0u8; width * height * 3];
        for c in 0..3 {
            for p in 0..height * width {
                let v = data[c * height * width + p].clamp(0.0, 1.0);
                rgb[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Image { width, height, rgb }
    }

    /// Channel-major float planes in [0,1].
    pub fn to_float_chw(&self) -> Vec<Real> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for c in 0..3 {
            for p in 0..hw {
                out[c * hw + p] = self.rgb[p * 3 + c] as Real / 255.0;
            }
        }
        out
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }
}

/// Mean squared pixel distance in [0,1] units.
pub fn mean_squared_distance(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.rgb.len(), b.rgb.len());
    let n = a.rgb.len() as f64;
    a.rgb
        .iter()
        .zip(b.rgb.iter())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum::<f64>()
        / n
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.rgb)?;
    w.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |msg: &str| SdgError::Config(format!("{}: {msg}", path.display()));
    // Header: three whitespace-separated fields after the P6 tag.
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start < pos {
            let s = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("invalid header"))?;
            fields.push(s.parse::<usize>().map_err(|_| bad("invalid header"))?);
        }
    }
    if fields.len() != 3 || fields[2] != 255 {
        return Err(bad("unsupported header"));
    }
    pos += 1; // single whitespace after maxval
    let (width, height) = (fields[0], fields[1]);
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(Image { width, height, rgb: bytes[pos..pos + need].to_vec() })
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &img.rgb,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| SdgError::Config(format!("png write failed: {e}")))
}

/// Writes by extension: `.png` or `.ppm`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        Some("ppm") => write_ppm(path, img),
        other => Err(SdgError::Config(format!(
            "unsupported image extension {other:?}"
        ))),
    }
}
