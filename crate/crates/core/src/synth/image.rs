use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims("rgb image", &[data.len()], &[width, height, 3]));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean absolute per-channel difference; images must share dimensions.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dims("mean_abs_diff", &[self.width, self.height], &[other.width, other.height]));
        }
        let total: u64 = self.data.iter().zip(&other.data).map(|(a, b)| a.abs_diff(*b) as u64).sum();
        Ok(total as f64 / self.data.len().max(1) as f64)
    }

    /// Bilinear sample at continuous pixel-centre coordinates, edges clamped.
    pub(crate) fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (w, h) = (self.width as isize, self.height as isize);
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let at = |xi: isize, yi: isize| {
            let xi = xi.clamp(0, w - 1) as usize;
            let yi = yi.clamp(0, h - 1) as usize;
            self.pixel(xi, yi)
        };
        let (x0, y0) = (fx as isize, fy as isize);
        let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx;
            let bottom = c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx;
            out[k] = top * (1.0 - ty) + bottom * ty;
        }
        out
    }

    /// Builds a `size×size` image by sampling `map(u, v)` (output pixel
    /// indices to source pixel-centre coordinates).
    pub(crate) fn remap(&self, size: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> RgbImage {
        let mut out = RgbImage::filled(size, size, [0; 3]);
        for v in 0..size {
            for u in 0..size {
                let (x, y) = map(u as f64, v as f64);
                let s = self.sample(x, y);
                out.put(u, v, s.map(to_u8));
            }
        }
        out
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let magic = header_token(&mut r)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected PPM magic P6, found {magic:?}")));
        }
        let mut field = |what: &str| -> Result<usize> {
            let t = header_token(&mut r)?;
            t.parse().map_err(|_| Error::Format(format!("bad PPM {what} {t:?}")))
        };
        let (width, height, max) = (field("width")?, field("height")?, field("maxval")?);
        if max != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {max}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("empty PPM image".into()));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data)
            .map_err(|_| Error::Format(format!("PPM payload shorter than {} bytes", data.len())))?;
        Ok(RgbImage { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        RgbImage::read_ppm(std::fs::File::open(path)?)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Reads one whitespace-delimited header token, skipping `#` comments. The
/// single whitespace byte after the token is consumed.
fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => {
                tok.push(c);
                if tok.len() > 16 {
                    return Err(Error::Format("PPM header token too long".into()));
                }
            }
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PPM header".into()))
}

/// Bilinear resize to `size×size`, sampling at pixel centres.
pub fn resize(image: &RgbImage, size: usize) -> Result<RgbImage> {
    if size == 0 {
        return Err(Error::contract("resize to zero size"));
    }
    if image.width == size && image.height == size {
        return Ok(image.clone());
    }
    let sx = image.width as f64 / size as f64;
    let sy = image.height as f64 / size as f64;
    Ok(image.remap(size, |u, v| ((u + 0.5) * sx - 0.5, (v + 0.5) * sy - 0.5)))
}

/// Stacks equally sized images into an `N×3×H×W` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::contract("no images to stack"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::dims("images_to_tensor", &[img.width, img.height], &[w, h]));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&b| b as f32 / 255.0));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}
