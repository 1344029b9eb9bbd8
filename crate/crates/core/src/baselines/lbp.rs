use super::{Descriptor, GrayImage, Method, Normalization};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LbphConfig {
    pub radius: usize,
    /// At most 8, so each code fits a byte.
    pub neighbors: usize,
    /// The code image is split into `grid×grid` cells.
    pub grid: usize,
}

impl Default for LbphConfig {
    fn default() -> Self {
        LbphConfig { radius: 1, neighbors: 8, grid: 4 }
    }
}

/// Offsets of the circular neighbours; values within 1e-9 of an integer are
/// snapped so on-axis neighbours read exact pixels.
fn offsets(cfg: &LbphConfig) -> Vec<(f64, f64)> {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    (0..cfg.neighbors)
        .map(|p| {
            let a = std::f64::consts::TAU * p as f64 / cfg.neighbors as f64;
            (snap(cfg.radius as f64 * a.cos()), snap(-(cfg.radius as f64) * a.sin()))
        })
        .collect()
}

/// Local binary pattern of every pixel whose neighbourhood lies inside the
/// image, row-major over a `(w − 2r)×(h − 2r)` grid. Bit `p` is set when the
/// bilinearly sampled neighbour `p` is at least the centre value.
pub fn lbp_codes(img: &GrayImage, cfg: &LbphConfig) -> Result<(usize, usize, Vec<u8>)> {
    if cfg.neighbors == 0 || cfg.neighbors > 8 || cfg.radius == 0 {
        return Err(Error::config(format!("unsupported LBP radius {} / neighbours {}", cfg.radius, cfg.neighbors)));
    }
    let r = cfg.radius;
    if img.width() <= 2 * r || img.height() <= 2 * r {
        return Err(Error::contract(format!("image {}×{} too small for LBP radius {r}", img.width(), img.height())));
    }
    let (w, h) = (img.width() - 2 * r, img.height() - 2 * r);
    let offs = offsets(cfg);
    let mut codes = Vec::with_capacity(w * h);
    for y in r..r + h {
        for x in r..r + w {
            let c = img.get(x, y);
            let mut code = 0u8;
            for (p, &(dx, dy)) in offs.iter().enumerate() {
                // interpolate differences, so a constant offset cancels exactly
                let d = img.sample_relative(x as f64 + dx, y as f64 + dy, c);
                if d >= 0.0 {
                    code |= 1 << p;
                }
            }
            codes.push(code);
        }
    }
    Ok((w, h, codes))
}

/// Per-cell code histograms, each summing to 1, concatenated row-major over
/// the grid. Length `2^neighbors · grid²`.
pub fn lbph_descriptor(img: &GrayImage, cfg: &LbphConfig) -> Result<Descriptor> {
    let (w, h, codes) = lbp_codes(img, cfg)?;
    let g = cfg.grid;
    if g == 0 || g > w || g > h {
        return Err(Error::contract(format!("grid {g} does not fit a {w}×{h} code image")));
    }
    let bins = 1usize << cfg.neighbors;
    let mut values = vec![0.0; bins * g * g];
    let mut counts = vec![0usize; g * g];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * g / h) * g + x * g / w;
            values[cell * bins + codes[y * w + x] as usize] += 1.0;
            counts[cell] += 1;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        values[cell * bins..(cell + 1) * bins].iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Descriptor { method: Method::Lbph, values, normalization: Normalization::CellSum })
}
