use super::{Descriptor, GrayImage, Method, Normalization};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HogConfig {
    pub cell: usize,
    pub bins: usize,
    /// Cells per block side; blocks slide one cell at a time.
    pub block: usize,
    /// Guards block normalization: `v / sqrt(‖v‖² + eps²)`.
    pub eps: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig { cell: 8, bins: 9, block: 2, eps: 1e-6 }
    }
}

impl HogConfig {
    /// Descriptor length for a `width×height` image.
    pub fn len(&self, width: usize, height: usize) -> usize {
        let (cx, cy) = (width / self.cell, height / self.cell);
        (cx + 1).saturating_sub(self.block) * (cy + 1).saturating_sub(self.block) * self.block * self.block * self.bins
    }
}

/// Histograms of unsigned gradient orientation per cell, magnitude weighted
/// and linearly split between the two nearest bin centres (`b · 180°/bins`),
/// then L2-normalized over overlapping blocks.
pub fn hog_descriptor(img: &GrayImage, cfg: &HogConfig) -> Result<Descriptor> {
    let (w, h) = (img.width(), img.height());
    if cfg.cell == 0 || cfg.bins == 0 || cfg.block == 0 {
        return Err(Error::config("HOG cell, bins and block must be positive"));
    }
    if w % cfg.cell != 0 || h % cfg.cell != 0 {
        return Err(Error::contract(format!("{w}×{h} image is not divisible into {} pixel cells", cfg.cell)));
    }
    let (cx, cy) = (w / cfg.cell, h / cfg.cell);
    if cx < cfg.block || cy < cfg.block {
        return Err(Error::contract(format!("{cx}×{cy} cells cannot hold a {} cell block", cfg.block)));
    }
    let bin_width = 180.0 / cfg.bins as f64;
    let mut hist = vec![0.0f64; cx * cy * cfg.bins];
    for y in 0..h {
        for x in 0..w {
            let at = |x: isize, y: isize| img.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize) as f64;
            let (xi, yi) = (x as isize, y as isize);
            let gx = at(xi + 1, yi) - at(xi - 1, yi);
            let gy = at(xi, yi + 1) - at(xi, yi - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = angle / bin_width;
            let b0 = pos.floor() as usize % cfg.bins;
            let t = pos - pos.floor();
            let cell = ((y / cfg.cell) * cx + x / cfg.cell) * cfg.bins;
            hist[cell + b0] += mag * (1.0 - t);
            hist[cell + (b0 + 1) % cfg.bins] += mag * t;
        }
    }
    let mut values = Vec::with_capacity(cfg.len(w, h));
    for by in 0..=cy - cfg.block {
        for bx in 0..=cx - cfg.block {
            let start = values.len();
            for y in by..by + cfg.block {
                for x in bx..bx + cfg.block {
                    values.extend_from_slice(&hist[(y * cx + x) * cfg.bins..(y * cx + x + 1) * cfg.bins]);
                }
            }
            let block = &mut values[start..];
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + cfg.eps * cfg.eps).sqrt();
            block.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(Descriptor { method: Method::Hog, values, normalization: Normalization::BlockL2 })
}
