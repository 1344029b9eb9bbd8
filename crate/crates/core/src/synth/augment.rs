use rand::Rng;

use super::image::{to_u8, RgbImage};
use crate::{seed, Error, Result};

/// Ranges of the random photometric and geometric changes. There is no
/// mirroring option.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Crop side as a fraction of the image side.
    pub crop_scale: (f64, f64),
    /// Each corner moves by up to this fraction of the side, per axis.
    pub corner_jitter: f64,
    /// Hue shift drawn from `[-hue_shift, hue_shift]` (full turn = 1).
    pub hue_shift: f64,
    pub saturation_scale: (f64, f64),
    pub output_size: usize,
}

impl AugmentConfig {
    pub fn training(output_size: usize) -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            crop_scale: (0.8, 1.0),
            corner_jitter: 0.05,
            hue_shift: 0.05,
            saturation_scale: (0.8, 1.25),
            output_size,
        }
    }

    /// No change apart from resizing.
    pub fn identity(output_size: usize) -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            crop_scale: (1.0, 1.0),
            corner_jitter: 0.0,
            hue_shift: 0.0,
            saturation_scale: (1.0, 1.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::contract(format!("crop scale range {lo}..{hi} is not inside (0, 1]")));
        }
        let (slo, shi) = self.saturation_scale;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::config(format!("bad saturation range {slo}..{shi}")));
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::config(format!("bad rotation range {}", self.rotation_deg)));
        }
        if !(0.0..0.25).contains(&self.corner_jitter) {
            return Err(Error::config(format!("corner jitter {} outside [0, 0.25)", self.corner_jitter)));
        }
        if !(0.0..=0.5).contains(&self.hue_shift) {
            return Err(Error::config(format!("hue shift {} outside [0, 0.5]", self.hue_shift)));
        }
        if self.output_size == 0 {
            return Err(Error::config("augmentation output size is zero"));
        }
        Ok(())
    }
}

/// 3×3 projective transform, row-major.
type Homography = [f64; 9];

fn apply(h: &Homography, x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

/// Homography taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Result<Homography> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::contract("degenerate projective jitter"));
        }
        a.swap(col, pivot);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    Ok(h)
}

/// Random rotation, projective corner jitter, crop and resize, then a hue
/// and saturation change. All draws come from `seed_value`.
pub fn augment(image: &RgbImage, cfg: &AugmentConfig, seed_value: u64) -> Result<RgbImage> {
    cfg.validate()?;
    let mut rng = seed::rng(seed_value, &[0x6175_676d]);
    let (w, h) = (image.width() as f64, image.height() as f64);
    let angle = rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians();
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let jittered = corners.map(|(x, y)| {
        let dx = rng.gen_range(-cfg.corner_jitter..=cfg.corner_jitter) * w;
        let dy = rng.gen_range(-cfg.corner_jitter..=cfg.corner_jitter) * h;
        (x + dx, y + dy)
    });
    let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let (cw, ch) = (scale * w, scale * h);
    if cw < 1.0 || ch < 1.0 {
        return Err(Error::contract(format!("crop of {cw}×{ch} pixels is empty")));
    }
    let x0 = rng.gen_range(0.0..=w - cw);
    let y0 = rng.gen_range(0.0..=h - ch);
    let hue = rng.gen_range(-cfg.hue_shift..=cfg.hue_shift);
    let sat = rng.gen_range(cfg.saturation_scale.0..=cfg.saturation_scale.1);

    // output pixel -> cropped plane -> (undo projection) -> (undo rotation) -> source
    let unproject = if cfg.corner_jitter > 0.0 { Some(homography(&jittered, &corners)?) } else { None };
    let (cos, sin) = (angle.cos(), angle.sin());
    let (cx, cy) = (w / 2.0, h / 2.0);
    let out = cfg.output_size;
    let (sx, sy) = (cw / out as f64, ch / out as f64);
    let mut img = image.remap(out, |u, v| {
        let (mut x, mut y) = (x0 + (u + 0.5) * sx, y0 + (v + 0.5) * sy);
        if let Some(hm) = &unproject {
            (x, y) = apply(hm, x, y);
        }
        if angle != 0.0 {
            let (dx, dy) = (x - cx, y - cy);
            (x, y) = (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy);
        }
        (x - 0.5, y - 0.5)
    });
    if hue != 0.0 || sat != 1.0 {
        for px in img.data_mut().chunks_mut(3) {
            let (hh, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
            let rgb = hsv_to_rgb((hh + hue).rem_euclid(1.0), (s * sat).min(1.0), v);
            px.copy_from_slice(&rgb);
        }
    }
    Ok(img)
}

/// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
pub(crate) fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| to_u8((ch + m) * 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip_is_exact_on_bytes() {
        for r in (0..=255).step_by(15) {
            for g in (0..=255).step_by(17) {
                for b in (0..=255).step_by(51) {
                    let (h, s, v) = rgb_to_hsv([r, g, b]);
                    assert_eq!(hsv_to_rgb(h, s, v), [r, g, b]);
                }
            }
        }
    }

    #[test]
    fn homography_maps_corners() {
        let from = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let to = [(0.5, -0.3), (10.2, 0.4), (9.6, 10.3), (-0.4, 9.8)];
        let h = homography(&from, &to).unwrap();
        for (f, t) in from.iter().zip(&to) {
            let (x, y) = apply(&h, f.0, f.1);
            assert!((x - t.0).abs() < 1e-9 && (y - t.1).abs() < 1e-9);
        }
    }
}
