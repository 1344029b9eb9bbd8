use rand::Rng;

use super::image::{to_u8, RgbImage};
use crate::{seed, Error, Result, View};

const BACKGROUND: [u8; 3] = [96, 112, 84];
const HORN: [u8; 3] = [226, 214, 186];
const EYE: [u8; 3] = [18, 16, 16];

/// Coat colours; identities share them, so colour alone does not identify.
const COATS: [[u8; 3]; 5] = [[214, 204, 190], [150, 92, 52], [60, 44, 36], [188, 140, 92], [120, 112, 106]];
const MARKINGS: [[u8; 3]; 4] = [[244, 242, 236], [28, 24, 22], [112, 62, 34], [200, 170, 120]];

/// A coloured disc in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub color: [u8; 3],
}

/// Appearance parameters of one synthetic animal.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u32,
    pub seed: u64,
    pub coat: [u8; 3],
    pub frontal_blobs: Vec<Blob>,
    pub profile_blobs: Vec<Blob>,
    /// Horn length as a fraction of the image side.
    pub horn_length: f64,
    pub muzzle_shade: u8,
}

impl IdentitySpec {
    pub fn blobs(&self, view: View) -> &[Blob] {
        match view {
            View::Frontal => &self.frontal_blobs,
            View::Profile => &self.profile_blobs,
        }
    }
}

fn jitter(rng: &mut impl Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn blobs(rng: &mut impl Rng, coat: [u8; 3]) -> Vec<Blob> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            let color = loop {
                let c = MARKINGS[rng.gen_range(0..MARKINGS.len())];
                let dist: i32 = c.iter().zip(&coat).map(|(a, b)| (*a as i32 - *b as i32).abs()).sum();
                if dist > 90 {
                    break c;
                }
            };
            Blob {
                center: (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
                radius: rng.gen_range(0.05..0.12),
                color,
            }
        })
        .collect()
}

/// Deterministic parameters for `id`. The two blob layouts come from
/// separate streams, so one side says nothing about the other.
pub fn generate_identity(id: u32, seed_value: u64) -> IdentitySpec {
    let mut rng = seed::rng(seed_value, &[0x6964, id as u64]);
    let base = COATS[rng.gen_range(0..COATS.len())];
    let coat = jitter(&mut rng, base, 12);
    let horn_length = rng.gen_range(0.04..0.18);
    let muzzle_shade = rng.gen_range(60..=200);
    let frontal_blobs = blobs(&mut seed::rng(seed_value, &[0x6964, id as u64, 0]), coat);
    let profile_blobs = blobs(&mut seed::rng(seed_value, &[0x6964, id as u64, 1]), coat);
    IdentitySpec { id, seed: seed_value, coat, frontal_blobs, profile_blobs, horn_length, muzzle_shade }
}

const BACKGROUNDS: [[u8; 3]; 5] = [[96, 112, 84], [136, 128, 100], [70, 88, 60], [150, 160, 170], [110, 96, 80]];
const DIRT: [u8; 3] = [92, 74, 52];

/// Scene conditions of one capture: what surrounds the head, dirt on it and
/// the lighting.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureConditions {
    pub background: [u8; 3],
    /// Discs drawn behind the head.
    pub clutter: Vec<Blob>,
    /// Discs drawn on the head over its markings.
    pub dirt: Vec<Blob>,
    /// Brightness multiplier.
    pub gain: f64,
    /// Per-channel colour multipliers.
    pub tint: [f64; 3],
    /// Brightness slope along x and y, per image side, centred on the middle.
    pub shadow: (f64, f64),
}

impl CaptureConditions {
    /// Plain background, no clutter or dirt, flat white light.
    pub fn neutral() -> Self {
        CaptureConditions { background: BACKGROUND, clutter: Vec::new(), dirt: Vec::new(), gain: 1.0, tint: [1.0; 3], shadow: (0.0, 0.0) }
    }

    /// Random scene. The lighting comes from `light_rng` so both views of a
    /// session can share it.
    pub fn sample(scene_rng: &mut impl Rng, light_rng: &mut impl Rng) -> Self {
        let base = BACKGROUNDS[scene_rng.gen_range(0..BACKGROUNDS.len())];
        let background = jitter(scene_rng, base, 20);
        let clutter = (0..scene_rng.gen_range(0..=4))
            .map(|_| Blob {
                center: (scene_rng.gen_range(0.0..1.0), scene_rng.gen_range(0.0..1.0)),
                radius: scene_rng.gen_range(0.05..0.2),
                color: [scene_rng.gen(), scene_rng.gen(), scene_rng.gen()],
            })
            .collect();
        let dirt = (0..scene_rng.gen_range(0..=2))
            .map(|_| Blob {
                center: (scene_rng.gen_range(0.25..0.75), scene_rng.gen_range(0.3..0.8)),
                radius: scene_rng.gen_range(0.03..0.07),
                color: jitter(scene_rng, DIRT, 15),
            })
            .collect();
        let gain = light_rng.gen_range(0.65..1.35);
        let tint = [0; 3].map(|_| light_rng.gen_range(0.88..1.12));
        let shadow = (light_rng.gen_range(-0.5..0.5), light_rng.gen_range(-0.5..0.5));
        CaptureConditions { background, clutter, dirt, gain, tint, shadow }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub size: usize,
    /// Standard deviation of per-pixel sensor noise, in 8-bit units.
    pub noise_std: f64,
}

impl RenderConfig {
    pub fn new(size: usize) -> Self {
        RenderConfig { size, noise_std: 6.0 }
    }
}

fn in_ellipse(p: (f64, f64), c: (f64, f64), r: (f64, f64)) -> bool {
    let (dx, dy) = ((p.0 - c.0) / r.0, (p.1 - c.1) / r.1);
    dx * dx + dy * dy <= 1.0
}

/// Distance from `p` to the segment `a`–`b`.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

fn disc_at(blobs: &[Blob], p: (f64, f64)) -> Option<[u8; 3]> {
    blobs.iter().rev().find(|b| in_ellipse(p, b.center, (b.radius, b.radius))).map(|b| b.color)
}

/// Colour of the noiseless, unlit drawing at normalised point `p`.
fn shade(spec: &IdentitySpec, view: View, scene: &CaptureConditions, p: (f64, f64)) -> [u8; 3] {
    let horn = spec.horn_length;
    let (head, muzzle, eyes, horns): (bool, bool, [(f64, f64); 2], [((f64, f64), (f64, f64)); 2]) = match view {
        View::Frontal => (
            in_ellipse(p, (0.5, 0.52), (0.30, 0.40))
                || in_ellipse(p, (0.17, 0.30), (0.13, 0.06))
                || in_ellipse(p, (0.83, 0.30), (0.13, 0.06)),
            in_ellipse(p, (0.5, 0.80), (0.17, 0.11)),
            [(0.37, 0.42), (0.63, 0.42)],
            [
                ((0.36, 0.16), (0.36 - 0.7 * horn, 0.16 - horn)),
                ((0.64, 0.16), (0.64 + 0.7 * horn, 0.16 - horn)),
            ],
        ),
        View::Profile => (
            in_ellipse(p, (0.56, 0.44), (0.30, 0.20))
                || in_ellipse(p, (0.28, 0.60), (0.17, 0.15))
                || (p.0 > 0.62 && p.0 < 0.92 && p.1 > 0.44)
                || in_ellipse(p, (0.84, 0.26), (0.11, 0.05)),
            in_ellipse(p, (0.16, 0.64), (0.08, 0.10)),
            [(0.44, 0.38), (0.44, 0.38)],
            [((0.70, 0.26), (0.70 + 0.5 * horn, 0.26 - horn)), ((0.70, 0.26), (0.70 + 0.5 * horn, 0.26 - horn))],
        ),
    };
    if horns.iter().any(|&(a, b)| seg_dist(p, a, b) < 0.025) && !head {
        return HORN;
    }
    if !head {
        return disc_at(&scene.clutter, p).unwrap_or(scene.background);
    }
    if eyes.iter().any(|&e| in_ellipse(p, e, (0.035, 0.035))) {
        return EYE;
    }
    if muzzle {
        return [spec.muzzle_shade; 3];
    }
    disc_at(&scene.dirt, p).or_else(|| disc_at(spec.blobs(view), p)).unwrap_or(spec.coat)
}

/// Draws one view of an identity: head silhouette in the coat colour,
/// view-specific markings, eyes, muzzle and horns, plus Gaussian noise.
pub fn render_view(spec: &IdentitySpec, view: View, cfg: &RenderConfig, noise_seed: u64) -> Result<RgbImage> {
    render_capture(spec, view, &CaptureConditions::neutral(), cfg, noise_seed)
}

/// [`render_view`] under the given scene conditions. Lighting scales the
/// drawing before noise is added.
pub fn render_capture(
    spec: &IdentitySpec,
    view: View,
    scene: &CaptureConditions,
    cfg: &RenderConfig,
    noise_seed: u64,
) -> Result<RgbImage> {
    if cfg.size < 16 {
        return Err(Error::contract(format!("render size {} is below 16", cfg.size)));
    }
    let n = cfg.size;
    let mut img = RgbImage::filled(n, n, scene.background);
    for y in 0..n {
        for x in 0..n {
            let p = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let c = shade(spec, view, scene, p);
            let light = scene.gain * (1.0 + scene.shadow.0 * (p.0 - 0.5) + scene.shadow.1 * (p.1 - 0.5));
            img.put(x, y, [0, 1, 2].map(|i| to_u8(c[i] as f64 * light * scene.tint[i])));
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = seed::rng(noise_seed, &[0x6e6f_6973]);
        for b in img.data_mut() {
            *b = to_u8(*b as f64 + cfg.noise_std * seed::gaussian(&mut rng));
        }
    }
    Ok(img)
}
