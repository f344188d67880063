//! Procedural reference images and five families of synthetic distortion.
//!
//! Every distortion draws its random field from the seed alone and scales
//! it by severity, so a fixed `(kind, seed)` gives a family of images whose
//! error against the reference grows with severity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ImageBuffer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionKind {
    GaussianNoise,
    GaussianBlur,
    BlockJpegish,
    ContrastShift,
    LocalWarp,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::GaussianNoise,
        DistortionKind::GaussianBlur,
        DistortionKind::BlockJpegish,
        DistortionKind::ContrastShift,
        DistortionKind::LocalWarp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionKind::GaussianNoise => "gaussian_noise",
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::BlockJpegish => "block_jpegish",
            DistortionKind::ContrastShift => "contrast_shift",
            DistortionKind::LocalWarp => "local_warp",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion kind `{s}`")))
    }
}

pub const MAX_SEVERITY: u8 = 5;

/// Label for a distortion of the given severity: `100 - 15 s + U(-2, 2)`.
pub fn pseudo_mos(severity: u8, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_0005);
    100.0 - 15.0 * severity as f32 + rng.gen_range(-2.0f32..=2.0)
}

/// Apply `kind` at `severity` (1 to 5). Pure in its arguments.
pub fn synth_distort(
    reference: &ImageBuffer,
    kind: DistortionKind,
    severity: u8,
    seed: u64,
) -> Result<(ImageBuffer, f32)> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity {severity} outside 1..={MAX_SEVERITY}"
        )));
    }
    let s = severity as f32;
    let (w, h) = (reference.width(), reference.height());
    let src = reference.to_planar();
    let out = match kind {
        DistortionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = 0.03 * s;
            src.iter()
                .map(|&v| v + sigma * rng.sample::<f32, _>(StandardNormal))
                .collect()
        }
        DistortionKind::GaussianBlur => blur(&src, w, h, 0.6 * s),
        DistortionKind::BlockJpegish => {
            let means = block_means(&src, w, h, 8);
            let a = 0.18 * s;
            src.iter().zip(&means).map(|(&v, &m)| v + a * (m - v)).collect()
        }
        DistortionKind::ContrastShift => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let p = w * h;
            let mut out = src.clone();
            for c in 0..3 {
                let plane = &src[c * p..(c + 1) * p];
                let mean = plane.iter().sum::<f32>() / p as f32;
                for (o, &v) in out[c * p..(c + 1) * p].iter_mut().zip(plane) {
                    *o = v + s * (-0.12 * (v - mean) + sign * 0.03);
                }
            }
            out
        }
        DistortionKind::LocalWarp => {
            let field = warp_field(w, h, seed);
            warp(&src, w, h, &field, 2.0 * s)
        }
    };
    let img = ImageBuffer::from_planar(w, h, &out)?;
    Ok((img, pseudo_mos(severity, seed)))
}

fn blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let p = w * h;
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    // Edge-replicated separable passes.
    for c in 0..3 {
        let (sp, tp) = (&src[c * p..(c + 1) * p], &mut tmp[c * p..(c + 1) * p]);
        for y in 0..h {
            for x in 0..w {
                tp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * sp[y * w + xx]
                    })
                    .sum();
            }
        }
        let op = &mut out[c * p..(c + 1) * p];
        for y in 0..h {
            for x in 0..w {
                op[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tp[yy * w + x]
                    })
                    .sum();
            }
        }
    }
    out
}

fn block_means(src: &[f32], w: usize, h: usize, b: usize) -> Vec<f32> {
    let p = w * h;
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let (ys, xs) = (by..(by + b).min(h), bx..(bx + b).min(w));
                let n = (ys.len() * xs.len()) as f32;
                let mut sum = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        sum += src[c * p + y * w + x];
                    }
                }
                for y in ys.clone() {
                    for x in xs.clone() {
                        out[c * p + y * w + x] = sum / n;
                    }
                }
            }
        }
    }
    out
}

/// Smooth unit-bounded displacement field `(dy, dx)` per pixel: random
/// vectors on a coarse lattice, bilinearly interpolated, then scaled so the
/// largest lattice vector has length one.
pub(crate) fn warp_field(w: usize, h: usize, seed: u64) -> Vec<(f32, f32)> {
    const CELL: usize = 16;
    let (gw, gh) = (w / CELL + 2, h / CELL + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lattice: Vec<(f32, f32)> = (0..gw * gh)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let longest = lattice
        .iter()
        .map(|&(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f32, f32::max)
        .max(1e-6);
    lattice.iter_mut().for_each(|v| *v = (v.0 / longest, v.1 / longest));
    let mut field = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / CELL as f32, x as f32 / CELL as f32);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let mix = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            let top = mix(at(iy, ix), at(iy, ix + 1), tx);
            let bottom = mix(at(iy + 1, ix), at(iy + 1, ix + 1), tx);
            field.push(mix(top, bottom, ty));
        }
    }
    field
}

/// Resample `src` at `p + scale * field(p)` with bilinear interpolation and
/// edge-replicated borders.
fn warp(src: &[f32], w: usize, h: usize, field: &[(f32, f32)], scale: f32) -> Vec<f32> {
    let p = w * h;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field[y * w + x];
            let sy = (y as f32 + scale * dy).clamp(0.0, (h - 1) as f32);
            let sx = (x as f32 + scale * dx).clamp(0.0, (w - 1) as f32);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (sy - y0 as f32, sx - x0 as f32);
            for c in 0..3 {
                let s = &src[c * p..(c + 1) * p];
                let top = s[y0 * w + x0] * (1.0 - tx) + s[y0 * w + x1] * tx;
                let bot = s[y1 * w + x0] * (1.0 - tx) + s[y1 * w + x1] * tx;
                out[c * p + y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Procedural reference: a smooth colour gradient, a few soft-edged discs and
/// bars, and an oriented sinusoidal texture, so both fine detail and large
/// structures are present.
pub fn synth_reference(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f32; 3]; 2] = [
        [
            rng.gen_range(0.1..0.5),
            rng.gen_range(0.1..0.5),
            rng.gen_range(0.1..0.5),
        ],
        [
            rng.gen_range(0.5..0.9),
            rng.gen_range(0.5..0.9),
            rng.gen_range(0.5..0.9),
        ],
    ];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let shapes: Vec<(f32, f32, f32, [f32; 3], bool)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0.0..height as f32),
                rng.gen_range(0.0..width as f32),
                rng.gen_range(4.0..(width.min(height) as f32 / 3.0).max(5.0)),
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen(),
            )
        })
        .collect();
    let freq: f32 = rng.gen_range(0.3..0.9);
    let tex_angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let tex_amp: f32 = rng.gen_range(0.05..0.15);

    let p = width * height;
    let mut planes = vec![0.0f32; 3 * p];
    let (ca, sa) = (angle.cos(), angle.sin());
    let (ct, st) = (tex_angle.cos(), tex_angle.sin());
    let diag = ((width * width + height * height) as f32).sqrt();
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f32, x as f32);
            let t = ((fx * ca + fy * sa) / diag + 0.5).clamp(0.0, 1.0);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                rgb[c] = base[0][c] + t * (base[1][c] - base[0][c]);
            }
            for &(cy, cx, r, col, bar) in &shapes {
                let d = if bar {
                    ((fy - cy).abs() - r / 3.0).max((fx - cx).abs() - r)
                } else {
                    ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt() - r
                };
                let a = (0.5 - d / 1.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    rgb[c] += a * (col[c] - rgb[c]);
                }
            }
            let tex = tex_amp * (freq * (fx * ct + fy * st)).sin();
            for c in 0..3 {
                planes[c * p + y * width + x] = rgb[c] + tex;
            }
        }
    }
    ImageBuffer::from_planar(width, height, &planes).expect("sized")
}
