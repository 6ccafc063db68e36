//! Synthetic multi-focus pairs: an all-in-focus scene, a smooth random focus
//! mask, and two sources each blurred where the other is sharp.

use std::f64::consts::PI;

use crate::error::{arg_err, Result};
use crate::group_action::PlanarImage;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Shapes,
    Gradients,
    Mixed,
}

impl std::str::FromStr for Texture {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shapes" => Ok(Self::Shapes),
            "gradients" => Ok(Self::Gradients),
            "mixed" => Ok(Self::Mixed),
            _ => Err(format!("unknown texture {s:?} (shapes|gradients|mixed)")),
        }
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Shapes => "shapes",
            Self::Gradients => "gradients",
            Self::Mixed => "mixed",
        })
    }
}

/// Seed of pair `index` in a dataset generated from `seed`.
pub fn pair_seed(seed: u64, index: u64) -> u64 {
    SeededRng::fork(seed, index).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPair {
    pub ground_truth: PlanarImage<f64>,
    pub source_a: PlanarImage<f64>,
    pub source_b: PlanarImage<f64>,
    /// 1 where source A is in focus, 0 elsewhere.
    pub mask: PlanarImage<f64>,
}

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Square { cy: f64, cx: f64, half: f64, angle: f64 },
    Line { cy: f64, cx: f64, angle: f64, half_width: f64, half_len: f64 },
}

impl Shape {
    fn random(rng: &mut SeededRng, n: f64) -> Self {
        let cy = rng.uniform_range(0.1 * n, 0.9 * n);
        let cx = rng.uniform_range(0.1 * n, 0.9 * n);
        match rng.below(0, 3) {
            0 => Shape::Disc { cy, cx, r: rng.uniform_range(0.06 * n, 0.2 * n) },
            1 => Shape::Square {
                cy,
                cx,
                half: rng.uniform_range(0.05 * n, 0.16 * n),
                angle: rng.uniform_range(0.0, PI / 2.0),
            },
            _ => Shape::Line {
                cy,
                cx,
                angle: rng.uniform_range(0.0, PI),
                half_width: rng.uniform_range(0.5, 1.5),
                half_len: rng.uniform_range(0.2 * n, 0.45 * n),
            },
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Square { cy, cx, half, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                (c * dx + s * dy).abs() <= half && (-s * dx + c * dy).abs() <= half
            }
            Shape::Line { cy, cx, angle, half_width, half_len } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                (c * dx + s * dy).abs() <= half_len && (-s * dx + c * dy).abs() <= half_width
            }
        }
    }

    /// Fraction of a pixel covered, from a regular subsample grid.
    fn coverage(&self, i: usize, j: usize) -> f64 {
        let mut hits = 0;
        for a in 0..SUPERSAMPLE {
            for b in 0..SUPERSAMPLE {
                let y = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64;
                let x = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64;
                hits += self.contains(y, x) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// A few random low-frequency cosines.
fn smooth_noise(rng: &mut SeededRng, n: usize, terms: usize, max_cycles: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..terms)
        .map(|_| {
            let cycles = rng.uniform_range(0.5, max_cycles);
            let dir = rng.uniform_range(0.0, 2.0 * PI);
            (cycles * dir.cos(), cycles * dir.sin(), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.5, 1.0))
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (y, x) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            out[i * n + j] = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (2.0 * PI * (fy * y + fx * x) + ph).cos())
                .sum();
        }
    }
    out
}

fn render_scene(rng: &mut SeededRng, n: usize, texture: Texture) -> Vec<f64> {
    let base = rng.uniform_range(0.2, 0.8);
    let mut img = vec![base; n * n];
    if matches!(texture, Texture::Gradients | Texture::Mixed) {
        let waves = smooth_noise(rng, n, 3, 4.0);
        let amp = rng.uniform_range(0.1, 0.25);
        for (v, w) in img.iter_mut().zip(waves) {
            *v += amp * w / 2.25;
        }
    }
    if matches!(texture, Texture::Shapes | Texture::Mixed) {
        let count = rng.below(5, 10);
        for _ in 0..count {
            let shape = Shape::random(rng, n as f64);
            let level = rng.uniform();
            for i in 0..n {
                for j in 0..n {
                    let c = shape.coverage(i, j);
                    if c > 0.0 {
                        let v = &mut img[i * n + j];
                        *v = (1.0 - c) * *v + c * level;
                    }
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Separable Gaussian blur, taps truncated at 3σ and renormalized, edges
/// replicated. Rows are filtered first, then columns.
pub fn gaussian_blur(img: &PlanarImage<f64>, sigma: f64) -> PlanarImage<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let (h, w, c) = (img.height as isize, img.width as isize, img.channels);
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, k) in taps.iter().zip(-r..=r) {
                        let (si, sj) = if along_rows { (i, (j + k).clamp(0, w - 1)) } else { ((i + k).clamp(0, h - 1), j) };
                        acc += t * src[((si * w + sj) as usize) * c + ch];
                    }
                    out[((i * w + j) as usize) * c + ch] = acc;
                }
            }
        }
        out
    };
    let rows = pass(&img.values, true);
    PlanarImage { values: pass(&rows, false), ..img.clone() }
}

/// Source A keeps the scene where `mask = 1` and the blurred scene elsewhere;
/// source B is the complement.
pub fn compose_pair(ground_truth: PlanarImage<f64>, mask: PlanarImage<f64>, blur_sigma: f64) -> FusionPair {
    let blurred = gaussian_blur(&ground_truth, blur_sigma);
    let pick = |sharp_where_mask: bool| {
        let values = ground_truth
            .values
            .iter()
            .zip(&blurred.values)
            .zip(&mask.values)
            .map(|((&g, &b), &m)| if (m > 0.5) == sharp_where_mask { g } else { b })
            .collect();
        PlanarImage { values, ..ground_truth.clone() }
    };
    let (source_a, source_b) = (pick(true), pick(false));
    FusionPair { ground_truth, source_a, source_b, mask }
}

pub fn gen_pair(seed: u64, size: usize, texture: Texture, blur_sigma: f64) -> Result<FusionPair> {
    if size == 0 || size % 2 != 0 {
        return arg_err(format!("image size {size} must be even and positive"));
    }
    if !(blur_sigma > 0.0 && blur_sigma.is_finite()) {
        return arg_err(format!("blur sigma {blur_sigma} must be positive"));
    }
    let mut rng = SeededRng::new(seed);
    let scene = render_scene(&mut rng, size, texture);
    let noise = smooth_noise(&mut rng, size, 3, 1.5);
    let mask = noise.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
    let gt = PlanarImage::new(size, size, 1, scene)?;
    let mask = PlanarImage::new(size, size, 1, mask)?;
    Ok(compose_pair(gt, mask, blur_sigma))
}
