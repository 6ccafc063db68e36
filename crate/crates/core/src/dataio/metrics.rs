//! Fusion quality metrics: MS-SSIM, normalized mutual information (QMI) and
//! edge-preservation (Qabf).

use crate::error::{shape_err, Result};
use crate::group_action::PlanarImage;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Smallest window allowed at the coarsest scale.
pub const MIN_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same(a: &PlanarImage<f64>, b: &PlanarImage<f64>) -> Result<()> {
    if !a.same_shape(b) || a.channels != 1 {
        return shape_err(format!(
            "metric inputs must be single-channel and equal in size ({}x{}x{} vs {}x{}x{})",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        ));
    }
    Ok(())
}

/// Smallest image side admitted at `scales` scales.
pub fn ms_ssim_min_size(scales: usize) -> usize {
    MIN_WINDOW << (scales.max(1) - 1)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| win[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| win[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let size = SSIM_WINDOW.min(if h.min(w) % 2 == 1 { h.min(w) } else { h.min(w) - 1 });
    let win = gaussian_window(size);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, oh, ow) = filter_valid(x, h, w, &win);
    let (my, _, _) = filter_valid(y, h, w, &win);
    let (sxx, _, _) = filter_valid(&prod(x, x), h, w, &win);
    let (syy, _, _) = filter_valid(&prod(y, y), h, w, &win);
    let (sxy, _, _) = filter_valid(&prod(x, y), h, w, &win);
    let n = (oh * ow) as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        l_sum += (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        cs_sum += (2.0 * cxy + C2) / (vx + vy + C2);
    }
    (l_sum / n, cs_sum / n)
}

fn downsample2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let s = x[2 * i * w + 2 * j] + x[2 * i * w + 2 * j + 1] + x[(2 * i + 1) * w + 2 * j] + x[(2 * i + 1) * w + 2 * j + 1];
            out[i * ow + j] = 0.25 * s;
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM with an 11-tap Gaussian window (σ = 1.5, shrunk to the
/// largest odd size that fits at coarse scales), dynamic range 1, and the
/// standard scale weights renormalized over the scales used. Negative
/// contrast-structure means are clamped to zero.
pub fn ms_ssim(fused: &PlanarImage<f64>, reference: &PlanarImage<f64>, scales: usize) -> Result<f64> {
    check_same(fused, reference)?;
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return shape_err(format!("scales must be in 1..={}", MS_SSIM_WEIGHTS.len()));
    }
    let min = ms_ssim_min_size(scales);
    if fused.height.min(fused.width) < min {
        return shape_err(format!(
            "MS-SSIM over {scales} scales needs images of at least {min}x{min}, got {}x{}",
            fused.height, fused.width
        ));
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (fused.values.clone(), reference.values.clone());
    let (mut h, mut w) = (fused.height, fused.width);
    let mut score = 1.0;
    for s in 0..scales {
        let (l, cs) = ssim_terms(&x, &y, h, w);
        let weight = MS_SSIM_WEIGHTS[s] / wsum;
        score *= cs.max(0.0).powf(weight);
        if s + 1 == scales {
            score *= l.max(0.0).powf(weight);
        } else {
            let (nx, nh, nw) = downsample2(&x, h, w);
            let (ny, _, _) = downsample2(&y, h, w);
            (x, y, h, w) = (nx, ny, nh, nw);
        }
    }
    Ok(score)
}

/// Mean of MS-SSIM against each source.
pub fn fusion_ms_ssim(fused: &PlanarImage<f64>, ia: &PlanarImage<f64>, ib: &PlanarImage<f64>) -> Result<f64> {
    Ok(0.5 * (ms_ssim(fused, ia, 3)? + ms_ssim(fused, ib, 3)?))
}

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn entropy(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum()
}

/// `MI(X, F) / (H(X) + H(F))`, or 0 with a warning when both are constant.
fn normalized_mi(x: &PlanarImage<f64>, f: &PlanarImage<f64>, bins: usize) -> f64 {
    let mut hx = vec![0.0; bins];
    let mut hf = vec![0.0; bins];
    let mut joint = vec![0.0; bins * bins];
    for (&a, &b) in x.values.iter().zip(&f.values) {
        let (i, j) = (bin(a, bins), bin(b, bins));
        hx[i] += 1.0;
        hf[j] += 1.0;
        joint[i * bins + j] += 1.0;
    }
    let n = x.values.len() as f64;
    let (ex, ef) = (entropy(&hx, n), entropy(&hf, n));
    if ex + ef <= 0.0 {
        log::warn!("QMI term undefined for constant images; using 0");
        return 0.0;
    }
    let mi = ex + ef - entropy(&joint, n);
    mi / (ex + ef)
}

/// `2·[MI(A,F)/(H(A)+H(F)) + MI(B,F)/(H(B)+H(F))]` from `bins`-bin
/// histograms on `[0, 1]`; ranges over `[0, 2]`.
pub fn qmi(fused: &PlanarImage<f64>, ia: &PlanarImage<f64>, ib: &PlanarImage<f64>, bins: usize) -> Result<f64> {
    check_same(fused, ia)?;
    check_same(fused, ib)?;
    if bins < 2 {
        return shape_err("QMI needs at least two bins");
    }
    Ok(2.0 * (normalized_mi(ia, fused, bins) + normalized_mi(ib, fused, bins)))
}

/// Published Γ values are the sigmoids' values at 1, rounded to four places;
/// the sigmoids are divided by their exact values at 1 so that perfect edge
/// transfer scores exactly 1.
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = 15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = 22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Sobel magnitude and orientation (`atan(s_y/s_x)`, in `(−π/2, π/2]`),
/// replicate padding.
fn sobel(img: &PlanarImage<f64>) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height as isize, img.width as isize);
    let at = |i: isize, j: isize| img.values[(i.clamp(0, h - 1) * w + j.clamp(0, w - 1)) as usize];
    let mut mag = Vec::with_capacity((h * w) as usize);
    let mut ang = Vec::with_capacity((h * w) as usize);
    for i in 0..h {
        for j in 0..w {
            let sx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let sy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            mag.push((sx * sx + sy * sy).sqrt());
            ang.push(if sx == 0.0 {
                if sy == 0.0 { 0.0 } else { std::f64::consts::FRAC_PI_2 }
            } else {
                (sy / sx).atan()
            });
        }
    }
    (mag, ang)
}

fn sigmoid(x: f64, kappa: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + (-kappa * (x - sigma)).exp())
}

fn normalized_sigmoid(x: f64, kappa: f64, sigma: f64) -> f64 {
    sigmoid(x, kappa, sigma) / sigmoid(1.0, kappa, sigma)
}

/// Edge-preservation value of one source pixel in the fused image.
pub fn edge_preservation(g_src: f64, a_src: f64, g_f: f64, a_f: f64) -> f64 {
    let g = if g_src == g_f {
        1.0
    } else if g_src > g_f {
        g_f / g_src
    } else {
        g_src / g_f
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let a = ((a_src - a_f).abs() - half_pi).abs() / half_pi;
    normalized_sigmoid(g, QABF_KAPPA_G, QABF_SIGMA_G) * normalized_sigmoid(a, QABF_KAPPA_A, QABF_SIGMA_A)
}

/// Gradient-weighted edge preservation from both sources, in `[0, 1]`.
pub fn qabf(fused: &PlanarImage<f64>, ia: &PlanarImage<f64>, ib: &PlanarImage<f64>) -> Result<f64> {
    check_same(fused, ia)?;
    check_same(fused, ib)?;
    let (gf, af) = sobel(fused);
    let (ga, aa) = sobel(ia);
    let (gb, ab) = sobel(ib);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        num += edge_preservation(ga[i], aa[i], gf[i], af[i]) * ga[i]
            + edge_preservation(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
