//! Cyclic rotation groups and their actions on planar images and lifted
//! feature fields.
//!
//! Images are stored row-major as `[height][width][channel]`; feature fields as
//! `[height][width][group][channel]`. Rotations act about the grid center
//! `((H-1)/2, (W-1)/2)` in index coordinates, so quarter turns of even grids
//! are exact permutations. A quarter turn maps `out[i][j] = in[j][W-1-i]`
//! (counter-clockwise on screen).

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// The cyclic subgroup of SO(2) of order `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationGroup {
    m: usize,
    angles: Vec<f64>,
    matrices: Vec<[[f64; 2]; 2]>,
}

impl RotationGroup {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return arg_err("group order must be positive");
        }
        let angles: Vec<f64> = (0..m).map(|k| 2.0 * PI * k as f64 / m as f64).collect();
        let matrices = (0..m).map(|k| Self::matrix_for(k, m)).collect();
        Ok(Self { m, angles, matrices })
    }

    /// `[[cos θ, -sin θ], [sin θ, cos θ]]`, with exact entries at multiples of π/2.
    fn matrix_for(k: usize, m: usize) -> [[f64; 2]; 2] {
        let (c, s) = match Self::quarter_turns_of(k, m) {
            Some(0) => (1.0, 0.0),
            Some(1) => (0.0, 1.0),
            Some(2) => (-1.0, 0.0),
            Some(3) => (0.0, -1.0),
            _ => {
                let t = 2.0 * PI * k as f64 / m as f64;
                (t.cos(), t.sin())
            }
        };
        [[c, -s], [s, c]]
    }

    fn quarter_turns_of(k: usize, m: usize) -> Option<usize> {
        let k = k % m;
        // θ_k = 2πk/m is a multiple of π/2 iff 4k is divisible by m.
        if (4 * k) % m == 0 {
            Some(4 * k / m)
        } else {
            None
        }
    }

    pub fn order(&self) -> usize {
        self.m
    }

    pub fn angle(&self, k: usize) -> f64 {
        self.angles[k % self.m]
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn matrix(&self, k: usize) -> [[f64; 2]; 2] {
        self.matrices[k % self.m]
    }

    pub fn matrices(&self) -> &[[[f64; 2]; 2]] {
        &self.matrices
    }

    /// Number of quarter turns if `θ_k` is a multiple of π/2.
    pub fn quarter_turns(&self, k: usize) -> Option<usize> {
        Self::quarter_turns_of(k, self.m)
    }

    pub fn compose(&self, j: usize, k: usize) -> usize {
        (j + k) % self.m
    }

    pub fn inverse(&self, k: usize) -> usize {
        (self.m - k % self.m) % self.m
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.m {
            return arg_err(format!("group index {k} out of range for order {}", self.m));
        }
        Ok(())
    }
}

/// A grid of intensities, `[height][width][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> PlanarImage<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return shape_err("image dimensions must be positive");
        }
        if values.len() != height * width * channels {
            return shape_err(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, values: vec![T::zero(); height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    values.push(f(i, j, c));
                }
            }
        }
        Self { height, width, channels, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        self.values[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        self.values[(i * self.width + j) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Single channel `c` as a one-channel image.
    pub fn channel(&self, c: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |i, j, _| self.at(i, j, c))
    }

    /// Stack images along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.height != first.height || p.width != first.width) {
            return shape_err("concatenated images must share spatial dimensions");
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut values = Vec::with_capacity(first.height * first.width * channels);
        for px in 0..first.height * first.width {
            for p in parts {
                values.extend_from_slice(&p.values[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Ok(Self { height: first.height, width: first.width, channels, values })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> PlanarImage<U> {
        PlanarImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Group-lifted features `F(x, R)`, `[height][width][group][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField<T> {
    pub height: usize,
    pub width: usize,
    pub group_order: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureField<T> {
    pub fn new(
        height: usize,
        width: usize,
        group_order: usize,
        channels: usize,
        values: Vec<T>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || group_order == 0 || channels == 0 {
            return shape_err("field dimensions must be positive");
        }
        if values.len() != height * width * group_order * channels {
            return shape_err(format!(
                "{height}x{width}x{group_order}x{channels} field needs {} values, got {}",
                height * width * group_order * channels,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field contains non-finite values".into()));
        }
        Ok(Self { height, width, group_order, channels, values })
    }

    pub fn zeros(height: usize, width: usize, group_order: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            group_order,
            channels,
            values: vec![T::zero(); height * width * group_order * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        group_order: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * group_order * channels);
        for i in 0..height {
            for j in 0..width {
                for g in 0..group_order {
                    for c in 0..channels {
                        values.push(f(i, j, g, c));
                    }
                }
            }
        }
        Self { height, width, group_order, channels, values }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, g: usize, c: usize) -> usize {
        ((i * self.width + j) * self.group_order + g) * self.channels + c
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, g: usize, c: usize) -> T {
        self.values[self.index(i, j, g, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, g: usize, c: usize, v: T) {
        let idx = self.index(i, j, g, c);
        self.values[idx] = v;
    }

    /// Channels per pixel once the group axis is unrolled (`m·C`).
    pub fn unrolled_channels(&self) -> usize {
        self.group_order * self.channels
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.group_order == other.group_order
            && self.channels == other.channels
    }

    /// Average over the group axis, giving a rotation-invariant planar map.
    pub fn mean_over_group(&self) -> PlanarImage<T> {
        let m = T::of(self.group_order as f64);
        PlanarImage::from_fn(self.height, self.width, self.channels, |i, j, c| {
            let mut s = T::zero();
            for g in 0..self.group_order {
                s += self.at(i, j, g, c);
            }
            s / m
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureField<U> {
        FeatureField {
            height: self.height,
            width: self.width,
            group_order: self.group_order,
            channels: self.channels,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Quarter-turn permutation of a `[h][w][depth]` array; returns the new `(h, w)`.
pub(crate) fn rotate_quarter<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    depth: usize,
    quarters: usize,
) -> (Vec<T>, usize, usize) {
    let q = quarters % 4;
    let (oh, ow) = if q % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(src.len());
    for i in 0..oh {
        for j in 0..ow {
            let (si, sj) = match q {
                0 => (i, j),
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            let base = (si * w + sj) * depth;
            out.extend_from_slice(&src[base..base + depth]);
        }
    }
    (out, oh, ow)
}

/// Bilinear rotation of a square `[n][n][depth]` array by `theta` about its
/// center, zero outside the source support.
pub(crate) fn rotate_bilinear<T: Scalar>(src: &[T], n: usize, depth: usize, theta: f64) -> Vec<T> {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let mut out = vec![T::zero(); src.len()];
    let fetch = |r: isize, col: isize, d: usize| -> f64 {
        if r < 0 || col < 0 || r >= n as isize || col >= n as isize {
            0.0
        } else {
            src[(r as usize * n + col as usize) * depth + d].f64()
        }
    };
    for i in 0..n {
        for j in 0..n {
            let u = i as f64 - c;
            let v = j as f64 - c;
            let sr = c + u * co + v * s;
            let sc = c - u * s + v * co;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = sr - r0;
            let fc = sc - c0;
            let (r0, c0) = (r0 as isize, c0 as isize);
            for d in 0..depth {
                let val = (1.0 - fr) * (1.0 - fc) * fetch(r0, c0, d)
                    + (1.0 - fr) * fc * fetch(r0, c0 + 1, d)
                    + fr * (1.0 - fc) * fetch(r0 + 1, c0, d)
                    + fr * fc * fetch(r0 + 1, c0 + 1, d);
                out[(i * n + j) * depth + d] = T::of(val);
            }
        }
    }
    out
}

/// The input action `π^I_{R_k}`.
pub fn rotate_image<T: Scalar>(
    img: &PlanarImage<T>,
    group: &RotationGroup,
    k: usize,
) -> Result<PlanarImage<T>> {
    group.check_index(k)?;
    match group.quarter_turns(k) {
        Some(q) => {
            let (values, h, w) = rotate_quarter(&img.values, img.height, img.width, img.channels, q);
            Ok(PlanarImage { height: h, width: w, channels: img.channels, values })
        }
        None => {
            if img.height != img.width {
                return arg_err(format!(
                    "rotation by {:.4} rad needs a square image, got {}x{}",
                    group.angle(k),
                    img.height,
                    img.width
                ));
            }
            rotate_image_arbitrary(img, group.angle(k))
        }
    }
}

/// Bilinear rotation by any angle; zero outside the original support.
pub fn rotate_image_arbitrary<T: Scalar>(img: &PlanarImage<T>, theta: f64) -> Result<PlanarImage<T>> {
    if img.height != img.width {
        return arg_err(format!(
            "arbitrary rotation needs a square image, got {}x{}",
            img.height, img.width
        ));
    }
    let values = rotate_bilinear(&img.values, img.height, img.channels, theta);
    Ok(PlanarImage { values, ..img.clone() })
}

/// The feature action `π^F_{R_k}` of the regular representation: rotate every
/// spatial slice by `θ_k` and shift the group axis so that
/// `out(R_k x, g) = in(x, g - k)`.
pub fn rotate_field<T: Scalar>(
    f: &FeatureField<T>,
    group: &RotationGroup,
    k: usize,
) -> Result<FeatureField<T>> {
    if f.group_order != group.order() {
        return Err(Error::GroupOrderMismatch { field: f.group_order, group: group.order() });
    }
    group.check_index(k)?;
    let m = f.group_order;
    let c = f.channels;
    // Cyclic shift first; it commutes with the spatial part.
    let mut shifted = vec![T::zero(); f.values.len()];
    for px in 0..f.height * f.width {
        for g in 0..m {
            let src = (g + m - k) % m;
            let d = (px * m + g) * c;
            let s = (px * m + src) * c;
            shifted[d..d + c].copy_from_slice(&f.values[s..s + c]);
        }
    }
    let (values, h, w) = match group.quarter_turns(k) {
        Some(q) => rotate_quarter(&shifted, f.height, f.width, m * c, q),
        None => {
            if f.height != f.width {
                return arg_err(format!(
                    "rotation by {:.4} rad needs a square field, got {}x{}",
                    group.angle(k),
                    f.height,
                    f.width
                ));
            }
            (rotate_bilinear(&shifted, f.height, m * c, group.angle(k)), f.height, f.width)
        }
    };
    Ok(FeatureField { height: h, width: w, group_order: m, channels: c, values })
}

/// True when `theta` is (numerically) a multiple of π/2.
pub fn is_quarter_angle(theta: f64) -> bool {
    let q = theta / FRAC_PI_2;
    (q - q.round()).abs() < 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn img(h: usize, w: usize, c: usize, v: &[f64]) -> PlanarImage<f64> {
        PlanarImage::new(h, w, c, v.to_vec()).unwrap()
    }

    fn random_field(seed: u64, n: usize, m: usize, c: usize) -> FeatureField<f64> {
        let mut r = SeededRng::new(seed);
        FeatureField::from_fn(n, n, m, c, |_, _, _, _| r.normal())
    }

    #[test]
    fn group_matrices_follow_the_cyclic_law() {
        for m in [1, 2, 3, 4, 6, 8] {
            let g = RotationGroup::new(m).unwrap();
            assert_eq!(g.matrix(0), [[1.0, 0.0], [0.0, 1.0]]);
            for j in 0..m {
                for k in 0..m {
                    let (a, b) = (g.matrix(j), g.matrix(k));
                    let want = g.matrix((j + k) % m);
                    for r in 0..2 {
                        for c in 0..2 {
                            let p = a[r][0] * b[0][c] + a[r][1] * b[1][c];
                            assert!((p - want[r][c]).abs() < 1e-12);
                        }
                    }
                }
            }
            for k in 0..m {
                let t = g.angle(k);
                let mk = g.matrix(k);
                assert!((mk[0][0] - t.cos()).abs() < 1e-15 && (mk[1][0] - t.sin()).abs() < 1e-15);
                assert!((mk[0][1] + t.sin()).abs() < 1e-15);
            }
        }
        assert!(RotationGroup::new(0).is_err());
    }

    #[test]
    fn quarter_turn_of_2x2() {
        let g = RotationGroup::new(4).unwrap();
        let a = img(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        let r = rotate_image(&a, &g, 1).unwrap();
        assert_eq!(r.values, vec![2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate_image(&a, &g, 0).unwrap(), a);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let g = RotationGroup::new(4).unwrap();
        let mut r = SeededRng::new(5);
        let a = PlanarImage::from_fn(6, 4, 2, |_, _, _| r.normal());
        let mut b = a.clone();
        for _ in 0..4 {
            b = rotate_image(&b, &g, 1).unwrap();
        }
        assert_eq!(a, b);
        // non-square quarter turns swap the dimensions
        let q = rotate_image(&a, &g, 1).unwrap();
        assert_eq!((q.height, q.width), (4, 6));
    }

    #[test]
    fn non_square_off_axis_rotation_is_rejected() {
        let g = RotationGroup::new(8).unwrap();
        let a = PlanarImage::<f64>::zeros(4, 6, 1);
        assert!(rotate_image(&a, &g, 1).is_err());
        assert!(rotate_image(&a, &g, 2).is_ok());
        assert!(rotate_image(&a, &g, 8).is_err());
    }

    #[test]
    fn field_rotation_shifts_group_axis() {
        let g = RotationGroup::new(4).unwrap();
        let vals = [1.0, 2.0, 3.0, 4.0];
        let f = FeatureField::from_fn(4, 4, 4, 1, |_, _, k, _| vals[k]);
        let r = rotate_field(&f, &g, 1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let got: Vec<f64> = (0..4).map(|k| r.at(i, j, k, 0)).collect();
                assert_eq!(got, vec![4.0, 1.0, 2.0, 3.0]);
            }
        }
        assert_eq!(rotate_field(&f, &g, 0).unwrap(), f);
    }

    #[test]
    fn field_rotation_inverse_and_group_law_m4() {
        let g = RotationGroup::new(4).unwrap();
        let f = random_field(11, 6, 4, 3);
        let back = rotate_field(&rotate_field(&f, &g, 1).unwrap(), &g, 3).unwrap();
        assert_eq!(back, f);
        for j in 0..4 {
            for k in 0..4 {
                let two = rotate_field(&rotate_field(&f, &g, k).unwrap(), &g, j).unwrap();
                let one = rotate_field(&f, &g, (j + k) % 4).unwrap();
                assert_eq!(two, one);
            }
        }
    }

    #[test]
    fn field_rotation_definition_matches_pointwise_formula() {
        let g = RotationGroup::new(4).unwrap();
        let f = random_field(2, 4, 4, 2);
        let r = rotate_field(&f, &g, 1).unwrap();
        // out[i][j] = shifted-in[j][W-1-i]
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    for c in 0..2 {
                        assert_eq!(r.at(i, j, k, c), f.at(j, 3 - i, (k + 3) % 4, c));
                    }
                }
            }
        }
    }

    #[test]
    fn quarter_rotation_permutes_values() {
        let g = RotationGroup::new(8).unwrap();
        let f = random_field(3, 8, 8, 2);
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        for k in [0, 2, 4, 6] {
            let r = rotate_field(&f, &g, k).unwrap();
            assert_eq!(sorted(&f.values), sorted(&r.values));
        }
    }

    #[test]
    fn group_order_mismatch_rejected() {
        let g = RotationGroup::new(4).unwrap();
        let f = FeatureField::<f64>::zeros(4, 4, 8, 1);
        assert!(matches!(rotate_field(&f, &g, 1), Err(Error::GroupOrderMismatch { .. })));
    }

    #[test]
    fn arbitrary_rotation_agrees_with_quarter_turns() {
        let g = RotationGroup::new(4).unwrap();
        let mut r = SeededRng::new(9);
        let a = PlanarImage::from_fn(10, 10, 2, |_, _, _| r.normal());
        for k in 0..4 {
            let exact = rotate_image(&a, &g, k).unwrap();
            let bil = rotate_image_arbitrary(&a, g.angle(k)).unwrap();
            assert!(exact.max_abs_diff(&bil) < 1e-6, "k={k}");
        }
        assert_eq!(rotate_image_arbitrary(&a, 0.0).unwrap(), a);
    }

    #[test]
    fn arbitrary_rotation_of_constant_keeps_interior() {
        let a = PlanarImage::from_fn(16, 16, 1, |_, _, _| 0.7_f64);
        let r = rotate_image_arbitrary(&a, 0.3).unwrap();
        let c = 7.5;
        for i in 0..16 {
            for j in 0..16 {
                let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                if d < 6.5 {
                    assert!((r.at(i, j, 0) - 0.7).abs() < 1e-12);
                }
            }
        }
        // corners fall outside the rotated support
        assert!(r.at(0, 0, 0) < 0.7);
    }

    #[test]
    fn off_axis_group_law_holds_to_interpolation_order() {
        // Composition of two 45° bilinear rotations equals the 90° permutation
        // up to interpolation error on a smooth field.
        let g = RotationGroup::new(8).unwrap();
        let n = 32;
        let f = FeatureField::from_fn(n, n, 8, 1, |i, j, k, _| {
            let x = i as f64 / n as f64;
            let y = j as f64 / n as f64;
            (2.0 * x + 0.3 * k as f64).sin() * (1.5 * y).cos()
        });
        let two = rotate_field(&rotate_field(&f, &g, 1).unwrap(), &g, 1).unwrap();
        let one = rotate_field(&f, &g, 2).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() < c - 2.0 {
                    for k in 0..8 {
                        worst = worst.max((two.at(i, j, k, 0) - one.at(i, j, k, 0)).abs());
                    }
                }
            }
        }
        assert!(worst < 2e-3, "{worst}");
    }
}
