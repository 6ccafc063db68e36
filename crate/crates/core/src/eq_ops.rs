//! Rotation-equivariant operators on lifted feature fields.
//!
//! Equivariant convolutions store one base filter per (out, in[, group]) slot
//! and realize `m` rotated copies of it. The realized stack is laid out as a
//! dense weight over unrolled channels, so the convolution itself is an
//! ordinary same-padded correlation over `m·C` channels (im2col + GEMM).
//! For `θ_j` a multiple of π/2 the tap rotation is an exact permutation; other
//! angles sample a continuous filter fitted to the base taps in a
//! radial-Gaussian × angular-harmonic basis.
//!
//! Each operator also exposes its raw forward/adjoint kernels on `[H][W][D]`
//! buffers; the autodiff tape is built from those.

use nalgebra::DMatrix;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::group_action::{rotate_quarter, FeatureField, PlanarImage, RotationGroup};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// Planar input → lifted field.
    Lifting,
    /// Lifted field → lifted field.
    Group,
}

/// Rotation of a `p×p` tap grid: for every destination tap, the source taps
/// and weights it is interpolated from.
#[derive(Clone, Debug, PartialEq)]
pub struct TapRotation {
    pub size: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl TapRotation {
    fn permutation(size: usize, quarters: usize) -> Self {
        let idx: Vec<usize> = (0..size * size).collect();
        let (rot, _, _) = rotate_quarter(&idx, size, size, 1, quarters);
        Self { size, entries: rot.into_iter().map(|s| vec![(s, 1.0)]).collect() }
    }

    /// Tap rotation by `theta` through a fitted continuous filter.
    fn fitted(size: usize, theta: f64, max_freq: usize) -> Self {
        let r = (size / 2) as isize;
        let points: Vec<(f64, f64)> = (0..size * size)
            .map(|t| (((t / size) as isize - r) as f64, ((t % size) as isize - r) as f64))
            .collect();
        let basis = HarmonicBasis::for_grid(&points, max_freq);
        let a0 = basis.design(&points);
        let (s, c) = theta.sin_cos();
        // Sample at R_θ⁻¹ y, the same convention as image rotation.
        let rotated: Vec<(f64, f64)> =
            points.iter().map(|&(u, v)| (u * c + v * s, -u * s + v * c)).collect();
        let aj = basis.design(&rotated);
        let pinv = a0
            .clone()
            .pseudo_inverse(1e-10)
            .expect("pseudo-inverse of a finite design matrix");
        let m = aj * pinv;
        let entries = (0..size * size)
            .map(|d| {
                (0..size * size)
                    .filter_map(|s| {
                        let w = m[(d, s)];
                        (w.abs() > 1e-14).then_some((s, w))
                    })
                    .collect()
            })
            .collect();
        Self { size, entries }
    }

    pub fn apply<T: Scalar>(&self, taps: &[T]) -> Vec<T> {
        self.entries
            .iter()
            .map(|row| {
                let mut acc = T::zero();
                for &(s, w) in row {
                    acc += T::of(w) * taps[s];
                }
                acc
            })
            .collect()
    }

    pub fn as_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.size * self.size;
        self.entries
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; n];
                for &(s, w) in row {
                    dense[s] += w;
                }
                dense
            })
            .collect()
    }
}

/// Radial Gaussians centred on every distinct tap radius (width one grid
/// step) times angular harmonics `cos nα, sin nα`.
struct HarmonicBasis {
    radii: Vec<f64>,
    max_freq: usize,
}

impl HarmonicBasis {
    fn for_grid(points: &[(f64, f64)], max_freq: usize) -> Self {
        let mut radii: Vec<f64> = Vec::new();
        for &(u, v) in points {
            let rho = (u * u + v * v).sqrt();
            if !radii.iter().any(|r| (r - rho).abs() < 1e-9) {
                radii.push(rho);
            }
        }
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Self { radii, max_freq }
    }

    fn design(&self, points: &[(f64, f64)]) -> DMatrix<f64> {
        let mut cols: Vec<Box<dyn Fn(f64, f64) -> f64 + '_>> = Vec::new();
        for &center in &self.radii {
            let radial = move |rho: f64| (-(rho - center).powi(2) / 2.0).exp();
            cols.push(Box::new(move |rho, _| radial(rho)));
            if center > 0.0 {
                for n in 1..=self.max_freq {
                    let nf = n as f64;
                    cols.push(Box::new(move |rho, a| {
                        if rho < 1e-12 { 0.0 } else { radial(rho) * (nf * a).cos() }
                    }));
                    cols.push(Box::new(move |rho, a| {
                        if rho < 1e-12 { 0.0 } else { radial(rho) * (nf * a).sin() }
                    }));
                }
            }
        }
        DMatrix::from_fn(points.len(), cols.len(), |r, c| {
            let (u, v) = points[r];
            cols[c]((u * u + v * v).sqrt(), u.atan2(v))
        })
    }
}

/// Highest angular harmonic used for off-axis tap rotation. Square-grid rings
/// hold four equally spaced taps; harmonics above two alias on them and stop
/// rotations from preserving the filter's tap sum and first moments.
pub fn max_harmonic(m: usize) -> usize {
    (m / 2).min(2)
}

/// Linear map from base weights to the dense unrolled weight of one
/// equivariant convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelRealization {
    pub kind: KernelKind,
    pub size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub m: usize,
    pub rotations: Vec<TapRotation>,
}

impl KernelRealization {
    pub fn new(
        kind: KernelKind,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        group: &RotationGroup,
    ) -> Result<Self> {
        if size % 2 == 0 {
            return arg_err(format!("kernel size {size} is even; equivariant kernels need a center tap"));
        }
        if in_channels == 0 || out_channels == 0 {
            return arg_err("kernel channel counts must be positive");
        }
        let m = group.order();
        let rotations = (0..m)
            .map(|j| match group.quarter_turns(j) {
                Some(q) => TapRotation::permutation(size, q),
                None => TapRotation::fitted(size, group.angle(j), max_harmonic(m)),
            })
            .collect();
        Ok(Self { kind, size, in_channels, out_channels, m, rotations })
    }

    fn group_slots(&self) -> usize {
        match self.kind {
            KernelKind::Lifting => 1,
            KernelKind::Group => self.m,
        }
    }

    /// Learnable parameter count: `out·in·p²` or `out·in·m·p²`.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.group_slots() * self.size * self.size
    }

    /// Parameters of an unconstrained convolution between the same unrolled
    /// channel counts.
    pub fn regular_param_count(&self) -> usize {
        self.dense_in() * self.dense_out() * self.size * self.size
    }

    /// Unrolled input channels of the dense weight.
    pub fn dense_in(&self) -> usize {
        self.in_channels * self.group_slots()
    }

    pub fn dense_out(&self) -> usize {
        self.out_channels * self.m
    }

    pub fn dense_len(&self) -> usize {
        self.size * self.size * self.dense_in() * self.dense_out()
    }

    #[inline]
    fn base_index(&self, o: usize, i: usize, g: usize, tap: usize) -> usize {
        let p2 = self.size * self.size;
        ((o * self.in_channels + i) * self.group_slots() + g) * p2 + tap
    }

    /// Realized filter `j` in base layout `out × in × [m] × p × p`.
    pub fn realized_stack<T: Scalar>(&self, base: &[T], j: usize) -> Vec<T> {
        let p2 = self.size * self.size;
        let slots = self.group_slots();
        let mut out = vec![T::zero(); base.len()];
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for g in 0..slots {
                    let src_g = if slots == 1 { 0 } else { (g + self.m - j) % self.m };
                    let s = self.base_index(o, i, src_g, 0);
                    let rotated = self.rotations[j].apply(&base[s..s + p2]);
                    let d = self.base_index(o, i, g, 0);
                    out[d..d + p2].copy_from_slice(&rotated);
                }
            }
        }
        out
    }

    /// Dense weight `[tap][in_unrolled][out_unrolled]`.
    pub fn realize<T: Scalar>(&self, base: &[T]) -> Vec<T> {
        assert_eq!(base.len(), self.param_count());
        let p2 = self.size * self.size;
        let (din, dout) = (self.dense_in(), self.dense_out());
        let slots = self.group_slots();
        let mut dense = vec![T::zero(); self.dense_len()];
        for j in 0..self.m {
            let rot = &self.rotations[j];
            for o in 0..self.out_channels {
                let col = j * self.out_channels + o;
                for i in 0..self.in_channels {
                    for g in 0..slots {
                        let src_g = if slots == 1 { 0 } else { (g + self.m - j) % self.m };
                        let row_in = g * self.in_channels + i;
                        let s = self.base_index(o, i, src_g, 0);
                        for (tap, entries) in rot.entries.iter().enumerate() {
                            let mut acc = T::zero();
                            for &(st, w) in entries {
                                acc += T::of(w) * base[s + st];
                            }
                            dense[(tap * din + row_in) * dout + col] = acc;
                        }
                    }
                }
            }
        }
        let _ = p2;
        dense
    }

    /// Transpose of [`realize`](Self::realize): pulls a dense-weight gradient
    /// back onto the base weights.
    pub fn adjoint<T: Scalar>(&self, grad_dense: &[T]) -> Vec<T> {
        assert_eq!(grad_dense.len(), self.dense_len());
        let (din, dout) = (self.dense_in(), self.dense_out());
        let slots = self.group_slots();
        let mut grad = vec![T::zero(); self.param_count()];
        for j in 0..self.m {
            let rot = &self.rotations[j];
            for o in 0..self.out_channels {
                let col = j * self.out_channels + o;
                for i in 0..self.in_channels {
                    for g in 0..slots {
                        let src_g = if slots == 1 { 0 } else { (g + self.m - j) % self.m };
                        let row_in = g * self.in_channels + i;
                        let s = self.base_index(o, i, src_g, 0);
                        for (tap, entries) in rot.entries.iter().enumerate() {
                            let gd = grad_dense[(tap * din + row_in) * dout + col];
                            for &(st, w) in entries {
                                grad[s + st] += T::of(w) * gd;
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

/// Base weights of one equivariant convolution plus its realized dense weight.
#[derive(Clone, Debug)]
pub struct EqKernel<T> {
    pub realization: KernelRealization,
    pub base_weights: Vec<T>,
    pub realized: Vec<T>,
}

impl<T: Scalar> EqKernel<T> {
    pub fn new(
        kind: KernelKind,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        group: &RotationGroup,
        base_weights: Vec<T>,
    ) -> Result<Self> {
        let realization = KernelRealization::new(kind, size, in_channels, out_channels, group)?;
        if base_weights.len() != realization.param_count() {
            return shape_err(format!(
                "kernel needs {} base weights, got {}",
                realization.param_count(),
                base_weights.len()
            ));
        }
        let realized = realization.realize(&base_weights);
        Ok(Self { realization, base_weights, realized })
    }

    pub fn random(
        kind: KernelKind,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        group: &RotationGroup,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let probe = KernelRealization::new(kind, size, in_channels, out_channels, group)?;
        let fan_in = (probe.dense_in() * size * size) as f64;
        let std = fan_in.sqrt().recip();
        let base = (0..probe.param_count()).map(|_| T::of(rng.normal() * std)).collect();
        Self::new(kind, size, in_channels, out_channels, group, base)
    }

    pub fn kind(&self) -> KernelKind {
        self.realization.kind
    }

    pub fn param_count(&self) -> usize {
        self.realization.param_count()
    }

    /// Realized filter `j` in base layout.
    pub fn realized_stack(&self, j: usize) -> Vec<T> {
        self.realization.realized_stack(&self.base_weights, j)
    }
}

/// The `m` realized filters of `k`, each in base layout `out × in × [m] × p × p`.
pub fn build_rotated_kernels<T: Scalar>(k: &EqKernel<T>, group: &RotationGroup) -> Result<Vec<Vec<T>>> {
    if k.realization.m != group.order() {
        return Err(Error::GroupOrderMismatch { field: k.realization.m, group: group.order() });
    }
    Ok((0..group.order()).map(|j| k.realized_stack(j)).collect())
}

// ---------------------------------------------------------------------------
// Dense same-padded correlation on [H][W][C] buffers.

fn im2col<T: Scalar>(input: &[T], h: usize, w: usize, cin: usize, p: usize) -> Vec<T> {
    let r = (p / 2) as isize;
    let row = p * p * cin;
    let mut col = vec![T::zero(); h * w * row];
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * row;
            for a in 0..p {
                let si = i as isize + a as isize - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..p {
                    let sj = j as isize + b as isize - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * cin;
                    let d = dst + (a * p + b) * cin;
                    col[d..d + cin].copy_from_slice(&input[src..src + cin]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, cin: usize, p: usize) -> Vec<T> {
    let r = (p / 2) as isize;
    let row = p * p * cin;
    let mut out = vec![T::zero(); h * w * cin];
    for i in 0..h {
        for j in 0..w {
            let src = (i * w + j) * row;
            for a in 0..p {
                let si = i as isize + a as isize - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..p {
                    let sj = j as isize + b as isize - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let d = (si as usize * w + sj as usize) * cin;
                    let s = src + (a * p + b) * cin;
                    for c in 0..cin {
                        out[d + c] += col[s + c];
                    }
                }
            }
        }
    }
    out
}

/// `out[x, o] = Σ_{tap, c} in[x + tap, c] · weight[tap, c, o]`, zero padded.
pub fn conv2d_same<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    p: usize,
    cout: usize,
) -> Vec<T> {
    assert_eq!(input.len(), h * w * cin);
    assert_eq!(weight.len(), p * p * cin * cout);
    let mut out = vec![T::zero(); h * w * cout];
    if p == 1 {
        T::gemm(h * w, cin, cout, input, false, weight, false, &mut out, false);
    } else {
        let col = im2col(input, h, w, cin, p);
        T::gemm(h * w, p * p * cin, cout, &col, false, weight, false, &mut out, false);
    }
    out
}

/// Gradients of [`conv2d_same`] with respect to its input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_same_backward<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[T],
    p: usize,
    cout: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let k = p * p * cin;
    let mut grad_w = vec![T::zero(); k * cout];
    if p == 1 {
        T::gemm(cin, h * w, cout, input, true, grad_out, false, &mut grad_w, false);
        let mut grad_in = vec![T::zero(); h * w * cin];
        T::gemm(h * w, cout, cin, grad_out, false, weight, true, &mut grad_in, false);
        return (grad_in, grad_w);
    }
    let col = im2col(input, h, w, cin, p);
    T::gemm(k, h * w, cout, &col, true, grad_out, false, &mut grad_w, false);
    let mut grad_col = vec![T::zero(); h * w * k];
    T::gemm(h * w, cout, k, grad_out, false, weight, true, &mut grad_col, false);
    (col2im(&grad_col, h, w, cin, p), grad_w)
}

/// Lifting convolution: slice `j` of the output correlates the image with
/// realized filter `j`.
pub fn lift_conv<T: Scalar>(img: &PlanarImage<T>, k: &EqKernel<T>) -> Result<FeatureField<T>> {
    let r = &k.realization;
    if r.kind != KernelKind::Lifting {
        return arg_err("lift_conv needs a lifting kernel");
    }
    if r.in_channels != img.channels {
        return shape_err(format!(
            "kernel expects {} input channels, image has {}",
            r.in_channels, img.channels
        ));
    }
    let values = conv2d_same(
        &img.values,
        img.height,
        img.width,
        img.channels,
        &k.realized,
        r.size,
        r.dense_out(),
    );
    Ok(FeatureField {
        height: img.height,
        width: img.width,
        group_order: r.m,
        channels: r.out_channels,
        values,
    })
}

/// Group convolution over the lifted field; mixes spatial and group axes.
pub fn group_conv<T: Scalar>(f: &FeatureField<T>, k: &EqKernel<T>) -> Result<FeatureField<T>> {
    let r = &k.realization;
    if r.kind != KernelKind::Group {
        return arg_err("group_conv needs a group kernel");
    }
    if r.m != f.group_order {
        return Err(Error::GroupOrderMismatch { field: f.group_order, group: r.m });
    }
    if r.in_channels != f.channels {
        return shape_err(format!(
            "kernel expects {} input channels, field has {}",
            r.in_channels, f.channels
        ));
    }
    let values = conv2d_same(
        &f.values,
        f.height,
        f.width,
        f.unrolled_channels(),
        &k.realized,
        r.size,
        r.dense_out(),
    );
    Ok(FeatureField {
        height: f.height,
        width: f.width,
        group_order: r.m,
        channels: r.out_channels,
        values,
    })
}

// ---------------------------------------------------------------------------
// Pooling and upsampling on [H][W][D] buffers.

/// 2×2 stride-2 max. Returns values and the winning source index per output;
/// ties go to the first entry in row-major window order.
pub fn maxpool2<T: Scalar>(input: &[T], h: usize, w: usize, d: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * d);
    let mut arg = Vec::with_capacity(oh * ow * d);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..d {
                let cands = [
                    ((2 * i) * w + 2 * j) * d + c,
                    ((2 * i) * w + 2 * j + 1) * d + c,
                    ((2 * i + 1) * w + 2 * j) * d + c,
                    ((2 * i + 1) * w + 2 * j + 1) * d + c,
                ];
                let mut best = cands[0];
                for &idx in &cands[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(arg: &[u32], input_len: usize, grad_out: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); input_len];
    for (&a, &go) in arg.iter().zip(grad_out) {
        g[a as usize] += go;
    }
    g
}

/// Source rows and weights for output index `o` of a 2× half-pixel upsample.
#[inline]
fn upsample_taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let a = o / 2;
    if o % 2 == 0 {
        [(a.saturating_sub(1), 0.25), (a, 0.75)]
    } else {
        [(a, 0.75), ((a + 1).min(n - 1), 0.25)]
    }
}

/// Bilinear 2× upsampling with half-pixel centers and edge clamping; the
/// sampling grid is symmetric about the field center.
pub fn upsample2<T: Scalar>(input: &[T], h: usize, w: usize, d: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); oh * ow * d];
    for i in 0..oh {
        let rows = upsample_taps(i, h);
        for j in 0..ow {
            let cols = upsample_taps(j, w);
            let dst = (i * ow + j) * d;
            for &(r, wr) in &rows {
                for &(c, wc) in &cols {
                    let wgt = T::of(wr * wc);
                    let src = (r * w + c) * d;
                    for ch in 0..d {
                        out[dst + ch] += wgt * input[src + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2_adjoint<T: Scalar>(grad_out: &[T], h: usize, w: usize, d: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut g = vec![T::zero(); h * w * d];
    for i in 0..oh {
        let rows = upsample_taps(i, h);
        for j in 0..ow {
            let cols = upsample_taps(j, w);
            let src = (i * ow + j) * d;
            for &(r, wr) in &rows {
                for &(c, wc) in &cols {
                    let wgt = T::of(wr * wc);
                    let dst = (r * w + c) * d;
                    for ch in 0..d {
                        g[dst + ch] += wgt * grad_out[src + ch];
                    }
                }
            }
        }
    }
    g
}

/// Φ_MP: 2×2 max over each group slice independently.
pub fn eq_maxpool<T: Scalar>(f: &FeatureField<T>) -> Result<FeatureField<T>> {
    if f.height % 2 != 0 || f.width % 2 != 0 {
        return shape_err(format!("maxpool needs even dimensions, got {}x{}", f.height, f.width));
    }
    let (values, _) = maxpool2(&f.values, f.height, f.width, f.unrolled_channels());
    Ok(FeatureField { height: f.height / 2, width: f.width / 2, values, ..f.clone() })
}

/// Φ_BI: bilinear 2× upsampling of each group slice.
pub fn eq_upsample<T: Scalar>(f: &FeatureField<T>) -> FeatureField<T> {
    let values = upsample2(&f.values, f.height, f.width, f.unrolled_channels());
    FeatureField { height: f.height * 2, width: f.width * 2, values, ..f.clone() }
}

// ---------------------------------------------------------------------------
// Group normalization.

pub const GN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub num_groups: usize,
    pub epsilon: f64,
}

impl<T: Scalar> GroupNormParams<T> {
    pub fn identity(channels: usize, num_groups: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            num_groups,
            epsilon: GN_EPSILON,
        }
    }
}

/// Per-group mean and inverse standard deviation from a forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if channels == 0 {
        return shape_err("group norm over zero channels");
    }
    if groups == 0 || channels % groups != 0 {
        return shape_err(format!("{channels} channels do not split into {groups} groups"));
    }
    Ok(())
}

/// Normalizes `[pixels][m][C]` over (space × group axis × channels of a
/// group). Statistics accumulate in f64 in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    pixels: usize,
    m: usize,
    c: usize,
    gamma: &[T],
    beta: &[T],
    groups: usize,
    eps: f64,
) -> (Vec<T>, GroupNormStats) {
    let cg = c / groups;
    let n = (pixels * m * cg) as f64;
    let mut sum = vec![0.0f64; groups];
    let mut sq = vec![0.0f64; groups];
    for pm in 0..pixels * m {
        let row = &x[pm * c..(pm + 1) * c];
        for (ch, v) in row.iter().enumerate() {
            let v = v.f64();
            sum[ch / cg] += v;
            sq[ch / cg] += v * v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std: Vec<f64> = (0..groups)
        .map(|g| {
            let var = (sq[g] / n - mean[g] * mean[g]).max(0.0);
            (var + eps).sqrt().recip()
        })
        .collect();
    let mut out = vec![T::zero(); x.len()];
    for pm in 0..pixels * m {
        for ch in 0..c {
            let g = ch / cg;
            let xh = (x[pm * c + ch].f64() - mean[g]) * inv_std[g];
            out[pm * c + ch] = gamma[ch] * T::of(xh) + beta[ch];
        }
    }
    (out, GroupNormStats { mean, inv_std })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    pixels: usize,
    m: usize,
    c: usize,
    gamma: &[T],
    groups: usize,
    stats: &GroupNormStats,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let n = (pixels * m * cg) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut sum_dxh = vec![0.0f64; groups];
    let mut sum_dxh_xh = vec![0.0f64; groups];
    for pm in 0..pixels * m {
        for ch in 0..c {
            let g = ch / cg;
            let idx = pm * c + ch;
            let xh = (x[idx].f64() - stats.mean[g]) * stats.inv_std[g];
            let go = grad_out[idx].f64();
            dgamma[ch] += go * xh;
            dbeta[ch] += go;
            let dxh = go * gamma[ch].f64();
            sum_dxh[g] += dxh;
            sum_dxh_xh[g] += dxh * xh;
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for pm in 0..pixels * m {
        for ch in 0..c {
            let g = ch / cg;
            let idx = pm * c + ch;
            let xh = (x[idx].f64() - stats.mean[g]) * stats.inv_std[g];
            let dxh = grad_out[idx].f64() * gamma[ch].f64();
            let v = stats.inv_std[g] / n * (n * dxh - sum_dxh[g] - xh * sum_dxh_xh[g]);
            dx[idx] = T::of(v);
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::of).collect(),
        dbeta.into_iter().map(T::of).collect(),
    )
}

/// Φ_GN with γ, β shared across the group axis.
pub fn group_norm<T: Scalar>(f: &FeatureField<T>, p: &GroupNormParams<T>) -> Result<FeatureField<T>> {
    check_groups(f.channels, p.num_groups)?;
    if p.gamma.len() != f.channels || p.beta.len() != f.channels {
        return shape_err("gamma/beta length must equal the channel count");
    }
    let (values, _) = group_norm_forward(
        &f.values,
        f.height * f.width,
        f.group_order,
        f.channels,
        &p.gamma,
        &p.beta,
        p.num_groups,
        p.epsilon,
    );
    Ok(FeatureField { values, ..f.clone() })
}

// ---------------------------------------------------------------------------
// SiLU.

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn silu<T: Scalar>(f: &FeatureField<T>) -> FeatureField<T> {
    FeatureField { values: f.values.iter().map(|&v| silu_scalar(v)).collect(), ..f.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group_action::{rotate_field, rotate_image};

    fn g4() -> RotationGroup {
        RotationGroup::new(4).unwrap()
    }

    /// Integer-valued data keeps every sum exact, so equivariance is bit-exact.
    fn int_field(seed: u64, n: usize, m: usize, c: usize) -> FeatureField<f32> {
        let mut r = SeededRng::new(seed);
        FeatureField::from_fn(n, n, m, c, |_, _, _, _| r.below(0, 9) as f32 - 4.0)
    }

    fn int_kernel(seed: u64, kind: KernelKind, cin: usize, cout: usize, g: &RotationGroup) -> EqKernel<f32> {
        let probe = KernelRealization::new(kind, 3, cin, cout, g).unwrap();
        let mut r = SeededRng::new(seed);
        let base = (0..probe.param_count()).map(|_| r.below(0, 5) as f32 - 2.0).collect();
        EqKernel::new(kind, 3, cin, cout, g, base).unwrap()
    }

    /// Direct six-loop correlation used as the reference for the GEMM path.
    fn naive_conv(input: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], p: usize, cout: usize) -> Vec<f64> {
        let r = (p / 2) as isize;
        let mut out = vec![0.0; h * w * cout];
        for i in 0..h {
            for j in 0..w {
                for o in 0..cout {
                    let mut s = 0.0;
                    for a in 0..p {
                        for b in 0..p {
                            let si = i as isize + a as isize - r;
                            let sj = j as isize + b as isize - r;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += input[(si as usize * w + sj as usize) * cin + c]
                                    * wt[((a * p + b) * cin + c) * cout + o];
                            }
                        }
                    }
                    out[(i * w + j) * cout + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut r = SeededRng::new(4);
        for &(h, w, cin, p, cout) in &[(5, 7, 3, 3, 4), (4, 4, 2, 1, 3), (6, 5, 1, 5, 2)] {
            let x: Vec<f64> = r.normal_vec(h * w * cin);
            let wt: Vec<f64> = r.normal_vec(p * p * cin * cout);
            let got = conv2d_same(&x, h, w, cin, &wt, p, cout);
            let want = naive_conv(&x, h, w, cin, &wt, p, cout);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = SeededRng::new(8);
        let (h, w, cin, p, cout) = (4, 5, 2, 3, 3);
        let x: Vec<f64> = r.normal_vec(h * w * cin);
        let wt: Vec<f64> = r.normal_vec(p * p * cin * cout);
        let go: Vec<f64> = r.normal_vec(h * w * cout);
        let loss = |x: &[f64], wt: &[f64]| -> f64 {
            conv2d_same(x, h, w, cin, wt, p, cout).iter().zip(&go).map(|(a, b)| a * b).sum()
        };
        let (gx, gw) = conv2d_same_backward(&x, h, w, cin, &wt, p, cout, &go);
        let eps = 1e-6;
        for idx in [0, 7, 19, 33] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-7);
        }
        for idx in [0, 11, 40, 53] {
            let mut wp = wt.clone();
            wp[idx] += eps;
            let mut wm = wt.clone();
            wm[idx] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            assert!((fd - gw[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn quarter_turn_of_3x3_taps() {
        let g = g4();
        let base: Vec<f64> = (1..=9).map(f64::from).collect();
        let k = EqKernel::new(KernelKind::Lifting, 3, 1, 1, &g, base.clone()).unwrap();
        assert_eq!(k.realized_stack(0), base);
        assert_eq!(k.realized_stack(1), vec![3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0]);
        let stack = build_rotated_kernels(&k, &g).unwrap();
        assert_eq!(stack.len(), 4);
        assert_eq!(stack[1], k.realized_stack(1));
        assert!(build_rotated_kernels(&k, &RotationGroup::new(8).unwrap()).is_err());
    }

    #[test]
    fn isotropic_filter_realizes_identically() {
        for m in [4, 8, 6] {
            let g = RotationGroup::new(m).unwrap();
            let k = EqKernel::new(KernelKind::Lifting, 3, 1, 1, &g, vec![0.5f64; 9]).unwrap();
            for j in 0..m {
                for (a, b) in k.realized_stack(j).iter().zip(&k.base_weights) {
                    assert!((a - b).abs() < 1e-9, "m={m} j={j}");
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(KernelRealization::new(KernelKind::Group, 2, 1, 1, &g4()).is_err());
    }

    #[test]
    fn parameter_count_is_one_mth_of_regular() {
        for m in [1, 2, 4, 8] {
            let g = RotationGroup::new(m).unwrap();
            for kind in [KernelKind::Lifting, KernelKind::Group] {
                let r = KernelRealization::new(kind, 3, 5, 7, &g).unwrap();
                assert_eq!(r.param_count() * m, r.regular_param_count());
            }
        }
    }

    #[test]
    fn fitted_rotation_interpolates_and_preserves_moments() {
        // Off-axis realizations keep the tap sum and rotate the first moment.
        let g = RotationGroup::new(8).unwrap();
        let mut r = SeededRng::new(21);
        let base: Vec<f64> = r.normal_vec(9);
        let k = EqKernel::new(KernelKind::Lifting, 3, 1, 1, &g, base.clone()).unwrap();
        let moment = |taps: &[f64]| -> (f64, f64, f64) {
            let mut s = (0.0, 0.0, 0.0);
            for (t, w) in taps.iter().enumerate() {
                let (u, v) = ((t / 3) as f64 - 1.0, (t % 3) as f64 - 1.0);
                s.0 += w;
                s.1 += w * u;
                s.2 += w * v;
            }
            s
        };
        let (s0, mu0, mv0) = moment(&base);
        for j in 0..8 {
            let taps = k.realized_stack(j);
            let (s, mu, mv) = moment(&taps);
            assert!((s - s0).abs() < 1e-9, "tap sum drifted at j={j}");
            // first moment rotates like a point: m' = R_θ m in (u, v) coords
            let th = g.angle(j);
            let (sn, cs) = th.sin_cos();
            let (eu, ev) = (mu0 * cs - mv0 * sn, mu0 * sn + mv0 * cs);
            assert!((mu - eu).abs() < 1e-9 && (mv - ev).abs() < 1e-9, "j={j}");
        }
        // two 45° realizations compose to the exact quarter turn on the moments
        let quarter = k.realized_stack(2);
        let rotated = TapRotation::permutation(3, 1).apply(&base);
        assert_eq!(quarter, rotated);
    }

    #[test]
    fn realize_adjoint_is_transpose() {
        let g = RotationGroup::new(8).unwrap();
        let mut r = SeededRng::new(3);
        for kind in [KernelKind::Lifting, KernelKind::Group] {
            let real = KernelRealization::new(kind, 3, 2, 3, &g).unwrap();
            let base: Vec<f64> = r.normal_vec(real.param_count());
            let probe: Vec<f64> = r.normal_vec(real.dense_len());
            let lhs: f64 = real.realize(&base).iter().zip(&probe).map(|(a, b)| a * b).sum();
            let rhs: f64 = base.iter().zip(&real.adjoint(&probe)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn lift_of_delta_with_identity_kernel() {
        let g = g4();
        let mut base = vec![0.0f32; 9];
        base[4] = 1.0;
        let k = EqKernel::new(KernelKind::Lifting, 3, 1, 1, &g, base).unwrap();
        let mut img = PlanarImage::<f32>::zeros(6, 6, 1);
        img.set(3, 3, 0, 1.0);
        let f = lift_conv(&img, &k).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for s in 0..4 {
                    assert_eq!(f.at(i, j, s, 0), img.at(i, j, 0));
                }
            }
        }
    }

    #[test]
    fn lift_of_constant_image() {
        let g = g4();
        let base: Vec<f64> = (0..9).map(|t| t as f64 * 0.1).collect();
        let s: f64 = base.iter().sum();
        let k = EqKernel::new(KernelKind::Lifting, 3, 1, 1, &g, base).unwrap();
        let img = PlanarImage::from_fn(8, 8, 1, |_, _, _| 0.5f64);
        let f = lift_conv(&img, &k).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                for q in 0..4 {
                    assert!((f.at(i, j, q, 0) - 0.5 * s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lift_conv_equivariance_bit_exact() {
        let g = g4();
        let k = int_kernel(1, KernelKind::Lifting, 1, 3, &g);
        let mut r = SeededRng::new(2);
        let img = PlanarImage::from_fn(8, 8, 1, |_, _, _| r.below(0, 9) as f32 - 4.0);
        let base = lift_conv(&img, &k).unwrap();
        for q in 1..4 {
            let lhs = lift_conv(&rotate_image(&img, &g, q).unwrap(), &k).unwrap();
            let rhs = rotate_field(&base, &g, q).unwrap();
            assert_eq!(lhs, rhs, "k={q}");
        }
    }

    #[test]
    fn lift_conv_equivariance_real_valued_f32() {
        let g = g4();
        let mut r = SeededRng::new(12);
        let k = EqKernel::<f32>::random(KernelKind::Lifting, 3, 2, 4, &g, &mut r).unwrap();
        let img = PlanarImage::from_fn(8, 8, 2, |_, _, _| r.normal() as f32);
        let base = lift_conv(&img, &k).unwrap();
        for q in 1..4 {
            let lhs = lift_conv(&rotate_image(&img, &g, q).unwrap(), &k).unwrap();
            assert!(lhs.max_abs_diff(&rotate_field(&base, &g, q).unwrap()) <= 1e-5);
        }
    }

    #[test]
    fn group_conv_identity_kernel() {
        let g = g4();
        let real = KernelRealization::new(KernelKind::Group, 3, 1, 1, &g).unwrap();
        let mut base = vec![0.0f64; real.param_count()];
        base[real.base_index(0, 0, 0, 4)] = 1.0;
        let k = EqKernel::new(KernelKind::Group, 3, 1, 1, &g, base).unwrap();
        let f = int_field(5, 6, 4, 1).cast::<f64>();
        assert_eq!(group_conv(&f, &k).unwrap(), f);
    }

    #[test]
    fn group_conv_of_constant_field() {
        let g = g4();
        let mut r = SeededRng::new(6);
        let k = EqKernel::<f64>::random(KernelKind::Group, 3, 2, 1, &g, &mut r).unwrap();
        let consts = [0.3, -0.2];
        let f = FeatureField::from_fn(6, 6, 4, 2, |_, _, q, c| consts[c] + 0.1 * q as f64);
        let out = group_conv(&f, &k).unwrap();
        for j in 0..4 {
            let stack = k.realized_stack(j);
            let mut want = 0.0;
            for i in 0..2 {
                for q in 0..4 {
                    let s: f64 = stack[(i * 4 + q) * 9..(i * 4 + q + 1) * 9].iter().sum();
                    want += s * (consts[i] + 0.1 * q as f64);
                }
            }
            assert!((out.at(2, 3, j, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn group_conv_equivariance_bit_exact() {
        let g = g4();
        let k = int_kernel(9, KernelKind::Group, 2, 3, &g);
        let f = int_field(10, 8, 4, 2);
        let base = group_conv(&f, &k).unwrap();
        for q in 1..4 {
            let lhs = group_conv(&rotate_field(&f, &g, q).unwrap(), &k).unwrap();
            assert_eq!(lhs, rotate_field(&base, &g, q).unwrap(), "k={q}");
        }
    }

    #[test]
    fn group_conv_rejects_mismatch() {
        let k = int_kernel(1, KernelKind::Group, 2, 2, &g4());
        let f = FeatureField::<f32>::zeros(4, 4, 8, 2);
        assert!(matches!(group_conv(&f, &k), Err(Error::GroupOrderMismatch { .. })));
        let f = FeatureField::<f32>::zeros(4, 4, 4, 3);
        assert!(group_conv(&f, &k).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let f = FeatureField::new(2, 2, 1, 1, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eq_maxpool(&f).unwrap().values, vec![4.0]);
        let c = FeatureField::from_fn(4, 4, 2, 1, |_, _, _, _| 1.5f64);
        let p = eq_maxpool(&c).unwrap();
        assert_eq!((p.height, p.width), (2, 2));
        assert!(p.values.iter().all(|&v| v == 1.5));
        assert!(eq_maxpool(&FeatureField::<f64>::zeros(3, 4, 1, 1)).is_err());
    }

    #[test]
    fn maxpool_tie_goes_to_first_row_major() {
        let (_, arg) = maxpool2(&[5.0f64, 5.0, 1.0, 5.0], 2, 2, 1);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_equivariance_bit_exact() {
        let g = g4();
        let f = int_field(3, 8, 4, 2);
        let base = eq_maxpool(&f).unwrap();
        for q in 1..4 {
            let lhs = eq_maxpool(&rotate_field(&f, &g, q).unwrap()).unwrap();
            assert_eq!(lhs, rotate_field(&base, &g, q).unwrap());
        }
    }

    #[test]
    fn upsample_examples() {
        let one = FeatureField::new(1, 1, 1, 1, vec![2.5f64]).unwrap();
        assert_eq!(eq_upsample(&one).values, vec![2.5; 4]);
        let c = FeatureField::from_fn(3, 3, 2, 2, |_, _, _, _| -0.75f64);
        let u = eq_upsample(&c);
        assert_eq!((u.height, u.width), (6, 6));
        assert!(u.values.iter().all(|&v| v == -0.75));
    }

    #[test]
    fn upsample_equivariance_bit_exact() {
        let g = g4();
        let f = int_field(4, 6, 4, 2);
        let base = eq_upsample(&f);
        for q in 1..4 {
            let lhs = eq_upsample(&rotate_field(&f, &g, q).unwrap());
            assert_eq!(lhs, rotate_field(&base, &g, q).unwrap());
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let mut r = SeededRng::new(31);
        let (h, w, d) = (3, 4, 2);
        let x: Vec<f64> = r.normal_vec(h * w * d);
        let y: Vec<f64> = r.normal_vec(4 * h * w * d);
        let lhs: f64 = upsample2(&x, h, w, d).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&upsample2_adjoint(&y, h, w, d)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn group_norm_examples() {
        // already standardized per group → unchanged
        let vals = [1.0f64, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let f = FeatureField::new(2, 2, 2, 1, vals.to_vec()).unwrap();
        let mut p = GroupNormParams::identity(1, 1);
        p.epsilon = 0.0;
        let out = group_norm(&f, &p).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-7);
        // constant field → zeros
        let c = FeatureField::from_fn(4, 4, 2, 2, |_, _, _, _| 3.0f64);
        let out = group_norm(&c, &GroupNormParams::identity(2, 2)).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-12));
        assert!(group_norm(&c, &GroupNormParams::identity(2, 3)).is_err());
    }

    #[test]
    fn group_norm_equivariance() {
        let g = g4();
        let mut r = SeededRng::new(14);
        let f = FeatureField::from_fn(8, 8, 4, 4, |_, _, _, _| r.normal() * 2.0 + 0.5);
        let mut p = GroupNormParams::identity(4, 2);
        p.gamma = vec![1.5, 0.5, -1.0, 2.0];
        p.beta = vec![0.1, 0.2, -0.3, 0.0];
        let base = group_norm(&f, &p).unwrap();
        for q in 1..4 {
            let lhs = group_norm(&rotate_field(&f, &g, q).unwrap(), &p).unwrap();
            assert!(lhs.max_abs_diff(&rotate_field(&base, &g, q).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut r = SeededRng::new(15);
        let (px, m, c, groups) = (6, 2, 4, 2);
        let x: Vec<f64> = r.normal_vec(px * m * c);
        let gamma: Vec<f64> = r.normal_vec(c);
        let beta: Vec<f64> = r.normal_vec(c);
        let go: Vec<f64> = r.normal_vec(px * m * c);
        let loss = |x: &[f64], gm: &[f64], bt: &[f64]| -> f64 {
            let (y, _) = group_norm_forward(x, px, m, c, gm, bt, groups, 1e-5);
            y.iter().zip(&go).map(|(a, b)| a * b).sum()
        };
        let (_, st) = group_norm_forward(&x, px, m, c, &gamma, &beta, groups, 1e-5);
        let (dx, dg, db) = group_norm_backward(&x, px, m, c, &gamma, groups, &st, &go);
        let h = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "{fd} vs {}", dx[i]);
        }
        for i in 0..c {
            let mut gp = gamma.clone();
            gp[i] += h;
            let mut gm = gamma.clone();
            gm[i] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((fd - dg[i]).abs() < 1e-6);
            let mut bp = beta.clone();
            bp[i] += h;
            let mut bm = beta.clone();
            bm[i] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu_scalar(0.0f64), 0.0);
        for x in [20.0f64, 25.0, 40.0] {
            assert!((silu_scalar(x) - x).abs() < 1e-6);
        }
        assert_eq!(silu_grad_scalar(0.0f64), 0.5);
        let g = g4();
        let f = FeatureField::from_fn(4, 4, 4, 1, |i, j, q, _| (i * 7 + j * 3 + q) as f32 * 0.1 - 1.0);
        for q in 1..4 {
            assert_eq!(
                silu(&rotate_field(&f, &g, q).unwrap()),
                rotate_field(&silu(&f), &g, q).unwrap()
            );
        }
    }
}
