//! Empirical equivariance checks: smooth fields with certified derivative
//! bounds, equivariance-error measurement on a central disk, δ-scaling fits
//! and error maps.
//!
//! Grid coordinates: pixel `(i, j)` of an `n×n` grid sits at
//! `x = ((j − c)δ, (c − i)δ)` with `c = (n − 1)/2`, so the image rotations in
//! [`group_action`](crate::group_action) rotate `x` counter-clockwise.

use std::f64::consts::PI;

use crate::autodiff::ParamStore;
use crate::eq_ops::{eq_maxpool, eq_upsample, group_norm, GroupNormParams};
use crate::error::{arg_err, Result};
use crate::group_action::{rotate_field, rotate_image, rotate_image_arbitrary, FeatureField, PlanarImage, RotationGroup};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::unet::{UNet, UNetConfig};

/// Band-limited trigonometric field family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothFieldSpec {
    /// Largest frequency component magnitude, in cycles per unit length.
    pub bandlimit: f64,
    pub amplitude: f64,
    /// Grid spacing δ.
    pub mesh: f64,
    /// Side length; the grid holds `extent / mesh` samples per side.
    pub extent: f64,
    /// Number of cosine terms (at most 4).
    pub terms: usize,
}

impl SmoothFieldSpec {
    /// `‖∇e‖ ≤ amplitude·2π·bandlimit·√2`.
    pub fn certified_g(&self) -> f64 {
        self.amplitude * 2.0 * PI * self.bandlimit * 2f64.sqrt()
    }

    /// `‖∇²e‖ ≤ amplitude·(2π·bandlimit)²·2`.
    pub fn certified_h(&self) -> f64 {
        self.amplitude * (2.0 * PI * self.bandlimit).powi(2) * 2.0
    }

    pub fn grid_size(&self) -> usize {
        (self.extent / self.mesh).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mesh > 0.0 && self.extent > 0.0 && self.bandlimit >= 0.0 && self.amplitude >= 0.0) {
            return arg_err("mesh and extent must be positive; bandlimit and amplitude non-negative");
        }
        if self.bandlimit * self.mesh >= 0.5 {
            return arg_err(format!(
                "bandlimit {} at mesh {} violates Nyquist (bandlimit·mesh must be < 0.5)",
                self.bandlimit, self.mesh
            ));
        }
        if self.terms == 0 || self.terms > 4 {
            return arg_err("terms must be between 1 and 4");
        }
        let n = self.grid_size();
        if n < 2 || n % 2 != 0 {
            return arg_err(format!("extent/mesh gives {n} samples per side; need an even count"));
        }
        Ok(())
    }
}

/// Field family for operator-bound checks: bandlimit 1 on a 3.2-unit square,
/// amplitude chosen so the certified gradient bound equals `g`.
pub fn bound_check_spec(g: f64, delta: f64) -> SmoothFieldSpec {
    SmoothFieldSpec { bandlimit: 1.0, amplitude: g / (2.0 * PI * 2f64.sqrt()), mesh: delta, extent: 3.2, terms: 4 }
}

/// Field family for op mesh-scaling fits, on a 6.4-unit square.
pub fn scaling_spec(delta: f64) -> SmoothFieldSpec {
    SmoothFieldSpec { bandlimit: 0.5, amplitude: 1.0, mesh: delta, extent: 6.4, terms: 4 }
}

/// `amplitude · Σ w_i cos(2π f_i·x + φ_i)` with `Σ|w_i| = 1` and every
/// component of `f_i` bounded by the bandlimit.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField {
    pub amplitude: f64,
    pub terms: Vec<CosineTerm>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineTerm {
    pub freq: [f64; 2],
    pub phase: f64,
    pub weight: f64,
}

impl SmoothField {
    pub fn random(spec: &SmoothFieldSpec, rng: &mut SeededRng) -> Self {
        let b = spec.bandlimit;
        let raw: Vec<(f64, [f64; 2], f64)> = (0..spec.terms)
            .map(|_| {
                let f = [rng.uniform_range(-b, b), rng.uniform_range(-b, b)];
                (rng.uniform_range(0.2, 1.0), f, rng.uniform_range(0.0, 2.0 * PI))
            })
            .collect();
        let total: f64 = raw.iter().map(|r| r.0).sum();
        let terms = raw.into_iter().map(|(w, freq, phase)| CosineTerm { freq, phase, weight: w / total }).collect();
        Self { amplitude: spec.amplitude, terms }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.amplitude
            * self
                .terms
                .iter()
                .map(|t| t.weight * (2.0 * PI * (t.freq[0] * x[0] + t.freq[1] * x[1]) + t.phase).cos())
                .sum::<f64>()
    }

    /// Analytic gradient.
    pub fn grad(&self, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for t in &self.terms {
            let s = -self.amplitude * t.weight * 2.0 * PI * (2.0 * PI * (t.freq[0] * x[0] + t.freq[1] * x[1]) + t.phase).sin();
            g[0] += s * t.freq[0];
            g[1] += s * t.freq[1];
        }
        g
    }
}

/// Physical position of pixel `(i, j)` on an `n×n` grid of spacing `delta`.
pub fn grid_point(i: usize, j: usize, n: usize, delta: f64) -> [f64; 2] {
    let c = (n as f64 - 1.0) / 2.0;
    [(j as f64 - c) * delta, (c - i as f64) * delta]
}

fn rotate_point(x: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// Samples `e_c(x, R_g) = e_c(R_g⁻¹x)` for every group slice and channel; one
/// random analytic field per channel. Returns the field and its certified G.
pub fn render_smooth_field(
    spec: &SmoothFieldSpec,
    group: &RotationGroup,
    channels: usize,
    seed: u64,
) -> Result<(FeatureField<f64>, f64)> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let fields: Vec<SmoothField> = (0..channels).map(|_| SmoothField::random(spec, &mut rng)).collect();
    let n = spec.grid_size();
    let f = FeatureField::from_fn(n, n, group.order(), channels, |i, j, g, c| {
        let x = rotate_point(grid_point(i, j, n, spec.mesh), -group.angle(g));
        fields[c].eval(x)
    });
    Ok((f, spec.certified_g()))
}

/// Radial window `cos²(π r / 2R)` for `r < R`, zero outside.
pub fn taper(x: [f64; 2], radius: f64) -> f64 {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    if r >= radius { 0.0 } else { (PI * r / (2.0 * radius)).cos().powi(2) }
}

/// Tapered planar rendering `offset + taper(x)·e(x)` on an `n×n` grid.
pub fn render_tapered(field: &SmoothField, n: usize, delta: f64, radius: f64, offset: f64) -> PlanarImage<f64> {
    PlanarImage::from_fn(n, n, 1, |i, j, _| {
        let x = grid_point(i, j, n, delta);
        offset + taper(x, radius) * field.eval(x)
    })
}

/// Rotation used by a measurement: a group element or an arbitrary angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Angle {
    Group(usize),
    Radians(f64),
}

impl std::fmt::Display for Angle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Angle::Group(k) => write!(f, "k{k}"),
            Angle::Radians(t) => write!(f, "{t:.6}rad"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub op: String,
    pub m: usize,
    pub angle: Angle,
    pub delta: f64,
    pub measured: f64,
    pub bound: Option<f64>,
    pub pass: bool,
}

impl EquivarianceReport {
    pub fn new(op: impl Into<String>, m: usize, angle: Angle, delta: f64, measured: f64, bound: Option<f64>) -> Self {
        let pass = measured.is_finite() && bound.is_none_or(|b| measured <= b * (1.0 + 1e-6));
        Self { op: op.into(), m, angle, delta, measured, bound, pass }
    }

    /// One `key=value` record.
    pub fn to_record(&self) -> String {
        let bound = self.bound.map_or("none".to_string(), |b| format!("{b:.6e}"));
        format!(
            "kind=equivariance op={} m={} angle={} delta={:.6e} measured={:.6e} bound={} pass={}",
            self.op, self.m, self.angle, self.delta, self.measured, bound, self.pass
        )
    }
}

/// Mask of pixels within `min(h, w)/2 − margin` of the grid center.
pub fn interior_disk(h: usize, w: usize, margin: f64) -> Vec<bool> {
    let r = h.min(w) as f64 / 2.0 - margin;
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64 - ci, (p % w) as f64 - cj);
            (i * i + j * j).sqrt() <= r
        })
        .collect()
}

fn masked_max_diff<T: Scalar>(a: &[T], b: &[T], pixel_mask: &[bool], depth: usize) -> f64 {
    let mut worst = 0.0f64;
    for (p, &inside) in pixel_mask.iter().enumerate() {
        if inside {
            for d in 0..depth {
                worst = worst.max((a[p * depth + d].f64() - b[p * depth + d].f64()).abs());
            }
        }
    }
    worst
}

/// Border excluded from every measurement: `⌈p/2⌉ + 1` pixels.
pub fn default_margin(kernel_size: usize) -> f64 {
    (kernel_size.div_ceil(2) + 1) as f64
}

/// Max-abs of `Φ(π_k F) − π_k Φ(F)` over the interior disk of the output.
pub fn measure_equivariance_error<F>(
    op: F,
    input: &FeatureField<f64>,
    group: &RotationGroup,
    k: usize,
    margin: f64,
) -> Result<f64>
where
    F: Fn(&FeatureField<f64>) -> Result<FeatureField<f64>>,
{
    let lhs = op(&rotate_field(input, group, k)?)?;
    let rhs = rotate_field(&op(input)?, group, k)?;
    let scale = lhs.height as f64 / input.height as f64;
    let mask = interior_disk(lhs.height, lhs.width, margin * scale.max(1.0));
    Ok(masked_max_diff(&lhs.values, &rhs.values, &mask, lhs.unrolled_channels()))
}

/// Gradient-bound checks for a single field: maxpool `2√2·G·δ`, bilinear
/// upsampling `2(√2+1)·G·δ`, group norm exact.
pub fn op_reports(
    field: &FeatureField<f64>,
    g_bound: f64,
    delta: f64,
    group: &RotationGroup,
    k: usize,
    gn: &GroupNormParams<f64>,
) -> Result<Vec<EquivarianceReport>> {
    let margin = default_margin(3);
    let m = group.order();
    let mp = measure_equivariance_error(eq_maxpool, field, group, k, margin)?;
    let up = measure_equivariance_error(|f| Ok(eq_upsample(f)), field, group, k, margin)?;
    let gn_err = measure_equivariance_error(|f| group_norm(f, gn), field, group, k, margin)?;
    Ok(vec![
        EquivarianceReport::new("maxpool", m, Angle::Group(k), delta, mp, Some(maxpool_bound(g_bound, delta))),
        EquivarianceReport::new("upsample", m, Angle::Group(k), delta, up, Some(upsample_bound(g_bound, delta))),
        EquivarianceReport::new("groupnorm", m, Angle::Group(k), delta, gn_err, Some(GN_TOLERANCE)),
    ])
}

pub fn maxpool_bound(g: f64, delta: f64) -> f64 {
    2.0 * 2f64.sqrt() * g * delta
}

pub fn upsample_bound(g: f64, delta: f64) -> f64 {
    2.0 * (2f64.sqrt() + 1.0) * g * delta
}

/// Group norm commutes with the action up to rounding.
pub const GN_TOLERANCE: f64 = 1e-6;

/// Pooling and resampling operators with a mesh-scaling law.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingOp {
    MaxPool,
    Upsample,
}

impl ScalingOp {
    pub fn name(self) -> &'static str {
        match self {
            ScalingOp::MaxPool => "maxpool",
            ScalingOp::Upsample => "upsample",
        }
    }

    /// Order of the leading error term on smooth fields: max pooling is
    /// first order, bilinear resampling is second order.
    pub fn expected_order(self) -> f64 {
        match self {
            ScalingOp::MaxPool => 1.0,
            ScalingOp::Upsample => 2.0,
        }
    }

    pub fn apply(self, f: &FeatureField<f64>) -> Result<FeatureField<f64>> {
        match self {
            ScalingOp::MaxPool => eq_maxpool(f),
            ScalingOp::Upsample => Ok(eq_upsample(f)),
        }
    }
}

/// Error of `op` at group element `k` on one analytic field rendered at each
/// mesh in `deltas` (the grid grows as the mesh shrinks).
pub fn op_scaling(
    op: ScalingOp,
    spec: &SmoothFieldSpec,
    deltas: &[f64],
    group: &RotationGroup,
    k: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    deltas
        .iter()
        .map(|&d| {
            let (f, _) = render_smooth_field(&SmoothFieldSpec { mesh: d, ..*spec }, group, 2, seed)?;
            Ok((d, measure_equivariance_error(|x| op.apply(x), &f, group, k, default_margin(3))?))
        })
        .collect()
}

/// Outcome of a log-log fit of error against δ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scaling {
    /// Every error is at rounding level.
    Exact,
    Slope(f64),
}

/// Errors at or below this are treated as exact in f64.
pub const EXACT_TOLERANCE: f64 = 1e-9;

/// Least-squares slope of `log(error)` against `log(δ)`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<Scaling> {
    if points.len() < 3 {
        return arg_err("scaling fit needs at least three mesh sizes");
    }
    if points.iter().all(|&(_, e)| e <= EXACT_TOLERANCE) {
        return Ok(Scaling::Exact);
    }
    if points.iter().any(|&(d, e)| d <= 0.0 || e <= 0.0) {
        return arg_err("scaling fit needs positive mesh sizes and errors");
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(Scaling::Slope(sxy / sxx))
}

/// Conditioning triple for network measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInputs<T> {
    pub ia: PlanarImage<T>,
    pub ib: PlanarImage<T>,
    pub f_t: PlanarImage<T>,
    pub t: usize,
}

impl<T: Scalar> NetworkInputs<T> {
    fn map(&self, f: impl Fn(&PlanarImage<T>) -> Result<PlanarImage<T>>) -> Result<Self> {
        Ok(Self { ia: f(&self.ia)?, ib: f(&self.ib)?, f_t: f(&self.f_t)?, t: self.t })
    }
}

fn rotate_planar<T: Scalar>(img: &PlanarImage<T>, group: &RotationGroup, angle: Angle) -> Result<PlanarImage<T>> {
    match angle {
        Angle::Group(k) => rotate_image(img, group, k),
        Angle::Radians(theta) => rotate_image_arbitrary(img, theta),
    }
}

/// Network output for the rotated inputs and the rotated network output.
pub fn network_pair<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    inputs: &NetworkInputs<T>,
    angle: Angle,
) -> Result<(PlanarImage<T>, PlanarImage<T>)> {
    let g = &net.group;
    let rotated = inputs.map(|x| rotate_planar(x, g, angle))?;
    let lhs = net.forward(params, &rotated.ia, &rotated.ib, &rotated.f_t, inputs.t)?;
    let base = net.forward(params, &inputs.ia, &inputs.ib, &inputs.f_t, inputs.t)?;
    Ok((lhs, rotate_planar(&base, g, angle)?))
}

/// Max-abs discrepancy of the planar output over a disk of `radius` pixels
/// (whole grid when `None`).
pub fn network_equivariance_error<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    inputs: &NetworkInputs<T>,
    angle: Angle,
    radius: Option<f64>,
) -> Result<f64> {
    let (lhs, rhs) = network_pair(net, params, inputs, angle)?;
    let (h, w) = (lhs.height, lhs.width);
    let mask = match radius {
        Some(r) => interior_disk(h, w, h.min(w) as f64 / 2.0 - r),
        None => vec![true; h * w],
    };
    Ok(masked_max_diff(&lhs.values, &rhs.values, &mask, 1))
}

/// Pixels from the output at which zero padding of the square border can
/// still be felt, per forward-pass stage.
pub fn receptive_radius(cfg: &UNetConfig) -> usize {
    let r = cfg.kernel_size / 2;
    let mut total = 2 * r;
    for i in 0..cfg.depth {
        total += 4 * r * (1 << i) + (1 << i);
    }
    total += 4 * r * (1 << cfg.depth);
    for i in (0..cfg.depth).rev() {
        total += 4 * r * (1 << (i + 1)) + (1 << (i + 1));
    }
    total
}

/// Whole-network δ-scaling experiment: three tapered smooth inputs of fixed
/// physical size rendered at several meshes, each on a grid large enough
/// that border effects cannot reach the measurement disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkScalingSpec {
    pub bandlimit: f64,
    pub amplitude: f64,
    /// Physical radius of the input window and of the measurement disk.
    pub radius: f64,
    pub deltas: Vec<f64>,
    pub t: usize,
    pub seed: u64,
}

impl Default for NetworkScalingSpec {
    fn default() -> Self {
        Self { bandlimit: 0.5, amplitude: 0.5, radius: 1.0, deltas: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0], t: 10, seed: 1 }
    }
}

impl NetworkScalingSpec {
    /// Grid side at mesh `delta` for a network with the given config.
    pub fn grid_size(&self, cfg: &UNetConfig, delta: f64) -> usize {
        let q = 1usize << cfg.depth;
        let need = 2.0 * ((self.radius / delta).ceil() + receptive_radius(cfg) as f64 + 2.0);
        (need as usize).div_ceil(q) * q
    }

    pub fn inputs(&self, cfg: &UNetConfig, delta: f64) -> NetworkInputs<f64> {
        let n = self.grid_size(cfg, delta);
        let spec = SmoothFieldSpec { bandlimit: self.bandlimit, amplitude: self.amplitude, mesh: delta, extent: n as f64 * delta, terms: 4 };
        let mut rng = SeededRng::new(self.seed);
        let fields: Vec<SmoothField> = (0..3).map(|_| SmoothField::random(&spec, &mut rng)).collect();
        NetworkInputs {
            ia: render_tapered(&fields[0], n, delta, self.radius, 0.0),
            ib: render_tapered(&fields[1], n, delta, self.radius, 0.0),
            f_t: render_tapered(&fields[2], n, delta, self.radius, 0.0),
            t: self.t,
        }
    }

    /// Error at each mesh, measured on the disk of physical radius `radius`.
    pub fn errors(&self, net: &UNet, params: &ParamStore<f64>, angle: Angle) -> Result<Vec<(f64, f64)>> {
        self.deltas
            .iter()
            .map(|&d| {
                let inputs = self.inputs(&net.config, d);
                let e = network_equivariance_error(net, params, &inputs, angle, Some(self.radius / d))?;
                Ok((d, e))
            })
            .collect()
    }
}

/// Initializations averaged in network mesh-scaling fits.
pub const SCALING_INITS: u64 = 8;

impl NetworkScalingSpec {
    /// Geometric mean over initializations of the error at each mesh; its
    /// log-log slope is the mean of the per-network slopes.
    pub fn errors_over_inits(&self, cfg: &UNetConfig, angle: Angle, seeds: &[u64]) -> Result<Vec<(f64, f64)>> {
        if seeds.is_empty() {
            return arg_err("need at least one initialization");
        }
        let net = UNet::new(cfg.clone())?;
        let mut logs = vec![0.0; self.deltas.len()];
        for &s in seeds {
            let params = net.init_params::<f64>(s)?;
            for (acc, (_, e)) in logs.iter_mut().zip(self.errors(&net, &params, angle)?) {
                *acc += e.ln();
            }
        }
        Ok(self.deltas.iter().zip(logs).map(|(&d, l)| (d, (l / seeds.len() as f64).exp())).collect())
    }
}

/// Mean network error at an arbitrary angle for each group order, over
/// several random initializations with `orientation_channels` channels per
/// orientation.
pub fn orientation_trend(
    base: &UNetConfig,
    orders: &[usize],
    orientation_channels: usize,
    spec: &NetworkScalingSpec,
    delta: f64,
    theta: f64,
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>> {
    let spec = NetworkScalingSpec { deltas: vec![delta], ..spec.clone() };
    orders
        .iter()
        .map(|&m| {
            let cfg = UNetConfig { m, base_channels: m * orientation_channels, ..base.clone() };
            let net = UNet::new(cfg)?;
            let mut total = 0.0;
            for &seed in seeds {
                let params = net.init_params::<f64>(seed)?;
                total += spec.errors(&net, &params, Angle::Radians(theta))?[0].1;
            }
            Ok((m, total / seeds.len() as f64))
        })
        .collect()
}

/// True when each error is at most `1 + slack` times the previous one.
pub fn non_increasing(errors: &[(usize, f64)], slack: f64) -> bool {
    errors.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + slack))
}

/// Model output, transported output and normalized absolute difference.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub output: PlanarImage<f64>,
    pub transported: PlanarImage<f64>,
    /// `|output − transported| / max`, or zeros when `max = 0`.
    pub difference: PlanarImage<f64>,
    pub max: f64,
}

/// Error map at group element `k`; `F_t` is drawn from `N(0, I)` by `seed`.
pub fn error_map<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    ia: &PlanarImage<T>,
    ib: &PlanarImage<T>,
    k: usize,
    seed: u64,
) -> Result<ErrorMap> {
    let mut rng = SeededRng::new(seed);
    let f_t = PlanarImage { values: rng.normal_vec(ia.values.len()), ..ia.clone() };
    let inputs = NetworkInputs { ia: ia.clone(), ib: ib.clone(), f_t, t: net.config.steps };
    let (lhs, rhs) = network_pair(net, params, &inputs, Angle::Group(k))?;
    let (output, transported) = (lhs.cast::<f64>(), rhs.cast::<f64>());
    let diff: Vec<f64> = output.values.iter().zip(&transported.values).map(|(a, b)| (a - b).abs()).collect();
    let max = diff.iter().copied().fold(0.0, f64::max);
    let values = diff.iter().map(|d| if max > 0.0 { d / max } else { 0.0 }).collect();
    Ok(ErrorMap { difference: PlanarImage { values, ..output.clone() }, output, transported, max })
}
