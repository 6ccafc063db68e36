//! `verify`: batched equivariance checks written as one `key=value` record
//! per line.
//!
//! Suites:
//! - `ops`: every operator on certified smooth fields at mesh `--delta`, for
//!   each non-identity group element. Max pooling and upsampling are checked
//!   against their gradient bounds, group norm against exactness; the
//!   convolutions and SiLU must be exact at quarter turns and are reported
//!   without a bound elsewhere.
//! - `network`: an untrained U-Net at each group element on random 32×32
//!   inputs, plus the dense-convolution ablation.
//! - `scaling`: log-log mesh slopes for max pooling, upsampling and the whole
//!   network (geometric mean over initializations), and the error trend over
//!   group orders at an off-group angle.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rediffuse_core::dataio::write_atomic;
use rediffuse_core::eq_ops::{group_conv, lift_conv, silu, EqKernel, GroupNormParams, KernelKind};
use rediffuse_core::group_action::{rotate_field, rotate_image, PlanarImage, RotationGroup};
use rediffuse_core::harness::*;
use rediffuse_core::rng::SeededRng;
use rediffuse_core::unet::{UNet, UNetConfig};

use crate::error::{at, CliError};
use crate::emit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Ops,
    Network,
    Scaling,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    /// Mesh of the ops suite and coarsest mesh of the op scaling fits.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Gradient bounds exercised by the ops suite.
pub const BOUND_GRADIENTS: [f64; 3] = [0.5, 1.0, 2.0];
pub const FIELDS_PER_BOUND: u64 = 10;
/// Exactness tolerance for operators at quarter turns (64-bit).
pub const EXACT_OP_TOLERANCE: f64 = 1e-5;
/// Exactness tolerance for the network at quarter turns (32-bit).
pub const EXACT_NET_TOLERANCE: f64 = 1e-4;
pub const SLOPE_WINDOW: f64 = 0.3;
pub const TREND_ORDERS: [usize; 3] = [4, 8, 16];
pub const TREND_SLACK: f64 = 0.1;
pub const TREND_DELTA: f64 = 1.0 / 32.0;
pub const TREND_SEEDS: [u64; 3] = [0, 1, 2];
pub const ABLATION_RATIO: f64 = 10.0;

/// One report line and whether it passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub line: String,
    pub pass: bool,
}

impl From<EquivarianceReport> for Record {
    fn from(r: EquivarianceReport) -> Self {
        Self { line: r.to_record(), pass: r.pass }
    }
}

fn quarter(group: &RotationGroup, k: usize) -> bool {
    group.quarter_turns(k).is_some()
}

fn exact_bound(group: &RotationGroup, k: usize, tol: f64) -> Option<f64> {
    quarter(group, k).then_some(tol)
}

pub fn ops_suite(m: usize, delta: f64, seed: u64) -> Result<Vec<Record>, CliError> {
    let group = RotationGroup::new(m)?;
    let planar = RotationGroup::new(1)?;
    let gn = GroupNormParams::identity(2, 1);
    let mut rng = SeededRng::new(seed);
    let lk = EqKernel::<f64>::random(KernelKind::Lifting, 3, 1, 2, &group, &mut rng)?;
    let gk = EqKernel::<f64>::random(KernelKind::Group, 3, 2, 2, &group, &mut rng)?;
    let margin = default_margin(3);
    let mut records = Vec::new();
    for &g in &BOUND_GRADIENTS {
        let spec = bound_check_spec(g, delta);
        for s in 0..FIELDS_PER_BOUND {
            let field_seed = seed.wrapping_add(s);
            let (field, cert) = render_smooth_field(&spec, &group, 2, field_seed)?;
            let (img, _) = render_smooth_field(&spec, &planar, 1, field_seed)?;
            let img = img.mean_over_group();
            for k in 1..m {
                records.extend(op_reports(&field, cert, delta, &group, k, &gn)?.into_iter().map(Record::from));
                let conv = measure_equivariance_error(|f| group_conv(f, &gk), &field, &group, k, margin)?;
                let act = measure_equivariance_error(|f| Ok(silu(f)), &field, &group, k, margin)?;
                let lifted = {
                    let lhs = lift_conv(&rotate_image(&img, &group, k)?, &lk)?;
                    let rhs = rotate_field(&lift_conv(&img, &lk)?, &group, k)?;
                    let mask = interior_disk(lhs.height, lhs.width, margin);
                    masked_field_diff(&lhs.values, &rhs.values, &mask, lhs.unrolled_channels())
                };
                let bound = exact_bound(&group, k, EXACT_OP_TOLERANCE);
                for (name, err) in [("group_conv", conv), ("silu", act), ("lift_conv", lifted)] {
                    records.push(EquivarianceReport::new(name, m, Angle::Group(k), delta, err, bound).into());
                }
            }
        }
    }
    Ok(records)
}

fn masked_field_diff(a: &[f64], b: &[f64], mask: &[bool], depth: usize) -> f64 {
    let mut worst = 0.0f64;
    for (p, &inside) in mask.iter().enumerate() {
        if inside {
            for d in 0..depth {
                worst = worst.max((a[p * depth + d] - b[p * depth + d]).abs());
            }
        }
    }
    worst
}

/// Network config for verification at group order `m`: desk width when it
/// divides evenly, otherwise two channels per orientation.
pub fn verify_config(m: usize, orientation_channels: Option<usize>) -> UNetConfig {
    let desk = UNetConfig::desk();
    let c0 = orientation_channels.unwrap_or(if desk.base_channels % m == 0 { desk.base_channels / m } else { 2 });
    let gn_groups = [4, 2, 1].into_iter().find(|g| c0 % g == 0).unwrap_or(1);
    UNetConfig { m, base_channels: m * c0, gn_groups, ..desk }
}

fn random_inputs(seed: u64, n: usize) -> NetworkInputs<f32> {
    let mut rng = SeededRng::new(seed);
    let mut img = || PlanarImage::new(n, n, 1, rng.normal_vec::<f32>(n * n)).expect("sized");
    NetworkInputs { ia: img(), ib: img(), f_t: img(), t: UNetConfig::desk().steps }
}

pub fn network_suite(m: usize, seed: u64) -> Result<Vec<Record>, CliError> {
    let cfg = verify_config(m, None);
    let group = RotationGroup::new(m)?;
    let net = UNet::new(cfg.clone())?;
    let params = net.init_params::<f32>(seed)?;
    let plain = UNet::new(UNetConfig { plain: true, ..cfg })?;
    let plain_params = plain.init_params::<f32>(seed)?;
    let inputs = random_inputs(seed, 32);
    let mut records = Vec::new();
    let (mut eq_worst, mut plain_worst) = (0.0f64, 0.0f64);
    for k in 1..m {
        let e = network_equivariance_error(&net, &params, &inputs, Angle::Group(k), None)?;
        records.push(EquivarianceReport::new("unet", m, Angle::Group(k), 1.0, e, exact_bound(&group, k, EXACT_NET_TOLERANCE)).into());
        if quarter(&group, k) {
            let p = network_equivariance_error(&plain, &plain_params, &inputs, Angle::Group(k), None)?;
            records.push(EquivarianceReport::new("unet_plain", m, Angle::Group(k), 1.0, p, None).into());
            eq_worst = eq_worst.max(e);
            plain_worst = plain_worst.max(p);
        }
    }
    if m > 1 && m % 4 == 0 {
        let ratio = plain_worst / eq_worst.max(f64::MIN_POSITIVE);
        let pass = plain_worst >= ABLATION_RATIO * eq_worst;
        records.push(Record {
            line: format!(
                "kind=ablation m={m} equivariant={:.6e} plain={:.6e} ratio={:.6e} required={ABLATION_RATIO} pass={pass}",
                eq_worst, plain_worst, ratio
            ),
            pass,
        });
    }
    Ok(records)
}

/// Scaling record: exact is expected when `k` is a quarter turn, otherwise
/// a slope within `SLOPE_WINDOW` of `order`.
pub fn scaling_record(op: &str, m: usize, angle: Angle, points: &[(f64, f64)], order: f64, exact: bool) -> Result<Record, CliError> {
    let fit = scaling_fit(points)?;
    let list = |f: &dyn Fn(&(f64, f64)) -> f64| points.iter().map(|p| format!("{:.6e}", f(p))).collect::<Vec<_>>().join(",");
    let (result, expected, pass) = match (fit, exact) {
        (Scaling::Exact, true) => ("exact".to_string(), "exact".to_string(), true),
        (Scaling::Exact, false) => ("exact".to_string(), format!("{order}"), false),
        (Scaling::Slope(s), true) => (format!("{s:.6}"), "exact".to_string(), false),
        (Scaling::Slope(s), false) => {
            (format!("{s:.6}"), format!("{order}"), (s - order).abs() <= SLOPE_WINDOW)
        }
    };
    Ok(Record {
        line: format!(
            "kind=scaling op={op} m={m} angle={angle} deltas={} errors={} slope={result} expected={expected} pass={pass}",
            list(&|p| p.0),
            list(&|p| p.1)
        ),
        pass,
    })
}

/// Mesh-slope records for both resampling operators and the network at
/// group element 1, plus the group-order trend at θ = π/7.
pub fn scaling_suite(m: usize, delta: f64, seed: u64) -> Result<Vec<Record>, CliError> {
    let group = RotationGroup::new(m)?;
    let k = if m > 1 { 1 } else { 0 };
    let exact = quarter(&group, k);
    let deltas = [delta, delta / 2.0, delta / 4.0];
    let mut records = Vec::new();
    for op in [ScalingOp::MaxPool, ScalingOp::Upsample] {
        let pts = op_scaling(op, &scaling_spec(delta), &deltas, &group, k, seed)?;
        records.push(scaling_record(op.name(), m, Angle::Group(k), &pts, op.expected_order(), exact)?);
    }
    let spec = NetworkScalingSpec { seed: seed.wrapping_add(1), ..NetworkScalingSpec::default() };
    let inits: Vec<u64> = (0..SCALING_INITS).map(|s| s.wrapping_add(seed)).collect();
    let pts = spec.errors_over_inits(&verify_config(m, Some(2)), Angle::Group(k), &inits)?;
    records.push(scaling_record("unet", m, Angle::Group(k), &pts, 1.0, exact)?);
    records.push(trend_record(seed)?);
    Ok(records)
}

pub fn trend_record(seed: u64) -> Result<Record, CliError> {
    let theta = PI / 7.0;
    let seeds: Vec<u64> = TREND_SEEDS.iter().map(|s| s.wrapping_add(seed)).collect();
    let spec = NetworkScalingSpec { seed: seed.wrapping_add(1), ..NetworkScalingSpec::default() };
    let trend = orientation_trend(&verify_config(4, Some(2)), &TREND_ORDERS, 2, &spec, TREND_DELTA, theta, &seeds)?;
    let pass = non_increasing(&trend, TREND_SLACK);
    let orders = trend.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(",");
    let errors = trend.iter().map(|t| format!("{:.6e}", t.1)).collect::<Vec<_>>().join(",");
    Ok(Record {
        line: format!(
            "kind=trend angle={theta:.6}rad delta={TREND_DELTA:.6e} orders={orders} errors={errors} slack={TREND_SLACK} pass={pass}"
        ),
        pass,
    })
}

pub fn run(args: &VerifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.m == 0 {
        return Err(CliError::usage("--m must be positive"));
    }
    let records = match args.suite {
        Suite::Ops => ops_suite(args.m, args.delta, args.seed)?,
        Suite::Network => network_suite(args.m, args.seed)?,
        Suite::Scaling => scaling_suite(args.m, args.delta, args.seed)?,
    };
    let failed = records.iter().filter(|r| !r.pass).count();
    let mut text = String::new();
    for r in &records {
        text.push_str(&r.line);
        text.push('\n');
    }
    match &args.report {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(at(path))?,
        None => out.write_all(text.as_bytes())?,
    }
    for r in records.iter().filter(|r| !r.pass) {
        log::error!("violation: {}", r.line);
    }
    emit(out, &format!("records={} failed={failed}", records.len()))?;
    if failed > 0 {
        return Err(CliError::verification(format!("{failed} of {} records violate their bound", records.len())));
    }
    Ok(())
}
