//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria known to fail are listed in `DOCUMENTED_FAILURES`; the test fails
//! if any other criterion fails, or if a documented failure starts passing.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rediffuse_cli::fuse::{fuse_images, load_model};
use rediffuse_cli::gen_data::load_pairs;
use rediffuse_cli::run_args;
use rediffuse_cli::train::read_log;
use rediffuse_cli::verify::verify_config;
use rediffuse_core::autodiff::{max_relative_error, ParamStore};
use rediffuse_core::dataio::{ms_ssim, Checkpoint};
use rediffuse_core::diffusion::*;
use rediffuse_core::eq_ops::{group_norm, GroupNormParams, GN_EPSILON};
use rediffuse_core::group_action::{FeatureField, PlanarImage, RotationGroup};
use rediffuse_core::harness::*;
use rediffuse_core::rng::SeededRng;
use rediffuse_core::training::{full_loss_gradient_check, Example};
use rediffuse_core::unet::{conv_param_counts, UNet, UNetConfig};

/// Group-norm exactness cannot hold for bilinear rotations by odd multiples
/// of 45°, and the desk model never sees two identical sharp sources in
/// training; see the README.
const DOCUMENTED_FAILURES: &[usize] = &[0, 4];

struct Verdict {
    label: String,
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

/// Runs one check and prints its verdict line. `id` 0 marks a command
/// example rather than a numbered criterion.
fn timed(id: usize, budget_s: u64, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let label = if id == 0 { "example fuse a=b".to_string() } else { format!("criterion {id:>2}") };
    let start = Instant::now();
    let (pass, detail) = f();
    let v = Verdict { label, id, pass, detail, elapsed: start.elapsed(), budget: Duration::from_secs(budget_s) };
    println!(
        "{}: {} {} runtime={:.1}s budget={}s{}",
        v.label,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        v.elapsed.as_secs_f64(),
        v.budget.as_secs(),
        if v.elapsed > v.budget { " (over budget)" } else { "" }
    );
    v
}

fn cli(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut full = vec!["rediffuse"];
    full.extend_from_slice(args);
    if let Err(e) = run_args(full, &mut out) {
        panic!("{args:?} failed: {}", e.message);
    }
    String::from_utf8(out).unwrap()
}

fn random_inputs(seed: u64, n: usize, t: usize) -> NetworkInputs<f32> {
    let mut rng = SeededRng::new(seed);
    let mut img = || PlanarImage::new(n, n, 1, rng.normal_vec::<f32>(n * n)).unwrap();
    NetworkInputs { ia: img(), ib: img(), f_t: img(), t }
}

fn quarter_turn_error(net: &UNet, params: &ParamStore<f32>, inputs: &NetworkInputs<f32>) -> f64 {
    (1..4).map(|k| network_equivariance_error(net, params, inputs, Angle::Group(k), None).unwrap()).fold(0.0, f64::max)
}

fn c1(trained: &Checkpoint) -> (bool, String) {
    let net = UNet::new(trained.header.model.clone()).unwrap();
    assert_eq!(net.config.m, 4);
    let inputs = random_inputs(11, 32, net.config.steps);
    let before = quarter_turn_error(&net, &net.init_params::<f32>(0).unwrap(), &inputs);
    let after = quarter_turn_error(&net, &trained.tensors, &inputs);
    let pass = before <= 1e-4 && after <= 1e-4;
    (pass, format!("m=4 k=1..3 init_err={before:.3e} trained_err={after:.3e} tol=1e-4"))
}

fn bound_cases(op: ScalingOp) -> (bool, String) {
    let group = RotationGroup::new(8).unwrap();
    let mut worst_ratio = 0.0f64;
    let mut cases = 0;
    for g in [0.5, 1.0, 2.0] {
        for delta in [0.05, 0.1] {
            for seed in 0..10 {
                let spec = bound_check_spec(g, delta);
                let (f, cert) = render_smooth_field(&spec, &group, 2, seed).unwrap();
                let e = measure_equivariance_error(|x| op.apply(x), &f, &group, 1, default_margin(3)).unwrap();
                let bound = match op {
                    ScalingOp::MaxPool => maxpool_bound(cert, delta),
                    ScalingOp::Upsample => upsample_bound(cert, delta),
                };
                worst_ratio = worst_ratio.max(e / bound);
                cases += 1;
            }
        }
    }
    (worst_ratio <= 1.0, format!("op={} m=8 k=1 cases={cases} max_error/bound={worst_ratio:.4}", op.name()))
}

fn c4() -> (bool, String) {
    let mut parts = vec![];
    let mut pass = true;
    for m in [2usize, 4, 8] {
        let g = RotationGroup::new(m).unwrap();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let f = FeatureField::new(12, 12, m, 4, rng.normal_vec(12 * 12 * m * 4)).unwrap();
            let gn = GroupNormParams { gamma: rng.normal_vec(4), beta: rng.normal_vec(4), num_groups: 2, epsilon: GN_EPSILON };
            for k in 0..m {
                worst = worst.max(measure_equivariance_error(|x| group_norm(x, &gn), &f, &g, k, default_margin(1)).unwrap());
            }
        }
        pass &= worst <= GN_TOLERANCE;
        parts.push(format!("m{m}={worst:.3e}"));
    }
    (pass, format!("fields=20 max_error {} tol={GN_TOLERANCE:e}", parts.join(" ")))
}

fn c5() -> (bool, String) {
    let spec = NetworkScalingSpec::default();
    let inits: Vec<u64> = (0..SCALING_INITS).collect();
    let pts = spec.errors_over_inits(&verify_config(8, Some(2)), Angle::Group(1), &inits).unwrap();
    let slope = match scaling_fit(&pts).unwrap() {
        Scaling::Slope(s) => s,
        Scaling::Exact => f64::NAN,
    };
    let trend = orientation_trend(&verify_config(4, Some(2)), &[4, 8, 16], 2, &spec, 1.0 / 32.0, PI / 7.0, &[0, 1, 2]).unwrap();
    let monotone = non_increasing(&trend, 0.1);
    let slope_ok = (0.7..=1.3).contains(&slope);
    let errs: Vec<String> = trend.iter().map(|(m, e)| format!("m{m}={e:.3e}")).collect();
    (slope_ok && monotone, format!("m=8 inits={SCALING_INITS} slope={slope:.3} window=[0.7,1.3] trend(theta=pi/7) {} slack=10%", errs.join(" ")))
}

fn c6() -> (bool, String) {
    let net = UNet::new(UNetConfig::desk()).unwrap();
    let params = net.init_params::<f64>(3).unwrap();
    let sched = make_schedule(100, DESK_BETA_START, DESK_BETA_END, ScheduleShape::Linear).unwrap();
    let p = rediffuse_core::dataio::gen_pair(7, 32, rediffuse_core::dataio::Texture::Mixed, 2.0).unwrap();
    let ex = Example { ia: p.source_a, ib: p.source_b, target: p.ground_truth };
    let mut rng = SeededRng::new(4);
    let eps = PlanarImage::new(32, 32, 1, rng.normal_vec(1024)).unwrap();
    let check = full_loss_gradient_check(&net, &params, &ex, &sched, 37, &eps, 20, 1e-3, 5).unwrap();
    let worst = max_relative_error(&check.probes);
    (
        check.probes.len() == 20 && worst < 1e-3,
        format!("f64 h=1e-3 probes={} resampled_at_pool_switch={} max_rel_error={worst:.3e} tol=1e-3", check.probes.len(), check.straddled),
    )
}

fn c7() -> (bool, String) {
    let sched = make_schedule(100, DESK_BETA_START, DESK_BETA_END, ScheduleShape::Linear).unwrap();
    let mut rng = SeededRng::new(21);
    let f0 = PlanarImage::new(32, 32, 1, (0..1024).map(|_| rng.uniform()).collect()).unwrap();
    let oracle = OracleNoise { f0: &f0, schedule: &sched };
    let zeros = f0.map(|_| 0.0);
    let f_big_t = PlanarImage { values: rng.normal_vec(1024), ..f0.clone() };
    let rec = sample_from(&oracle, &zeros, &zeros, &sched, f_big_t).unwrap();
    let recovery = rec.max_abs_diff(&f0);
    let mut step_err = 0.0f64;
    for _ in 0..10 {
        let t = rng.below(1, 101);
        let eps = PlanarImage { values: rng.normal_vec(1024), ..f0.clone() };
        let f_t = forward_sample(&f0, t, &eps, &sched).unwrap();
        let got = reverse_step(&f_t, t, &eps, &sched).unwrap();
        let (ab_prev, ab, a) = (sched.alpha_bar(t - 1), sched.alpha_bar(t), sched.alpha(t));
        let c = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab).sqrt();
        let want: Vec<f64> = f0.values.iter().zip(&eps.values).map(|(x, e)| ab_prev.sqrt() * x + c * e).collect();
        step_err = step_err.max(got.values.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max));
    }
    (
        recovery <= 1e-4 && step_err <= 1e-6,
        format!("T=100 recovery_err={recovery:.3e} tol=1e-4 closed_form_err={step_err:.3e} tol=1e-6 at 10 t"),
    )
}

fn c8(dir: &Path) -> ((bool, String), Checkpoint) {
    let (train, held, ck) = (dir.join("train"), dir.join("held"), dir.join("desk.ckpt"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    cli(&["gen-data", "--out", &s(&train), "--count", "64", "--size", "32", "--seed", "0"]);
    cli(&["gen-data", "--out", &s(&held), "--count", "16", "--size", "32", "--seed", "1"]);
    cli(&["train", "--data", &s(&train), "--epochs", "300", "--seed", "0", "--out", &s(&ck)]);
    let log = read_log(&dir.join("desk.ckpt.log")).unwrap();
    let (first, last) = (log[0].mean_loss, log[log.len() - 1].mean_loss);
    let (checkpoint, net) = load_model(&ck).unwrap();
    let (mut fused_score, mut avg_score) = (0.0, 0.0);
    let pairs = load_pairs(&held).unwrap();
    for (i, (gt, a, b)) in pairs.iter().enumerate() {
        let fused = fuse_images(&checkpoint, &net, a, b, i as u64).unwrap();
        let avg = PlanarImage { values: a.values.iter().zip(&b.values).map(|(x, y)| 0.5 * (x + y)).collect(), ..a.clone() };
        fused_score += ms_ssim(&fused, gt, 3).unwrap();
        avg_score += ms_ssim(&avg, gt, 3).unwrap();
    }
    let n = pairs.len() as f64;
    let (fused_score, avg_score) = (fused_score / n, avg_score / n);
    let loss_ok = last <= 0.5 * first;
    let gain_ok = fused_score - avg_score >= 0.02;
    let detail = format!(
        "epochs={} lr={} loss_first={first:.4} loss_last={last:.4} (a:{}) held_out=16 ms_ssim_fused={fused_score:.4} ms_ssim_average={avg_score:.4} gain={:.4} (b:{})",
        log.len(),
        log[0].lr,
        if loss_ok { "ok" } else { "no" },
        fused_score - avg_score,
        if gain_ok { "ok" } else { "no" }
    );
    ((loss_ok && gain_ok, detail), checkpoint)
}

/// Identical sharp sources through the trained desk model.
fn fuse_identity(dir: &Path, trained: &Checkpoint) -> (bool, String) {
    let net = UNet::new(trained.header.model.clone()).unwrap();
    let pairs = load_pairs(&dir.join("held")).unwrap();
    let mut worst = f64::INFINITY;
    for (i, (gt, _, _)) in pairs.iter().take(4).enumerate() {
        let fused = fuse_images(trained, &net, gt, gt, i as u64).unwrap();
        worst = worst.min(ms_ssim(&fused, gt, 3).unwrap());
    }
    (worst >= 0.95, format!("held_out_gt=4 min_ms_ssim(fused,a)={worst:.4} required>=0.95"))
}

fn c9() -> (bool, String) {
    let net = UNet::new(UNetConfig::desk()).unwrap();
    let counts = conv_param_counts(&net);
    let m = net.config.m;
    let bad: Vec<&str> = counts.iter().filter(|c| c.params * m != c.regular).map(|c| c.name.as_str()).collect();
    (bad.is_empty(), format!("m={m} layers={} mismatched={bad:?}", counts.len()))
}

fn c10() -> (bool, String) {
    let cfg = UNetConfig::desk();
    let inputs = random_inputs(12, 32, cfg.steps);
    let net = UNet::new(cfg.clone()).unwrap();
    let plain = UNet::new(UNetConfig { plain: true, ..cfg }).unwrap();
    let eq = quarter_turn_error(&net, &net.init_params::<f32>(0).unwrap(), &inputs);
    let pl = quarter_turn_error(&plain, &plain.init_params::<f32>(0).unwrap(), &inputs);
    (pl >= 10.0 * eq, format!("equivariant={eq:.3e} plain={pl:.3e} ratio={:.3e} required>=10", pl / eq.max(f64::MIN_POSITIVE)))
}

fn c11(dir: &Path, trained: &Checkpoint) -> (bool, String) {
    let bytes = trained.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let ck_ok = back.to_bytes().unwrap() == bytes && back.tensors == trained.tensors && back.header == trained.header;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut gen = vec![];
    for name in ["g1", "g2"] {
        cli(&["gen-data", "--out", &s(&dir.join(name)), "--count", "8", "--size", "32", "--seed", "3"]);
        let mut files: Vec<_> = fs::read_dir(dir.join(name)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        gen.push(files.iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap())).collect::<Vec<_>>());
    }
    let gen_ok = gen[0] == gen[1];
    let ck = s(&dir.join("desk.ckpt"));
    let (a, b) = (s(&dir.join("g1/a_0.pgm")), s(&dir.join("g1/b_0.pgm")));
    let mut fused = vec![];
    for name in ["f1.pgm", "f2.pgm"] {
        let out = s(&dir.join(name));
        cli(&["fuse", "--a", &a, "--b", &b, "--ckpt", &ck, "--out", &out, "--seed", "9"]);
        fused.push(fs::read(&out).unwrap());
    }
    let fuse_ok = fused[0] == fused[1];
    (ck_ok && gen_ok && fuse_ok, format!("checkpoint_round_trip={ck_ok} gen_data_identical={gen_ok} fuse_identical={fuse_ok}"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut verdicts = vec![];
    let mut trained = None;
    verdicts.push(timed(8, 1800, || {
        let (v, ck) = c8(tmp.path());
        trained = Some(ck);
        v
    }));
    let trained = trained.unwrap();
    verdicts.push(timed(0, 60, || fuse_identity(tmp.path(), &trained)));
    verdicts.push(timed(1, 10, || c1(&trained)));
    verdicts.push(timed(2, 10, || bound_cases(ScalingOp::MaxPool)));
    verdicts.push(timed(3, 10, || bound_cases(ScalingOp::Upsample)));
    verdicts.push(timed(4, 5, c4));
    verdicts.push(timed(5, 120, c5));
    verdicts.push(timed(6, 60, c6));
    verdicts.push(timed(7, 10, c7));
    verdicts.push(timed(9, 1, c9));
    verdicts.push(timed(10, 30, c10));
    verdicts.push(timed(11, 30, || c11(tmp.path(), &trained)));
    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "summary: {} of {} checks pass; failing {failed:?} (0 is the fuse example); documented {DOCUMENTED_FAILURES:?}",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if failed != DOCUMENTED_FAILURES {
        eprintln!("criteria outcomes differ from the documented ones");
        std::process::exit(1);
    }
}
