use rediffuse_core::autodiff::{ParamStore, Tensor};
use rediffuse_core::group_action::{rotate_field, rotate_image, FeatureField, PlanarImage, RotationGroup};
use rediffuse_core::rng::SeededRng;
use rediffuse_core::unet::{
    conv_param_counts, resblock_forward, time_features, HeadOrder, ResBlock, UNet, UNetConfig,
};

fn small_config(m: usize) -> UNetConfig {
    UNetConfig { base_channels: 4 * m, gn_groups: 2, time_dim: 16, ..UNetConfig::desk() }
}

fn images(seed: u64, n: usize) -> [PlanarImage<f32>; 3] {
    let mut r = SeededRng::new(seed);
    let mut img = |noise: bool| {
        PlanarImage::from_fn(n, n, 1, |_, _, _| if noise { r.normal() as f32 } else { r.uniform() as f32 })
    };
    [img(false), img(false), img(true)]
}

#[test]
fn time_features_at_zero() {
    let f = time_features(0, 16);
    assert!(f[..8].iter().all(|&v| v == 0.0));
    assert!(f[8..].iter().all(|&v| v == 1.0));
}

#[test]
fn time_features_distinguish_steps() {
    let e: Vec<Vec<f64>> = [1, 50, 100].iter().map(|&t| time_features(t, 32)).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            let d: f64 = e[i].iter().zip(&e[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d.sqrt() > 1e-3);
        }
    }
}

#[test]
fn desk_output_shape() {
    let net = UNet::new(UNetConfig::desk()).unwrap();
    let p = net.init_params::<f32>(1).unwrap();
    let [a, b, f] = images(2, 32);
    let out = net.forward(&p, &a, &b, &f, 10).unwrap();
    assert_eq!((out.height, out.width, out.channels), (32, 32, 1));
}

#[test]
fn depth_four_reaches_two_by_two_bottleneck() {
    let cfg = UNetConfig { base_channels: 16, depth: 4, ..small_config(4) };
    assert_eq!(32 >> cfg.depth, 2);
    let net = UNet::new(cfg).unwrap();
    let p = net.init_params::<f32>(1).unwrap();
    let [a, b, f] = images(3, 32);
    let out = net.forward(&p, &a, &b, &f, 3).unwrap();
    assert_eq!((out.height, out.width), (32, 32));
    // one more level would need 64 | 32
    let deeper = UNet::new(UNetConfig { depth: 6, ..net.config.clone() }).unwrap();
    let p = deeper.init_params::<f32>(1).unwrap();
    let err = deeper.forward(&p, &a, &b, &f, 3).unwrap_err().to_string();
    assert!(err.contains("pad to 64x64"), "{err}");
}

#[test]
fn indivisible_input_rejected() {
    let net = UNet::new(small_config(4)).unwrap();
    let p = net.init_params::<f32>(1).unwrap();
    let [a, b, f] = images(3, 34);
    let err = net.forward(&p, &a, &b, &f, 3).unwrap_err().to_string();
    assert!(err.contains("pad to 36x36"), "{err}");
}

#[test]
fn invalid_configs_rejected() {
    assert!(UNet::new(UNetConfig { base_channels: 30, ..UNetConfig::desk() }).is_err());
    assert!(UNet::new(UNetConfig { gn_groups: 3, ..UNetConfig::desk() }).is_err());
    assert!(UNet::new(UNetConfig { kernel_size: 4, ..UNetConfig::desk() }).is_err());
    assert!(UNet::new(UNetConfig { depth: 0, ..UNetConfig::desk() }).is_err());
}

#[test]
fn end_to_end_quarter_turn_equivariance() {
    for order in [HeadOrder::ConvFirst, HeadOrder::NormFirst] {
        let net = UNet::new(UNetConfig { head_order: order, ..UNetConfig::desk() }).unwrap();
        let g = net.group.clone();
        let p = net.init_params::<f32>(7).unwrap();
        let [a, b, f] = images(8, 32);
        let base = net.forward(&p, &a, &b, &f, 37).unwrap();
        for k in 1..4 {
            let r = |x: &PlanarImage<f32>| rotate_image(x, &g, k).unwrap();
            let lhs = net.forward(&p, &r(&a), &r(&b), &r(&f), 37).unwrap();
            let err = lhs.max_abs_diff(&r(&base));
            assert!(err <= 1e-4, "{order:?} k={k} err={err}");
        }
    }
}

#[test]
fn resblock_equivariance() {
    let cfg = small_config(4);
    let g = RotationGroup::new(4).unwrap();
    let rb = ResBlock::new("rb", 4, 6, &cfg, &g).unwrap();
    let mut params = ParamStore::<f32>::new();
    rb.init_params(&mut params, &mut SeededRng::new(3)).unwrap();
    let mut r = SeededRng::new(4);
    let f = FeatureField::from_fn(8, 8, 4, 4, |_, _, _, _| r.normal() as f32);
    let temb: Vec<f32> = r.normal_vec(cfg.time_dim);
    let base = resblock_forward(&f, &temb, &rb, &params).unwrap();
    for k in 1..4 {
        let lhs = resblock_forward(&rotate_field(&f, &g, k).unwrap(), &temb, &rb, &params).unwrap();
        assert!(lhs.max_abs_diff(&rotate_field(&base, &g, k).unwrap()) <= 1e-5);
    }
}

fn zeroed(params: &ParamStore<f64>, keep: impl Fn(&str) -> bool) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (n, t) in params.iter() {
        let t = if keep(n) { t.clone() } else { Tensor::zeros(t.shape.clone()) };
        out.insert(n, t).unwrap();
    }
    out
}

#[test]
fn zero_resblock_is_identity() {
    let cfg = small_config(4);
    let g = RotationGroup::new(4).unwrap();
    let rb = ResBlock::new("rb", 4, 4, &cfg, &g).unwrap();
    let mut params = ParamStore::<f64>::new();
    rb.init_params(&mut params, &mut SeededRng::new(3)).unwrap();
    let params = zeroed(&params, |n| n.ends_with("gamma"));
    let mut r = SeededRng::new(5);
    let f = FeatureField::from_fn(8, 8, 4, 4, |_, _, _, _| r.normal());
    let temb: Vec<f64> = r.normal_vec(cfg.time_dim);
    assert_eq!(resblock_forward(&f, &temb, &rb, &params).unwrap(), f);
}

#[test]
fn time_reaches_output_only_through_time_weights() {
    let cfg = small_config(4);
    let g = RotationGroup::new(4).unwrap();
    let rb = ResBlock::new("rb", 4, 4, &cfg, &g).unwrap();
    let mut params = ParamStore::<f64>::new();
    rb.init_params(&mut params, &mut SeededRng::new(3)).unwrap();
    let mut r = SeededRng::new(6);
    let f = FeatureField::from_fn(8, 8, 4, 4, |_, _, _, _| r.normal());
    let (e1, e2): (Vec<f64>, Vec<f64>) = (r.normal_vec(16), r.normal_vec(16));
    let a = resblock_forward(&f, &e1, &rb, &params).unwrap();
    let b = resblock_forward(&f, &e2, &rb, &params).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
    let frozen = zeroed(&params, |n| !n.contains(".time."));
    let a = resblock_forward(&f, &e1, &rb, &frozen).unwrap();
    let b = resblock_forward(&f, &e2, &rb, &frozen).unwrap();
    assert_eq!(a, b);
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let cfg = UNetConfig::desk();
    let (m, p2) = (cfg.m, cfg.kernel_size * cfg.kernel_size);
    let net = UNet::new(cfg).unwrap();
    let counts = conv_param_counts(&net);
    for c in &counts {
        assert_eq!(c.params * m, c.regular, "{}", c.name);
    }
    // per-orientation widths: head 8, levels [8, 16], mid 32
    let rb = |cin: usize, cout: usize| {
        cout * cin * m * p2 + cout * cout * m * p2 + if cin != cout { cout * cin * m } else { 0 }
    };
    let want = 8 * 3 * p2
        + rb(8, 8) + rb(8, 8)
        + rb(8, 16) + rb(16, 16)
        + rb(16, 32) + rb(32, 32)
        + rb(32, 16) + rb(16, 16)
        + rb(32, 8) + rb(8, 8)
        + 16 * m * p2;
    assert_eq!(counts.iter().map(|c| c.params).sum::<usize>(), want);
}

#[test]
fn ablation_counts_are_regular() {
    let net = UNet::new(UNetConfig { plain: true, ..UNetConfig::desk() }).unwrap();
    for c in conv_param_counts(&net) {
        assert_eq!(c.params, c.regular);
    }
}

#[test]
fn forward_is_deterministic() {
    let net = UNet::new(small_config(4)).unwrap();
    let p = net.init_params::<f32>(11).unwrap();
    let [a, b, f] = images(12, 16);
    assert_eq!(net.forward(&p, &a, &b, &f, 5).unwrap(), net.forward(&p, &a, &b, &f, 5).unwrap());
    assert_eq!(p, net.init_params::<f32>(11).unwrap());
}
