//! Rotation-equivariant denoising U-Net.
//!
//! Dataflow: concat(I_A, I_B, F_t) → head (lift conv, GN, SiLU) →
//! `depth` down blocks [2 ResBlocks, keep skip, maxpool] → mid [2 ResBlocks] →
//! `depth` up blocks [2 ResBlocks, upsample, concat skip] → tail
//! (GN, SiLU, group conv to one channel) → mean over the group axis.
//!
//! `base_channels` counts unrolled channels, so each orientation carries
//! `base_channels / m` channels at the top level.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Spatial, Tape, Tensor, Var};
use crate::diffusion::NoisePredictor;
use crate::eq_ops::{KernelKind, KernelRealization, GN_EPSILON};
use crate::error::{arg_err, shape_err, Result};
use crate::group_action::{FeatureField, PlanarImage, RotationGroup};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Order of the head layer around the lifting convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOrder {
    /// lift conv → GN → SiLU
    ConvFirst,
    /// GN → SiLU → lift conv
    NormFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub m: usize,
    pub depth: usize,
    pub gn_groups: usize,
    pub kernel_size: usize,
    pub time_dim: usize,
    pub steps: usize,
    /// Channel growth cap as a multiple of the top-level width.
    pub max_mult: usize,
    pub head_order: HeadOrder,
    /// Ablation: every convolution holds free dense weights.
    pub plain: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            m: 4,
            depth: 2,
            gn_groups: 4,
            kernel_size: 3,
            time_dim: 32,
            steps: crate::diffusion::DESK_STEPS,
            max_mult: 4,
            head_order: HeadOrder::ConvFirst,
            plain: false,
        }
    }

    /// Channels per orientation at the top level.
    pub fn orientation_channels(&self) -> usize {
        self.base_channels / self.m.max(1)
    }

    /// Per-orientation width of down/up block `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        let c0 = self.orientation_channels();
        c0 * (1usize << i).min(self.max_mult)
    }

    pub fn mid_channels(&self) -> usize {
        self.level_channels(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.depth == 0 || self.steps == 0 {
            return arg_err("m, depth and steps must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return arg_err(format!("kernel size {} is even", self.kernel_size));
        }
        if self.base_channels == 0 || self.base_channels % self.m != 0 {
            return arg_err(format!(
                "base channels {} must be a positive multiple of m = {}",
                self.base_channels, self.m
            ));
        }
        let c0 = self.orientation_channels();
        if self.gn_groups == 0 || c0 % self.gn_groups != 0 {
            return arg_err(format!(
                "{c0} channels per orientation do not split into {} norm groups",
                self.gn_groups
            ));
        }
        if self.max_mult == 0 {
            return arg_err("max_mult must be positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return arg_err("time_dim must be an even number >= 2");
        }
        Ok(())
    }

    /// Spatial sizes must survive `depth` halvings.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let q = 1usize << self.depth;
        if h % q != 0 || w % q != 0 || h == 0 || w == 0 {
            let ph = h.div_ceil(q) * q;
            let pw = w.div_ceil(q) * q;
            return shape_err(format!(
                "input {h}x{w} is not divisible by 2^{} = {q}; pad to {ph}x{pw}",
                self.depth
            ));
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(tω_i)…, cos(tω_i)…]`, `ω_i` log-spaced from 1
/// down to 1/10000.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let omega = |i: usize| {
        if half <= 1 { 1.0 } else { 10000f64.powf(-(i as f64) / (half - 1) as f64) }
    };
    let t = t as f64;
    let mut out: Vec<f64> = (0..half).map(|i| (t * omega(i)).sin()).collect();
    out.extend((0..half).map(|i| (t * omega(i)).cos()));
    out
}

/// One convolution layer: equivariant (base weights + realization) or, in
/// the ablation, a free dense weight.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub kind: KernelKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub m: usize,
    pub realization: Option<Arc<KernelRealization>>,
}

impl ConvLayer {
    fn new(
        name: String,
        kind: KernelKind,
        size: usize,
        cin: usize,
        cout: usize,
        group: &RotationGroup,
        plain: bool,
    ) -> Result<Self> {
        let real = KernelRealization::new(kind, size, cin, cout, group)?;
        Ok(Self {
            name,
            kind,
            in_channels: cin,
            out_channels: cout,
            size,
            m: group.order(),
            realization: (!plain).then(|| Arc::new(real)),
        })
    }

    pub fn dense_in(&self) -> usize {
        match self.kind {
            KernelKind::Lifting => self.in_channels,
            KernelKind::Group => self.in_channels * self.m,
        }
    }

    pub fn dense_out(&self) -> usize {
        self.out_channels * self.m
    }

    pub fn param_count(&self) -> usize {
        match &self.realization {
            Some(r) => r.param_count(),
            None => self.regular_param_count(),
        }
    }

    /// Parameters of an unconstrained convolution between the same unrolled
    /// channel counts.
    pub fn regular_param_count(&self) -> usize {
        self.size * self.size * self.dense_in() * self.dense_out()
    }

    fn init(&self, store: &mut ParamStore<impl Scalar>, rng: &mut SeededRng) -> Result<()> {
        let fan_in = (self.dense_in() * self.size * self.size) as f64;
        let std = fan_in.sqrt().recip();
        let n = self.param_count();
        let data = (0..n).map(|_| Scalar::of(rng.normal() * std)).collect();
        store.insert(self.name.clone(), Tensor { shape: vec![n], data })
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.name, params)?;
        let dense = match &self.realization {
            Some(r) => tape.realize(w, r.clone())?,
            None => w,
        };
        tape.conv(x, dense, self.size, self.m, self.out_channels)
    }
}

#[derive(Clone, Debug)]
struct NormLayer {
    prefix: String,
    channels: usize,
    groups: usize,
}

impl NormLayer {
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{}.gamma", self.prefix), Tensor::filled(vec![self.channels], T::one()))?;
        store.insert(format!("{}.beta", self.prefix), Tensor::zeros(vec![self.channels]))
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(&format!("{}.gamma", self.prefix), params)?;
        let b = tape.param(&format!("{}.beta", self.prefix), params)?;
        tape.group_norm(x, g, b, self.groups, GN_EPSILON)
    }
}

/// Dense map `y = W x + b`.
#[derive(Clone, Debug)]
struct DenseLayer {
    prefix: String,
    n_in: usize,
    n_out: usize,
}

impl DenseLayer {
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<()> {
        let std = (self.n_in as f64).sqrt().recip();
        let w = (0..self.n_in * self.n_out).map(|_| T::of(rng.normal() * std)).collect();
        store.insert(format!("{}.w", self.prefix), Tensor { shape: vec![self.n_out, self.n_in], data: w })?;
        store.insert(format!("{}.b", self.prefix), Tensor::zeros(vec![self.n_out]))
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.w", self.prefix), params)?;
        let b = tape.param(&format!("{}.b", self.prefix), params)?;
        tape.linear(x, w, b)
    }
}

/// `out = shortcut(x) + conv2(silu(gn2(conv1(silu(gn1(x))) + time_bias)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    gn1: NormLayer,
    conv1: ConvLayer,
    time: DenseLayer,
    gn2: NormLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

impl ResBlock {
    pub fn new(prefix: &str, cin: usize, cout: usize, cfg: &UNetConfig, group: &RotationGroup) -> Result<Self> {
        let p = cfg.kernel_size;
        let conv = |n: &str, a, b, size| {
            ConvLayer::new(format!("{prefix}.{n}"), KernelKind::Group, size, a, b, group, cfg.plain)
        };
        Ok(Self {
            prefix: prefix.to_string(),
            in_channels: cin,
            out_channels: cout,
            gn1: NormLayer { prefix: format!("{prefix}.gn1"), channels: cin, groups: cfg.gn_groups },
            conv1: conv("conv1", cin, cout, p)?,
            time: DenseLayer { prefix: format!("{prefix}.time"), n_in: cfg.time_dim, n_out: cout },
            gn2: NormLayer { prefix: format!("{prefix}.gn2"), channels: cout, groups: cfg.gn_groups },
            conv2: conv("conv2", cout, cout, p)?,
            shortcut: if cin != cout { Some(conv("skip", cin, cout, 1)?) } else { None },
        })
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.conv1, &self.conv2];
        v.extend(self.shortcut.as_ref());
        v
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<()> {
        self.gn1.init(store)?;
        self.conv1.init(store, rng)?;
        self.time.init(store, rng)?;
        self.gn2.init(store)?;
        self.conv2.init(store, rng)?;
        if let Some(s) = &self.shortcut {
            s.init(store, rng)?;
        }
        Ok(())
    }

    /// `temb` is the activated time embedding shared by all blocks.
    pub fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.gn1.build(tape, params, x)?;
        let h = tape.silu(h);
        let h = self.conv1.build(tape, params, h)?;
        let bias = self.time.build(tape, params, temb)?;
        let h = tape.channel_bias(h, bias)?;
        let h = self.gn2.build(tape, params, h)?;
        let h = tape.silu(h);
        let h = self.conv2.build(tape, params, h)?;
        let s = match &self.shortcut {
            Some(c) => c.build(tape, params, x)?,
            None => x,
        };
        tape.add(s, h)
    }
}

/// Runs one ResBlock on a field with an already activated time embedding.
pub fn resblock_forward<T: Scalar>(
    f: &FeatureField<T>,
    t_emb: &[T],
    block: &ResBlock,
    params: &ParamStore<T>,
) -> Result<FeatureField<T>> {
    let mut tape = Tape::new();
    let s = Spatial { h: f.height, w: f.width, m: f.group_order, c: f.channels };
    let x = tape.constant_spatial(s, f.values.clone())?;
    let e = tape.constant(t_emb.to_vec());
    let y = block.build(&mut tape, params, x, e)?;
    let o = tape.spatial(y).expect("resblock output is spatial");
    Ok(FeatureField { height: o.h, width: o.w, group_order: o.m, channels: o.c, values: tape.value(y).to_vec() })
}

#[derive(Clone, Debug)]
struct Head {
    conv: ConvLayer,
    gn: NormLayer,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub group: RotationGroup,
    head: Head,
    temb1: DenseLayer,
    temb2: DenseLayer,
    down: Vec<[ResBlock; 2]>,
    mid: [ResBlock; 2],
    up: Vec<[ResBlock; 2]>,
    tail_gn: NormLayer,
    tail_conv: ConvLayer,
}

pub const INPUT_CHANNELS: usize = 3;

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let group = RotationGroup::new(config.m)?;
        let c = &config;
        let c0 = c.orientation_channels();
        let head = Head {
            conv: ConvLayer::new(
                "head.conv".into(),
                KernelKind::Lifting,
                c.kernel_size,
                INPUT_CHANNELS,
                c0,
                &group,
                c.plain,
            )?,
            gn: match c.head_order {
                HeadOrder::ConvFirst => NormLayer { prefix: "head.gn".into(), channels: c0, groups: c.gn_groups },
                HeadOrder::NormFirst => {
                    NormLayer { prefix: "head.gn".into(), channels: INPUT_CHANNELS, groups: 1 }
                }
            },
        };
        let pair = |name: &str, cin: usize, cout: usize| -> Result<[ResBlock; 2]> {
            Ok([
                ResBlock::new(&format!("{name}.rb0"), cin, cout, c, &group)?,
                ResBlock::new(&format!("{name}.rb1"), cout, cout, c, &group)?,
            ])
        };
        let mut down = Vec::new();
        let mut cin = c0;
        for i in 0..c.depth {
            down.push(pair(&format!("down{i}"), cin, c.level_channels(i))?);
            cin = c.level_channels(i);
        }
        let mid = pair("mid", cin, c.mid_channels())?;
        let mut up = Vec::new();
        let mut cin = c.mid_channels();
        for i in (0..c.depth).rev() {
            up.push(pair(&format!("up{i}"), cin, c.level_channels(i))?);
            cin = 2 * c.level_channels(i);
        }
        let tail_gn = NormLayer { prefix: "tail.gn".into(), channels: cin, groups: c.gn_groups };
        let tail_conv =
            ConvLayer::new("tail.conv".into(), KernelKind::Group, c.kernel_size, cin, 1, &group, c.plain)?;
        let temb1 = DenseLayer { prefix: "temb.l1".into(), n_in: c.time_dim, n_out: c.time_dim };
        let temb2 = DenseLayer { prefix: "temb.l2".into(), n_in: c.time_dim, n_out: c.time_dim };
        Ok(Self { config, group, head, temb1, temb2, down, mid, up, tail_gn, tail_conv })
    }

    fn blocks(&self) -> impl Iterator<Item = &ResBlock> {
        self.down.iter().flatten().chain(self.mid.iter()).chain(self.up.iter().flatten())
    }

    /// Every convolution layer in forward order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.head.conv];
        for b in self.blocks() {
            v.extend(b.conv_layers());
        }
        v.push(&self.tail_conv);
        v
    }

    /// Fresh parameters; convolution and dense weights `N(0, 1/fan_in)`,
    /// norm scales 1, shifts and biases 0.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = SeededRng::new(seed);
        let mut s = ParamStore::new();
        self.head.conv.init(&mut s, &mut rng)?;
        self.head.gn.init(&mut s)?;
        self.temb1.init(&mut s, &mut rng)?;
        self.temb2.init(&mut s, &mut rng)?;
        for b in self.blocks() {
            b.init_params(&mut s, &mut rng)?;
        }
        self.tail_gn.init(&mut s)?;
        self.tail_conv.init(&mut s, &mut rng)?;
        Ok(s)
    }

    /// Checks that a parameter store matches this architecture exactly.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let want: ParamStore<T> = self.init_params(0)?;
        if want.names() != params.names() {
            return shape_err("parameter names differ from the architecture");
        }
        for ((n, a), (_, b)) in want.iter().zip(params.iter()) {
            if a.shape != b.shape {
                return shape_err(format!("parameter {n} has shape {:?}, expected {:?}", b.shape, a.shape));
            }
        }
        Ok(())
    }

    /// Activated time embedding `silu(L2(silu(L1(features(t)))))`.
    pub fn build_time<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, t: usize) -> Result<Var> {
        let f = tape.constant(time_features(t, self.config.time_dim).into_iter().map(T::of).collect());
        let h = self.temb1.build(tape, params, f)?;
        let h = tape.silu(h);
        let h = self.temb2.build(tape, params, h)?;
        Ok(tape.silu(h))
    }

    /// Records the forward pass; `input` is the `[H][W][1][3]` stack of
    /// `(I_A, I_B, F_t)`. Returns the planar ε-prediction node.
    pub fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, input: Var, t: usize) -> Result<Var> {
        let s = tape.spatial(input).expect("network input is spatial");
        self.config.check_input_size(s.h, s.w)?;
        let temb = self.build_time(tape, params, t)?;
        let mut h = match self.config.head_order {
            HeadOrder::ConvFirst => {
                let h = self.head.conv.build(tape, params, input)?;
                let h = self.head.gn.build(tape, params, h)?;
                tape.silu(h)
            }
            HeadOrder::NormFirst => {
                let h = self.head.gn.build(tape, params, input)?;
                let h = tape.silu(h);
                self.head.conv.build(tape, params, h)?
            }
        };
        let mut skips = Vec::with_capacity(self.down.len());
        for [a, b] in &self.down {
            h = a.build(tape, params, h, temb)?;
            h = b.build(tape, params, h, temb)?;
            skips.push(h);
            h = tape.maxpool(h)?;
        }
        for rb in &self.mid {
            h = rb.build(tape, params, h, temb)?;
        }
        for [a, b] in &self.up {
            h = a.build(tape, params, h, temb)?;
            h = b.build(tape, params, h, temb)?;
            h = tape.upsample(h)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip)?;
        }
        let h = self.tail_gn.build(tape, params, h)?;
        let h = tape.silu(h);
        let h = self.tail_conv.build(tape, params, h)?;
        tape.mean_group(h)
    }

    /// Input node holding the channel stack of the three planar images.
    pub fn input_node<T: Scalar>(
        tape: &mut Tape<T>,
        ia: &PlanarImage<T>,
        ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
    ) -> Result<Var> {
        if !ia.same_shape(ib) || !ia.same_shape(f_t) || ia.channels != 1 {
            return shape_err("I_A, I_B and F_t must be single-channel images of one size");
        }
        let stacked = PlanarImage::concat_channels(&[ia, ib, f_t])?;
        let s = Spatial { h: ia.height, w: ia.width, m: 1, c: INPUT_CHANNELS };
        tape.constant_spatial(s, stacked.values)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        ia: &PlanarImage<T>,
        ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
        t: usize,
    ) -> Result<PlanarImage<T>> {
        let mut tape = Tape::new();
        let x = Self::input_node(&mut tape, ia, ib, f_t)?;
        let y = self.build(&mut tape, params, x, t)?;
        PlanarImage::new(ia.height, ia.width, 1, tape.value(y).to_vec())
    }
}

/// `ε_θ(I_A, I_B, F_t, t)`.
pub fn unet_forward<T: Scalar>(
    ia: &PlanarImage<T>,
    ib: &PlanarImage<T>,
    f_t: &PlanarImage<T>,
    t: usize,
    params: &ParamStore<T>,
    net: &UNet,
) -> Result<PlanarImage<T>> {
    net.forward(params, ia, ib, f_t, t)
}

/// A network paired with a parameter snapshot.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a, T> {
    pub net: &'a UNet,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> NoisePredictor<T> for Model<'_, T> {
    fn predict_noise(
        &self,
        ia: &PlanarImage<T>,
        ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
        t: usize,
    ) -> Result<PlanarImage<T>> {
        self.net.forward(self.params, ia, ib, f_t, t)
    }
}

/// Parameter count of one convolution layer next to its unconstrained
/// counterpart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
    pub regular: usize,
}

pub fn conv_param_counts(net: &UNet) -> Vec<LayerCount> {
    net.conv_layers()
        .into_iter()
        .map(|l| LayerCount { name: l.name.clone(), params: l.param_count(), regular: l.regular_param_count() })
        .collect()
}
