//! Reverse-mode differentiation over the equivariant op set.
//!
//! A [`Tape`] records nodes in append order; every node keeps its output
//! value plus whatever its adjoint needs. Spatial values are `[H][W][m][C]`
//! buffers (planar data uses `m = 1`), vectors are `[n]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::eq_ops::{
    conv2d_same, conv2d_same_backward, group_norm_backward, group_norm_forward, maxpool2,
    maxpool2_backward, silu_grad_scalar, silu_scalar, upsample2, upsample2_adjoint,
    GroupNormStats, KernelRealization,
};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

/// Ordered parameter registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return arg_err(format!("parameter {name} registered twice"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient per parameter name, in registry order.
pub type Gradients<T> = ParamStore<T>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spatial {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub c: usize,
}

impl Spatial {
    pub fn unrolled(&self) -> usize {
        self.m * self.c
    }
    pub fn len(&self) -> usize {
        self.h * self.w * self.m * self.c
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(String),
    Realize { src: Var, map: Arc<KernelRealization> },
    Conv { x: Var, w: Var, p: usize },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupNormStats },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: T },
    ChannelBias { x: Var, bias: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { a: Var, b: Var },
    MeanGroup { x: Var },
    L2Norm { x: Var },
    Sum { x: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Vec<T>,
    spatial: Option<Spatial>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Vec<T>, spatial: Option<Spatial>) -> Var {
        self.nodes.push(Node { op, value, spatial });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Every max-pool selection recorded so far, in append order. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn pool_pattern(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaxPool { arg, .. } => Some(arg.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    pub fn spatial(&self, v: Var) -> Option<Spatial> {
        self.nodes[v.0].spatial
    }

    fn need_spatial(&self, v: Var) -> Result<Spatial> {
        self.nodes[v.0]
            .spatial
            .ok_or_else(|| Error::Shape("operation needs a spatial operand".into()))
    }

    pub fn constant(&mut self, values: Vec<T>) -> Var {
        self.push(Op::Constant, values, None)
    }

    pub fn constant_spatial(&mut self, s: Spatial, values: Vec<T>) -> Result<Var> {
        if values.len() != s.len() {
            return shape_err(format!("{s:?} does not hold {} values", values.len()));
        }
        Ok(self.push(Op::Constant, values, Some(s)))
    }

    /// Registers a named parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, name: &str, store: &ParamStore<T>) -> Result<Var> {
        let t = store.require(name)?;
        Ok(self.push(Op::Param(name.to_string()), t.data.clone(), None))
    }

    /// Dense unrolled weight realized from base weights.
    pub fn realize(&mut self, src: Var, map: Arc<KernelRealization>) -> Result<Var> {
        if self.value(src).len() != map.param_count() {
            return shape_err("base weight length does not match the kernel realization");
        }
        let value = map.realize(self.value(src));
        Ok(self.push(Op::Realize { src, map }, value, None))
    }

    /// Same-padded `p×p` correlation producing `m_out × c_out` unrolled channels.
    pub fn conv(&mut self, x: Var, w: Var, p: usize, m_out: usize, c_out: usize) -> Result<Var> {
        let s = self.need_spatial(x)?;
        let din = s.unrolled();
        if self.value(w).len() != p * p * din * m_out * c_out {
            return shape_err(format!(
                "conv weight has {} values, expected {}x{}x{}x{}",
                self.value(w).len(),
                p * p,
                din,
                m_out,
                c_out
            ));
        }
        let value = conv2d_same(self.value(x), s.h, s.w, din, self.value(w), p, m_out * c_out);
        let out = Spatial { h: s.h, w: s.w, m: m_out, c: c_out };
        Ok(self.push(Op::Conv { x, w, p }, value, Some(out)))
    }

    pub fn maxpool(&mut self, x: Var) -> Result<Var> {
        let s = self.need_spatial(x)?;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return shape_err(format!("maxpool needs even dimensions, got {}x{}", s.h, s.w));
        }
        let (value, arg) = maxpool2(self.value(x), s.h, s.w, s.unrolled());
        let out = Spatial { h: s.h / 2, w: s.w / 2, ..s };
        Ok(self.push(Op::MaxPool { x, arg }, value, Some(out)))
    }

    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let s = self.need_spatial(x)?;
        let value = upsample2(self.value(x), s.h, s.w, s.unrolled());
        let out = Spatial { h: s.h * 2, w: s.w * 2, ..s };
        Ok(self.push(Op::Upsample { x }, value, Some(out)))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.need_spatial(x)?;
        crate::eq_ops::check_groups(s.c, groups)?;
        if self.value(gamma).len() != s.c || self.value(beta).len() != s.c {
            return shape_err("gamma/beta length must equal the channel count");
        }
        let (value, stats) = group_norm_forward(
            self.value(x),
            s.h * s.w,
            s.m,
            s.c,
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        );
        Ok(self.push(Op::GroupNorm { x, gamma, beta, groups, stats }, value, Some(s)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| silu_scalar(v)).collect();
        let s = self.spatial(x);
        self.push(Op::Silu { x }, value, s)
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.spatial(a) != self.spatial(b) {
            return shape_err("elementwise operands differ in shape");
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let s = self.spatial(a);
        Ok(self.push(Op::Add { a, b }, value, s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let s = self.spatial(a);
        Ok(self.push(Op::Sub { a, b }, value, s))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * s).collect();
        let sp = self.spatial(x);
        self.push(Op::Scale { x, s }, value, sp)
    }

    /// Adds `bias[c]` at every pixel and group index.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.need_spatial(x)?;
        if self.value(bias).len() != s.c {
            return shape_err(format!("bias has {} values for {} channels", self.value(bias).len(), s.c));
        }
        let b = self.value(bias);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % s.c]).collect();
        Ok(self.push(Op::ChannelBias { x, bias }, value, Some(s)))
    }

    /// `y = W x + b` with `W` stored row-major as `[out][in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let n_out = self.value(b).len();
        if self.value(w).len() != n_in * n_out {
            return shape_err(format!("linear weight is not {n_out}x{n_in}"));
        }
        let mut value = self.value(b).to_vec();
        T::gemm(n_out, n_in, 1, self.value(w), false, self.value(x), false, &mut value, true);
        Ok(self.push(Op::Linear { x, w, b }, value, None))
    }

    /// Channel concatenation within each group slice.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.need_spatial(a)?;
        let sb = self.need_spatial(b)?;
        if (sa.h, sa.w, sa.m) != (sb.h, sb.w, sb.m) {
            return shape_err(format!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let c = sa.c + sb.c;
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(sa.h * sa.w * sa.m * c);
        for pm in 0..sa.h * sa.w * sa.m {
            value.extend_from_slice(&va[pm * sa.c..(pm + 1) * sa.c]);
            value.extend_from_slice(&vb[pm * sb.c..(pm + 1) * sb.c]);
        }
        Ok(self.push(Op::Concat { a, b }, value, Some(Spatial { c, ..sa })))
    }

    /// Average over the group axis, giving an `m = 1` field.
    pub fn mean_group(&mut self, x: Var) -> Result<Var> {
        let s = self.need_spatial(x)?;
        let v = self.value(x);
        let inv = T::of(1.0 / s.m as f64);
        let mut value = vec![T::zero(); s.h * s.w * s.c];
        for px in 0..s.h * s.w {
            for g in 0..s.m {
                for c in 0..s.c {
                    value[px * s.c + c] += v[(px * s.m + g) * s.c + c];
                }
            }
        }
        value.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(Op::MeanGroup { x }, value, Some(Spatial { m: 1, ..s })))
    }

    /// Euclidean norm (unsquared).
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let ss: f64 = self.value(x).iter().map(|v| v.f64() * v.f64()).sum();
        self.push(Op::L2Norm { x }, vec![T::of(ss.sqrt())], None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        self.push(Op::Sum { x }, vec![T::of(s)], None)
    }

    /// Gradient of scalar node `loss` w.r.t. every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        backward(self, loss)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

/// Visits nodes in reverse append order. Parameters registered on the tape but
/// unreachable from `loss` get zero gradients.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    if tape.value(loss).len() != 1 {
        return arg_err(format!("loss must be scalar, node holds {} values", tape.value(loss).len()));
    }
    let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(vec![T::one()]);
    let mut params: Vec<(String, Vec<T>)> = Vec::new();
    for idx in (0..tape.nodes.len()).rev() {
        let node = &tape.nodes[idx];
        let g = if idx <= loss.0 { grads[idx].take() } else { None };
        if let Op::Param(name) = &node.op {
            let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            params.push((name.clone(), g));
            continue;
        }
        let Some(g) = g else { continue };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Realize { src, map } => accumulate(&mut grads, *src, map.adjoint(&g)),
            Op::Conv { x, w, p } => {
                let s = tape.spatial(*x).expect("conv input is spatial");
                let out = node.spatial.expect("conv output is spatial");
                let (gx, gw) = conv2d_same_backward(
                    tape.value(*x),
                    s.h,
                    s.w,
                    s.unrolled(),
                    tape.value(*w),
                    *p,
                    out.unrolled(),
                    &g,
                );
                accumulate(&mut grads, *x, gx);
                accumulate(&mut grads, *w, gw);
            }
            Op::MaxPool { x, arg } => {
                let gx = maxpool2_backward(arg, tape.value(*x).len(), &g);
                accumulate(&mut grads, *x, gx);
            }
            Op::Upsample { x } => {
                let s = tape.spatial(*x).expect("upsample input is spatial");
                accumulate(&mut grads, *x, upsample2_adjoint(&g, s.h, s.w, s.unrolled()));
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let s = tape.spatial(*x).expect("group norm input is spatial");
                let (gx, gg, gb) = group_norm_backward(
                    tape.value(*x),
                    s.h * s.w,
                    s.m,
                    s.c,
                    tape.value(*gamma),
                    *groups,
                    stats,
                    &g,
                );
                accumulate(&mut grads, *x, gx);
                accumulate(&mut grads, *gamma, gg);
                accumulate(&mut grads, *beta, gb);
            }
            Op::Silu { x } => {
                let gx = tape.value(*x).iter().zip(&g).map(|(&v, &go)| go * silu_grad_scalar(v)).collect();
                accumulate(&mut grads, *x, gx);
            }
            Op::Add { a, b } => {
                accumulate(&mut grads, *a, g.clone());
                accumulate(&mut grads, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                accumulate(&mut grads, *a, g);
            }
            Op::Scale { x, s } => accumulate(&mut grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::ChannelBias { x, bias } => {
                let c = tape.value(*bias).len();
                let mut gb = vec![T::zero(); c];
                for (i, &v) in g.iter().enumerate() {
                    gb[i % c] += v;
                }
                accumulate(&mut grads, *bias, gb);
                accumulate(&mut grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let n_in = tape.value(*x).len();
                let n_out = g.len();
                let mut gw = vec![T::zero(); n_in * n_out];
                T::gemm(n_out, 1, n_in, &g, false, tape.value(*x), false, &mut gw, false);
                let mut gx = vec![T::zero(); n_in];
                T::gemm(n_in, n_out, 1, tape.value(*w), true, &g, false, &mut gx, false);
                accumulate(&mut grads, *w, gw);
                accumulate(&mut grads, *x, gx);
                accumulate(&mut grads, *b, g);
            }
            Op::Concat { a, b } => {
                let sa = tape.spatial(*a).expect("concat operand is spatial");
                let sb = tape.spatial(*b).expect("concat operand is spatial");
                let c = sa.c + sb.c;
                let mut ga = Vec::with_capacity(sa.len());
                let mut gb = Vec::with_capacity(sb.len());
                for pm in 0..sa.h * sa.w * sa.m {
                    ga.extend_from_slice(&g[pm * c..pm * c + sa.c]);
                    gb.extend_from_slice(&g[pm * c + sa.c..(pm + 1) * c]);
                }
                accumulate(&mut grads, *a, ga);
                accumulate(&mut grads, *b, gb);
            }
            Op::MeanGroup { x } => {
                let s = tape.spatial(*x).expect("group mean input is spatial");
                let inv = T::of(1.0 / s.m as f64);
                let mut gx = vec![T::zero(); s.len()];
                for px in 0..s.h * s.w {
                    for q in 0..s.m {
                        for c in 0..s.c {
                            gx[(px * s.m + q) * s.c + c] = g[px * s.c + c] * inv;
                        }
                    }
                }
                accumulate(&mut grads, *x, gx);
            }
            Op::L2Norm { x } => {
                let n = node.value[0];
                let gx = if n > T::zero() {
                    tape.value(*x).iter().map(|&v| g[0] * v / n).collect()
                } else {
                    vec![T::zero(); tape.value(*x).len()]
                };
                accumulate(&mut grads, *x, gx);
            }
            Op::Sum { x } => accumulate(&mut grads, *x, vec![g[0]; tape.value(*x).len()]),
        }
    }
    params.reverse();
    let mut out = ParamStore::new();
    for (name, g) in params {
        let n = g.len();
        match out.get_mut(&name) {
            Some(t) => t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => out.insert(name, Tensor { shape: vec![n], data: g })?,
        }
    }
    Ok(out)
}

/// Adam hyper-parameters and learning-rate decay schedule.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 0.99, decay_every: 1000 }
    }
}

impl AdamConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Non-finite gradients
/// abort the step before any parameter changes.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some(bad) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at index {bad}")));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (k, (name, tensor)) in params.names.iter().zip(params.tensors.iter_mut()).enumerate() {
        let Some(g) = grads.get(name) else { continue };
        if g.len() != tensor.len() {
            return shape_err(format!("gradient of {name} has {} values, parameter {}", g.len(), tensor.len()));
        }
        let (m1, m2) = (&mut state.first[k], &mut state.second[k]);
        for i in 0..tensor.len() {
            let gi = g.data[i].f64();
            m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * gi;
            m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * gi * gi;
            let upd = lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + c.eps);
            tensor.data[i] = T::of(tensor.data[i].f64() - upd);
        }
    }
    Ok(())
}

/// One probed coordinate of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` at each coordinate, compared
/// against the analytic gradient.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    coords: &[(String, usize)],
    h: f64,
    mut loss: F,
) -> Result<Vec<FdProbe>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut probes = Vec::with_capacity(coords.len());
    let mut work = params.clone();
    for (name, index) in coords {
        let base = params.require(name)?.data.get(*index).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("{name}[{index}] is out of range"))
        })?;
        work.get_mut(name).expect("present").data[*index] = base + h;
        let up = loss(&work)?;
        work.get_mut(name).expect("present").data[*index] = base - h;
        let down = loss(&work)?;
        work.get_mut(name).expect("present").data[*index] = base;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(name).map_or(0.0, |g| g.data[*index]);
        probes.push(FdProbe {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(probes)
}

pub fn max_relative_error(probes: &[FdProbe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}
