//! Minibatch training of the ε-prediction objective with Adam.

use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Gradients, ParamStore, Tensor};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::group_action::PlanarImage;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::unet::UNet;

/// Conditioning pair and its all-in-focus target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub ia: PlanarImage<T>,
    pub ib: PlanarImage<T>,
    pub target: PlanarImage<T>,
}

/// `‖ε − ε_θ(I_A, I_B, F_t, t)‖₂` and its parameter gradient for fixed `t`, ε.
pub fn loss_and_grads<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    ex: &Example<T>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &PlanarImage<T>,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = crate::autodiff::Tape::new();
    let loss = build_loss(net, params, ex, sched, t, eps, &mut tape)?;
    let value = tape.value(loss)[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss at t={t}")));
    }
    Ok((value, tape.backward(loss)?))
}

/// Loss value alone, with the same arithmetic as [`loss_and_grads`].
pub fn loss_value<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    ex: &Example<T>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &PlanarImage<T>,
) -> Result<f64> {
    let mut tape = crate::autodiff::Tape::new();
    let loss = build_loss(net, params, ex, sched, t, eps, &mut tape)?;
    Ok(tape.value(loss)[0].f64())
}

fn build_loss<T: Scalar>(
    net: &UNet,
    params: &ParamStore<T>,
    ex: &Example<T>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &PlanarImage<T>,
    tape: &mut crate::autodiff::Tape<T>,
) -> Result<crate::autodiff::Var> {
    let f_t = forward_sample(&ex.target, t, eps, sched)?;
    let x = UNet::input_node(tape, &ex.ia, &ex.ib, &f_t)?;
    let pred = net.build(tape, params, x, t)?;
    let s = tape.spatial(pred).expect("prediction is spatial");
    let target = tape.constant_spatial(s, eps.values.clone())?;
    let diff = tape.sub(target, pred)?;
    Ok(tape.l2_norm(diff))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch: 4, seed: 0, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Training state: parameters, optimizer moments and the epoch counter.
/// Each epoch draws its shuffle, steps and noise from a stream forked off the
/// seed by epoch number, so a resumed run continues the same sequence.
#[derive(Clone, Debug)]
pub struct Trainer<'a, T> {
    pub net: &'a UNet,
    pub schedule: &'a NoiseSchedule,
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(net: &'a UNet, schedule: &'a NoiseSchedule, config: TrainConfig, params: ParamStore<T>) -> Self {
        let adam = AdamState::new(config.adam, &params);
        Self { net, schedule, config, params, adam, epochs_done: 0 }
    }

    /// Continue from saved parameters and optimizer state.
    pub fn resume(
        net: &'a UNet,
        schedule: &'a NoiseSchedule,
        config: TrainConfig,
        params: ParamStore<T>,
        adam: AdamState,
        epochs_done: usize,
    ) -> Result<Self> {
        let aligned = adam.first.len() == params.len()
            && adam.second.len() == params.len()
            && params.iter().zip(&adam.first).zip(&adam.second).all(|(((_, t), a), b)| a.len() == t.len() && b.len() == t.len());
        if !aligned {
            return shape_err("optimizer state does not match the parameter set");
        }
        Ok(Self { net, schedule, config, params, adam, epochs_done })
    }

    pub fn run_epoch(&mut self, data: &[Example<T>]) -> Result<EpochRecord> {
        if data.is_empty() {
            return shape_err("training set is empty");
        }
        let epoch = self.epochs_done;
        let mut rng = SeededRng::fork(self.config.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(0, i + 1));
        }
        let lr = self.config.adam.lr_at(epoch);
        let batch = self.config.batch.max(1);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let draws: Vec<(usize, usize, PlanarImage<T>)> = chunk
                .iter()
                .map(|&i| {
                    let t = rng.below(1, self.schedule.steps() + 1);
                    let eps = PlanarImage { values: rng.normal_vec(data[i].target.values.len()), ..data[i].target.clone() };
                    (i, t, eps)
                })
                .collect();
            let (net, params, sched) = (self.net, &self.params, self.schedule);
            let results: Vec<Result<(f64, Gradients<T>)>> = draws
                .par_iter()
                .map(|(i, t, eps)| loss_and_grads(net, params, &data[*i], sched, *t, eps))
                .collect();
            let mut sum: Option<Gradients<T>> = None;
            for r in results {
                let (loss, g) = r?;
                total += loss;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (name, t) in g.iter() {
                            let a = acc.get_mut(name).expect("same parameter set");
                            a.data.iter_mut().zip(&t.data).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = T::of(1.0 / chunk.len() as f64);
            let names: Vec<String> = grads.names().to_vec();
            for n in names {
                let t: &mut Tensor<T> = grads.get_mut(&n).expect("listed");
                t.data.iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        }
        self.epochs_done += 1;
        Ok(EpochRecord { epoch: self.epochs_done, mean_loss: total / data.len() as f64, lr })
    }
}

/// Outcome of a full-loss gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub probes: Vec<crate::autodiff::FdProbe>,
    /// Draws rejected because `θ ± h` changed a max-pool selection, where
    /// the loss has a kink and central differences do not estimate the
    /// derivative.
    pub straddled: usize,
}

fn loss_and_pattern(
    net: &UNet,
    params: &ParamStore<f64>,
    ex: &Example<f64>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &PlanarImage<f64>,
) -> Result<(f64, Vec<u32>)> {
    let mut tape = crate::autodiff::Tape::new();
    let loss = build_loss(net, params, ex, sched, t, eps, &mut tape)?;
    Ok((tape.value(loss)[0], tape.pool_pattern()))
}

/// Central-difference check of the full loss at `count` parameter coordinates
/// drawn uniformly over all parameter values.
#[allow(clippy::too_many_arguments)]
pub fn full_loss_gradient_check(
    net: &UNet,
    params: &ParamStore<f64>,
    ex: &Example<f64>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &PlanarImage<f64>,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, grads) = loss_and_grads(net, params, ex, sched, t, eps)?;
    let (_, pattern) = loss_and_pattern(net, params, ex, sched, t, eps)?;
    let total = params.total_values();
    let mut rng = SeededRng::new(seed);
    let mut work = params.clone();
    let mut probes = Vec::with_capacity(count);
    let mut straddled = 0;
    while probes.len() < count {
        if straddled > 10 * count.max(1) {
            return Err(Error::InvalidArgument("too many probes straddle max-pool switches".into()));
        }
        let mut k = rng.below(0, total);
        let mut name = String::new();
        for (n, t) in params.iter() {
            if k < t.len() {
                name = n.to_string();
                break;
            }
            k -= t.len();
        }
        let base = params.require(&name)?.data[k];
        work.get_mut(&name).expect("present").data[k] = base + h;
        let (up, p_up) = loss_and_pattern(net, &work, ex, sched, t, eps)?;
        work.get_mut(&name).expect("present").data[k] = base - h;
        let (down, p_down) = loss_and_pattern(net, &work, ex, sched, t, eps)?;
        work.get_mut(&name).expect("present").data[k] = base;
        if p_up != pattern || p_down != pattern {
            straddled += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(&name).map_or(0.0, |g| g.data[k]);
        probes.push(crate::autodiff::FdProbe {
            name,
            index: k,
            analytic,
            numeric,
            rel_error: crate::autodiff::relative_error(analytic, numeric),
        });
    }
    Ok(GradientCheck { probes, straddled })
}
