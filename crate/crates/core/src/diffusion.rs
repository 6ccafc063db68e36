//! DDPM noise schedule, forward noising, ε-prediction loss and the
//! deterministic mean-only reverse sampler.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::group_action::PlanarImage;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// β, α, ᾱ and σ² tables. Step indices are 1-based; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return arg_err("schedule needs at least one step");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return arg_err(format!("beta {b} outside (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// Default desk-scale schedule length and β endpoints.
pub const DESK_STEPS: usize = 100;
pub const DESK_BETA_START: f64 = 1e-4;
pub const DESK_BETA_END: f64 = 0.1;

/// Linearly interpolated β from `beta_start` to `beta_end`, endpoints included.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, shape: ScheduleShape) -> Result<NoiseSchedule> {
    if steps < 1 {
        return arg_err("schedule length must be at least 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return arg_err(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let beta = match shape {
        ScheduleShape::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

/// Noisy target at step `t` while running the reverse process.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState<T> {
    pub f_t: PlanarImage<T>,
    pub t: usize,
}

/// ε-prediction conditioned on the two source images.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(
        &self,
        ia: &PlanarImage<T>,
        ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
        t: usize,
    ) -> Result<PlanarImage<T>>;
}

/// `F_t = √ᾱ_t·F0 + √(1−ᾱ_t)·ε`; `t = 0` returns `F0`.
pub fn forward_sample<T: Scalar>(
    f0: &PlanarImage<T>,
    t: usize,
    eps: &PlanarImage<T>,
    sched: &NoiseSchedule,
) -> Result<PlanarImage<T>> {
    if !f0.same_shape(eps) {
        return shape_err("noise and target differ in shape");
    }
    if t > sched.steps() {
        return arg_err(format!("step {t} beyond schedule length {}", sched.steps()));
    }
    let a = T::of(sched.alpha_bar(t).sqrt());
    let b = T::of((1.0 - sched.alpha_bar(t)).sqrt());
    let values = f0.values.iter().zip(&eps.values).map(|(&x, &e)| a * x + b * e).collect();
    Ok(PlanarImage { values, ..f0.clone() })
}

/// A draw of `t ~ U{1..T}` and ε of the given shape, in that order.
pub fn draw_step_and_noise<T: Scalar>(
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
    like: &PlanarImage<T>,
) -> (usize, PlanarImage<T>) {
    let t = rng.below(1, sched.steps() + 1);
    let eps = PlanarImage { values: rng.normal_vec(like.values.len()), ..like.clone() };
    (t, eps)
}

pub fn l2_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>().sqrt()
}

/// `‖ε − ε_θ(I_A, I_B, F_t, t)‖₂` for one random draw of `t` and ε.
pub fn training_loss<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    f0: &PlanarImage<T>,
    ia: &PlanarImage<T>,
    ib: &PlanarImage<T>,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (t, eps) = draw_step_and_noise(rng, sched, f0);
    let f_t = forward_sample(f0, t, &eps, sched)?;
    let pred = model.predict_noise(ia, ib, &f_t, t)?;
    if !pred.same_shape(&eps) {
        return shape_err("model output differs in shape from the noise");
    }
    if let Some(i) = pred.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("model output at index {i} for t={t}")));
    }
    Ok(l2_distance(&eps.values, &pred.values))
}

/// `F_{t−1} = (F_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn reverse_step<T: Scalar>(
    f_t: &PlanarImage<T>,
    t: usize,
    eps_pred: &PlanarImage<T>,
    sched: &NoiseSchedule,
) -> Result<PlanarImage<T>> {
    if t == 0 || t > sched.steps() {
        return arg_err(format!("reverse step needs 1 <= t <= {}, got {t}", sched.steps()));
    }
    if !f_t.same_shape(eps_pred) {
        return shape_err("noise prediction differs in shape from F_t");
    }
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let values = f_t
        .values
        .iter()
        .zip(&eps_pred.values)
        .map(|(&x, &e)| T::of((x.f64() - c * e.f64()) * inv))
        .collect();
    Ok(PlanarImage { values, ..f_t.clone() })
}

/// Runs `t = T..1` from a given `F_T` and clamps the result to `[0, 1]`.
pub fn sample_from<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    ia: &PlanarImage<T>,
    ib: &PlanarImage<T>,
    sched: &NoiseSchedule,
    f_big_t: PlanarImage<T>,
) -> Result<PlanarImage<T>> {
    let mut state = DiffusionState { f_t: f_big_t, t: sched.steps() };
    while state.t > 0 {
        let eps = model.predict_noise(ia, ib, &state.f_t, state.t)?;
        state.f_t = reverse_step(&state.f_t, state.t, &eps, sched)?;
        state.t -= 1;
    }
    Ok(state.f_t.map(|v| v.max(T::zero()).min(T::one())))
}

/// Draws `F_T ~ N(0, I)` shaped like `I_A` and runs the reverse process.
pub fn sample<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    ia: &PlanarImage<T>,
    ib: &PlanarImage<T>,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<PlanarImage<T>> {
    if !ia.same_shape(ib) {
        return shape_err("source images differ in shape");
    }
    let f_big_t = PlanarImage { values: rng.normal_vec(ia.values.len()), ..ia.clone() };
    sample_from(model, ia, ib, sched, f_big_t)
}

/// Predicts the exact noise that separates `F_t` from a known `F0`.
#[derive(Clone, Debug)]
pub struct OracleNoise<'a, T> {
    pub f0: &'a PlanarImage<T>,
    pub schedule: &'a NoiseSchedule,
}

impl<T: Scalar> NoisePredictor<T> for OracleNoise<'_, T> {
    fn predict_noise(
        &self,
        _ia: &PlanarImage<T>,
        _ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
        t: usize,
    ) -> Result<PlanarImage<T>> {
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let values = f_t
            .values
            .iter()
            .zip(&self.f0.values)
            .map(|(&x, &f)| T::of((x.f64() - a * f.f64()) / b))
            .collect();
        Ok(PlanarImage { values, ..f_t.clone() })
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl<T: Scalar> NoisePredictor<T> for ZeroNoise {
    fn predict_noise(
        &self,
        _ia: &PlanarImage<T>,
        _ib: &PlanarImage<T>,
        f_t: &PlanarImage<T>,
        _t: usize,
    ) -> Result<PlanarImage<T>> {
        Ok(f_t.map(|_| T::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> NoiseSchedule {
        make_schedule(DESK_STEPS, DESK_BETA_START, DESK_BETA_END, ScheduleShape::Linear).unwrap()
    }

    fn img(seed: u64, n: usize) -> PlanarImage<f64> {
        let mut r = SeededRng::new(seed);
        PlanarImage::from_fn(n, n, 1, |_, _, _| r.uniform())
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5, ScheduleShape::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.sigma2(1), 0.0);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let want = (1.0 - 0.9) / (1.0 - 0.72) * 0.2;
        assert!((s.sigma2(2) - want).abs() < 1e-15);
        assert!((s.sigma2(2) - 0.0714285714).abs() < 1e-9);
    }

    #[test]
    fn desk_schedule_ends_near_pure_noise() {
        let s = desk();
        let direct: f64 = (0..100).map(|i| 1.0 - (1e-4 + (0.1 - 1e-4) * i as f64 / 99.0)).product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 0.01);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn half_strength_schedule_leaves_signal() {
        // β_end = 0.05 stops well short of pure noise at T = 100.
        let s = make_schedule(100, 1e-4, 0.05, ScheduleShape::Linear).unwrap();
        let direct: f64 = (0..100).map(|i| 1.0 - (1e-4 + (0.05 - 1e-4) * i as f64 / 99.0)).product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(100) > 0.07);
    }

    #[test]
    fn schedule_rejections() {
        assert!(make_schedule(0, 1e-4, 0.05, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.1, 0.05, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.05, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleShape::Linear).is_err());
    }

    #[test]
    fn forward_sample_edges() {
        let s = desk();
        let f0 = img(1, 4);
        let zero = f0.map(|_| 0.0);
        assert_eq!(forward_sample(&f0, 0, &zero, &s).unwrap(), f0);
        let eps = img(2, 4);
        let ft = forward_sample(&zero, 40, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt();
        for (a, e) in ft.values.iter().zip(&eps.values) {
            assert_eq!(*a, k * e);
        }
        assert!(forward_sample(&f0, 1, &img(3, 5), &s).is_err());
    }

    #[test]
    fn forward_sample_moments() {
        let s = desk();
        let t = 30;
        let n = 100_000;
        let mut r = SeededRng::new(9);
        let f0 = PlanarImage::from_fn(1, n, 1, |_, _, _| 1.0f64);
        let eps = PlanarImage { values: r.normal_vec(n), ..f0.clone() };
        let ft = forward_sample(&f0, t, &eps, &s).unwrap();
        let mean = ft.values.iter().sum::<f64>() / n as f64;
        let var = ft.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - s.alpha_bar(t);
        let se = (want_var / n as f64).sqrt();
        assert!((mean - s.alpha_bar(t).sqrt()).abs() < 3.0 * se);
        assert!((var - want_var).abs() / want_var < 0.05);
    }

    #[test]
    fn loss_with_oracle_and_zero_models() {
        let s = desk();
        let f0 = img(4, 6);
        let oracle = OracleNoise { f0: &f0, schedule: &s };
        let l = training_loss(&oracle, &f0, &f0, &f0, &s, &mut SeededRng::new(3)).unwrap();
        assert!(l < 1e-12);
        let l0 = training_loss(&ZeroNoise, &f0, &f0, &f0, &s, &mut SeededRng::new(3)).unwrap();
        let (_, eps) = draw_step_and_noise(&mut SeededRng::new(3), &s, &f0);
        assert_eq!(l0, l2_distance(&eps.values, &vec![0.0; eps.values.len()]));
    }

    #[test]
    fn reverse_step_closed_form() {
        let s = desk();
        let f0 = img(5, 5);
        let mut r = SeededRng::new(6);
        for _ in 0..10 {
            let t = r.below(1, 101);
            let eps = PlanarImage { values: r.normal_vec(25), ..f0.clone() };
            let ft = forward_sample(&f0, t, &eps, &s).unwrap();
            let prev = reverse_step(&ft, t, &eps, &s).unwrap();
            let ab1 = s.alpha_bar(t - 1);
            let k = s.alpha(t).sqrt() * (1.0 - ab1) / (1.0 - s.alpha_bar(t)).sqrt();
            for ((p, x), e) in prev.values.iter().zip(&f0.values).zip(&eps.values) {
                assert!((p - (ab1.sqrt() * x + k * e)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reverse_step_edges() {
        let f = img(7, 3);
        let e = img(8, 3);
        for beta in [1e-6, 1e-10, 1e-14] {
            let s = NoiseSchedule::from_betas(vec![beta, 0.3]).unwrap();
            let prev = reverse_step(&f, 1, &e, &s).unwrap();
            assert!(prev.max_abs_diff(&f) <= 2.0 * beta.sqrt());
        }
        let s = NoiseSchedule::from_betas(vec![0.1, 0.3]).unwrap();
        let z = f.map(|_| 0.0);
        assert_eq!(reverse_step(&z, 2, &z, &s).unwrap(), z);
        assert!(reverse_step(&f, 0, &e, &s).is_err());
    }

    #[test]
    fn oracle_sampler_recovers_target() {
        let s = desk();
        let f0 = img(10, 8);
        let oracle = OracleNoise { f0: &f0, schedule: &s };
        let out = sample(&oracle, &f0, &f0, &s, &mut SeededRng::new(1)).unwrap();
        assert!(out.max_abs_diff(&f0) < 1e-4);
        let again = sample(&oracle, &f0, &f0, &s, &mut SeededRng::new(1)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn single_step_sampler_is_one_reverse_step() {
        let s = NoiseSchedule::from_betas(vec![0.2]).unwrap();
        let f0 = img(11, 4);
        let mut r = SeededRng::new(2);
        let ft = PlanarImage { values: r.normal_vec(16), ..f0.clone() };
        let out = sample_from(&ZeroNoise, &f0, &f0, &s, ft.clone()).unwrap();
        let step = reverse_step(&ft, 1, &ft.map(|_| 0.0), &s).unwrap();
        assert_eq!(out, step.map(|v| v.clamp(0.0, 1.0)));
    }
}
