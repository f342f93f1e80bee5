//! DDPM mathematics: variance schedules, closed-form and iterated forward
//! noising, the noise-prediction objective, and ancestral sampling.
//!
//! Timesteps are 1-based throughout (`1..=T`); index 0 of every table
//! holds step 1. The convention `ᾱ_0 = 1` makes the posterior variance at
//! step 1 zero, so the last reverse step is deterministic.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{normal, Rng};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Linear endpoints for `steps`, scaled from the 1000-step convention
/// (1e-4 .. 0.02) so the total noise injected stays comparable. Clamped so
/// very short chains remain valid.
pub fn default_linear_betas(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    let end = (0.02 * scale).min(0.999);
    let start = (1e-4 * scale).min(end);
    (start, end)
}

impl DiffusionSchedule {
    /// Builds the tables for `steps` diffusion steps. `beta_start` and
    /// `beta_end` are only read by the linear kind.
    pub fn new(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "diffusion needs at least one step");
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                    bail!(Config, "linear betas need 0 < start <= end < 1, got {beta_start}..{beta_end}");
                }
                (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            beta_start
                        } else {
                            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999)).collect()
            }
        };
        Self::from_betas(kind, beta)
    }

    pub fn linear_default(steps: usize) -> Result<Self> {
        let (s, e) = default_linear_betas(steps);
        Self::new(steps, ScheduleKind::Linear, s, e)
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            bail!(Config, "beta {b} outside (0, 1)");
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| if i == 0 { 0.0 } else { (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i] })
            .collect();
        Ok(DiffusionSchedule { kind, beta, alpha, alpha_bar, posterior_var })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn slot(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            bail!(Index, "timestep {t} outside 1..={}", self.steps());
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.slot(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.slot(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.slot(t)?])
    }

    /// `ᾱ_{t}` with the `ᾱ_0 = 1` convention.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.slot(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bar[i - 1] })
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.slot(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }

    /// `t,beta,alpha,alpha_bar,posterior_var`, one row per step.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "t,beta,alpha,alpha_bar,posterior_var")?;
        for i in 0..self.steps() {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i],
                self.posterior_var[i]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε` with one timestep for the whole tensor.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &DiffusionSchedule) -> Result<Tensor<S>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (S::from_f(ab.sqrt()), S::from_f((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// [`q_sample`] with a separate timestep per leading-axis item.
pub fn q_sample_batch<S: Scalar>(
    x0: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<S>> {
    x0.expect_same_shape(eps)?;
    let n = x0.shape()[0];
    if ts.len() != n {
        bail!(Dimension, "{} timesteps for batch of {n}", ts.len());
    }
    let per = x0.numel() / n;
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (S::from_f(ab.sqrt()), S::from_f((1.0 - ab).sqrt()));
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * *e;
        }
    }
    Ok(out)
}

/// Applies `t` single-step kernels `x_s = √(1−β_s)·x_{s−1} + √β_s·ε_s`.
/// Test oracle for [`q_sample`].
pub fn iterated_forward<S: Scalar>(x0: &Tensor<S>, t: usize, sched: &DiffusionSchedule, rng: &mut Rng) -> Result<Tensor<S>> {
    sched.alpha_bar(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let beta = sched.beta(s)?;
        let eps: Tensor<S> = normal(x.shape(), rng);
        let (a, b) = (S::from_f((1.0 - beta).sqrt()), S::from_f(beta.sqrt()));
        x = x.zip_map(&eps, |v, e| a * v + b * e)?;
    }
    Ok(x)
}

/// Differentiable noise predictor `ε_θ(x_t, t)` recorded on a tape.
pub trait Denoiser<'t, S: Scalar> {
    fn predict_noise(&self, x_t: Var<'t, S>, t: &[usize]) -> Result<Var<'t, S>>;
}

/// Inference-only noise predictor, used by the reverse process.
pub trait NoisePredictor<S: Scalar> {
    fn predict(&self, x_t: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>>;
}

/// Noise-prediction objective: draws `t ~ U{1..T}` per batch item and
/// `ε ~ N(0, I)`, returns the mean of `(ε_θ(x_t, t) − ε)²`.
pub fn ddpm_loss<'t, S: Scalar, D: Denoiser<'t, S>>(
    model: &D,
    tape: &'t Tape<S>,
    x0: &Tensor<S>,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Var<'t, S>> {
    let n = x0.shape()[0];
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps: Tensor<S> = normal(x0.shape(), rng);
    ddpm_loss_with(model, tape, x0, &ts, &eps, sched)
}

/// [`ddpm_loss`] with explicit timesteps and noise.
pub fn ddpm_loss_with<'t, S: Scalar, D: Denoiser<'t, S>>(
    model: &D,
    tape: &'t Tape<S>,
    x0: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
    sched: &DiffusionSchedule,
) -> Result<Var<'t, S>> {
    let xt = q_sample_batch(x0, ts, eps, sched)?;
    let pred = model.predict_noise(tape.constant(xt), ts)?;
    if pred.shape() != x0.shape() {
        bail!(Dimension, "predicted noise {:?} for input {:?}", pred.shape(), x0.shape());
    }
    pred.mse(tape.constant(eps.clone()))
}

/// Reverse-process mean `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn posterior_mean<S: Scalar>(xt: &Tensor<S>, eps_hat: &Tensor<S>, t: usize, sched: &DiffusionSchedule) -> Result<Tensor<S>> {
    let alpha = sched.alpha(t)?;
    let coef = S::from_f((1.0 - alpha) / (1.0 - sched.alpha_bar(t)?).sqrt());
    let inv = S::from_f(1.0 / alpha.sqrt());
    xt.zip_map(eps_hat, |x, e| (x - coef * e) * inv)
}

/// One ancestral step `x_t → x_{t−1}`; adds `σ_t·z` only for `t > 1`.
pub fn p_sample_step<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    xt: &Tensor<S>,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    sched.alpha(t)?;
    let n = xt.shape()[0];
    let eps_hat = model.predict(xt, &vec![t; n])?;
    let mean = posterior_mean(xt, &eps_hat, t, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = S::from_f(sched.posterior_var(t)?.sqrt());
    let z: Tensor<S> = normal(xt.shape(), rng);
    mean.zip_map(&z, |m, zv| m + sigma * zv)
}

/// Ancestral sampling from `N(0, I)` at `t = T` down to `t = 1`, clipped
/// to `[−1, 1]`.
pub fn generate<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    sched: &DiffusionSchedule,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    let mut x: Tensor<S> = normal(shape, rng);
    for t in (1..=sched.steps()).rev() {
        x = p_sample_step(model, &x, t, sched, rng)?;
    }
    let one = S::one();
    Ok(x.map(|v| v.max(-one).min(one)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    struct ZeroNoise;

    impl NoisePredictor<f64> for ZeroNoise {
        fn predict(&self, x_t: &Tensor<f64>, _t: &[usize]) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    impl<'t> Denoiser<'t, f64> for ZeroNoise {
        fn predict_noise(&self, x_t: Var<'t, f64>, _t: &[usize]) -> Result<Var<'t, f64>> {
            x_t.scale(0.0)
        }
    }

    /// Recovers ε exactly from `x_t` given the clean image.
    struct Oracle<'a> {
        x0: &'a Tensor<f64>,
        sched: &'a DiffusionSchedule,
    }

    impl<'t> Denoiser<'t, f64> for Oracle<'_> {
        fn predict_noise(&self, x_t: Var<'t, f64>, t: &[usize]) -> Result<Var<'t, f64>> {
            let xt = x_t.value();
            let per = xt.numel() / t.len();
            let mut eps = Tensor::zeros(xt.shape());
            for (i, &ti) in t.iter().enumerate() {
                let ab = self.sched.alpha_bar(ti)?;
                for k in i * per..(i + 1) * per {
                    eps.data_mut()[k] = (xt.data()[k] - ab.sqrt() * self.x0.data()[k]) / (1.0 - ab).sqrt();
                }
            }
            Ok(x_t.tape().constant(eps))
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::new(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.posterior_vars(), &[0.0]);
    }

    #[test]
    fn linear_betas_validated() {
        assert!(DiffusionSchedule::new(10, ScheduleKind::Linear, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::new(10, ScheduleKind::Linear, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::new(10, ScheduleKind::Linear, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::new(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
    }

    #[test]
    fn alpha_bar_matches_sequential_product_at_4000() {
        let s = DiffusionSchedule::linear_default(4000).unwrap();
        let (b0, b1) = default_linear_betas(4000);
        let mut prod = 1.0f64;
        for i in 0..4000 {
            let beta = b0 + (b1 - b0) * i as f64 / 3999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(4000).unwrap() - prod).abs() < 1e-6);
        assert!(prod < 1e-3, "terminal signal should be near zero, got {prod}");
    }

    #[test]
    fn ratio_identity_at_random_steps() {
        let mut rng = seeded(5);
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let (b0, b1) = default_linear_betas(100);
            let s = DiffusionSchedule::new(100, kind, b0, b1).unwrap();
            for _ in 0..100 {
                let t = rng.random_range(2..=100);
                let ratio = s.alpha_bar(t).unwrap() / s.alpha_bar(t - 1).unwrap();
                assert!((ratio - s.alpha(t).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn timestep_range_checked() {
        let s = DiffusionSchedule::linear_default(10).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(q_sample(&x, 0, &x, &s), Err(crate::Error::Index(_))));
        assert!(matches!(q_sample(&x, 11, &x, &s), Err(crate::Error::Index(_))));
        let mut rng = seeded(0);
        assert!(p_sample_step(&ZeroNoise, &x, 11, &s, &mut rng).is_err());
    }

    #[test]
    fn noiseless_q_sample_scales_signal() {
        let s = DiffusionSchedule::linear_default(100).unwrap();
        let x0 = Tensor::<f64>::from_vec(&[1, 3], vec![0.5, -1.0, 0.25]).unwrap();
        let out = q_sample(&x0, 37, &Tensor::zeros(&[1, 3]), &s).unwrap();
        let a = s.alpha_bar(37).unwrap().sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, a * x);
        }
    }

    #[test]
    fn near_identity_schedule_keeps_input() {
        let s = DiffusionSchedule::new(50, ScheduleKind::Linear, 1e-12, 1e-11).unwrap();
        let mut rng = seeded(1);
        let x0: Tensor<f64> = normal(&[1, 16], &mut rng);
        let eps: Tensor<f64> = normal(&[1, 16], &mut rng);
        let out = q_sample(&x0, 50, &eps, &s).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - x).abs() < 1e-3);
        }
    }

    #[test]
    fn one_iterated_step_equals_closed_form() {
        let s = DiffusionSchedule::linear_default(100).unwrap();
        let mut rng = seeded(2);
        let x0: Tensor<f64> = normal(&[2, 8], &mut rng);
        let mut a = seeded(99);
        let mut b = seeded(99);
        let iter = iterated_forward(&x0, 1, &s, &mut a).unwrap();
        let eps: Tensor<f64> = normal(x0.shape(), &mut b);
        let closed = q_sample(&x0, 1, &eps, &s).unwrap();
        for (i, c) in iter.data().iter().zip(closed.data()) {
            assert!((i - c).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let s = DiffusionSchedule::linear_default(100).unwrap();
        let mut rng = seeded(3);
        let x0 = normal::<f64>(&[4, 1, 8, 8], &mut rng).map(|v| v.tanh());
        let tape = Tape::new();
        let loss = ddpm_loss(&Oracle { x0: &x0, sched: &s }, &tape, &x0, &s, &mut rng).unwrap();
        assert!(loss.value().item().unwrap().abs() < 1e-20);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_energy() {
        let s = DiffusionSchedule::linear_default(100).unwrap();
        let mut rng = seeded(4);
        let x0 = Tensor::<f64>::zeros(&[4, 1, 64, 64]);
        let tape = Tape::new();
        let loss = ddpm_loss(&ZeroNoise, &tape, &x0, &s, &mut rng).unwrap().value().item().unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn final_step_is_deterministic_mean() {
        let s = DiffusionSchedule::linear_default(10).unwrap();
        let mut rng = seeded(6);
        let xt: Tensor<f64> = normal(&[1, 1, 4, 4], &mut rng);
        let a = p_sample_step(&ZeroNoise, &xt, 1, &s, &mut seeded(1)).unwrap();
        let b = p_sample_step(&ZeroNoise, &xt, 1, &s, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let inv = 1.0 / s.alpha(1).unwrap().sqrt();
        for (o, x) in a.data().iter().zip(xt.data()) {
            assert_eq!(*o, x * inv);
        }
    }

    #[test]
    fn zero_noise_mean_is_rescaled_input() {
        let s = DiffusionSchedule::linear_default(10).unwrap();
        let mut rng = seeded(7);
        let xt: Tensor<f64> = normal(&[1, 6], &mut rng);
        let m = posterior_mean(&xt, &Tensor::zeros(&[1, 6]), 6, &s).unwrap();
        let inv = 1.0 / s.alpha(6).unwrap().sqrt();
        for (o, x) in m.data().iter().zip(xt.data()) {
            assert_eq!(*o, x * inv);
        }
    }

    #[test]
    fn true_noise_mean_matches_posterior_of_clean_chain() {
        // With ε̂ = ε the reverse mean equals the q(x_{t-1} | x_t, x0) mean
        //   √ᾱ_{t-1} β_t/(1-ᾱ_t) x0 + √α_t (1-ᾱ_{t-1})/(1-ᾱ_t) x_t.
        let s = DiffusionSchedule::linear_default(100).unwrap();
        let mut rng = seeded(8);
        for t in [2usize, 10, 50, 100] {
            let x0: Tensor<f64> = normal(&[1, 12], &mut rng);
            let eps: Tensor<f64> = normal(&[1, 12], &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let m = posterior_mean(&xt, &eps, t, &s).unwrap();
            let (ab, abp, beta, alpha) = (
                s.alpha_bar(t).unwrap(),
                s.alpha_bar_prev(t).unwrap(),
                s.beta(t).unwrap(),
                s.alpha(t).unwrap(),
            );
            for k in 0..12 {
                let expect = abp.sqrt() * beta / (1.0 - ab) * x0.data()[k]
                    + alpha.sqrt() * (1.0 - abp) / (1.0 - ab) * xt.data()[k];
                assert!((m.data()[k] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn two_step_generation_matches_hand_unroll() {
        let s = DiffusionSchedule::new(2, ScheduleKind::Linear, 0.1, 0.2).unwrap();
        let shape = [1, 1, 3, 3];
        let out = generate(&ZeroNoise, &s, &shape, &mut seeded(10)).unwrap();
        assert_eq!(out.shape(), &shape);

        let mut rng = seeded(10);
        let z_t: Tensor<f64> = normal(&shape, &mut rng);
        let z_mid: Tensor<f64> = normal(&shape, &mut rng);
        let (a1, a2) = (s.alpha(1).unwrap(), s.alpha(2).unwrap());
        let sigma2 = s.posterior_var(2).unwrap().sqrt();
        for k in 0..9 {
            let x1 = z_t.data()[k] / a2.sqrt() + sigma2 * z_mid.data()[k];
            let x0 = (x1 / a1.sqrt()).clamp(-1.0, 1.0);
            assert!((out.data()[k] - x0).abs() < 1e-5);
        }
    }

    #[test]
    fn schedule_csv_has_header_and_rows() {
        let s = DiffusionSchedule::linear_default(5).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar,posterior_var");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("1,"));
    }
}
