//! Closed-form diffusion constants and the Gaussian forward/reverse step math.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, with `alpha_bar(0) == 1`.
//! Constants are held in 64-bit; the per-pixel tensor math runs in 32-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Image;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidParameter(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a schedule; this is what checkpoints store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Linear schedules only.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_var_lower: Vec<f64>,
    log_var_upper: Vec<f64>,
    /// Training-time step that each (possibly respaced) step corresponds to.
    timesteps: Vec<usize>,
}

/// `build_schedule`: the linear kind uses the default beta range.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    ScheduleConfig {
        kind,
        steps,
        ..ScheduleConfig::default()
    }
    .build()
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        check_steps(steps)?;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        check_steps(steps)?;
        let f = |t: f64| {
            let angle = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            angle.cos().powi(2)
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit per-step noise rates, `betas[t - 1] = β_t`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b <= MAX_BETA))
        {
            return Err(Error::InvalidParameter(format!(
                "beta_{} = {b} outside (0, {MAX_BETA}]",
                i + 1
            )));
        }
        let timesteps = (1..=betas.len()).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self::assemble(betas, alphas, alpha_bars, timesteps)
    }

    fn assemble(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>, timesteps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let mut log_var_lower = Vec::with_capacity(betas.len());
        let log_var_upper: Vec<f64> = betas.iter().map(|b| b.ln()).collect();
        for t in 0..betas.len() {
            if t == 0 {
                // β̃_1 is degenerate (ᾱ_0 = 1); collapse both endpoints.
                log_var_lower.push(log_var_upper[0]);
            } else {
                let posterior = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
                log_var_lower.push(posterior.ln());
            }
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            log_var_lower,
            log_var_upper,
            timesteps,
        })
    }

    /// A shorter schedule visiting `count` evenly spaced training steps, with
    /// betas recomputed so the marginals `ᾱ` agree with the full schedule.
    pub fn respaced(&self, count: usize) -> Result<Self> {
        let full = self.steps();
        if count == 0 || count > full {
            return Err(Error::InvalidParameter(format!(
                "cannot respace {full} steps into {count}"
            )));
        }
        let picks: Vec<usize> = if count == 1 {
            vec![full]
        } else {
            let stride = (full - 1) as f64 / (count - 1) as f64;
            (0..count).map(|i| (i as f64 * stride).round() as usize + 1).collect()
        };
        // Carry ᾱ over directly; rebuilding it from 1 − β would lose the tiny
        // top-step values to cancellation.
        let alpha_bars: Vec<f64> = picks.iter().map(|&t| self.alpha_bars[t - 1]).collect();
        let alphas: Vec<f64> = alpha_bars
            .iter()
            .enumerate()
            .map(|(i, ab)| ab / if i == 0 { 1.0 } else { alpha_bars[i - 1] })
            .collect();
        let betas = alphas.iter().map(|a| 1.0 - a).collect();
        let timesteps = picks.iter().map(|&t| self.timesteps[t - 1]).collect();
        Self::assemble(betas, alphas, alpha_bars, timesteps)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// β̃_t, the variance of the true posterior q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.log_var_lower[t - 1].exp()
    }

    pub fn log_var_lower(&self, t: usize) -> f64 {
        self.log_var_lower[t - 1]
    }

    pub fn log_var_upper(&self, t: usize) -> f64 {
        self.log_var_upper[t - 1]
    }

    /// The training step that step `t` of this schedule stands for.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficients of the posterior mean, `μ̃ = c0·x_0 + ct·x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = self.beta(t) * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * self.alpha(t).sqrt() / (1.0 - ab);
        (c0, ct)
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < 2 {
        Err(Error::InvalidParameter(format!("schedule needs T >= 2, got {steps}")))
    } else {
        Ok(())
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        let (ah, aw) = a.dim();
        let (bh, bw) = b.dim();
        return Err(Error::shape(&[ah, aw], &[bh, bw]));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x_0 + √(1 − ᾱ_t)·ε`.
pub fn forward_sample(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    same_shape(x0, eps)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Mean of the learned reverse step from a noise estimate.
pub fn reverse_mean(x_t: &Image, eps_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    same_shape(x_t, eps_hat)?;
    sched.check_step(t)?;
    let alpha = sched.alpha(t);
    let scale = (1.0 / alpha.sqrt()) as f32;
    let coef = ((1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
    Ok(ndarray::Zip::from(x_t)
        .and(eps_hat)
        .map_collect(|&x, &e| scale * (x - coef * e)))
}

/// Posterior mean computed through the predicted clean image, clamped to `[-1, 1]`.
/// Equals [`reverse_mean`] whenever the prediction is already in range.
pub fn reverse_mean_clipped(x_t: &Image, eps_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    same_shape(x_t, eps_hat)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (c0, ct) = sched.posterior_mean_coefs(t);
    let (inv, noise) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| {
        let x0 = (inv * (x as f64 - noise * e as f64)).clamp(-1.0, 1.0);
        (c0 * x0 + ct * x as f64) as f32
    }))
}

/// Log-space interpolation between the posterior (`v̂ = 1`) and prior (`v̂ = 0`) variances.
pub fn reverse_variance(v_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_step(t)?;
    if let Some(bad) = v_hat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::ValueOutOfRange(format!("v_hat = {bad} outside [0, 1]")));
    }
    let lo = sched.log_var_lower(t);
    let hi = sched.log_var_upper(t);
    Ok(v_hat.mapv(|v| {
        let v = v as f64;
        (v * lo + (1.0 - v) * hi).exp() as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn rejects_short_schedules() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
        assert!(NoiseSchedule::linear(2, 1e-4, 0.02).is_ok());
    }

    #[test]
    fn rejects_out_of_range_betas() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 0.9995]).is_err());
    }

    #[test]
    fn linear_four_steps() {
        let s = build_schedule(ScheduleKind::Linear, 4).unwrap();
        for t in 1..4 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let prod: f64 = (1..=4).map(|t| s.alpha(t)).product();
        assert_eq!(s.alpha_bar(4), prod);
    }

    #[test]
    fn cosine_starts_near_one() {
        let s = build_schedule(ScheduleKind::Cosine, 1000).unwrap();
        assert!((s.alpha_bar(1) - 1.0).abs() < 1e-2);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
    }

    #[test]
    fn first_step_endpoints_collapse() {
        let s = build_schedule(ScheduleKind::Cosine, 50).unwrap();
        assert_eq!(s.log_var_lower(1), s.log_var_upper(1));
        for t in 2..=50 {
            assert!(s.log_var_lower(t) <= s.log_var_upper(t));
        }
    }

    #[test]
    fn forward_without_noise_scales_signal() {
        let s = build_schedule(ScheduleKind::Cosine, 100).unwrap();
        let x0 = Array2::from_shape_fn((4, 4), |(i, j)| (i as f32 - j as f32) / 4.0);
        let zero = Array2::zeros((4, 4));
        let out = forward_sample(&x0, 37, &zero, &s).unwrap();
        let k = s.alpha_bar(37).sqrt() as f32;
        for (o, x) in out.iter().zip(x0.iter()) {
            assert_eq!(*o, k * x);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let s = build_schedule(ScheduleKind::Cosine, 10).unwrap();
        let a = Array2::zeros((4, 4));
        let b = Array2::zeros((4, 5));
        assert!(matches!(forward_sample(&a, 1, &b, &s), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(forward_sample(&a, 0, &a, &s), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(forward_sample(&a, 11, &a, &s), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn reverse_mean_substitution() {
        // ᾱ_1 = 0.9 / 0.99 so that α_2 = 0.99 and ᾱ_2 = 0.9.
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.9 / 0.99, 0.01]).unwrap();
        assert!((s.alpha_bar(2) - 0.9).abs() < 1e-12);
        let x = Array2::from_elem((1, 1), 1.0f32);
        let e = Array2::from_elem((1, 1), 0.5f32);
        let mu = reverse_mean(&x, &e, 2, &s).unwrap();
        assert!((mu[[0, 0]] - 0.98915).abs() < 1e-5, "{}", mu[[0, 0]]);
    }

    #[test]
    fn clipped_mean_matches_when_in_range() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| 0.1 * i as f32 - 0.05 * j as f32);
        let e = Array2::from_shape_fn((3, 3), |(i, j)| 0.02 * (i + j) as f32);
        for t in [1, 2, 10] {
            let a = reverse_mean(&x, &e, t, &s).unwrap();
            let b = reverse_mean_clipped(&x, &e, t, &s).unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5), "t = {t}");
        }
        let far = Array2::from_elem((3, 3), 50.0f32);
        let mu = reverse_mean_clipped(&far, &Array2::zeros((3, 3)), 50, &s).unwrap();
        let (c0, ct) = s.posterior_mean_coefs(50);
        assert!(mu.iter().all(|&m| (m as f64 - (c0 + ct * 50.0)).abs() < 1e-3));
    }

    #[test]
    fn reverse_mean_tends_to_identity() {
        let s = NoiseSchedule::linear(10, 1e-7, 1e-6).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f32 / 10.0 - 0.4);
        let mu = reverse_mean(&x, &Array2::zeros((3, 3)), 5, &s).unwrap();
        for (m, v) in mu.iter().zip(x.iter()) {
            assert!((m - v).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_endpoints() {
        let s = build_schedule(ScheduleKind::Cosine, 200).unwrap();
        let t = 120;
        let one = reverse_variance(&Array2::from_elem((1, 1), 1.0), t, &s).unwrap()[[0, 0]] as f64;
        let zero = reverse_variance(&Array2::from_elem((1, 1), 0.0), t, &s).unwrap()[[0, 0]] as f64;
        let half = reverse_variance(&Array2::from_elem((1, 1), 0.5), t, &s).unwrap()[[0, 0]] as f64;
        let tilde = s.posterior_variance(t);
        let beta = s.beta(t);
        assert!((one - tilde).abs() / tilde < 1e-6);
        assert!((zero - beta).abs() / beta < 1e-6);
        assert!((half - (beta * tilde).sqrt()).abs() / half < 1e-6);
    }

    #[test]
    fn variance_rejects_out_of_unit_interval() {
        let s = build_schedule(ScheduleKind::Cosine, 20).unwrap();
        assert!(reverse_variance(&Array2::from_elem((2, 2), 1.01), 3, &s).is_err());
        assert!(reverse_variance(&Array2::from_elem((2, 2), -0.01), 3, &s).is_err());
    }

    #[test]
    fn respacing_preserves_marginals() {
        let s = build_schedule(ScheduleKind::Cosine, 1000).unwrap();
        let r = s.respaced(100).unwrap();
        assert_eq!(r.steps(), 100);
        assert_eq!(r.model_timestep(1), 1);
        assert_eq!(r.model_timestep(100), 1000);
        for t in 1..=100 {
            let orig = s.alpha_bar(r.model_timestep(t));
            assert!((r.alpha_bar(t) - orig).abs() <= 1e-12 * orig.max(1e-300) + 1e-15);
        }
        assert!(s.respaced(0).is_err());
        assert!(s.respaced(1001).is_err());
    }

    #[test]
    fn schedule_is_deterministic() {
        let a = build_schedule(ScheduleKind::Cosine, 1000).unwrap();
        let b = build_schedule(ScheduleKind::Cosine, 1000).unwrap();
        assert!(a
            .alpha_bars()
            .iter()
            .zip(b.alpha_bars())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a, b);
    }
}
