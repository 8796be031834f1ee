//! Classifier-free noise composition and the segmentation-guided mean shift.
//!
//! Combinations are evaluated in f64 and rounded once, so equal inputs map to
//! themselves exactly and the pair combination is exactly symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Image;

pub use crate::segmenter::seg_log_likelihood_grad;

pub const OMEGA_SCENE: f64 = 0.7;
pub const OMEGA_CONCLUDING: f64 = -2.5;
pub const OMEGA_INTERMEDIATE: f64 = -1.5;
pub const GAMMA_MAX: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Scene,
    MotionSingle,
    MotionPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub omega: f64,
    pub gamma: f64,
    pub mode: GuidanceMode,
}

impl GuidanceSpec {
    /// Rejects negative or non-finite γ and clamps it to `[0, 15]`.
    pub fn new(mode: GuidanceMode, omega: f64, gamma: f64) -> Result<Self> {
        if !omega.is_finite() {
            return Err(Error::InvalidParameter(format!("omega {omega} is not finite")));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma {gamma} must be a finite value >= 0")));
        }
        Ok(Self {
            omega,
            gamma: gamma.min(GAMMA_MAX),
            mode,
        })
    }
}

/// Guidance weights per sampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceWeights {
    pub omega_scene: f64,
    pub omega_concluding: f64,
    pub omega_intermediate: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            omega_scene: OMEGA_SCENE,
            omega_concluding: OMEGA_CONCLUDING,
            omega_intermediate: OMEGA_INTERMEDIATE,
        }
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.dim().0, a.dim().1], &[b.dim().0, b.dim().1]));
    }
    Ok(())
}

fn affine2(a: &Image, b: &Image, omega: f64) -> Result<Image> {
    same_shape(a, b)?;
    Ok(ndarray::Zip::from(a)
        .and(b)
        .map_collect(|&x, &y| ((1.0 - omega) * x as f64 + omega * y as f64) as f32))
}

/// `(1 − ω)·ε_u + ω·ε_c`.
pub fn combine_scene(eps_u: &Image, eps_c: &Image, omega: f64) -> Result<Image> {
    affine2(eps_u, eps_c, omega)
}

/// `(1 − ω)·ε_m + ω·ε_mf`.
pub fn combine_motion(eps_m: &Image, eps_mf: &Image, omega: f64) -> Result<Image> {
    affine2(eps_m, eps_mf, omega)
}

/// `(1 − 2ω)·ε_m + ω·ε_mf1 + ω·ε_mf2`.
pub fn combine_fc(eps_m: &Image, eps_mf1: &Image, eps_mf2: &Image, omega: f64) -> Result<Image> {
    same_shape(eps_m, eps_mf1)?;
    same_shape(eps_m, eps_mf2)?;
    Ok(ndarray::Zip::from(eps_m)
        .and(eps_mf1)
        .and(eps_mf2)
        .map_collect(|&m, &f1, &f2| ((1.0 - 2.0 * omega) * m as f64 + omega * (f1 as f64 + f2 as f64)) as f32))
}

/// `μ + γ·σ²·g`; returns `μ` unchanged when `γ = 0`.
pub fn seg_guided_mean(mu: &Image, sigma2: &Image, grad: &Image, gamma: f64) -> Result<Image> {
    same_shape(mu, sigma2)?;
    same_shape(mu, grad)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma {gamma} must be a finite value >= 0")));
    }
    if gamma == 0.0 {
        return Ok(mu.clone());
    }
    Ok(ndarray::Zip::from(mu)
        .and(sigma2)
        .and(grad)
        .map_collect(|&m, &s, &g| (m as f64 + gamma * s as f64 * g as f64) as f32))
}
