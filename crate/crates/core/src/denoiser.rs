//! Condition-aware denoisers for the scene model and the motion model.
//!
//! Both predict `(ε̂, v̂)` from a noisy frame with channel-concatenated
//! conditions. Input channel layout:
//!
//! | role   | channels                                   |
//! |--------|--------------------------------------------|
//! | scene  | `x_t`, mask                                |
//! | motion | `x_t`, mask, reference 1, reference 2      |
//!
//! An absent mask is an all-(−1) channel and an absent reference frame an
//! all-0 channel. The timestep and each reference's signed frame distance are
//! fed through sinusoidal features into a per-level channel bias; an absent
//! distance contributes a zero feature block.

use std::f64::consts::{LN_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, clip_global_norm, Adam, AdamConfig, Real, Tensor, UNet, UNetSpec};
use crate::schedule::{forward_sample, NoiseSchedule, ScheduleConfig};
use crate::synth::{FrameSample, LabeledVideo};
use crate::{Image, Mask};

pub const MASK_ABSENT: f32 = -1.0;
pub const FRAME_ABSENT: f32 = 0.0;

const TIME_MAX_PERIOD: f64 = 10_000.0;
const DISTANCE_MAX_PERIOD: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Scene,
    Motion,
}

impl ModelRole {
    pub fn in_channels(self) -> usize {
        match self {
            ModelRole::Scene => 2,
            ModelRole::Motion => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    pub base_width: usize,
    pub depth: usize,
    pub time_features: usize,
    pub distance_features: usize,
    pub embed_hidden: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 2,
            time_features: 32,
            distance_features: 16,
            embed_hidden: 64,
        }
    }
}

impl DenoiserArch {
    fn features(&self, role: ModelRole) -> usize {
        match role {
            ModelRole::Scene => self.time_features,
            ModelRole::Motion => self.time_features + 2 * self.distance_features,
        }
    }

    pub fn unet_spec(&self, role: ModelRole) -> UNetSpec {
        UNetSpec {
            in_channels: role.in_channels(),
            out_channels: 2,
            base_width: self.base_width,
            depth: self.depth,
            embed_features: self.features(role),
            embed_hidden: self.embed_hidden,
        }
    }
}

/// A conditioning frame and its signed distance `target index − reference index`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefFrame {
    pub frame: Image,
    pub distance: i32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionSet {
    pub mask: Option<Mask>,
    pub reference: Option<RefFrame>,
    pub second_reference: Option<RefFrame>,
}

impl ConditionSet {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn mask(mask: Mask) -> Self {
        Self {
            mask: Some(mask),
            ..Self::default()
        }
    }

    pub fn mask_and_frame(mask: Mask, frame: Image, distance: i32) -> Self {
        Self {
            mask: Some(mask),
            reference: Some(RefFrame { frame, distance }),
            second_reference: None,
        }
    }

    fn validate(&self, role: ModelRole, dims: (usize, usize)) -> Result<()> {
        let refs = [&self.reference, &self.second_reference];
        match role {
            ModelRole::Scene => {
                if refs.iter().any(|r| r.is_some()) {
                    return Err(Error::IllegalConditions("scene model takes no reference frames".into()));
                }
            }
            ModelRole::Motion => {
                if self.mask.is_none() {
                    return Err(Error::IllegalConditions("motion model requires a mask".into()));
                }
                if self.reference.is_none() && self.second_reference.is_some() {
                    return Err(Error::IllegalConditions("second reference without a first".into()));
                }
            }
        }
        if let Some(m) = &self.mask {
            if m.dim() != dims {
                return Err(Error::shape(&[dims.0, dims.1], &[m.dim().0, m.dim().1]));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::IllegalConditions("mask values must be 0 or 1".into()));
            }
        }
        for r in refs.into_iter().flatten() {
            if r.frame.dim() != dims {
                return Err(Error::shape(&[dims.0, dims.1], &[r.frame.dim().0, r.frame.dim().1]));
            }
            if r.distance == 0 {
                return Err(Error::IllegalConditions("frame distance must be nonzero".into()));
            }
        }
        Ok(())
    }
}

/// One noisy input to the network: `x_t` at training step `t` with its conditions.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub x_t: &'a Image,
    pub t: usize,
    pub cond: &'a ConditionSet,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub role: ModelRole,
    pub arch: DenoiserArch,
    pub schedule_config: ScheduleConfig,
    pub seed: u64,
    params: Vec<f32>,
    net: UNet,
    schedule: NoiseSchedule,
}

impl DenoiserModel {
    pub fn new(role: ModelRole, arch: DenoiserArch, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(arch.unet_spec(role))?;
        let params = net.init_params(seed);
        Self::with_params(role, arch, schedule_config, seed, params)
    }

    pub fn with_params(
        role: ModelRole,
        arch: DenoiserArch,
        schedule_config: ScheduleConfig,
        seed: u64,
        params: Vec<f32>,
    ) -> Result<Self> {
        let net = UNet::new(arch.unet_spec(role))?;
        if params.len() != net.param_count() {
            return Err(Error::SizeMismatch(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                net.param_count()
            )));
        }
        let schedule = schedule_config.build()?;
        Ok(Self {
            role,
            arch,
            schedule_config,
            seed,
            params,
            net,
            schedule,
        })
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&v| v as f64).collect()
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode<T: Real>(&self, queries: &[Query<'_>]) -> Result<(Tensor<T>, Vec<T>)> {
        let first = queries
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty query batch".into()))?;
        let (h, w) = first.x_t.dim();
        self.net.spec().check_input(h, w)?;
        let c = self.role.in_channels();
        let mut x = Tensor::zeros(queries.len(), c, h, w);
        let nf = self.arch.features(self.role);
        let mut feats = Vec::with_capacity(queries.len() * nf);
        for (i, q) in queries.iter().enumerate() {
            if q.x_t.dim() != (h, w) {
                return Err(Error::shape(&[h, w], &[q.x_t.dim().0, q.x_t.dim().1]));
            }
            self.schedule.check_step(q.t)?;
            q.cond.validate(self.role, (h, w))?;
            fill(x.channel_mut(i, 0), q.x_t.iter().copied());
            match &q.cond.mask {
                Some(m) => fill(x.channel_mut(i, 1), m.iter().map(|&v| v as f32)),
                None => fill(x.channel_mut(i, 1), std::iter::repeat(MASK_ABSENT)),
            }
            feats.extend(nn::sinusoidal(q.t as f64, self.arch.time_features, TIME_MAX_PERIOD));
            if self.role == ModelRole::Motion {
                for (slot, r) in [&q.cond.reference, &q.cond.second_reference].into_iter().enumerate() {
                    match r {
                        Some(r) => {
                            fill(x.channel_mut(i, 2 + slot), r.frame.iter().copied());
                            feats.extend(nn::sinusoidal(
                                r.distance as f64,
                                self.arch.distance_features,
                                DISTANCE_MAX_PERIOD,
                            ));
                        }
                        None => {
                            fill(x.channel_mut(i, 2 + slot), std::iter::repeat(FRAME_ABSENT));
                            feats.extend(std::iter::repeat_n(0.0, self.arch.distance_features));
                        }
                    }
                }
            }
        }
        Ok((x, feats.into_iter().map(T::lit).collect()))
    }

    /// Batched [`predict`]; every query is validated independently.
    pub fn predict_batch(&self, queries: &[Query<'_>]) -> Result<Vec<(Image, Image)>> {
        let (x, feats) = self.encode::<f32>(queries)?;
        let (h, w) = (x.h, x.w);
        let (y, _) = self.net.forward(&self.params, x, Some(&feats));
        Ok((0..y.n)
            .map(|i| {
                let eps = Image::from_shape_vec((h, w), y.channel(i, 0).to_vec()).unwrap();
                let v = Image::from_shape_vec((h, w), y.channel(i, 1).iter().map(|&l| nn::sigmoid(l)).collect()).unwrap();
                (eps, v)
            })
            .collect())
    }
}

fn fill<T: Real>(dst: &mut [T], src: impl Iterator<Item = f32>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::lit(s as f64);
    }
}

/// Noise and interpolation-weight prediction for one noisy frame.
pub fn predict(model: &DenoiserModel, x_t: &Image, t: usize, cond: &ConditionSet) -> Result<(Image, Image)> {
    Ok(model
        .predict_batch(&[Query { x_t, t, cond }])?
        .pop()
        .expect("one query, one prediction"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l_simple: f64,
    pub l_vlb: f64,
}

/// A clean frame, its noise draw and step, and the conditions it is trained under.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Image,
    pub t: usize,
    pub eps: Image,
    pub cond: ConditionSet,
}

/// Loss (and optionally gradient) of a batch under given parameters.
pub struct Objective<T> {
    pub terms: LossTerms,
    pub grad: Option<Vec<T>>,
    /// Per-example ε̂, usable as the frozen mean input of a later evaluation.
    pub eps_hat: Vec<Vec<f64>>,
}

/// KL(N(μ_q, var_q) ‖ N(μ_p, exp(logvar_p))) in nats.
pub fn gaussian_kl(mean_q: f64, logvar_q: f64, mean_p: f64, logvar_p: f64) -> f64 {
    0.5 * (-1.0 + logvar_p - logvar_q + (logvar_q - logvar_p).exp() + (mean_q - mean_p).powi(2) * (-logvar_p).exp())
}

fn approx_std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Log-likelihood of `x` (in `[-1, 1]`, 8-bit discretised) under `N(mean, exp(logvar))`.
pub fn discretized_gaussian_log_likelihood(x: f64, mean: f64, logvar: f64) -> f64 {
    let inv_std = (-0.5 * logvar).exp();
    let centered = x - mean;
    let cdf_plus = approx_std_normal_cdf(inv_std * (centered + 1.0 / 255.0));
    let cdf_min = approx_std_normal_cdf(inv_std * (centered - 1.0 / 255.0));
    if x < -0.999 {
        cdf_plus.max(1e-12).ln()
    } else if x > 0.999 {
        (1.0 - cdf_min).max(1e-12).ln()
    } else {
        (cdf_plus - cdf_min).max(1e-12).ln()
    }
}

/// Mean over examples of `L_simple + λ·L_vlb`.
///
/// `L_vlb` is the per-step variational term in bits per pixel: the KL between
/// the true posterior and the model's Gaussian for `t ≥ 2`, the discretised
/// decoder NLL at `t = 1`. Its mean uses ε̂ with the gradient stopped, so only
/// the `v̂` output receives gradient from it. Passing `mean_eps` replaces that
/// stopped ε̂ by a fixed value, which makes the objective an ordinary function of
/// the parameters (needed for finite-difference checks).
pub fn batch_objective<T: Real>(
    model: &DenoiserModel,
    params: &[T],
    examples: &[TrainExample],
    lambda: f64,
    mean_eps: Option<&[Vec<f64>]>,
    want_grad: bool,
) -> Result<Objective<T>> {
    let sched = &model.schedule;
    let noisy: Vec<Image> = examples
        .iter()
        .map(|e| forward_sample(&e.x0, e.t, &e.eps, sched))
        .collect::<Result<_>>()?;
    let queries: Vec<Query<'_>> = examples
        .iter()
        .zip(&noisy)
        .map(|(e, x_t)| Query { x_t, t: e.t, cond: &e.cond })
        .collect();
    let (x, feats) = model.encode::<T>(&queries)?;
    let (y, trace) = model.net.forward(params, x, Some(&feats));
    let n = examples.len() as f64;
    let pix = y.plane() as f64;
    let mut dy = Tensor::zeros(y.n, y.c, y.h, y.w);
    let mut terms = LossTerms::default();
    let mut eps_hats = Vec::with_capacity(examples.len());
    for (i, (ex, x_t)) in examples.iter().zip(&noisy).enumerate() {
        let t = ex.t;
        let eps_hat: Vec<f64> = y.channel(i, 0).iter().map(|v| v.to_f64().unwrap()).collect();
        let logits: Vec<f64> = y.channel(i, 1).iter().map(|v| v.to_f64().unwrap()).collect();
        let frozen = mean_eps.map_or(&eps_hat[..], |m| &m[i][..]);
        let alpha = sched.alpha(t);
        let mean_scale = 1.0 / alpha.sqrt();
        let mean_coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
        let (c0, ct) = sched.posterior_mean_coefs(t);
        let (lo, hi) = (sched.log_var_lower(t), sched.log_var_upper(t));
        let mut simple = 0.0;
        let mut vlb = 0.0;
        {
            let d_eps = dy.channel_mut(i, 0);
            for ((&e_hat, &e), d) in eps_hat.iter().zip(ex.eps.iter()).zip(d_eps.iter_mut()) {
                let diff = e_hat - e as f64;
                simple += diff * diff;
                *d = T::lit(2.0 * diff / (pix * n));
            }
        }
        let d_v = dy.channel_mut(i, 1);
        for (j, ((&logit, d), (&x0, &xt))) in logits
            .iter()
            .zip(d_v.iter_mut())
            .zip(ex.x0.iter().zip(x_t.iter()))
            .enumerate()
        {
            let v = nn::sigmoid(logit);
            let logvar = v * lo + (1.0 - v) * hi;
            let mean_p = mean_scale * (xt as f64 - mean_coef * frozen[j]);
            if t == 1 {
                vlb -= discretized_gaussian_log_likelihood(x0 as f64, mean_p, logvar) / LN_2;
                // lo == hi at t = 1: the variance does not depend on v.
                *d = T::zero();
            } else {
                let mean_q = c0 * x0 as f64 + ct * xt as f64;
                vlb += gaussian_kl(mean_q, lo, mean_p, logvar) / LN_2;
                let dkl_dlogvar = 0.5 * (1.0 - (lo.exp() + (mean_q - mean_p).powi(2)) * (-logvar).exp());
                let dlogit = dkl_dlogvar * (lo - hi) * v * (1.0 - v) / LN_2;
                *d = T::lit(lambda * dlogit / (pix * n));
            }
        }
        simple /= pix;
        vlb /= pix;
        terms.l_simple += simple / n;
        terms.l_vlb += vlb / n;
        eps_hats.push(eps_hat);
    }
    terms.total = terms.l_simple + lambda * terms.l_vlb;
    let grad = want_grad.then(|| {
        let mut g = vec![T::zero(); params.len()];
        model.net.backward(params, &trace, &dy, &mut g, false);
        g
    });
    Ok(Objective {
        terms,
        grad,
        eps_hat: eps_hats,
    })
}

/// Hybrid objective for a single example.
pub fn hybrid_loss(
    model: &DenoiserModel,
    x0: &Image,
    t: usize,
    eps: &Image,
    cond: &ConditionSet,
    lambda: f64,
) -> Result<LossTerms> {
    let ex = TrainExample {
        x0: x0.clone(),
        t,
        eps: eps.clone(),
        cond: cond.clone(),
    };
    Ok(batch_objective::<f32>(model, &model.params, std::slice::from_ref(&ex), lambda, None, false)?.terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub grad_clip: f32,
    pub lambda_vlb: f64,
    pub seed: u64,
    pub arch: DenoiserArch,
    pub schedule: ScheduleConfig,
    /// Motion model only: probability of replacing the reference frame by the absent sentinel.
    pub p_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-4,
            grad_clip: 1.0,
            lambda_vlb: 1e-3,
            seed: 0,
            arch: DenoiserArch::default(),
            schedule: ScheduleConfig::default(),
            p_drop: 0.2,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("steps and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::InvalidParameter(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.lambda_vlb < 0.0 {
            return Err(Error::InvalidParameter("lr, grad_clip must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub l_simple: f64,
    pub l_vlb: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    fn window(&self, len: usize) -> usize {
        len.clamp(1, self.records.len().max(1))
    }

    /// Mean loss over the first `window` records.
    pub fn smoothed_start(&self, window: usize) -> f64 {
        let w = self.window(window);
        self.records[..w].iter().map(|r| r.loss).sum::<f64>() / w as f64
    }

    /// Mean loss over the last `window` records.
    pub fn smoothed_end(&self, window: usize) -> f64 {
        let w = self.window(window);
        let n = self.records.len();
        self.records[n - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,l_simple,l_vlb\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.l_simple, r.l_vlb));
        }
        s
    }
}

/// Bookkeeping of what the motion sampler fed the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionStats {
    pub examples: usize,
    pub dropped_references: usize,
    pub positive_distances: usize,
    pub negative_distances: usize,
}

pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub log: LossLog,
    pub motion_stats: MotionStats,
}

fn standard_normal_image(rng: &mut impl Rng, dims: (usize, usize)) -> Image {
    Image::from_shape_simple_fn(dims, || rng.sample(StandardNormal))
}

fn optimise(
    role: ModelRole,
    cfg: &TrainConfig,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (Image, ConditionSet),
) -> Result<(DenoiserModel, LossLog)> {
    let mut model = DenoiserModel::new(role, cfg.arch, cfg.schedule, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f5f_d1ff);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.len(),
    );
    let steps_total = model.schedule.steps();
    let mut log = LossLog::default();
    for step in 0..cfg.steps {
        let batch: Vec<TrainExample> = (0..cfg.batch_size)
            .map(|_| {
                let (x0, cond) = draw(&mut rng);
                let t = rng.gen_range(1..=steps_total);
                let eps = standard_normal_image(&mut rng, x0.dim());
                TrainExample { x0, t, eps, cond }
            })
            .collect();
        let obj = batch_objective::<f32>(&model, &model.params, &batch, cfg.lambda_vlb, None, true)?;
        let mut grad = obj.grad.expect("gradient requested");
        clip_global_norm(&mut grad, cfg.grad_clip);
        opt.step(&mut model.params, &grad);
        log.records.push(LossRecord {
            step,
            loss: obj.terms.total,
            l_simple: obj.terms.l_simple,
            l_vlb: obj.terms.l_vlb,
        });
    }
    Ok((model, log))
}

/// Trains the scene model on a mixed pool of annotated and unannotated frames.
/// Unannotated frames are presented with the absent-mask sentinel.
pub fn train_scene(frames: &[FrameSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyDataset("scene training needs frames".into()));
    }
    if frames.iter().all(|f| f.mask.is_none()) {
        return Err(Error::InvalidDataset(
            "scene training needs at least one annotated frame".into(),
        ));
    }
    let (model, log) = optimise(ModelRole::Scene, cfg, |rng| {
        let f = frames.choose(rng).expect("nonempty");
        let cond = ConditionSet {
            mask: f.mask.clone(),
            ..ConditionSet::default()
        };
        (f.frame.clone(), cond)
    })?;
    Ok(TrainOutcome {
        model,
        log,
        motion_stats: MotionStats::default(),
    })
}

/// Trains the motion model on fully annotated videos. Each example pairs a
/// target frame and its mask with a reference frame from the same video at a
/// random nonzero signed offset; with probability `p_drop` the reference is
/// replaced by the absent sentinel.
pub fn train_motion(videos: &[LabeledVideo], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyDataset("motion training needs videos".into()));
    }
    for (i, v) in videos.iter().enumerate() {
        if v.annotated.iter().any(|a| !a) {
            return Err(Error::InvalidDataset(format!("video {i} has frames without masks")));
        }
        if v.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "video {i} has {} frame(s); a nonzero frame distance needs at least 2",
                v.len()
            )));
        }
    }
    let mut stats = MotionStats::default();
    let (model, log) = optimise(ModelRole::Motion, cfg, |rng| {
        let v = videos.choose(rng).expect("nonempty");
        let n = v.len();
        let target = rng.gen_range(0..n);
        let mut reference = rng.gen_range(0..n - 1);
        if reference >= target {
            reference += 1;
        }
        let distance = target as i32 - reference as i32;
        stats.examples += 1;
        if distance > 0 {
            stats.positive_distances += 1;
        } else {
            stats.negative_distances += 1;
        }
        let dropped = rng.gen_bool(cfg.p_drop);
        let cond = if dropped {
            stats.dropped_references += 1;
            ConditionSet::mask(v.masks[target].clone())
        } else {
            ConditionSet::mask_and_frame(v.masks[target].clone(), v.frames[reference].clone(), distance)
        };
        (v.frames[target].clone(), cond)
    })?;
    Ok(TrainOutcome {
        model,
        log,
        motion_stats: stats,
    })
}
