//! Reverse diffusion and three-stage video generation.
//!
//! A video is generated frame by frame following a [`FramePlan`]: the leading
//! frame from the scene model, the concluding frame from the motion model
//! conditioned on the leading one, then intermediate frames by breadth-first
//! midpoint subdivision conditioned on both neighbours. The chronological
//! plan conditions each frame on its predecessor only.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionSet, DenoiserModel, ModelRole, Query};
use crate::error::{Error, Result};
use crate::guidance::{combine_fc, combine_motion, combine_scene, seg_guided_mean, GuidanceMode, GuidanceSpec, GuidanceWeights, GAMMA_MAX};
use crate::schedule::{reverse_mean, reverse_mean_clipped, reverse_variance, NoiseSchedule};
use crate::segmenter::{seg_log_likelihood_grad, SegmenterModel};
use crate::synth::{LabeledVideo, VideoMeta};
use crate::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Leading,
    Concluding,
    Intermediate,
}

/// Distances are signed `target − reference`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    None,
    Single { reference: usize, distance: i32 },
    Pair { first: usize, first_distance: i32, second: usize, second_distance: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub target: usize,
    pub conditioning: Conditioning,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frames: usize,
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Subdivision,
    Chronological,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subdivision" => Ok(Self::Subdivision),
            "chronological" => Ok(Self::Chronological),
            _ => Err(Error::InvalidParameter(format!("unknown sampling mode {s:?}"))),
        }
    }
}

impl FramePlan {
    pub fn targets(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.target).collect()
    }

    /// Coverage, precedence, distance bookkeeping and stage/conditioning agreement.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(format!("frame plan: {msg}")));
        let mut done = vec![false; self.frames];
        for (i, s) in self.steps.iter().enumerate() {
            if s.target >= self.frames || done[s.target] {
                return bad(format!("step {i} targets frame {} twice or out of range", s.target));
            }
            let refs: Vec<(usize, i32)> = match s.conditioning {
                Conditioning::None => vec![],
                Conditioning::Single { reference, distance } => vec![(reference, distance)],
                Conditioning::Pair {
                    first,
                    first_distance,
                    second,
                    second_distance,
                } => vec![(first, first_distance), (second, second_distance)],
            };
            for (r, d) in refs {
                if r >= self.frames || !done[r] {
                    return bad(format!("step {i} references frame {r} before it exists"));
                }
                if d != s.target as i32 - r as i32 || d == 0 {
                    return bad(format!("step {i} has distance {d} for reference {r}"));
                }
            }
            let ok = matches!(
                (s.stage, s.conditioning),
                (Stage::Leading, Conditioning::None)
                    | (Stage::Concluding, Conditioning::Single { .. })
                    | (Stage::Intermediate, Conditioning::Single { .. })
                    | (Stage::Intermediate, Conditioning::Pair { .. })
            );
            if !ok {
                return bad(format!("step {i} stage {:?} with {:?}", s.stage, s.conditioning));
            }
            done[s.target] = true;
        }
        if done.iter().any(|d| !d) {
            return bad("not every frame is generated".into());
        }
        Ok(())
    }
}

fn check_frames(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidParameter("a frame plan needs at least one frame".into()));
    }
    Ok(())
}

/// Leading, concluding, then breadth-first floor-midpoint subdivision, left to right.
pub fn subdivision_order(n: usize) -> Result<FramePlan> {
    check_frames(n)?;
    let mut steps = vec![PlanStep {
        target: 0,
        conditioning: Conditioning::None,
        stage: Stage::Leading,
    }];
    if n >= 2 {
        let last = n - 1;
        steps.push(PlanStep {
            target: last,
            conditioning: Conditioning::Single {
                reference: 0,
                distance: last as i32,
            },
            stage: Stage::Concluding,
        });
        let mut queue = VecDeque::from([(0usize, last)]);
        while let Some((a, b)) = queue.pop_front() {
            if b - a < 2 {
                continue;
            }
            let m = (a + b) / 2;
            steps.push(PlanStep {
                target: m,
                conditioning: Conditioning::Pair {
                    first: a,
                    first_distance: (m - a) as i32,
                    second: b,
                    second_distance: m as i32 - b as i32,
                },
                stage: Stage::Intermediate,
            });
            queue.push_back((a, m));
            queue.push_back((m, b));
        }
    }
    Ok(FramePlan { frames: n, steps })
}

/// Frame `i` conditioned on frame `i − 1`.
pub fn chronological_order(n: usize) -> Result<FramePlan> {
    check_frames(n)?;
    let mut steps = vec![PlanStep {
        target: 0,
        conditioning: Conditioning::None,
        stage: Stage::Leading,
    }];
    for i in 1..n {
        steps.push(PlanStep {
            target: i,
            conditioning: Conditioning::Single {
                reference: i - 1,
                distance: 1,
            },
            stage: if i == n - 1 { Stage::Concluding } else { Stage::Intermediate },
        });
    }
    Ok(FramePlan { frames: n, steps })
}

pub fn plan(mode: SamplingMode, n: usize) -> Result<FramePlan> {
    match mode {
        SamplingMode::Subdivision => subdivision_order(n),
        SamplingMode::Chronological => chronological_order(n),
    }
}

/// One ancestral step: `μ' + σ·z`, with `z = 0` at `t = 1`.
///
/// `seg_grad` is only read when `γ > 0`. With `clip_denoised` the mean goes
/// through the predicted clean image clamped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    x_t: &Image,
    t: usize,
    eps_bar: &Image,
    v_hat: &Image,
    sched: &NoiseSchedule,
    clip_denoised: bool,
    rng: &mut impl Rng,
    gamma: f64,
    seg_grad: Option<&Image>,
) -> Result<Image> {
    let mu = if clip_denoised {
        reverse_mean_clipped(x_t, eps_bar, t, sched)?
    } else {
        reverse_mean(x_t, eps_bar, t, sched)?
    };
    let sigma2 = reverse_variance(v_hat, t, sched)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("gamma {gamma} must be >= 0")));
    }
    let mu = if gamma > 0.0 {
        let g = seg_grad.ok_or_else(|| Error::InvalidParameter("gamma > 0 needs a segmentation gradient".into()))?;
        seg_guided_mean(&mu, &sigma2, g, gamma)?
    } else {
        mu
    };
    if t == 1 {
        return Ok(mu);
    }
    Ok(ndarray::Zip::from(&mu).and(&sigma2).map_collect(|&m, &s2| {
        let z: f32 = rng.sample(StandardNormal);
        m + s2.sqrt() * z
    }))
}

/// How γ is chosen for each video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPolicy {
    Fixed(f64),
    /// Uniform over `[0, max]`, drawn once per video.
    Uniform { max: f64 },
}

impl Default for GammaPolicy {
    fn default() -> Self {
        Self::Uniform { max: GAMMA_MAX }
    }
}

impl GammaPolicy {
    fn validate(&self) -> Result<()> {
        let v = match *self {
            Self::Fixed(g) => g,
            Self::Uniform { max } => max,
        };
        if !(0.0..=GAMMA_MAX).contains(&v) {
            return Err(Error::InvalidParameter(format!("gamma {v} outside [0, {GAMMA_MAX}]")));
        }
        Ok(())
    }

    /// γ for a video, drawn from a stream separate from the sampling noise.
    pub fn draw(&self, seed: u64) -> f64 {
        match *self {
            Self::Fixed(g) => g,
            Self::Uniform { max } if max > 0.0 => ChaCha8Rng::seed_from_u64(seed ^ 0x9a33_a5ed).gen_range(0.0..=max),
            Self::Uniform { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Reverse steps actually taken; a strided subset of the training schedule.
    pub sampling_steps: usize,
    pub weights: GuidanceWeights,
    pub gamma: GammaPolicy,
    pub mode: SamplingMode,
    /// Clamp the predicted clean image to `[-1, 1]` before forming the reverse mean.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sampling_steps: 100,
            weights: GuidanceWeights::default(),
            gamma: GammaPolicy::default(),
            mode: SamplingMode::Subdivision,
            clip_denoised: true,
        }
    }
}

/// The trained networks a sampler needs. ψ may be omitted when γ is always 0.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub scene: &'a DenoiserModel,
    pub motion: &'a DenoiserModel,
    pub psi: Option<&'a SegmenterModel>,
}

impl Models<'_> {
    fn check(&self) -> Result<()> {
        if self.scene.role != ModelRole::Scene || self.motion.role != ModelRole::Motion {
            return Err(Error::InvalidParameter("scene and motion models swapped".into()));
        }
        if self.scene.schedule_config != self.motion.schedule_config {
            return Err(Error::InvalidParameter("scene and motion models use different schedules".into()));
        }
        Ok(())
    }

    /// The strided schedule sampling runs on.
    pub fn sampling_schedule(&self, steps: usize) -> Result<NoiseSchedule> {
        self.check()?;
        self.scene.schedule().respaced(steps)
    }
}

/// Guidance spec for one plan step under `weights`.
pub fn step_spec(step: &PlanStep, weights: &GuidanceWeights, gamma: f64) -> Result<GuidanceSpec> {
    let (mode, omega) = match step.conditioning {
        Conditioning::None => (GuidanceMode::Scene, weights.omega_scene),
        Conditioning::Single { .. } => (GuidanceMode::MotionSingle, weights.omega_concluding),
        Conditioning::Pair { .. } => (GuidanceMode::MotionPair, weights.omega_intermediate),
    };
    GuidanceSpec::new(mode, omega, gamma)
}

fn reference(generated: &[Option<Image>], i: usize) -> Result<&Image> {
    generated
        .get(i)
        .and_then(|f| f.as_ref())
        .ok_or_else(|| Error::InvalidParameter(format!("reference frame {i} has not been generated")))
}

/// Runs the full reverse loop for one plan step.
#[allow(clippy::too_many_arguments)]
pub fn generate_frame(
    step: &PlanStep,
    masks: &[Mask],
    generated: &[Option<Image>],
    models: Models<'_>,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    clip_denoised: bool,
    rng: &mut impl Rng,
) -> Result<Image> {
    let mask = masks
        .get(step.target)
        .ok_or_else(|| Error::InvalidParameter(format!("no mask for frame {}", step.target)))?;
    let dims = mask.dim();
    if masks.iter().any(|m| m.dim() != dims) {
        return Err(Error::InvalidParameter("masks differ in shape".into()));
    }
    let psi = if spec.gamma > 0.0 {
        Some(
            models
                .psi
                .ok_or_else(|| Error::InvalidParameter("gamma > 0 needs a segmenter".into()))?,
        )
    } else {
        None
    };
    let mask_only = ConditionSet::mask(mask.clone());
    let (model, conds): (&DenoiserModel, Vec<ConditionSet>) = match step.conditioning {
        Conditioning::None => (models.scene, vec![ConditionSet::unconditional(), mask_only]),
        Conditioning::Single { reference: r, distance } => (
            models.motion,
            vec![
                mask_only,
                ConditionSet::mask_and_frame(mask.clone(), reference(generated, r)?.clone(), distance),
            ],
        ),
        Conditioning::Pair {
            first,
            first_distance,
            second,
            second_distance,
        } => (
            models.motion,
            vec![
                mask_only,
                ConditionSet::mask_and_frame(mask.clone(), reference(generated, first)?.clone(), first_distance),
                ConditionSet::mask_and_frame(mask.clone(), reference(generated, second)?.clone(), second_distance),
            ],
        ),
    };
    let mut x = Image::from_shape_simple_fn(dims, || rng.sample(StandardNormal));
    for t in (1..=sched.steps()).rev() {
        let tm = sched.model_timestep(t);
        let queries: Vec<Query<'_>> = conds.iter().map(|cond| Query { x_t: &x, t: tm, cond }).collect();
        let mut out = model.predict_batch(&queries)?;
        let (eps_bar, v_hat) = match spec.mode {
            GuidanceMode::Scene | GuidanceMode::MotionSingle => {
                let (eps_c, v_c) = out.pop().expect("two branches");
                let (eps_u, _) = out.pop().expect("two branches");
                let eps = if spec.mode == GuidanceMode::Scene {
                    combine_scene(&eps_u, &eps_c, spec.omega)?
                } else {
                    combine_motion(&eps_u, &eps_c, spec.omega)?
                };
                (eps, v_c)
            }
            GuidanceMode::MotionPair => {
                let (eps_f2, _) = out.pop().expect("three branches");
                let (eps_f1, _) = out.pop().expect("three branches");
                let (eps_m, v_m) = out.pop().expect("three branches");
                (combine_fc(&eps_m, &eps_f1, &eps_f2, spec.omega)?, v_m)
            }
        };
        let grad = match psi {
            Some(psi) => Some(seg_log_likelihood_grad(psi, &x, mask)?),
            None => None,
        };
        x = reverse_step(&x, t, &eps_bar, &v_hat, sched, clip_denoised, rng, spec.gamma, grad.as_ref())?;
    }
    Ok(x.mapv(|v| v.clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedVideo {
    #[serde(skip)]
    pub frames: Vec<Image>,
    #[serde(skip)]
    pub masks: Vec<Mask>,
    pub gamma: f64,
    pub seed: u64,
    pub mode: SamplingMode,
    /// Frame indices in generation order.
    pub order: Vec<usize>,
}

impl GeneratedVideo {
    pub fn to_labeled(&self) -> LabeledVideo {
        LabeledVideo {
            frames: self.frames.clone(),
            masks: self.masks.clone(),
            annotated: vec![true; self.frames.len()],
            meta: VideoMeta {
                seed: self.seed,
                wire_count: 0,
                contrast: 0.0,
                edge_base: 0.0,
            },
        }
    }
}

/// Generates one video conditioned on `masks` following the configured plan.
pub fn generate_video(masks: &[Mask], models: Models<'_>, cfg: &SamplerConfig, seed: u64) -> Result<GeneratedVideo> {
    if masks.is_empty() {
        return Err(Error::InvalidParameter("no masks to condition on".into()));
    }
    let dims = masks[0].dim();
    if masks.iter().any(|m| m.dim() != dims) {
        return Err(Error::InvalidParameter("masks differ in shape".into()));
    }
    if masks.iter().any(|m| m.iter().any(|&v| v > 1)) {
        return Err(Error::ValueOutOfRange("mask value outside {0, 1}".into()));
    }
    cfg.gamma.validate()?;
    let sched = models.sampling_schedule(cfg.sampling_steps)?;
    let frame_plan = plan(cfg.mode, masks.len())?;
    let gamma = cfg.gamma.draw(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generated: Vec<Option<Image>> = vec![None; masks.len()];
    for step in &frame_plan.steps {
        let spec = step_spec(step, &cfg.weights, gamma)?;
        let frame = generate_frame(step, masks, &generated, models, &sched, &spec, cfg.clip_denoised, &mut rng)?;
        generated[step.target] = Some(frame);
    }
    Ok(GeneratedVideo {
        frames: generated.into_iter().map(|f| f.expect("plan covers every frame")).collect(),
        masks: masks.to_vec(),
        gamma,
        seed,
        mode: cfg.mode,
        order: frame_plan.targets(),
    })
}

/// Worker count: `SFVD_THREADS` if set to a positive integer, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("SFVD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Generates several videos in parallel; output order matches `jobs`.
pub fn generate_videos(jobs: &[(&[Mask], u64)], models: Models<'_>, cfg: &SamplerConfig) -> Result<Vec<GeneratedVideo>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(masks, seed)| generate_video(masks, models, cfg, *seed))
            .collect()
    })
}

/// Mean squared difference between consecutive frames.
pub fn consecutive_frame_mse(frames: &[Image]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let total: f64 = frames
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(w[1].iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / w[0].len() as f64
        })
        .sum();
    total / (frames.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserArch;
    use crate::schedule::ScheduleConfig;
    use crate::segmenter::SegmenterArch;

    #[test]
    fn sixteen_frame_order() {
        let p = subdivision_order(16).unwrap();
        assert_eq!(p.targets(), vec![0, 15, 7, 3, 11, 1, 5, 9, 13, 2, 4, 6, 8, 10, 12, 14]);
        p.validate().unwrap();
    }

    #[test]
    fn small_plans() {
        let two = subdivision_order(2).unwrap();
        assert_eq!(two.steps.len(), 2);
        assert_eq!(two.steps[1].stage, Stage::Concluding);
        let three = subdivision_order(3).unwrap();
        assert_eq!(
            three.steps[2].conditioning,
            Conditioning::Pair {
                first: 0,
                first_distance: 1,
                second: 2,
                second_distance: -1
            }
        );
        let one = chronological_order(1).unwrap();
        assert_eq!(one.targets(), vec![0]);
        let four = chronological_order(4).unwrap();
        assert_eq!(four.targets(), vec![0, 1, 2, 3]);
        for s in &four.steps[1..] {
            assert!(matches!(s.conditioning, Conditioning::Single { distance: 1, .. }));
        }
        assert!(subdivision_order(0).is_err());
        assert!(chronological_order(0).is_err());
    }

    #[test]
    fn validation_catches_bad_plans() {
        let mut p = subdivision_order(5).unwrap();
        p.steps.swap(0, 1);
        assert!(p.validate().is_err());
        let mut q = chronological_order(3).unwrap();
        q.steps.pop();
        assert!(q.validate().is_err());
    }

    #[test]
    fn final_step_is_noise_free_and_gamma_zero_ignores_gradient() {
        let sched = NoiseSchedule::cosine(10).unwrap();
        let x = Image::from_elem((2, 2), 0.3);
        let eps = Image::from_elem((2, 2), 0.1);
        let v = Image::from_elem((2, 2), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = reverse_step(&x, 1, &eps, &v, &sched, false, &mut rng, 0.0, None).unwrap();
        assert_eq!(out, reverse_mean(&x, &eps, 1, &sched).unwrap());
        let g = Image::from_elem((2, 2), 100.0);
        let a = reverse_step(&x, 5, &eps, &v, &sched, false, &mut ChaCha8Rng::seed_from_u64(2), 0.0, Some(&g)).unwrap();
        let b = reverse_step(&x, 5, &eps, &v, &sched, false, &mut ChaCha8Rng::seed_from_u64(2), 0.0, None).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&x, 5, &eps, &v, &sched, false, &mut rng, 1.0, None).is_err());
    }

    fn tiny_models() -> (DenoiserModel, DenoiserModel, SegmenterModel) {
        let arch = DenoiserArch {
            base_width: 4,
            depth: 2,
            time_features: 8,
            distance_features: 4,
            embed_hidden: 8,
        };
        let sc = ScheduleConfig {
            steps: 40,
            ..ScheduleConfig::default()
        };
        (
            DenoiserModel::new(ModelRole::Scene, arch, sc, 1).unwrap(),
            DenoiserModel::new(ModelRole::Motion, arch, sc, 2).unwrap(),
            SegmenterModel::new(SegmenterArch { base_width: 4, depth: 2 }, true, sc, 3).unwrap(),
        )
    }

    fn masks(n: usize) -> Vec<Mask> {
        (0..n).map(|i| Mask::from_shape_fn((8, 8), |(y, x)| u8::from(x == (y + i) % 8))).collect()
    }

    #[test]
    fn video_generation_contracts() {
        let (s, m, psi) = tiny_models();
        let models = Models {
            scene: &s,
            motion: &m,
            psi: Some(&psi),
        };
        let cfg = SamplerConfig {
            sampling_steps: 5,
            ..SamplerConfig::default()
        };
        let ms = masks(5);
        let a = generate_video(&ms, models, &cfg, 9).unwrap();
        assert_eq!(a.frames.len(), 5);
        assert_eq!(a.order, subdivision_order(5).unwrap().targets());
        assert!(a.frames.iter().all(|f| f.iter().all(|v| (-1.0..=1.0).contains(v))));
        assert!(a.gamma >= 0.0 && a.gamma <= GAMMA_MAX);
        assert_eq!(a, generate_video(&ms, models, &cfg, 9).unwrap());
        let chrono = generate_video(
            &ms,
            models,
            &SamplerConfig {
                mode: SamplingMode::Chronological,
                ..cfg
            },
            9,
        )
        .unwrap();
        assert_ne!(a.frames, chrono.frames);
        let zero = SamplerConfig {
            gamma: GammaPolicy::Uniform { max: 0.0 },
            ..cfg
        };
        let fixed = SamplerConfig {
            gamma: GammaPolicy::Fixed(0.0),
            ..cfg
        };
        let unguided = Models { psi: None, ..models };
        assert_eq!(
            generate_video(&ms, models, &zero, 4).unwrap().frames,
            generate_video(&ms, unguided, &fixed, 4).unwrap().frames
        );
        let par = generate_videos(&[(&ms[..], 9), (&ms[..3], 10)], models, &cfg).unwrap();
        assert_eq!(par[0], a);
        assert_eq!(par[1], generate_video(&ms[..3], models, &cfg, 10).unwrap());
        assert!(generate_video(&[], models, &cfg, 0).is_err());
        let swapped = Models {
            scene: &m,
            motion: &s,
            psi: None,
        };
        assert!(generate_video(&ms, swapped, &cfg, 0).is_err());
    }

    #[test]
    fn consecutive_mse() {
        let a = Image::zeros((2, 2));
        let b = Image::from_elem((2, 2), 1.0);
        assert_eq!(consecutive_frame_mse(&[a.clone(), b.clone(), b]), 0.5);
        assert_eq!(consecutive_frame_mse(&[a]), 0.0);
    }
}
