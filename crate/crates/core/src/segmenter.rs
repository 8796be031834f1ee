//! Wire segmenter: a small encoder–decoder producing per-pixel wire probabilities.
//!
//! One architecture serves both as the guidance classifier during sampling
//! (trained on diffusion-noised inputs) and as the downstream model of the
//! augmentation experiment (trained on clean frames).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricTable, SegMetricsReport, DEFAULT_TOLERANCE};
use crate::nn::{self, clip_global_norm, Adam, AdamConfig, Real, Tensor, UNet, UNetSpec};
use crate::schedule::{forward_sample, ScheduleConfig};
use crate::synth::{LabeledVideo, Split};
use crate::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterArch {
    pub base_width: usize,
    pub depth: usize,
}

impl Default for SegmenterArch {
    fn default() -> Self {
        Self { base_width: 16, depth: 2 }
    }
}

impl SegmenterArch {
    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            out_channels: 1,
            base_width: self.base_width,
            depth: self.depth,
            embed_features: 0,
            embed_hidden: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterModel {
    pub arch: SegmenterArch,
    /// Whether training inputs were forward-diffused frames.
    pub noise_augment: bool,
    /// Schedule used for noise augmentation; recorded even when unused.
    pub schedule_config: ScheduleConfig,
    pub seed: u64,
    params: Vec<f32>,
    net: UNet,
}

impl SegmenterModel {
    pub fn new(arch: SegmenterArch, noise_augment: bool, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(arch.unet_spec())?;
        let params = net.init_params(seed);
        Self::with_params(arch, noise_augment, schedule_config, seed, params)
    }

    pub fn with_params(
        arch: SegmenterArch,
        noise_augment: bool,
        schedule_config: ScheduleConfig,
        seed: u64,
        params: Vec<f32>,
    ) -> Result<Self> {
        let net = UNet::new(arch.unet_spec())?;
        if params.len() != net.param_count() {
            return Err(Error::SizeMismatch(format!(
                "{} parameters for a segmenter with {}",
                params.len(),
                net.param_count()
            )));
        }
        Ok(Self {
            arch,
            noise_augment,
            schedule_config,
            seed,
            params,
            net,
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

    fn stack<T: Real>(&self, frames: &[&Image]) -> Result<Tensor<T>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty frame batch".into()))?;
        let (h, w) = first.dim();
        self.net.spec().check_input(h, w)?;
        let mut x = Tensor::zeros(frames.len(), 1, h, w);
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != (h, w) {
                return Err(Error::shape(&[h, w], &[f.dim().0, f.dim().1]));
            }
            for (d, &s) in x.channel_mut(i, 0).iter_mut().zip(f.iter()) {
                *d = T::lit(s as f64);
            }
        }
        Ok(x)
    }

    /// Wire probabilities for a batch of frames.
    pub fn segment_batch(&self, frames: &[&Image]) -> Result<Vec<Image>> {
        let x = self.stack::<f32>(frames)?;
        let (h, w) = (x.h, x.w);
        let (y, _) = self.net.forward(&self.params, x, None);
        Ok((0..y.n)
            .map(|i| Image::from_shape_vec((h, w), y.channel(i, 0).iter().map(|&z| nn::sigmoid(z)).collect()).unwrap())
            .collect())
    }
}

/// Per-pixel wire probability map of one frame.
pub fn segment(psi: &SegmenterModel, frame: &Image) -> Result<Image> {
    Ok(psi.segment_batch(&[frame])?.pop().expect("one frame"))
}

/// Probability map thresholded at 0.5.
pub fn predict_mask(psi: &SegmenterModel, frame: &Image) -> Result<Mask> {
    Ok(segment(psi, frame)?.mapv(|p| u8::from(p > 0.5)))
}

fn log_sigmoid(z: f64) -> f64 {
    -nn::softplus(-z)
}

/// `Σ_pixels [M·log s + (1−M)·log(1−s)]` and its gradient with respect to the
/// input frame, evaluated with parameters `params` in precision `T`.
pub fn mask_log_likelihood_with<T: Real>(
    psi: &SegmenterModel,
    params: &[T],
    x: &Image,
    mask: &Mask,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    if x.dim() != mask.dim() {
        return Err(Error::shape(&[x.dim().0, x.dim().1], &[mask.dim().0, mask.dim().1]));
    }
    if params.len() != psi.net.param_count() {
        return Err(Error::SizeMismatch(format!(
            "{} parameters for a segmenter with {}",
            params.len(),
            psi.net.param_count()
        )));
    }
    let input = psi.stack::<T>(&[x])?;
    let (y, trace) = psi.net.forward(params, input, None);
    let mut ll = 0.0;
    let mut dy = Tensor::zeros(1, 1, y.h, y.w);
    for ((&z, &m), d) in y.channel(0, 0).iter().zip(mask.iter()).zip(dy.channel_mut(0, 0)) {
        let z = z.to_f64().unwrap();
        let m = m as f64;
        ll += m * log_sigmoid(z) + (1.0 - m) * log_sigmoid(-z);
        *d = T::lit(m - nn::sigmoid(z));
    }
    if !want_grad {
        return Ok((ll, None));
    }
    let dx = psi
        .net
        .backward(params, &trace, &dy, &mut [], true)
        .expect("input gradient requested");
    let grad = Image::from_shape_vec(x.dim(), dx.channel(0, 0).iter().map(|v| v.to_f64().unwrap() as f32).collect())
        .expect("gradient has the input shape");
    Ok((ll, Some(grad)))
}

/// `log p_ψ(M | x)` under the pixelwise-independent Bernoulli model.
pub fn mask_log_likelihood(psi: &SegmenterModel, x: &Image, mask: &Mask) -> Result<f64> {
    Ok(mask_log_likelihood_with::<f32>(psi, &psi.params, x, mask, false)?.0)
}

fn check_mask(mask: &Mask) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::ValueOutOfRange("mask value outside {0, 1}".into()));
    }
    Ok(())
}

/// `∇_x log p_ψ(M | x)`, by backpropagation through ψ.
pub fn seg_log_likelihood_grad(psi: &SegmenterModel, x_t: &Image, mask: &Mask) -> Result<Image> {
    check_mask(mask)?;
    Ok(mask_log_likelihood_with::<f32>(psi, &psi.params, x_t, mask, true)?
        .1
        .expect("gradient requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub grad_clip: f32,
    /// Weight of the soft-Dice term relative to binary cross-entropy.
    pub dice_weight: f64,
    pub seed: u64,
    pub arch: SegmenterArch,
    /// Noise-augmented training draws `t` uniformly from `0..=T/2`, with `t = 0` meaning the clean frame.
    pub schedule: ScheduleConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: 1.0,
            dice_weight: 1.0,
            seed: 0,
            arch: SegmenterArch::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl SegTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("steps and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.dice_weight < 0.0 {
            return Err(Error::InvalidParameter("lr and grad_clip must be positive, dice_weight non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossRecord {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub soft_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLossLog {
    pub records: Vec<SegLossRecord>,
}

impl SegLossLog {
    fn mean(records: &[SegLossRecord]) -> f64 {
        records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64
    }

    pub fn smoothed_start(&self, window: usize) -> f64 {
        Self::mean(&self.records[..window.clamp(1, self.records.len().max(1)).min(self.records.len())])
    }

    pub fn smoothed_end(&self, window: usize) -> f64 {
        let n = self.records.len();
        Self::mean(&self.records[n - window.clamp(1, n.max(1)).min(n)..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,bce,soft_dice\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.bce, r.soft_dice));
        }
        s
    }
}

pub struct SegTrainOutcome {
    pub model: SegmenterModel,
    pub log: SegLossLog,
    /// Training inputs that were forward-diffused (`t ≥ 1`); zero without noise augmentation.
    pub noised_inputs: usize,
}

/// BCE (mean over pixels) plus soft-Dice loss per example, and `∂loss/∂logit`.
fn seg_loss(logits: &[f64], mask: &Mask, dice_weight: f64, grad: &mut [f64]) -> (f64, f64) {
    const SMOOTH: f64 = 1.0;
    let pix = logits.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut total) = (0.0, 0.0);
    let probs: Vec<f64> = logits.iter().map(|&z| nn::sigmoid(z)).collect();
    for ((&z, &s), &m) in logits.iter().zip(&probs).zip(mask.iter()) {
        let m = m as f64;
        bce -= m * log_sigmoid(z) + (1.0 - m) * log_sigmoid(-z);
        inter += s * m;
        total += s + m;
    }
    let denom = total + SMOOTH;
    let score = (2.0 * inter + SMOOTH) / denom;
    for ((g, &s), &m) in grad.iter_mut().zip(&probs).zip(mask.iter()) {
        let m = m as f64;
        let dscore_ds = 2.0 * m / denom - (2.0 * inter + SMOOTH) / (denom * denom);
        *g = (s - m) / pix - dice_weight * dscore_ds * s * (1.0 - s);
    }
    (bce / pix, 1.0 - score)
}

/// Trains ψ on `(frame, mask)` pools. Each batch slot cycles through the pools,
/// so two pools are mixed 1:1.
pub fn train_segmenter_pools(
    pools: &[&[(Image, Mask)]],
    cfg: &SegTrainConfig,
    noise_augment: bool,
) -> Result<SegTrainOutcome> {
    cfg.validate()?;
    if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyDataset("segmenter training needs annotated frames".into()));
    }
    for (f, m) in pools.iter().flat_map(|p| p.iter()) {
        if f.dim() != m.dim() {
            return Err(Error::shape(&[f.dim().0, f.dim().1], &[m.dim().0, m.dim().1]));
        }
        check_mask(m)?;
    }
    let schedule = cfg.schedule.build()?;
    let max_t = schedule.steps() / 2;
    let mut model = SegmenterModel::new(cfg.arch, noise_augment, cfg.schedule, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e6_0001);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.len(),
    );
    let mut log = SegLossLog::default();
    let mut noised_inputs = 0;
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let (frame, mask) = pools[(step * cfg.batch_size + slot) % pools.len()]
                .choose(&mut rng)
                .expect("nonempty pool");
            let input = if noise_augment {
                let t = rng.gen_range(0..=max_t);
                if t == 0 {
                    frame.clone()
                } else {
                    noised_inputs += 1;
                    let eps = Image::from_shape_simple_fn(frame.dim(), || rng.sample(StandardNormal));
                    forward_sample(frame, t, &eps, &schedule)?
                }
            } else {
                frame.clone()
            };
            inputs.push(input);
            masks.push(mask);
        }
        let refs: Vec<&Image> = inputs.iter().collect();
        let x = model.stack::<f32>(&refs)?;
        let (y, trace) = model.net.forward(&model.params, x, None);
        let mut dy = Tensor::zeros(y.n, 1, y.h, y.w);
        let (mut bce, mut sd) = (0.0, 0.0);
        let n = y.n as f64;
        let mut g = vec![0.0; y.plane()];
        for (i, m) in masks.iter().enumerate() {
            let logits: Vec<f64> = y.channel(i, 0).iter().map(|&v| v as f64).collect();
            let (b, d) = seg_loss(&logits, m, cfg.dice_weight, &mut g);
            bce += b / n;
            sd += d / n;
            for (dst, &src) in dy.channel_mut(i, 0).iter_mut().zip(&g) {
                *dst = (src / n) as f32;
            }
        }
        let mut grad = vec![0.0f32; model.params.len()];
        model.net.backward(&model.params, &trace, &dy, &mut grad, false);
        clip_global_norm(&mut grad, cfg.grad_clip);
        opt.step(&mut model.params, &grad);
        log.records.push(SegLossRecord {
            step,
            loss: bce + cfg.dice_weight * sd,
            bce,
            soft_dice: sd,
        });
    }
    Ok(SegTrainOutcome {
        model,
        log,
        noised_inputs,
    })
}

/// Trains ψ on annotated frames with BCE + soft-Dice.
pub fn train_segmenter(samples: &[(Image, Mask)], cfg: &SegTrainConfig, noise_augment: bool) -> Result<SegTrainOutcome> {
    train_segmenter_pools(&[samples], cfg, noise_augment)
}

/// Annotated `(frame, mask)` pairs of a set of videos.
pub fn labeled_pairs<'a>(videos: impl IntoIterator<Item = &'a LabeledVideo>) -> Vec<(Image, Mask)> {
    videos
        .into_iter()
        .flat_map(|v| v.labeled_frames().map(|(f, m)| (f.clone(), m.clone())))
        .collect()
}

/// Per-video metric rows (frame-averaged) on annotated frames, with their aggregate.
pub fn evaluate_segmenter(psi: &SegmenterModel, videos: &[&LabeledVideo], tolerance: f64) -> Result<MetricTable> {
    let mut rows = Vec::with_capacity(videos.len());
    for v in videos {
        let pairs: Vec<(&Image, &Mask)> = v.labeled_frames().collect();
        if pairs.is_empty() {
            continue;
        }
        let frames: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
        let probs = psi.segment_batch(&frames)?;
        let per_frame = probs
            .iter()
            .zip(&pairs)
            .map(|(p, (_, gt))| SegMetricsReport::evaluate(&p.mapv(|v| u8::from(v > 0.5)), gt, tolerance))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SegMetricsReport::mean(&per_frame)?);
    }
    MetricTable::from_rows(rows)
}

/// Inputs of the paired baseline/augmented experiment.
pub struct AugmentationData<'a> {
    pub real: &'a [LabeledVideo],
    /// Video ids index into `real`.
    pub split: &'a Split,
    pub synthetic: &'a [LabeledVideo],
    /// Ids of the real videos whose masks drove each synthetic video.
    pub synthetic_sources: &'a [u64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRun {
    pub seed: u64,
    pub baseline: MetricTable,
    pub augmented: MetricTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub runs: Vec<AugmentationRun>,
}

impl AugmentationReport {
    /// Per-seed aggregate Dice gains, augmented minus baseline.
    pub fn dice_gains(&self) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r.augmented.aggregate.dice - r.baseline.aggregate.dice)
            .collect()
    }

    pub fn median_dice_gain(&self) -> f64 {
        median(self.dice_gains())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Checks split disjointness, id ranges, and that no synthetic video was driven
/// by masks of a validation or test video.
pub fn check_split(data: &AugmentationData<'_>) -> Result<()> {
    data.split.check_disjoint()?;
    let n = data.real.len() as u64;
    for &id in data.split.train.iter().chain(&data.split.val).chain(&data.split.test) {
        if id >= n {
            return Err(Error::InvalidDataset(format!("split id {id} but only {n} real videos")));
        }
    }
    if data.synthetic_sources.len() != data.synthetic.len() {
        return Err(Error::InvalidDataset(format!(
            "{} synthetic videos but {} source ids",
            data.synthetic.len(),
            data.synthetic_sources.len()
        )));
    }
    for &src in data.synthetic_sources {
        if data.split.val.contains(&src) || data.split.test.contains(&src) {
            return Err(Error::SplitLeak(src));
        }
    }
    Ok(())
}

/// Trains a real-only and a real+synthetic segmenter per seed and evaluates
/// both on the test split.
pub fn augmentation_experiment(data: &AugmentationData<'_>, cfg: &SegTrainConfig, seeds: &[u64]) -> Result<AugmentationReport> {
    check_split(data)?;
    if data.split.test.is_empty() || data.split.train.is_empty() {
        return Err(Error::EmptyDataset("augmentation experiment needs train and test videos".into()));
    }
    let real_train = labeled_pairs(data.split.train.iter().map(|&i| &data.real[i as usize]));
    let synth_train = labeled_pairs(data.synthetic);
    if synth_train.is_empty() {
        return Err(Error::EmptyDataset("no annotated synthetic frames".into()));
    }
    let test: Vec<&LabeledVideo> = data.split.test.iter().map(|&i| &data.real[i as usize]).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = SegTrainConfig { seed, ..*cfg };
        let baseline = train_segmenter(&real_train, &run_cfg, false)?.model;
        let augmented = train_segmenter_pools(&[&real_train, &synth_train], &run_cfg, false)?.model;
        runs.push(AugmentationRun {
            seed,
            baseline: evaluate_segmenter(&baseline, &test, DEFAULT_TOLERANCE)?,
            augmented: evaluate_segmenter(&augmented, &test, DEFAULT_TOLERANCE)?,
        });
    }
    Ok(AugmentationReport { runs })
}
