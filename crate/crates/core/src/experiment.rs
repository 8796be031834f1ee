//! Desk-scale end-to-end pipeline: corpus construction, model training,
//! synthesis from training-split masks, and the frame-consistency ×
//! segmentation-guidance ablation grid.

use serde::{Deserialize, Serialize};

use crate::denoiser::{train_motion, train_scene, LossLog, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricTable, DEFAULT_TOLERANCE};
use crate::sampler::{consecutive_frame_mse, generate_videos, GammaPolicy, GeneratedVideo, Models, SamplerConfig, SamplingMode};
use crate::segmenter::{
    evaluate_segmenter, labeled_pairs, train_segmenter, train_segmenter_pools, SegLossLog, SegTrainConfig, SegmenterModel,
};
use crate::synth::{make_fvideo_set, make_pimage_set, FrameSample, LabeledVideo, SceneConfig, Split};
use crate::denoiser::DenoiserModel;
use crate::guidance::GAMMA_MAX;
use crate::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub scene: SceneConfig,
    pub fvideo_count: usize,
    pub pimage_videos: usize,
    pub annotated_fraction: f64,
    pub denoiser: TrainConfig,
    pub segmenter: SegTrainConfig,
    pub sampler: SamplerConfig,
    pub synthetic_count: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            fvideo_count: 40,
            pimage_videos: 18,
            annotated_fraction: 4000.0 / 14000.0,
            denoiser: TrainConfig::default(),
            segmenter: SegTrainConfig::default(),
            sampler: SamplerConfig::default(),
            synthetic_count: 40,
            seed: 0,
        }
    }
}

/// Real data for one run.
pub struct Corpus {
    pub fvideos: Vec<LabeledVideo>,
    pub split: Split,
    /// Partially annotated frames plus every training-split F-video frame.
    pub scene_pool: Vec<FrameSample>,
}

impl Corpus {
    pub fn train_videos(&self) -> Vec<LabeledVideo> {
        self.split.train.iter().map(|&i| self.fvideos[i as usize].clone()).collect()
    }

    pub fn test_videos(&self) -> Vec<&LabeledVideo> {
        self.split.test.iter().map(|&i| &self.fvideos[i as usize]).collect()
    }
}

pub fn build_corpus(cfg: &DeskConfig) -> Result<Corpus> {
    let fvideos = make_fvideo_set(cfg.fvideo_count, &cfg.scene, cfg.seed)?;
    let split = Split::standard(fvideos.len(), cfg.seed);
    let (_, mut scene_pool) = make_pimage_set(cfg.pimage_videos, cfg.annotated_fraction, &cfg.scene, cfg.seed ^ 0x0b1d)?;
    for &i in &split.train {
        let v = &fvideos[i as usize];
        scene_pool.extend(v.frames.iter().zip(&v.masks).map(|(f, m)| FrameSample {
            frame: f.clone(),
            mask: Some(m.clone()),
        }));
    }
    Ok(Corpus {
        fvideos,
        split,
        scene_pool,
    })
}

pub struct TrainedModels {
    pub scene: DenoiserModel,
    pub motion: DenoiserModel,
    /// Noise-augmented ψ used for guidance.
    pub guide: SegmenterModel,
    pub scene_log: LossLog,
    pub motion_log: LossLog,
    pub guide_log: SegLossLog,
}

impl TrainedModels {
    pub fn models(&self) -> Models<'_> {
        Models {
            scene: &self.scene,
            motion: &self.motion,
            psi: Some(&self.guide),
        }
    }
}

pub fn train_models(corpus: &Corpus, cfg: &DeskConfig) -> Result<TrainedModels> {
    let train = corpus.train_videos();
    let scene = train_scene(&corpus.scene_pool, &cfg.denoiser)?;
    let motion = train_motion(
        &train,
        &TrainConfig {
            seed: cfg.denoiser.seed.wrapping_add(1),
            ..cfg.denoiser
        },
    )?;
    let guide = train_segmenter(
        &labeled_pairs(&train),
        &SegTrainConfig {
            seed: cfg.segmenter.seed.wrapping_add(2),
            schedule: cfg.denoiser.schedule,
            ..cfg.segmenter
        },
        true,
    )?;
    Ok(TrainedModels {
        scene: scene.model,
        motion: motion.model,
        guide: guide.model,
        scene_log: scene.log,
        motion_log: motion.log,
        guide_log: guide.log,
    })
}

/// Synthesizes `count` videos whose masks cycle through the training split.
/// Returns the videos and the id of the real video each mask sequence came from.
pub fn synthesize_from_split(
    corpus: &Corpus,
    models: Models<'_>,
    sampler: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<(Vec<GeneratedVideo>, Vec<u64>)> {
    if corpus.split.train.is_empty() {
        return Err(Error::EmptyDataset("no training videos to take masks from".into()));
    }
    let sources: Vec<u64> = (0..count).map(|i| corpus.split.train[i % corpus.split.train.len()]).collect();
    let jobs: Vec<(&[Mask], u64)> = sources
        .iter()
        .enumerate()
        .map(|(i, &id)| (&corpus.fvideos[id as usize].masks[..], seed.wrapping_add(i as u64)))
        .collect();
    Ok((generate_videos(&jobs, models, sampler)?, sources))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub frame_consistency: bool,
    pub segmentation_guidance: bool,
    pub metrics: MetricTable,
    pub consecutive_mse: f64,
}

impl AblationCell {
    pub fn tag(&self) -> String {
        format!(
            "FC{},SG{}",
            if self.frame_consistency { '+' } else { '-' },
            if self.segmentation_guidance { '+' } else { '-' }
        )
    }
}

/// Four-cell FC × SG grid. Each cell synthesizes `count` videos with the same
/// seeds, trains a segmenter on real + synthetic (1:1) and evaluates it on the test split.
pub fn ablation_grid(corpus: &Corpus, models: Models<'_>, cfg: &DeskConfig, count: usize) -> Result<Vec<AblationCell>> {
    let real = labeled_pairs(corpus.split.train.iter().map(|&i| &corpus.fvideos[i as usize]));
    let test = corpus.test_videos();
    let mut cells = Vec::with_capacity(4);
    for fc in [true, false] {
        for sg in [true, false] {
            let sampler = SamplerConfig {
                mode: if fc { SamplingMode::Subdivision } else { SamplingMode::Chronological },
                gamma: if sg {
                    GammaPolicy::Uniform { max: GAMMA_MAX }
                } else {
                    GammaPolicy::Fixed(0.0)
                },
                ..cfg.sampler
            };
            let (videos, _) = synthesize_from_split(corpus, models, &sampler, count, cfg.seed ^ 0xab1a)?;
            let mse = videos.iter().map(|v| consecutive_frame_mse(&v.frames)).sum::<f64>() / videos.len() as f64;
            let synth = labeled_pairs(videos.iter().map(|v| v.to_labeled()).collect::<Vec<_>>().iter());
            let psi = train_segmenter_pools(&[&real, &synth], &cfg.segmenter, false)?.model;
            cells.push(AblationCell {
                frame_consistency: fc,
                segmentation_guidance: sg,
                metrics: evaluate_segmenter(&psi, &test, DEFAULT_TOLERANCE)?,
                consecutive_mse: mse,
            });
        }
    }
    Ok(cells)
}

/// Ablation rows as CSV: `cell,dice,hd,g2re,r2ge,sensitivity,precision,consecutive_mse`.
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("cell,dice,hd,g2re,r2ge,sensitivity,precision,consecutive_mse\n");
    for c in cells {
        let v = c.metrics.aggregate.values();
        s.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{}\n",
            c.tag(),
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            c.consecutive_mse
        ));
    }
    s
}
