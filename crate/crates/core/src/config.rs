//! Run configuration: built-in defaults, overridden by a JSON file, overridden by CLI flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::TrainConfig;
use crate::error::{Error, Result};
use crate::experiment::DeskConfig;
use crate::sampler::SamplerConfig;
use crate::segmenter::SegTrainConfig;
use crate::synth::SceneConfig;

/// Frames per synthesized video.
pub const DEFAULT_FRAMES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub fvideo_count: usize,
    pub pimage_videos: usize,
    pub annotated_fraction: f64,
    pub synthetic_count: usize,
    pub augment_seeds: Vec<u64>,
    pub denoiser: TrainConfig,
    pub segmenter: SegTrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = DeskConfig::default();
        Self {
            seed: 0,
            scene: SceneConfig {
                frames: DEFAULT_FRAMES,
                ..SceneConfig::default()
            },
            fvideo_count: desk.fvideo_count,
            pimage_videos: desk.pimage_videos,
            annotated_fraction: desk.annotated_fraction,
            synthetic_count: desk.synthetic_count,
            augment_seeds: vec![0, 1, 2],
            denoiser: desk.denoiser,
            segmenter: desk.segmenter,
            sampler: desk.sampler,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the keys present in `path`, merged object by object.
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::InvalidParameter(format!("config {}: {e}", path.display()));
        let over: Value = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(bad)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, over);
        serde_json::from_value(merged).map_err(bad)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn desk(&self) -> DeskConfig {
        DeskConfig {
            scene: self.scene,
            fvideo_count: self.fvideo_count,
            pimage_videos: self.pimage_videos,
            annotated_fraction: self.annotated_fraction,
            denoiser: self.denoiser,
            segmenter: self.segmenter,
            sampler: self.sampler,
            synthetic_count: self.synthetic_count,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Objects merge key by key. An object introducing a key the base lacks
/// replaces it whole, so switching an enum variant works.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if o.keys().all(|k| b.contains_key(k)) => {
            for (k, v) in o {
                merge(b.get_mut(&k).expect("key checked"), v);
            }
        }
        (slot, v) => *slot = v,
    }
}
