//! Synthetic fluoroscopy-proxy corpora.
//!
//! These scenes stand in for clinical recordings, which are not available.
//! A scene is a smooth random intensity field, a slowly translating soft edge
//! (a diaphragm analogue), static bright bands (rib analogues) and one or more
//! thin dark wires that move faster than the background. The realism goals
//! are construction contracts only: wires are darker than their surroundings,
//! move faster than the background edge, and masks are the exact rasterised
//! wire pixels.

use std::f32::consts::TAU;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Image, Mask};

/// Intensity that a fully opaque wire pulls the background towards.
const WIRE_LEVEL: f32 = -0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub frames: usize,
    /// Amplitude of the smooth background field.
    pub field_scale: f32,
    pub field_waves: usize,
    /// Brightness step across the soft edge.
    pub edge_amplitude: f32,
    /// Peak horizontal displacement of the edge, in pixels.
    pub edge_motion: f32,
    /// Edge oscillation period, in frames.
    pub edge_period: f32,
    pub rib_bands: usize,
    pub rib_contrast: f32,
    pub wires: usize,
    pub wire_control_points: usize,
    /// Rasterised width in pixels.
    pub wire_width: f32,
    /// Opacity range the per-video wire contrast is drawn from.
    pub wire_contrast: (f32, f32),
    /// Peak wire displacement, in pixels.
    pub wire_motion: f32,
    /// Wire oscillation period, in frames.
    pub wire_period: f32,
    pub noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 8,
            field_scale: 0.2,
            field_waves: 4,
            edge_amplitude: 0.35,
            edge_motion: 1.5,
            edge_period: 16.0,
            rib_bands: 2,
            rib_contrast: 0.2,
            wires: 1,
            wire_control_points: 4,
            wire_width: 1.5,
            wire_contrast: (0.15, 0.6),
            wire_motion: 2.5,
            wire_period: 5.0,
            noise: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("scene config: {what}")));
        if !(8..=512).contains(&self.size) {
            return bad("size must be in 8..=512");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(0.0..=0.5).contains(&self.field_scale) || self.field_waves > 16 {
            return bad("field_scale in [0, 0.5], field_waves <= 16");
        }
        if !(0.0..=0.6).contains(&self.edge_amplitude) || self.edge_motion < 0.0 || !(self.edge_period > 0.0) {
            return bad("edge_amplitude in [0, 0.6], edge_motion >= 0, edge_period > 0");
        }
        if self.rib_bands > 8 || !(0.0..=0.4).contains(&self.rib_contrast) {
            return bad("rib_bands <= 8, rib_contrast in [0, 0.4]");
        }
        if !(1..=4).contains(&self.wires) || !(2..=8).contains(&self.wire_control_points) {
            return bad("wires in 1..=4, wire_control_points in 2..=8");
        }
        if !(1.0..=3.0).contains(&self.wire_width) {
            return bad("wire_width in [1, 3]");
        }
        let (lo, hi) = self.wire_contrast;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("wire_contrast must satisfy 0 < lo <= hi <= 1");
        }
        if self.wire_motion < 0.0 || self.wire_motion > self.size as f32 / 4.0 || !(self.wire_period > 0.0) {
            return bad("wire_motion in [0, size/4], wire_period > 0");
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return bad("noise in [0, 0.2]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub seed: u64,
    pub wire_count: usize,
    pub contrast: f32,
    /// Horizontal edge position per frame is `edge_base + edge_motion·sin(...)`;
    /// kept so tests can measure background motion.
    pub edge_base: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub frames: Vec<Image>,
    /// All-zero placeholders where `annotated[i]` is false.
    pub masks: Vec<Mask>,
    pub annotated: Vec<bool>,
    pub meta: VideoMeta,
}

impl LabeledVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| f.dim())
    }

    /// Checks shape consistency, intensity range and mask values.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::InvalidDataset("video has no frames".into()));
        }
        if self.masks.len() != n || self.annotated.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{n} frames, {} masks, {} flags",
                self.masks.len(),
                self.annotated.len()
            )));
        }
        let dims = self.dims();
        for (f, m) in self.frames.iter().zip(&self.masks) {
            if f.dim() != dims || m.dim() != dims {
                return Err(Error::shape(&[dims.0, dims.1], &[f.dim().0, f.dim().1]));
            }
            if f.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::ValueOutOfRange("frame intensity outside [-1, 1]".into()));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::ValueOutOfRange("mask value outside {0, 1}".into()));
            }
        }
        Ok(())
    }

    /// Annotated frames as supervision pairs.
    pub fn labeled_frames(&self) -> impl Iterator<Item = (&Image, &Mask)> {
        self.frames
            .iter()
            .zip(&self.masks)
            .zip(&self.annotated)
            .filter(|(_, &a)| a)
            .map(|(p, _)| p)
    }
}

/// One frame of the mixed scene-training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame: Image,
    pub mask: Option<Mask>,
}

struct Wave {
    kx: f32,
    ky: f32,
    phase: f32,
    amp: f32,
}

struct Wire {
    points: Vec<(f32, f32)>,
    phase: (f32, f32),
    direction: (f32, f32),
    bend: f32,
}

/// Catmull–Rom spline through `pts`, sampled densely.
fn spline(pts: &[(f32, f32)], per_segment: usize) -> Vec<(f32, f32)> {
    let n = pts.len();
    let at = |i: isize| pts[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity(per_segment * n);
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
        for k in 0..per_segment {
            let t = k as f32 / per_segment as f32;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f32, b: f32, c: f32, d: f32| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(pts[n - 1]);
    out
}

fn point_segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Marks every pixel whose centre lies within `width / 2` of the polyline.
fn rasterize(curve: &[(f32, f32)], width: f32, size: usize, mask: &mut Mask) {
    let r = width / 2.0;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil() as usize).min(size - 1);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + r).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if point_segment_distance((x as f32, y as f32), a, b) <= r {
                    mask[[y, x]] = 1;
                }
            }
        }
    }
}

/// Renders one labeled video; a pure function of `(cfg, seed)`.
pub fn make_video(cfg: &SceneConfig, seed: u64) -> Result<LabeledVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;
    let s = size as f32;

    let base = rng.gen_range(-0.05..0.15);
    let waves: Vec<Wave> = (0..cfg.field_waves)
        .map(|_| {
            let angle = rng.gen_range(0.0..TAU);
            let freq = rng.gen_range(0.5..2.0) * TAU / s;
            Wave {
                kx: freq * angle.cos(),
                ky: freq * angle.sin(),
                phase: rng.gen_range(0.0..TAU),
                amp: cfg.field_scale * rng.gen_range(0.3..1.0) / (cfg.field_waves as f32).sqrt(),
            }
        })
        .collect();
    let ribs: Vec<(f32, f32, f32, f32)> = (0..cfg.rib_bands)
        .map(|_| {
            let angle = rng.gen_range(-0.6f32..0.6) + std::f32::consts::FRAC_PI_2;
            (angle.cos(), angle.sin(), rng.gen_range(0.0..s), rng.gen_range(1.2..2.2))
        })
        .collect();
    let edge_base = rng.gen_range(0.3 * s..0.7 * s);
    let edge_phase = rng.gen_range(0.0..TAU);
    let edge_softness = rng.gen_range(1.5..3.0);
    let edge_sign: f32 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    let margin = (cfg.wire_motion + cfg.wire_width + 2.0).max(s * 0.12);
    let wires: Vec<Wire> = (0..cfg.wires)
        .map(|_| {
            let start = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
            let angle: f32 = rng.gen_range(0.0..TAU);
            let step = (s - 2.0 * margin) / cfg.wire_control_points as f32;
            let mut points = vec![start];
            let mut heading = angle;
            for _ in 1..cfg.wire_control_points {
                heading += rng.gen_range(-0.7..0.7);
                let last = *points.last().unwrap();
                let mut next = (last.0 + step * heading.cos(), last.1 + step * heading.sin());
                if !(margin..s - margin).contains(&next.0) || !(margin..s - margin).contains(&next.1) {
                    heading += std::f32::consts::PI / 2.0;
                    next = (
                        (last.0 + step * heading.cos()).clamp(margin, s - margin),
                        (last.1 + step * heading.sin()).clamp(margin, s - margin),
                    );
                }
                points.push(next);
            }
            let dir = rng.gen_range(0.0..TAU);
            Wire {
                points,
                phase: (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)),
                direction: (dir.cos(), dir.sin()),
                bend: rng.gen_range(0.2..0.6),
            }
        })
        .collect();
    let (clo, chi) = cfg.wire_contrast;
    let contrast = if chi > clo { rng.gen_range(clo..=chi) } else { clo };

    let mut static_bg = Array2::<f32>::zeros((size, size));
    for ((y, x), v) in static_bg.indexed_iter_mut() {
        let (xf, yf) = (x as f32, y as f32);
        let field: f32 = waves.iter().map(|w| w.amp * (w.kx * xf + w.ky * yf + w.phase).sin()).sum();
        let ribs: f32 = ribs
            .iter()
            .map(|&(cx, cy, off, width)| {
                let d = (cx * xf + cy * yf - off).rem_euclid(s / 2.0) - s / 4.0;
                cfg.rib_contrast * (-(d * d) / (2.0 * width * width)).exp()
            })
            .sum();
        *v = base + field + ribs;
    }

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let ft = f as f32;
        let edge = edge_base + cfg.edge_motion * (TAU * ft / cfg.edge_period + edge_phase).sin();
        let mut mask = Mask::zeros((size, size));
        for w in &wires {
            let phase = TAU * ft / cfg.wire_period;
            let shift = (
                cfg.wire_motion * (phase + w.phase.0).sin(),
                cfg.wire_motion * (phase + w.phase.1).cos(),
            );
            let n = w.points.len();
            let moved: Vec<(f32, f32)> = w
                .points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    // Bending grows along the wire so the tip moves most.
                    let along = i as f32 / (n - 1).max(1) as f32;
                    let b = w.bend * cfg.wire_motion * along * (phase + w.phase.1).sin();
                    (x + shift.0 - b * w.direction.1, y + shift.1 + b * w.direction.0)
                })
                .collect();
            rasterize(&spline(&moved, 12), cfg.wire_width, size, &mut mask);
        }
        let mut frame = Image::zeros((size, size));
        for ((y, x), v) in frame.indexed_iter_mut() {
            let soft = 1.0 / (1.0 + (-edge_sign * (x as f32 - edge) / edge_softness).exp());
            let mut value = static_bg[[y, x]] + cfg.edge_amplitude * soft;
            if mask[[y, x]] == 1 {
                value = (1.0 - contrast) * value + contrast * WIRE_LEVEL;
            }
            let noise: f32 = rng.sample(StandardNormal);
            *v = (value + cfg.noise * noise).clamp(-1.0, 1.0);
        }
        frames.push(frame);
        masks.push(mask);
    }
    Ok(LabeledVideo {
        frames,
        masks,
        annotated: vec![true; cfg.frames],
        meta: VideoMeta {
            seed,
            wire_count: cfg.wires,
            contrast,
            edge_base,
        },
    })
}

/// Horizontal position of the soft background edge in frame `f` of a video made by [`make_video`].
pub fn edge_position(cfg: &SceneConfig, seed: u64, frame: usize) -> f32 {
    // Replays the draws that precede the edge parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.size as f32;
    let _: f32 = rng.gen_range(-0.05..0.15);
    for _ in 0..cfg.field_waves {
        let _: f32 = rng.gen_range(0.0..TAU);
        let _: f32 = rng.gen_range(0.5..2.0);
        let _: f32 = rng.gen_range(0.0..TAU);
        let _: f32 = rng.gen_range(0.3..1.0);
    }
    for _ in 0..cfg.rib_bands {
        let _: f32 = rng.gen_range(-0.6f32..0.6);
        let _: f32 = rng.gen_range(0.0..s);
        let _: f32 = rng.gen_range(1.2..2.2);
    }
    let edge_base = rng.gen_range(0.3 * s..0.7 * s);
    let edge_phase: f32 = rng.gen_range(0.0..TAU);
    edge_base + cfg.edge_motion * (TAU * frame as f32 / cfg.edge_period + edge_phase).sin()
}

fn derive_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

/// Fully annotated video corpus.
pub fn make_fvideo_set(count: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<LabeledVideo>> {
    if count < 1 {
        return Err(Error::InvalidParameter("video count must be at least 1".into()));
    }
    derive_seeds(seed, count).into_iter().map(|s| make_video(cfg, s)).collect()
}

/// Partially annotated frame pool for scene training.
///
/// Exactly `round(fraction · total frames)` frames are annotated. Annotation
/// is concentrated per video: videos are visited in random order and each
/// receives a random number of annotated frames until the quota is met, so
/// most videos end up either partially annotated or not annotated at all.
pub fn make_pimage_set(
    video_count: usize,
    annotated_fraction: f64,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<(Vec<LabeledVideo>, Vec<FrameSample>)> {
    if !(0.0..=1.0).contains(&annotated_fraction) {
        return Err(Error::InvalidParameter(format!(
            "annotated fraction {annotated_fraction} outside [0, 1]"
        )));
    }
    if video_count == 0 || cfg.frames == 0 {
        return Err(Error::EmptyDataset("P-image set would contain no frames".into()));
    }
    let mut videos = make_fvideo_set(video_count, cfg, seed ^ 0xa5a5_5a5a)?;
    let total = video_count * cfg.frames;
    let mut quota = (annotated_fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..video_count).collect();
    order.shuffle(&mut rng);
    for v in &mut videos {
        v.annotated.iter_mut().for_each(|a| *a = false);
    }
    let mut pass = 0;
    while quota > 0 {
        for &vi in &order {
            if quota == 0 {
                break;
            }
            let video = &mut videos[vi];
            let free: Vec<usize> = (0..cfg.frames).filter(|&i| !video.annotated[i]).collect();
            if free.is_empty() {
                continue;
            }
            // First pass: a random share of the video; later passes top up.
            let take = if pass == 0 {
                rng.gen_range(1..=free.len()).min(quota)
            } else {
                free.len().min(quota)
            };
            for &i in free.choose_multiple(&mut rng, take) {
                video.annotated[i] = true;
            }
            quota -= take;
        }
        pass += 1;
    }
    for v in &mut videos {
        for (m, &a) in v.masks.iter_mut().zip(&v.annotated) {
            if !a {
                m.fill(0);
            }
        }
    }
    let pool = videos
        .iter()
        .flat_map(|v| {
            v.frames.iter().zip(&v.masks).zip(&v.annotated).map(|((f, m), &a)| FrameSample {
                frame: f.clone(),
                mask: a.then(|| m.clone()),
            })
        })
        .collect();
    Ok((videos, pool))
}

/// Train/val/test assignment by video index (80/10/10).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Split {
    /// Shuffled 80/10/10 split of ids `0..count`; val and test get at least one video when `count >= 3`.
    pub fn standard(count: usize, seed: u64) -> Self {
        let mut ids: Vec<u64> = (0..count as u64).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_val = (count as f64 * 0.1).round() as usize;
        let mut n_test = (count as f64 * 0.1).round() as usize;
        if count >= 3 {
            n_val = n_val.max(1);
            n_test = n_test.max(1);
        }
        let test = ids.split_off(count - n_test);
        let val = ids.split_off(count - n_test - n_val);
        Self { train: ids, val, test }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::SplitLeak(*id));
            }
        }
        Ok(())
    }
}

/// Dilation of a binary mask by a square of the given radius.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.dim();
    let r = radius as isize;
    Mask::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[yy as usize, xx as usize]] == 1 {
                    return 1;
                }
            }
        }
        0
    })
}
