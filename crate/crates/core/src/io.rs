//! On-disk formats: the `.fvd` labeled-video container, model checkpoints,
//! dataset manifests and PNG contact sheets.
//!
//! Both binary formats are little-endian and end in a CRC32 of every
//! preceding byte. Readers check magic, version and sizes before the
//! checksum, so truncation is reported as a size mismatch rather than a CRC
//! failure. Writers go through a temporary file renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserArch, DenoiserModel, ModelRole};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::segmenter::{SegmenterArch, SegmenterModel};
use crate::synth::{LabeledVideo, SceneConfig, Split, VideoMeta};
use crate::{Image, Mask};

pub const FVD_MAGIC: &[u8; 4] = b"FVD1";
pub const FVD_VERSION: u16 = 1;
pub const CKPT_MAGIC: &[u8; 4] = b"SFVD";
pub const CKPT_VERSION: u32 = 1;

const FVD_HEADER: usize = 4 + 2 + 12;

/// Writes `bytes` to a temporary file in the destination directory, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn with_crc(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

fn verify_crc(bytes: &[u8]) -> Result<()> {
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn encode_fvd(video: &LabeledVideo) -> Result<Vec<u8>> {
    video.validate()?;
    let n = video.len();
    let (h, w) = video.dims();
    let mut out = Vec::with_capacity(FVD_HEADER + n * h * w * 5 + n + 4);
    out.extend_from_slice(FVD_MAGIC);
    out.extend_from_slice(&FVD_VERSION.to_le_bytes());
    for d in [n, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidParameter(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for f in &video.frames {
        for v in f.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in &video.masks {
        out.extend(m.iter().copied());
    }
    out.extend(video.annotated.iter().map(|&a| u8::from(a)));
    Ok(with_crc(out))
}

pub fn decode_fvd(bytes: &[u8]) -> Result<LabeledVideo> {
    if bytes.len() < 4 || &bytes[..4] != FVD_MAGIC {
        return Err(Error::BadMagic { expected: "FVD1" });
    }
    if bytes.len() < FVD_HEADER + 4 {
        return Err(Error::SizeMismatch(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FVD_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            supported: FVD_VERSION as u32,
        });
    }
    let (n, h, w) = (u32_at(bytes, 6) as usize, u32_at(bytes, 10) as usize, u32_at(bytes, 14) as usize);
    let plane = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::SizeMismatch("header dimensions overflow".into()))?;
    let expected = plane
        .checked_mul(5)
        .and_then(|v| v.checked_add(FVD_HEADER + n + 4))
        .ok_or_else(|| Error::SizeMismatch("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "header says {n}x{h}x{w} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    verify_crc(bytes)?;
    if n == 0 {
        return Err(Error::InvalidDataset("container holds no frames".into()));
    }
    let mut at = FVD_HEADER;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let data: Vec<f32> = bytes[at..at + 4 * h * w]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::ValueOutOfRange("frame intensity outside [-1, 1]".into()));
        }
        frames.push(Image::from_shape_vec((h, w), data).expect("sized by header"));
        at += 4 * h * w;
    }
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let data = bytes[at..at + h * w].to_vec();
        if data.iter().any(|&v| v > 1) {
            return Err(Error::ValueOutOfRange("mask byte outside {0, 1}".into()));
        }
        masks.push(Mask::from_shape_vec((h, w), data).expect("sized by header"));
        at += h * w;
    }
    let mut annotated = Vec::with_capacity(n);
    for &b in &bytes[at..at + n] {
        if b > 1 {
            return Err(Error::ValueOutOfRange("annotation flag outside {0, 1}".into()));
        }
        annotated.push(b == 1);
    }
    Ok(LabeledVideo {
        frames,
        masks,
        annotated,
        meta: VideoMeta::default(),
    })
}

pub fn write_fvd(path: &Path, video: &LabeledVideo) -> Result<()> {
    write_atomic(path, &encode_fvd(video)?)
}

pub fn read_fvd(path: &Path) -> Result<LabeledVideo> {
    decode_fvd(&fs::read(path)?)
}

/// Architecture and provenance of a checkpointed network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum ModelDescriptor {
    Scene { arch: DenoiserArch },
    Motion { arch: DenoiserArch },
    Segmenter { arch: SegmenterArch, noise_augment: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: ModelDescriptor,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub param_count: usize,
}

#[derive(Debug, Clone)]
pub enum Checkpoint {
    Denoiser(DenoiserModel),
    Segmenter(SegmenterModel),
}

impl Checkpoint {
    fn header(&self) -> CheckpointHeader {
        let (model, schedule, seed, count) = match self {
            Checkpoint::Denoiser(m) => (
                match m.role {
                    ModelRole::Scene => ModelDescriptor::Scene { arch: m.arch },
                    ModelRole::Motion => ModelDescriptor::Motion { arch: m.arch },
                },
                m.schedule_config,
                m.seed,
                m.params().len(),
            ),
            Checkpoint::Segmenter(s) => (
                ModelDescriptor::Segmenter {
                    arch: s.arch,
                    noise_augment: s.noise_augment,
                },
                s.schedule_config,
                s.seed,
                s.params().len(),
            ),
        };
        CheckpointHeader {
            format_version: CKPT_VERSION,
            model,
            schedule,
            seed,
            param_count: count,
        }
    }

    fn params(&self) -> &[f32] {
        match self {
            Checkpoint::Denoiser(m) => m.params(),
            Checkpoint::Segmenter(s) => s.params(),
        }
    }

    pub fn into_denoiser(self, role: ModelRole) -> Result<DenoiserModel> {
        match self {
            Checkpoint::Denoiser(m) if m.role == role => Ok(m),
            _ => Err(Error::Header(format!("checkpoint is not a {role:?} model"))),
        }
    }

    pub fn into_segmenter(self) -> Result<SegmenterModel> {
        match self {
            Checkpoint::Segmenter(s) => Ok(s),
            _ => Err(Error::Header("checkpoint is not a segmenter".into())),
        }
    }
}

pub fn encode_ckpt(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ckpt.header())?;
    let params = ckpt.params();
    let mut out = Vec::with_capacity(8 + header.len() + 4 * params.len() + 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(with_crc(out))
}

pub fn decode_ckpt(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: "SFVD" });
    }
    if bytes.len() < 12 {
        return Err(Error::SizeMismatch(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let header_len = u32_at(bytes, 4) as usize;
    if 8 + header_len + 4 > bytes.len() {
        return Err(Error::SizeMismatch(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_bytes = &bytes[8..8 + header_len];
    let value: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Header(format!("header is not JSON: {e}")))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CKPT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                found: v.min(u32::MAX as u64) as u32,
                supported: CKPT_VERSION,
            })
        }
        None => return Err(Error::Header("missing format_version".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| Error::Header(format!("malformed header: {e}")))?;
    let blob = &bytes[8 + header_len..bytes.len() - 4];
    if blob.len() != 4 * header.param_count {
        return Err(Error::SizeMismatch(format!(
            "header declares {} parameters, blob holds {} bytes",
            header.param_count,
            blob.len()
        )));
    }
    verify_crc(bytes)?;
    let params: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(match header.model {
        ModelDescriptor::Scene { arch } => {
            Checkpoint::Denoiser(DenoiserModel::with_params(ModelRole::Scene, arch, header.schedule, header.seed, params)?)
        }
        ModelDescriptor::Motion { arch } => {
            Checkpoint::Denoiser(DenoiserModel::with_params(ModelRole::Motion, arch, header.schedule, header.seed, params)?)
        }
        ModelDescriptor::Segmenter { arch, noise_augment } => Checkpoint::Segmenter(SegmenterModel::with_params(
            arch,
            noise_augment,
            header.schedule,
            header.seed,
            params,
        )?),
    })
}

pub fn write_ckpt(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_ckpt(ckpt)?)
}

pub fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    decode_ckpt(&fs::read(path)?)
}

/// Frames on the top row and masks below, left to right, as an 8-bit grayscale PNG.
pub fn contact_sheet_png(frames: &[Image], masks: &[Mask]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidParameter("contact sheet needs frames".into()))?;
    let (h, w) = first.dim();
    if frames.iter().any(|f| f.dim() != (h, w)) || masks.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::InvalidParameter("contact sheet images differ in shape".into()));
    }
    let rows = if masks.is_empty() { 1 } else { 2 };
    let (sheet_w, sheet_h) = (w * frames.len(), h * rows);
    let mut pixels = vec![0u8; sheet_w * sheet_h];
    for (i, f) in frames.iter().enumerate() {
        for ((y, x), &v) in f.indexed_iter() {
            pixels[y * sheet_w + i * w + x] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
    }
    for (i, m) in masks.iter().enumerate().take(frames.len()) {
        for ((y, x), &v) in m.indexed_iter() {
            pixels[(h + y) * sheet_w + i * w + x] = if v != 0 { 255 } else { 0 };
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, sheet_w as u32, sheet_h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

pub fn write_contact_sheet(path: &Path, frames: &[Image], masks: &[Mask]) -> Result<()> {
    write_atomic(path, &contact_sheet_png(frames, masks)?)
}

/// Index of a dataset directory of `.fvd` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `"fvideo"` (fully annotated) or `"pimage"` (partially annotated).
    pub kind: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub annotated_fraction: f64,
    /// File names relative to the manifest, in video-id order.
    pub videos: Vec<String>,
    pub split: Split,
    /// Synthesized sets only: id of the real video whose masks drove each entry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<u64>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, videos: &[LabeledVideo]) -> Result<()> {
    if manifest.videos.len() != videos.len() {
        return Err(Error::InvalidDataset(format!(
            "manifest lists {} videos, {} given",
            manifest.videos.len(),
            videos.len()
        )));
    }
    manifest.split.check_disjoint()?;
    fs::create_dir_all(dir)?;
    for (name, v) in manifest.videos.iter().zip(videos) {
        write_fvd(&dir.join(name), v)?;
    }
    write_atomic(&dir.join(MANIFEST_NAME), &serde_json::to_vec_pretty(manifest)?)
}

/// Reads a dataset written by [`write_dataset`]; `path` may be the directory or its manifest.
pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<LabeledVideo>)> {
    let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    manifest.split.check_disjoint()?;
    let videos = manifest
        .videos
        .iter()
        .map(|name| read_fvd(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, videos))
}
