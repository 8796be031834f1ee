//! Segmentation accuracy and generation-quality metrics.
//!
//! Boundary metrics use an exact Euclidean distance transform; distances are
//! square roots of integer squared pixel offsets, so they agree bit-for-bit
//! with brute-force nearest-neighbour search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mask;

pub const DEFAULT_TOLERANCE: f64 = 2.0;

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(&[gt.dim().0, gt.dim().1], &[pred.dim().0, pred.dim().1]));
    }
    Ok(())
}

fn count(m: &Mask) -> usize {
    m.iter().filter(|&&v| v != 0).count()
}

/// `2|P∩G| / (|P|+|G|)`, and 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g) = (count(pred), count(gt));
    if p + g == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(gt.iter()).filter(|(&a, &b)| a != 0 && b != 0).count();
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// 1-D squared distance transform of sampled function `f` (Felzenszwalb & Huttenlocher).
/// Infinite samples never enter the lower envelope.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let sq = |q: usize| (q * q) as f64;
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut kk) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        loop {
            let p = v[kk];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
            if s <= z[kk] {
                kk -= 1;
            } else {
                kk += 1;
                v[kk] = q;
                z[kk] = s;
                z[kk + 1] = f64::INFINITY;
                break;
            }
        }
        k = Some(kk);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut kk = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[kk + 1] < q as f64 {
            kk += 1;
        }
        let d = q as f64 - v[kk] as f64;
        *o = d * d + f[v[kk]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest nonzero pixel of `m`
/// (infinite everywhere when `m` is empty).
pub fn squared_distance_transform(m: &Mask) -> ndarray::Array2<f64> {
    let (h, w) = m.dim();
    let mut grid = ndarray::Array2::from_shape_fn((h, w), |(y, x)| if m[[y, x]] != 0 { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[[y, x]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = grid[[y, x]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            grid[[y, x]] = out[x];
        }
    }
    grid
}

/// A boundary distance with an explicit flag for the empty-mask case, in which
/// `value` is the image diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub value: f64,
    pub undefined: bool,
}

fn diagonal(m: &Mask) -> f64 {
    let (h, w) = m.dim();
    ((h * h + w * w) as f64).sqrt()
}

/// Distances from each nonzero pixel of `from` to the nearest nonzero pixel of `to`.
fn directed(from: &Mask, to: &Mask) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.indexed_iter().filter(|(_, &v)| v != 0).map(|(ix, _)| dt[ix].sqrt()).collect()
}

pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<Distance> {
    check_pair(pred, gt)?;
    if count(pred) == 0 || count(gt) == 0 {
        return Ok(Distance {
            value: diagonal(gt),
            undefined: true,
        });
    }
    let max = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    Ok(Distance {
        value: max(directed(pred, gt)).max(max(directed(gt, pred))),
        undefined: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedErrors {
    pub g2re: f64,
    pub r2ge: f64,
    pub undefined: bool,
}

/// Mean ground-truth→result and result→ground-truth nearest distances.
pub fn directed_errors(pred: &Mask, gt: &Mask) -> Result<DirectedErrors> {
    check_pair(pred, gt)?;
    if count(pred) == 0 || count(gt) == 0 {
        let d = diagonal(gt);
        return Ok(DirectedErrors {
            g2re: d,
            r2ge: d,
            undefined: true,
        });
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(DirectedErrors {
        g2re: mean(directed(gt, pred)),
        r2ge: mean(directed(pred, gt)),
        undefined: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TolerantRates {
    pub sensitivity: f64,
    pub precision: f64,
    /// Set when a denominator is empty; the affected rate is reported as 0
    /// (or 1 when both masks are empty).
    pub undefined: bool,
}

/// Fractions of ground-truth (resp. predicted) pixels within `tolerance` pixels of the other mask.
pub fn sensitivity_precision(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<TolerantRates> {
    check_pair(pred, gt)?;
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tolerance} must be non-negative")));
    }
    let (p, g) = (count(pred), count(gt));
    if p == 0 && g == 0 {
        return Ok(TolerantRates {
            sensitivity: 1.0,
            precision: 1.0,
            undefined: true,
        });
    }
    let within = |v: Vec<f64>| v.iter().filter(|&&d| d <= tolerance).count() as f64;
    let sensitivity = if g == 0 || p == 0 { 0.0 } else { within(directed(gt, pred)) / g as f64 };
    let precision = if p == 0 || g == 0 { 0.0 } else { within(directed(pred, gt)) / p as f64 };
    Ok(TolerantRates {
        sensitivity,
        precision,
        undefined: p == 0 || g == 0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetricsReport {
    pub dice: f64,
    pub hd: f64,
    pub g2re: f64,
    pub r2ge: f64,
    pub sensitivity: f64,
    pub precision: f64,
    /// Number of frames whose boundary metrics fell back to the diagonal sentinel.
    pub undefined_frames: usize,
}

pub const METRIC_NAMES: [&str; 6] = ["dice", "hd", "g2re", "r2ge", "sensitivity", "precision"];

impl SegMetricsReport {
    pub fn evaluate(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<Self> {
        let hd = hausdorff(pred, gt)?;
        let de = directed_errors(pred, gt)?;
        let sp = sensitivity_precision(pred, gt, tolerance)?;
        Ok(Self {
            dice: dice(pred, gt)?,
            hd: hd.value,
            g2re: de.g2re,
            r2ge: de.r2ge,
            sensitivity: sp.sensitivity,
            precision: sp.precision,
            undefined_frames: usize::from(hd.undefined),
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.dice, self.hd, self.g2re, self.r2ge, self.sensitivity, self.precision]
    }

    /// Metric-wise mean; undefined counts are summed.
    pub fn mean(reports: &[SegMetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&SegMetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            dice: avg(|r| r.dice),
            hd: avg(|r| r.hd),
            g2re: avg(|r| r.g2re),
            r2ge: avg(|r| r.r2ge),
            sensitivity: avg(|r| r.sensitivity),
            precision: avg(|r| r.precision),
            undefined_frames: reports.iter().map(|r| r.undefined_frames).sum(),
        })
    }
}

/// Per-video rows plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<SegMetricsReport>,
    pub aggregate: SegMetricsReport,
}

impl MetricTable {
    pub fn from_rows(rows: Vec<SegMetricsReport>) -> Result<Self> {
        let aggregate = SegMetricsReport::mean(&rows)?;
        Ok(Self { rows, aggregate })
    }

    /// `dice,hd,g2re,r2ge,sensitivity,precision`, one row per video, aggregate last.
    pub fn to_csv(&self) -> String {
        let mut s = METRIC_NAMES.join(",");
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let vals: Vec<String> = r.values().iter().map(|v| format!("{v}")).collect();
            s.push_str(&vals.join(","));
            s.push('\n');
        }
        s
    }

    /// Aggregate metrics as `{metric, value, seed}` records.
    pub fn to_json_records(&self, seed: u64) -> serde_json::Value {
        serde_json::Value::Array(
            METRIC_NAMES
                .iter()
                .zip(self.aggregate.values())
                .map(|(name, value)| serde_json::json!({ "metric": name, "value": value, "seed": seed }))
                .collect(),
        )
    }
}

/// Parses a report CSV written by [`MetricTable::to_csv`].
pub fn parse_metric_csv(text: &str) -> Result<MetricTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Header("empty metric CSV".into()))?;
    if header.trim() != METRIC_NAMES.join(",") {
        return Err(Error::Header(format!("unexpected metric CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Header(format!("bad metric value in {line:?}: {e}")))?;
        if v.len() != 6 {
            return Err(Error::Header(format!("expected 6 columns, found {}", v.len())));
        }
        rows.push(SegMetricsReport {
            dice: v[0],
            hd: v[1],
            g2re: v[2],
            r2ge: v[3],
            sensitivity: v[4],
            precision: v[5],
            undefined_frames: 0,
        });
    }
    let aggregate = rows.pop().ok_or_else(|| Error::Header("metric CSV has no rows".into()))?;
    Ok(MetricTable { rows, aggregate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

fn check_features(sets: &[&[Vec<f32>]]) -> Result<usize> {
    let dim = sets
        .iter()
        .flat_map(|s| s.first())
        .map(|v| v.len())
        .next()
        .unwrap_or(0);
    for v in sets.iter().flat_map(|s| s.iter()) {
        if v.len() != dim {
            return Err(Error::shape(&[dim], &[v.len()]));
        }
    }
    Ok(dim)
}

/// Mean nearest-other-sample distance within `set`; the DS/OS normaliser when
/// `set` is the training data.
pub fn mean_nn_distance(set: &[Vec<f32>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::InvalidParameter("nearest-neighbour distance needs at least 2 samples".into()));
    }
    check_features(&[set])?;
    let d: Vec<f64> = (0..set.len())
        .map(|i| {
            (0..set.len())
                .filter(|&j| j != i)
                .map(|j| euclidean(&set[i], &set[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn check_normaliser(normaliser: f64) -> Result<()> {
    if !(normaliser > 0.0 && normaliser.is_finite()) {
        return Err(Error::InvalidParameter(format!("normaliser {normaliser} must be positive")));
    }
    Ok(())
}

/// Diversity score: normalised distance of each sample to its nearest other sample.
pub fn diversity_score(samples: &[Vec<f32>], normaliser: f64) -> Result<MeanStd> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("diversity score needs at least 2 samples".into()));
    }
    check_normaliser(normaliser)?;
    check_features(&[samples])?;
    let d: Vec<f64> = (0..samples.len())
        .map(|i| {
            (0..samples.len())
                .filter(|&j| j != i)
                .map(|j| euclidean(&samples[i], &samples[j]))
                .fold(f64::INFINITY, f64::min)
                / normaliser
        })
        .collect();
    Ok(MeanStd::of(&d))
}

/// Overfitting score: normalised distance of each sample to its nearest training sample.
pub fn overfitting_score(samples: &[Vec<f32>], training: &[Vec<f32>], normaliser: f64) -> Result<MeanStd> {
    if samples.is_empty() || training.is_empty() {
        return Err(Error::EmptyDataset("overfitting score needs samples and training data".into()));
    }
    check_normaliser(normaliser)?;
    check_features(&[samples, training])?;
    let d: Vec<f64> = samples
        .iter()
        .map(|s| training.iter().map(|t| euclidean(s, t)).fold(f64::INFINITY, f64::min) / normaliser)
        .collect();
    Ok(MeanStd::of(&d))
}

/// Flattened pixels of all frames, the default DS/OS feature.
pub fn pixel_features(frames: &[crate::Image]) -> Vec<f32> {
    frames.iter().flat_map(|f| f.iter().copied()).collect()
}
