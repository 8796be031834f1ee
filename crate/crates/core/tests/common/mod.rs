//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfvd_core::denoiser::{batch_objective, ConditionSet, DenoiserArch, DenoiserModel, ModelRole, RefFrame, TrainExample};
use sfvd_core::sampler::{Conditioning, FramePlan};
use sfvd_core::schedule::{ScheduleConfig, ScheduleKind};
use sfvd_core::segmenter::{mask_log_likelihood_with, SegmenterArch, SegmenterModel};
use sfvd_core::synth::{make_video, SceneConfig};
use sfvd_core::{Image, Mask};

pub struct OracleSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// β̃_t for t ≥ 2; entry 0 repeats β_1.
    pub beta_tildes: Vec<f64>,
}

pub fn oracle_linear(t: usize, start: f64, end: f64) -> OracleSchedule {
    let betas = (1..=t).map(|i| start + (end - start) * ((i - 1) as f64) / ((t - 1) as f64)).collect();
    finish(betas)
}

pub fn oracle_cosine(t: usize) -> OracleSchedule {
    let s = 0.008;
    let f = |i: usize| {
        let c = ((i as f64 / t as f64 + s) / (1.0 + s) * std::f64::consts::PI / 2.0).cos();
        c * c
    };
    let betas = (1..=t).map(|i| (1.0 - f(i) / f(i - 1)).min(0.999)).collect();
    finish(betas)
}

fn finish(betas: Vec<f64>) -> OracleSchedule {
    let mut alpha_bars = Vec::with_capacity(betas.len());
    for i in 0..betas.len() {
        // fresh product every time rather than a running one
        alpha_bars.push(betas[..=i].iter().map(|b| 1.0 - b).product::<f64>());
    }
    let beta_tildes = (0..betas.len())
        .map(|i| {
            if i == 0 {
                betas[0]
            } else {
                betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
            }
        })
        .collect();
    OracleSchedule {
        betas,
        alpha_bars,
        beta_tildes,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn points(m: &Mask) -> Vec<(i64, i64)> {
    m.indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((y, x), _)| (y as i64, x as i64))
        .collect()
}

fn nearest(p: (i64, i64), set: &[(i64, i64)]) -> f64 {
    let d2 = set
        .iter()
        .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
        .min()
        .unwrap();
    (d2 as f64).sqrt()
}

pub fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let (pa, pb) = (points(a), points(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    let inter = pa.iter().filter(|p| pb.contains(p)).count();
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}

/// `(hausdorff, g2re, r2ge)` for nonempty masks.
pub fn brute_distances(pred: &Mask, gt: &Mask) -> (f64, f64, f64) {
    let (p, g) = (points(pred), points(gt));
    let from_p: Vec<f64> = p.iter().map(|&q| nearest(q, &g)).collect();
    let from_g: Vec<f64> = g.iter().map(|&q| nearest(q, &p)).collect();
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (max(&from_p).max(max(&from_g)), mean(&from_g), mean(&from_p))
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Mask {
    Array2::from_shape_simple_fn((h, w), || u8::from(rng.gen_bool(density)))
}

/// Coverage, precedence and equidistance of a subdivision plan, checked
/// without reference to how the plan was built.
pub fn check_subdivision(plan: &FramePlan, n: usize) -> Result<(), String> {
    if plan.frames != n {
        return Err(format!("plan for {} frames, expected {n}", plan.frames));
    }
    let mut targets: Vec<usize> = plan.steps.iter().map(|s| s.target).collect();
    targets.sort_unstable();
    if targets != (0..n).collect::<Vec<_>>() {
        return Err("targets are not a permutation of 0..N".into());
    }
    let mut done: Vec<usize> = Vec::new();
    for (i, s) in plan.steps.iter().enumerate() {
        match (i, s.conditioning) {
            (0, Conditioning::None) if s.target == 0 => {}
            (1, Conditioning::Single { reference: 0, distance }) if s.target == n - 1 && distance == (n - 1) as i32 => {}
            (
                i,
                Conditioning::Pair {
                    first,
                    first_distance,
                    second,
                    second_distance,
                },
            ) if i >= 2 => {
                let m = s.target;
                if !(first < m && m < second) {
                    return Err(format!("step {i}: {m} is not between {first} and {second}"));
                }
                if !done.contains(&first) || !done.contains(&second) {
                    return Err(format!("step {i}: reference not generated yet"));
                }
                if done.iter().any(|&d| first < d && d < second) {
                    return Err(format!("step {i}: references are not adjacent generated frames"));
                }
                let (l, r) = (m - first, second - m);
                if l.abs_diff(r) > 1 || l > r {
                    return Err(format!("step {i}: not a floor midpoint ({l}, {r})"));
                }
                if first_distance != l as i32 || second_distance != -(r as i32) {
                    return Err(format!("step {i}: distances ({first_distance}, {second_distance})"));
                }
            }
            (i, c) => return Err(format!("step {i}: unexpected {c:?} for target {}", s.target)),
        }
        done.push(s.target);
    }
    Ok(())
}

/// Breadth-first floor-midpoint order written out independently.
pub fn reference_order(n: usize) -> Vec<usize> {
    let mut order = vec![0];
    if n == 1 {
        return order;
    }
    order.push(n - 1);
    let mut level = vec![(0, n - 1)];
    while !level.is_empty() {
        let mut next = Vec::new();
        for (a, b) in level {
            if b - a >= 2 {
                let m = (a + b) / 2;
                order.push(m);
                next.push((a, m));
                next.push((m, b));
            }
        }
        level = next;
    }
    order
}

pub const FD_PROBES: usize = 100;

fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= 1e-2 * scale || scale < 1e-9
}

fn gaussian_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
    Image::from_shape_simple_fn((n, n), || rng.sample::<f32, _>(StandardNormal))
}

fn fd_arch() -> DenoiserArch {
    DenoiserArch {
        base_width: 4,
        depth: 2,
        time_features: 8,
        distance_features: 4,
        embed_hidden: 8,
    }
}

fn fd_schedule() -> ScheduleConfig {
    ScheduleConfig {
        kind: ScheduleKind::Cosine,
        steps: 50,
        ..ScheduleConfig::default()
    }
}

/// Examples spanning t = 1, an interior step and t = T, with and without conditions.
pub fn fd_examples(role: ModelRole) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(role as u64 + 1);
    let video = make_video(&SceneConfig { size: 16, frames: 3, ..SceneConfig::default() }, 1).unwrap();
    let m = |i: usize| video.masks[i].clone();
    let f = |i: usize, d: i32| RefFrame { frame: video.frames[i].clone(), distance: d };
    let conds = match role {
        ModelRole::Scene => vec![
            ConditionSet::mask(m(0)),
            ConditionSet::unconditional(),
            ConditionSet::mask(m(2)),
            ConditionSet::unconditional(),
        ],
        ModelRole::Motion => vec![
            ConditionSet::mask(m(1)),
            ConditionSet::mask_and_frame(m(1), video.frames[0].clone(), 1),
            ConditionSet { mask: Some(m(1)), reference: Some(f(0, 1)), second_reference: Some(f(2, -1)) },
            ConditionSet { mask: Some(m(2)), reference: Some(f(0, 2)), second_reference: None },
        ],
    };
    conds
        .into_iter()
        .zip([1usize, 2, 25, 50])
        .enumerate()
        .map(|(k, (cond, t))| TrainExample { x0: video.frames[k % 3].clone(), t, eps: gaussian_image(&mut rng, 16), cond })
        .collect()
}

/// Number of random parameter probes (out of [`FD_PROBES`]) whose analytic
/// gradient of the hybrid objective agrees with a 64-bit central difference.
pub fn denoiser_fd_agreement(role: ModelRole) -> usize {
    let examples = fd_examples(role);
    let model = DenoiserModel::new(role, fd_arch(), fd_schedule(), 11).unwrap();
    let params = model.params_f64();
    // λ = 1 so the variance head's gradient is not swamped by the ε term.
    let lambda = 1.0;
    let base = batch_objective::<f64>(&model, &params, &examples, lambda, None, true).unwrap();
    let frozen = base.eps_hat.clone();
    let grad = base.grad.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = 0;
    for _ in 0..FD_PROBES {
        let i = rng.gen_range(0..params.len());
        // The t = T term is ~1e3 bits, so a smaller step drowns in roundoff.
        let h = 1e-4 * params[i].abs().max(1e-1);
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[i] += delta;
            batch_objective::<f64>(&model, &p, &examples, lambda, Some(&frozen), false)
                .unwrap()
                .terms
                .total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        ok += usize::from(fd_agrees(grad[i], numeric));
    }
    ok
}

/// Same for the input gradient of `log p_ψ(M | x)` at random pixels.
pub fn segmenter_fd_agreement() -> usize {
    let psi = SegmenterModel::new(SegmenterArch { base_width: 4, depth: 2 }, true, fd_schedule(), 9).unwrap();
    let params = psi.params_f64();
    let video = make_video(&SceneConfig { size: 16, frames: 1, ..SceneConfig::default() }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = &video.frames[0] + &gaussian_image(&mut rng, 16).mapv(|v| 0.3 * v);
    let mask = &video.masks[0];
    let (_, g) = mask_log_likelihood_with::<f64>(&psi, &params, &x, mask, true).unwrap();
    let g = g.unwrap();
    let mut ok = 0;
    for _ in 0..FD_PROBES {
        let (r, c) = (rng.gen_range(0..16), rng.gen_range(0..16));
        let h = 1e-3f32;
        let eval = |delta: f32| {
            let mut y = x.clone();
            y[[r, c]] += delta;
            mask_log_likelihood_with::<f64>(&psi, &params, &y, mask, false).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
        ok += usize::from(fd_agrees(g[[r, c]] as f64, numeric));
    }
    ok
}
