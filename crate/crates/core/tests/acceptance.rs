//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any criterion fails.
//!
//! The trained desk models are shared by criteria 6, 8, 9 and 10. Set
//! `SFVD_ACCEPTANCE_CACHE` to a directory to keep them between runs.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    brute_dice, brute_distances, check_subdivision, denoiser_fd_agreement, oracle_cosine, oracle_linear, random_mask,
    rel_err, segmenter_fd_agreement, OracleSchedule, FD_PROBES,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sfvd_core::denoiser::{train_motion, train_scene, DenoiserArch, DenoiserModel, ModelRole, TrainConfig};
use sfvd_core::experiment::{ablation_grid, build_corpus, synthesize_from_split, train_models, Corpus, DeskConfig};
use sfvd_core::guidance::{combine_fc, combine_motion, combine_scene, GuidanceWeights};
use sfvd_core::io::{
    decode_ckpt, decode_fvd, encode_ckpt, encode_fvd, read_ckpt, write_ckpt, Checkpoint,
};
use sfvd_core::metrics::{dice, directed_errors, diversity_score, hausdorff, mean_nn_distance, overfitting_score};
use sfvd_core::sampler::{
    generate_frame, generate_video, step_spec, subdivision_order, GammaPolicy, Models, SamplerConfig,
};
use sfvd_core::schedule::{forward_sample, reverse_variance, NoiseSchedule};
use sfvd_core::segmenter::{
    augmentation_experiment, labeled_pairs, mask_log_likelihood, median, predict_mask, segment, train_segmenter,
    AugmentationData, SegTrainConfig, SegmenterModel,
};
use sfvd_core::synth::{make_video, SceneConfig};
use sfvd_core::{Error, Image, Mask};

type Verdict = Result<String, String>;

const DESK_DENOISER_STEPS: usize = 4000;
const DESK_SAMPLING_STEPS: usize = 50;
// Single guided frames use the full schedule: coarse strides make γσ² overshoot.
const FRAME_SAMPLING_STEPS: usize = 1000;
const ORACLE_STEPS: usize = 1500;
const ABLATION_COUNT: usize = 20;

fn desk_config() -> DeskConfig {
    let mut cfg = DeskConfig::default();
    cfg.denoiser = TrainConfig {
        steps: DESK_DENOISER_STEPS,
        batch_size: 8,
        lr: 5e-4,
        arch: DenoiserArch {
            base_width: 16,
            ..DenoiserArch::default()
        },
        ..TrainConfig::default()
    };
    cfg.sampler = SamplerConfig {
        sampling_steps: DESK_SAMPLING_STEPS,
        weights: GuidanceWeights::default(),
        ..SamplerConfig::default()
    };
    cfg
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Verdict {
    if elapsed > limit {
        Err(format!("{detail}; took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(detail)
    }
}

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            })
            .and_then(|d| match limit {
                Some(l) => within(start.elapsed(), l, d),
                None => Ok(d),
            });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                self.failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
}

fn guidance_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut img = || Array2::from_shape_simple_fn((h, w), || rng.gen_range(-4.0f32..4.0));
        let (a, b, c) = (img(), img(), img());
        let omega = match case % 4 {
            0 => -2.5,
            1 => -1.5,
            2 => 0.7,
            _ => rng.gen_range(-5.0..5.0),
        };
        let same = [
            combine_scene(&a, &a, omega).unwrap() == a,
            combine_motion(&a, &a, omega).unwrap() == a,
            combine_fc(&a, &a, &a, omega).unwrap() == a,
            combine_scene(&a, &b, 0.0).unwrap() == a,
            combine_scene(&a, &b, 1.0).unwrap() == b,
            combine_motion(&a, &b, 0.0).unwrap() == a,
            combine_motion(&a, &b, 1.0).unwrap() == b,
            combine_fc(&a, &b, &c, 0.0).unwrap() == a,
            combine_fc(&a, &b, &c, omega).unwrap() == combine_fc(&a, &c, &b, omega).unwrap(),
        ];
        if let Some(k) = same.iter().position(|&s| !s) {
            return Err(format!("identity {k} broken on tensor {case} (ω = {omega})"));
        }
    }
    Ok("9 identities exact on 1000 random tensors".into())
}

fn schedule_math() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut compare = |s: &NoiseSchedule, o: &OracleSchedule| {
        for t in 1..=s.steps() {
            let i = t - 1;
            worst = worst
                .max(rel_err(s.alpha_bar(t), o.alpha_bars[i]))
                .max(rel_err(s.beta(t), o.betas[i]))
                .max(rel_err(s.log_var_upper(t).exp(), o.betas[i]))
                .max(rel_err(s.log_var_lower(t).exp(), o.beta_tildes[i]));
            if t > 1 {
                worst = worst.max(rel_err(s.posterior_variance(t), o.beta_tildes[i]));
            }
            let one = Array2::from_elem((1, 1), 1.0f32);
            let zero = Array2::from_elem((1, 1), 0.0f32);
            let lo = reverse_variance(&one, t, s).unwrap()[[0, 0]] as f64;
            let hi = reverse_variance(&zero, t, s).unwrap()[[0, 0]] as f64;
            // The network-facing variance is f32.
            if rel_err(lo, o.beta_tildes[i]) > 1e-6 || rel_err(hi, o.betas[i]) > 1e-6 {
                worst = f64::INFINITY;
            }
        }
    };
    for t in [4, 100, 1000] {
        compare(&NoiseSchedule::linear(t, 1e-4, 0.02).unwrap(), &oracle_linear(t, 1e-4, 0.02));
        compare(&NoiseSchedule::cosine(t).unwrap(), &oracle_cosine(t));
    }
    check(worst < 1e-10, format!("max relative error {worst:.2e} (linear and cosine, T = 4, 100, 1000)"))
}

fn forward_statistics() -> Verdict {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let n = 100_000;
    let x0 = 1.0f32;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut parts = Vec::new();
    let mut ok = true;
    for t in [10, 400, 700] {
        let eps = Array2::from_shape_simple_fn((1, n), || StandardNormal.sample(&mut rng));
        let x = forward_sample(&Array2::from_elem((1, n), x0), t, &eps, &s).unwrap();
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (em, ev) = (rel_err(mean, ab.sqrt() * x0 as f64), rel_err(var, 1.0 - ab));
        ok &= em < 0.02 && ev < 0.02;
        parts.push(format!("t={t}: mean {:.2}%, var {:.2}%", 100.0 * em, 100.0 * ev));
    }
    check(ok, parts.join("; "))
}

fn gradient_checks() -> Verdict {
    let scene = denoiser_fd_agreement(ModelRole::Scene);
    let motion = denoiser_fd_agreement(ModelRole::Motion);
    let seg = segmenter_fd_agreement();
    let need = 95 * FD_PROBES / 100;
    check(
        scene >= need && motion >= need && seg >= need,
        format!("probes within 1e-2: scene {scene}/{FD_PROBES}, motion {motion}/{FD_PROBES}, log p_ψ input {seg}/{FD_PROBES}"),
    )
}

fn frame_plan() -> Verdict {
    for n in 1..=64 {
        let p = subdivision_order(n).map_err(|e| e.to_string())?;
        check_subdivision(&p, n).map_err(|e| format!("N = {n}: {e}"))?;
    }
    let order = subdivision_order(16).unwrap().targets();
    check(
        order == [0, 15, 7, 3, 11, 1, 5, 9, 13, 2, 4, 6, 8, 10, 12, 14],
        format!("invariants hold for N = 1..64; N = 16 order {order:?}"),
    )
}

fn metrics_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = 0;
    while pairs < 200 {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let (dp, dg) = (rng.gen_range(0.002..0.3), rng.gen_range(0.002..0.3));
        let pred = random_mask(&mut rng, h, w, dp);
        let gt = random_mask(&mut rng, h, w, dg);
        if pred.iter().all(|&v| v == 0) || gt.iter().all(|&v| v == 0) {
            continue;
        }
        let (hd, g2re, r2ge) = brute_distances(&pred, &gt);
        let got_hd = hausdorff(&pred, &gt).unwrap().value;
        let de = directed_errors(&pred, &gt).unwrap();
        if dice(&pred, &gt).unwrap() != brute_dice(&pred, &gt) || got_hd != hd || de.g2re != g2re || de.r2ge != r2ge {
            return Err(format!("pair {pairs} ({h}x{w}) disagrees with brute force"));
        }
        if got_hd < de.g2re.max(de.r2ge) {
            return Err(format!("pair {pairs}: HD {got_hd} below directed errors"));
        }
        pairs += 1;
    }
    let set: Vec<Vec<f32>> = (0..6).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let norm = mean_nn_distance(&set).unwrap();
    let identical = vec![set[0].clone(); 4];
    let ds = diversity_score(&identical, norm).unwrap();
    let os = overfitting_score(&set[1..4], &set, norm).unwrap();
    check(
        ds.mean == 0.0 && ds.std == 0.0 && os.mean == 0.0 && os.std == 0.0,
        format!("200 pairs exact; identical-set DS {}, subset OS {}", ds.mean, os.mean),
    )
}

fn persistence() -> Verdict {
    let v = make_video(&SceneConfig { size: 16, frames: 4, ..SceneConfig::default() }, 3).unwrap();
    let bytes = encode_fvd(&v).unwrap();
    let back = decode_fvd(&bytes).unwrap();
    let bits = |a: &[Image], b: &[Image]| a.iter().zip(b).all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    if !bits(&back.frames, &v.frames) || back.masks != v.masks || back.annotated != v.annotated {
        return Err(".fvd round trip lost information".into());
    }
    let mut codes = Vec::new();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    codes.push(matches!(decode_fvd(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    codes.push(matches!(decode_fvd(&bad), Err(Error::UnsupportedVersion { .. })));
    codes.push(matches!(decode_fvd(&bytes[..bytes.len() - 3]), Err(Error::SizeMismatch(_))));
    let mut bad = bytes.clone();
    bad[40] ^= 1;
    codes.push(matches!(decode_fvd(&bad), Err(Error::Crc { .. })));

    let arch = DenoiserArch { base_width: 4, depth: 2, time_features: 8, distance_features: 4, embed_hidden: 8 };
    let sched = sfvd_core::schedule::ScheduleConfig { steps: 40, ..Default::default() };
    let model = DenoiserModel::new(ModelRole::Motion, arch, sched, 5).unwrap();
    let ck = encode_ckpt(&Checkpoint::Denoiser(model.clone())).unwrap();
    let back = decode_ckpt(&ck).unwrap().into_denoiser(ModelRole::Motion).unwrap();
    let cond = sfvd_core::denoiser::ConditionSet::mask_and_frame(v.masks[1].clone(), v.frames[0].clone(), 1);
    let (e0, v0) = sfvd_core::denoiser::predict(&model, &v.frames[1], 23, &cond).unwrap();
    let (e1, v1) = sfvd_core::denoiser::predict(&back, &v.frames[1], 23, &cond).unwrap();
    let psi = SegmenterModel::new(Default::default(), true, sched, 6).unwrap();
    let psi_back = decode_ckpt(&encode_ckpt(&Checkpoint::Segmenter(psi.clone())).unwrap())
        .unwrap()
        .into_segmenter()
        .unwrap();
    let same_predict = bits(&[e0, v0], &[e1, v1])
        && bits(&[segment(&psi, &v.frames[0]).unwrap()], &[segment(&psi_back, &v.frames[0]).unwrap()])
        && back.params() == model.params();
    let mut bad = ck.clone();
    let last = bad.len() - 6;
    bad[last] ^= 1;
    codes.push(matches!(decode_ckpt(&bad), Err(Error::Crc { .. })));
    codes.push(matches!(decode_ckpt(&ck[..ck.len() - 4]), Err(Error::SizeMismatch(_))));
    let recognised = codes.iter().filter(|&&c| c).count();
    check(
        same_predict && recognised == codes.len(),
        format!(
            "round trips bitwise, reloaded predictions bitwise {same_predict}, {recognised}/{} corruptions classified",
            codes.len()
        ),
    )
}

fn reduction(start: f64, end: f64) -> f64 {
    (start - end) / start
}

fn training_sanity(corpus: &Corpus) -> Verdict {
    let train = corpus.train_videos();
    let pairs = labeled_pairs(&train);
    let steps = 600;
    let mut scene = Vec::new();
    let mut motion = Vec::new();
    let mut seg = Vec::new();
    for seed in 0..3u64 {
        let cfg = TrainConfig {
            steps,
            seed,
            ..desk_config().denoiser
        };
        let s = train_scene(&corpus.scene_pool, &cfg).map_err(|e| e.to_string())?;
        scene.push(reduction(s.log.smoothed_start(50), s.log.smoothed_end(50)));
        let m = train_motion(&train, &cfg).map_err(|e| e.to_string())?;
        motion.push(reduction(m.log.smoothed_start(50), m.log.smoothed_end(50)));
        let g = train_segmenter(&pairs, &SegTrainConfig { steps, seed, ..SegTrainConfig::default() }, false)
            .map_err(|e| e.to_string())?;
        seg.push(reduction(g.log.smoothed_start(50), g.log.smoothed_end(50)));
    }
    let (a, b, c) = (median(scene), median(motion), median(seg));
    check(
        a >= 0.3 && b >= 0.3 && c >= 0.3,
        format!(
            "median smoothed-loss reduction after {steps} steps: scene {:.0}%, motion {:.0}%, segmenter {:.0}%",
            100.0 * a,
            100.0 * b,
            100.0 * c
        ),
    )
}

struct Desk {
    cfg: DeskConfig,
    corpus: Corpus,
    scene: DenoiserModel,
    motion: DenoiserModel,
    guide: SegmenterModel,
    oracle: SegmenterModel,
}

impl Desk {
    fn models(&self) -> Models<'_> {
        Models {
            scene: &self.scene,
            motion: &self.motion,
            psi: Some(&self.guide),
        }
    }

    /// Conditioning masks from held-out videos.
    fn test_masks(&self, count: usize) -> Vec<Mask> {
        self.corpus
            .test_videos()
            .iter()
            .flat_map(|v| v.masks.iter().cloned())
            .step_by(2)
            .cycle()
            .take(count)
            .collect()
    }

    fn leading_frame(&self, mask: &Mask, omega_scene: f64, gamma: f64, seed: u64) -> sfvd_core::Result<Image> {
        let plan = subdivision_order(1)?;
        let weights = GuidanceWeights { omega_scene, ..self.cfg.sampler.weights };
        let spec = step_spec(&plan.steps[0], &weights, gamma)?;
        let sched = self.models().sampling_schedule(FRAME_SAMPLING_STEPS)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_frame(
            &plan.steps[0],
            std::slice::from_ref(mask),
            &[None],
            self.models(),
            &sched,
            &spec,
            self.cfg.sampler.clip_denoised,
            &mut rng,
        )
    }
}

fn build_desk() -> sfvd_core::Result<Desk> {
    let cfg = desk_config();
    let corpus = build_corpus(&cfg)?;
    let cache = std::env::var_os("SFVD_ACCEPTANCE_CACHE").map(PathBuf::from);
    if let Some(dir) = &cache {
        if dir.join("oracle.ckpt").exists() {
            eprintln!("loading desk models from {}", dir.display());
            return Ok(Desk {
                scene: read_ckpt(&dir.join("scene.ckpt"))?.into_denoiser(ModelRole::Scene)?,
                motion: read_ckpt(&dir.join("motion.ckpt"))?.into_denoiser(ModelRole::Motion)?,
                guide: read_ckpt(&dir.join("guide.ckpt"))?.into_segmenter()?,
                oracle: read_ckpt(&dir.join("oracle.ckpt"))?.into_segmenter()?,
                cfg,
                corpus,
            });
        }
    }
    let start = Instant::now();
    let trained = train_models(&corpus, &cfg)?;
    let oracle = train_segmenter(
        &labeled_pairs(&corpus.train_videos()),
        &SegTrainConfig {
            steps: ORACLE_STEPS,
            seed: 9,
            ..cfg.segmenter
        },
        false,
    )?
    .model;
    eprintln!("desk models trained in {:.0}s", start.elapsed().as_secs_f64());
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir)?;
        write_ckpt(&dir.join("scene.ckpt"), &Checkpoint::Denoiser(trained.scene.clone()))?;
        write_ckpt(&dir.join("motion.ckpt"), &Checkpoint::Denoiser(trained.motion.clone()))?;
        write_ckpt(&dir.join("guide.ckpt"), &Checkpoint::Segmenter(trained.guide.clone()))?;
        write_ckpt(&dir.join("oracle.ckpt"), &Checkpoint::Segmenter(oracle.clone()))?;
    }
    Ok(Desk {
        cfg,
        corpus,
        scene: trained.scene,
        motion: trained.motion,
        guide: trained.guide,
        oracle,
    })
}

fn guidance_mechanism(desk: &Desk) -> Verdict {
    let masks = &desk.corpus.test_videos()[0].masks;
    let fixed = SamplerConfig {
        gamma: GammaPolicy::Fixed(0.0),
        ..desk.cfg.sampler
    };
    let with_psi = generate_video(masks, desk.models(), &fixed, 42).map_err(|e| e.to_string())?;
    let without = generate_video(masks, Models { psi: None, ..desk.models() }, &fixed, 42).map_err(|e| e.to_string())?;
    let identical = with_psi
        .frames
        .iter()
        .zip(&without.frames)
        .all(|(a, b)| a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let gammas = [0.0, 5.0, 10.0, 15.0];
    let masks = desk.test_masks(10);
    let mut medians = Vec::new();
    for &gamma in &gammas {
        let ll: Vec<f64> = masks
            .iter()
            .enumerate()
            .map(|(seed, m)| {
                let f = desk.leading_frame(m, desk.cfg.sampler.weights.omega_scene, gamma, seed as u64)?;
                mask_log_likelihood(&desk.guide, &f, m)
            })
            .collect::<sfvd_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        medians.push(median(ll));
    }
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    check(
        identical && monotone,
        format!(
            "γ=0 bitwise equal to unguided: {identical}; median log p_ψ over 10 seeds at γ = 0, 5, 10, 15: {}",
            medians.iter().map(|m| format!("{m:.1}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn conditioning_fidelity(desk: &Desk) -> Verdict {
    let masks = desk.test_masks(20);
    let scores: Vec<f64> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let seed = 1000 + i as u64;
            let gamma = desk.cfg.sampler.gamma.draw(seed);
            let f = desk.leading_frame(m, desk.cfg.sampler.weights.omega_scene, gamma, seed)?;
            dice(&predict_mask(&desk.oracle, &f)?, m)
        })
        .collect::<sfvd_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let med = median(scores.clone());
    check(med >= 0.5, format!("median oracle Dice on 20 generated leading frames {med:.3}"))
}

fn central_claim(desk: &Desk) -> Verdict {
    let (videos, sources) = synthesize_from_split(
        &desk.corpus,
        desk.models(),
        &desk.cfg.sampler,
        desk.cfg.synthetic_count,
        desk.cfg.seed ^ 0x5e7,
    )
    .map_err(|e| e.to_string())?;
    let synthetic: Vec<_> = videos.iter().map(|v| v.to_labeled()).collect();
    let data = AugmentationData {
        real: &desk.corpus.fvideos,
        split: &desk.corpus.split,
        synthetic: &synthetic,
        synthetic_sources: &sources,
    };
    let report = augmentation_experiment(&data, &desk.cfg.segmenter, &[0, 1, 2]).map_err(|e| e.to_string())?;
    let gain = report.median_dice_gain();
    let runs = report
        .runs
        .iter()
        .map(|r| format!("{:.3}→{:.3}", r.baseline.aggregate.dice, r.augmented.aggregate.dice))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        gain > 0.0,
        format!(
            "{} real + {} synthetic videos; test Dice per seed {runs}; median gain {gain:+.4}",
            desk.corpus.fvideos.len(),
            synthetic.len()
        ),
    )
}

fn ablation(desk: &Desk) -> Verdict {
    let cells = ablation_grid(&desk.corpus, desk.models(), &desk.cfg, ABLATION_COUNT).map_err(|e| e.to_string())?;
    let complete = cells.len() == 4 && cells.iter().all(|c| c.metrics.aggregate.values().iter().all(|v| v.is_finite()));
    let mse = |fc: bool, sg: bool| {
        cells
            .iter()
            .find(|c| c.frame_consistency == fc && c.segmentation_guidance == sg)
            .map_or(f64::NAN, |c| c.consecutive_mse)
    };
    let jitter = [true, false].iter().all(|&sg| mse(false, sg) > mse(true, sg));
    let table = cells
        .iter()
        .map(|c| format!("{} dice {:.3} mse {:.4}", c.tag(), c.metrics.aggregate.dice, c.consecutive_mse))
        .collect::<Vec<_>>()
        .join("; ");
    check(
        complete && jitter,
        format!("six metrics in all cells: {complete}; chronological MSE above subdivision: {jitter}; {table}"),
    )
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    let secs = Duration::from_secs;
    report.run(1, "guidance algebra", Some(secs(1)), guidance_algebra);
    report.run(2, "schedule math", Some(secs(1)), schedule_math);
    report.run(3, "forward-process statistics", Some(secs(10)), forward_statistics);
    report.run(4, "gradient checks", Some(secs(120)), gradient_checks);
    report.run(5, "frame plan", Some(secs(1)), frame_plan);
    report.run(11, "metrics correctness", Some(secs(30)), metrics_correctness);
    report.run(12, "persistence", Some(secs(5)), persistence);

    let desk = match build_desk() {
        Ok(d) => d,
        Err(e) => {
            for (id, name) in [(6, "segmentation-guidance mechanism"), (7, "training sanity"), (8, "conditioning fidelity"), (9, "augmentation gain"), (10, "ablation harness")] {
                report.run(id, name, None, || Err(format!("desk setup failed: {e}")));
            }
            return ExitCode::FAILURE;
        }
    };
    report.run(6, "segmentation-guidance mechanism", Some(secs(10 * 60)), || guidance_mechanism(&desk));
    report.run(7, "training sanity", Some(secs(30 * 60)), || training_sanity(&desk.corpus));
    report.run(8, "conditioning fidelity", Some(secs(15 * 60)), || conditioning_fidelity(&desk));
    let bundle = Instant::now();
    report.run(9, "augmentation gain", Some(secs(2 * 3600)), || central_claim(&desk));
    let left = secs(2 * 3600).saturating_sub(bundle.elapsed());
    report.run(10, "ablation harness", Some(left), || ablation(&desk));

    println!("{} of 12 criteria failed", report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
