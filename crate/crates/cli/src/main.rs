use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sfvd_core::config::RunConfig;
use sfvd_core::denoiser::{train_motion, train_scene, ModelRole};
use sfvd_core::experiment::{ablation_csv, ablation_grid, synthesize_from_split, Corpus};
use sfvd_core::io::{
    read_ckpt, read_dataset, read_fvd, write_atomic, write_ckpt, write_contact_sheet, write_dataset, write_fvd, Checkpoint,
    DatasetManifest,
};
use sfvd_core::metrics::{MetricTable, SegMetricsReport, DEFAULT_TOLERANCE};
use sfvd_core::sampler::{generate_video, GammaPolicy, Models, SamplingMode};
use sfvd_core::segmenter::{
    augmentation_experiment, predict_mask, train_segmenter, AugmentationData, SegmenterModel,
};
use sfvd_core::synth::{make_fvideo_set, make_pimage_set, FrameSample, LabeledVideo, Split};
use sfvd_core::{Image, Mask};

#[derive(Parser)]
#[command(name = "sfvd", version, about = "Labeled video synthesis for thin-wire segmentation")]
struct Cli {
    /// JSON config file; its keys override built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset.
    GenData(GenData),
    /// Train the scene denoiser on one or more datasets.
    TrainScene(TrainDenoiser),
    /// Train the motion denoiser on fully annotated datasets.
    TrainMotion(TrainDenoiser),
    /// Train a segmenter.
    TrainSeg(TrainSeg),
    /// Synthesize labeled videos from mask sequences.
    Synthesize(Synthesize),
    /// Segment every frame of a video with a trained segmenter.
    Segment(Segment),
    /// Paired baseline/augmented segmentation experiment.
    AugmentEval(AugmentEval),
    /// Evaluate saved predictions against ground truth.
    Metrics(Metrics),
    /// Frame-consistency x segmentation-guidance grid.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// fvideo (fully annotated) or pimage (partially annotated).
    #[arg(long, default_value = "fvideo")]
    kind: String,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    annotated_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    width: Option<usize>,
    /// Write the per-step loss log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDenoiser {
    /// Dataset directories; training-split videos are used.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Args)]
struct TrainSeg {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train on noised frames x_t so the model can guide sampling.
    #[arg(long)]
    noise_augment: bool,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct GuidanceOverrides {
    #[arg(long, allow_hyphen_values = true)]
    omega_scene: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    omega_concluding: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    omega_intermediate: Option<f64>,
    /// γ is drawn per video from Uniform[0, gamma_max]; 0 disables segmentation guidance.
    #[arg(long, allow_hyphen_values = true)]
    gamma_max: Option<f64>,
    /// subdivision or chronological.
    #[arg(long)]
    mode: Option<SamplingMode>,
    /// Reverse steps taken when sampling.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ModelPaths {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    motion: PathBuf,
    /// Noise-augmented segmenter for guidance; required unless --gamma-max 0.
    #[arg(long)]
    psi: Option<PathBuf>,
}

#[derive(Args)]
struct Synthesize {
    /// A .fvd file (one video) or a dataset directory (its training-split masks are cycled).
    #[arg(long)]
    masks: PathBuf,
    /// Output .fvd, or a directory when --masks is a dataset.
    #[arg(long)]
    out: PathBuf,
    /// Contact sheet path; defaults to the output with a .png extension.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Number of videos when --masks is a dataset.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    models: ModelPaths,
    #[command(flatten)]
    guidance: GuidanceOverrides,
}

#[derive(Args)]
struct Segment {
    #[arg(long)]
    psi: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output .fvd holding the input frames and the predicted masks.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentEval {
    #[arg(long)]
    data: PathBuf,
    /// Synthesized dataset directory written by `synthesize`.
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct Metrics {
    /// Prediction .fvd files; their masks are the predictions.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth .fvd files, paired with --pred in order.
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Videos synthesized per cell.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    models: ModelPaths,
    #[command(flatten)]
    guidance: GuidanceOverrides,
    /// Training steps of each cell's segmenter.
    #[arg(long)]
    seg_steps: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.denoiser.seed = s;
        cfg.segmenter.seed = s;
    }
    apply_overrides(&mut cfg, &cli.command);
    println!("effective config: {}", serde_json::to_string(&cfg)?);
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, &a),
        Command::TrainScene(a) => train_denoiser(&cfg, &a, ModelRole::Scene),
        Command::TrainMotion(a) => train_denoiser(&cfg, &a, ModelRole::Motion),
        Command::TrainSeg(a) => train_seg(&cfg, &a),
        Command::Synthesize(a) => synthesize(&cfg, &a),
        Command::Segment(a) => segment(&a),
        Command::AugmentEval(a) => augment_eval(&cfg, &a),
        Command::Metrics(a) => metrics(&a),
        Command::Ablate(a) => ablate(&cfg, &a),
    }
}

fn apply_train(cfg: &mut RunConfig, t: &TrainOverrides, segmenter: bool) {
    if segmenter {
        let s = &mut cfg.segmenter;
        s.steps = t.steps.unwrap_or(s.steps);
        s.batch_size = t.batch_size.unwrap_or(s.batch_size);
        s.lr = t.lr.unwrap_or(s.lr);
        s.arch.base_width = t.width.unwrap_or(s.arch.base_width);
    } else {
        let d = &mut cfg.denoiser;
        d.steps = t.steps.unwrap_or(d.steps);
        d.batch_size = t.batch_size.unwrap_or(d.batch_size);
        d.lr = t.lr.unwrap_or(d.lr);
        d.arch.base_width = t.width.unwrap_or(d.arch.base_width);
    }
}

fn apply_guidance(cfg: &mut RunConfig, g: &GuidanceOverrides) {
    let s = &mut cfg.sampler;
    s.weights.omega_scene = g.omega_scene.unwrap_or(s.weights.omega_scene);
    s.weights.omega_concluding = g.omega_concluding.unwrap_or(s.weights.omega_concluding);
    s.weights.omega_intermediate = g.omega_intermediate.unwrap_or(s.weights.omega_intermediate);
    if let Some(max) = g.gamma_max {
        s.gamma = GammaPolicy::Uniform { max };
    }
    s.mode = g.mode.unwrap_or(s.mode);
    s.sampling_steps = g.steps.unwrap_or(s.sampling_steps);
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::GenData(a) => {
            cfg.fvideo_count = a.count.unwrap_or(cfg.fvideo_count);
            cfg.scene.frames = a.frames.unwrap_or(cfg.scene.frames);
            cfg.scene.size = a.size.unwrap_or(cfg.scene.size);
            cfg.annotated_fraction = a.annotated_fraction.unwrap_or(cfg.annotated_fraction);
        }
        Command::TrainScene(a) | Command::TrainMotion(a) => {
            apply_train(cfg, &a.train, false);
            cfg.denoiser.schedule.steps = a.timesteps.unwrap_or(cfg.denoiser.schedule.steps);
        }
        Command::TrainSeg(a) => apply_train(cfg, &a.train, true),
        Command::Synthesize(a) => {
            apply_guidance(cfg, &a.guidance);
            cfg.synthetic_count = a.count.unwrap_or(cfg.synthetic_count);
        }
        Command::AugmentEval(a) => {
            apply_train(cfg, &a.train, true);
            if let Some(s) = &a.seeds {
                cfg.augment_seeds = s.clone();
            }
        }
        Command::Ablate(a) => {
            apply_guidance(cfg, &a.guidance);
            cfg.segmenter.steps = a.seg_steps.unwrap_or(cfg.segmenter.steps);
            cfg.synthetic_count = a.count.unwrap_or(cfg.synthetic_count);
        }
        Command::Segment(_) | Command::Metrics(_) => {}
    }
}

fn video_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("video_{i:04}.fvd")).collect()
}

fn gen_data(cfg: &RunConfig, a: &GenData) -> Result<()> {
    let count = a.count.unwrap_or(match a.kind.as_str() {
        "pimage" => cfg.pimage_videos,
        _ => cfg.fvideo_count,
    });
    let (videos, split, fraction) = match a.kind.as_str() {
        "fvideo" => (make_fvideo_set(count, &cfg.scene, cfg.seed)?, Split::standard(count, cfg.seed), 1.0),
        "pimage" => {
            let (videos, _) = make_pimage_set(count, cfg.annotated_fraction, &cfg.scene, cfg.seed)?;
            let split = Split {
                train: (0..count as u64).collect(),
                ..Split::default()
            };
            (videos, split, cfg.annotated_fraction)
        }
        other => bail!("unknown dataset kind {other:?}; expected fvideo or pimage"),
    };
    let manifest = DatasetManifest {
        kind: a.kind.clone(),
        seed: cfg.seed,
        scene: cfg.scene,
        annotated_fraction: fraction,
        videos: video_names(videos.len()),
        split,
        sources: vec![],
    };
    write_dataset(&a.out, &manifest, &videos)?;
    println!("wrote {} videos to {}", videos.len(), a.out.display());
    Ok(())
}

fn load(path: &Path) -> Result<(DatasetManifest, Vec<LabeledVideo>)> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn train_split(path: &Path) -> Result<(DatasetManifest, Vec<LabeledVideo>)> {
    let (m, videos) = load(path)?;
    let train = m.split.train.iter().map(|&i| videos[i as usize].clone()).collect();
    Ok((m, train))
}

fn train_denoiser(cfg: &RunConfig, a: &TrainDenoiser, role: ModelRole) -> Result<()> {
    let mut videos = Vec::new();
    for d in &a.data {
        let (m, v) = train_split(d)?;
        if role == ModelRole::Motion && m.kind != "fvideo" {
            bail!("motion training needs fully annotated videos, {} is {}", d.display(), m.kind);
        }
        videos.extend(v);
    }
    let outcome = match role {
        ModelRole::Scene => {
            let frames: Vec<FrameSample> = videos
                .iter()
                .flat_map(|v| {
                    v.frames.iter().zip(&v.masks).zip(&v.annotated).map(|((f, m), &ann)| FrameSample {
                        frame: f.clone(),
                        mask: ann.then(|| m.clone()),
                    })
                })
                .collect();
            train_scene(&frames, &cfg.denoiser)?
        }
        ModelRole::Motion => train_motion(&videos, &cfg.denoiser)?,
    };
    if let Some(log) = &a.train.log {
        write_atomic(log, outcome.log.to_csv().as_bytes())?;
    }
    write_ckpt(&a.out, &Checkpoint::Denoiser(outcome.model))?;
    println!(
        "loss {:.4} -> {:.4}; wrote {}",
        outcome.log.smoothed_start(50),
        outcome.log.smoothed_end(50),
        a.out.display()
    );
    Ok(())
}

fn labeled(videos: &[LabeledVideo]) -> Vec<(Image, Mask)> {
    videos
        .iter()
        .flat_map(|v| v.labeled_frames().map(|(f, m)| (f.clone(), m.clone())))
        .collect()
}

fn train_seg(cfg: &RunConfig, a: &TrainSeg) -> Result<()> {
    let mut pairs = Vec::new();
    for d in &a.data {
        pairs.extend(labeled(&train_split(d)?.1));
    }
    let outcome = train_segmenter(&pairs, &cfg.segmenter, a.noise_augment)?;
    if let Some(log) = &a.train.log {
        write_atomic(log, outcome.log.to_csv().as_bytes())?;
    }
    write_ckpt(&a.out, &Checkpoint::Segmenter(outcome.model))?;
    println!(
        "loss {:.4} -> {:.4}; wrote {}",
        outcome.log.smoothed_start(50),
        outcome.log.smoothed_end(50),
        a.out.display()
    );
    Ok(())
}

struct Loaded {
    scene: sfvd_core::denoiser::DenoiserModel,
    motion: sfvd_core::denoiser::DenoiserModel,
    psi: Option<SegmenterModel>,
}

impl Loaded {
    fn read(p: &ModelPaths, cfg: &RunConfig) -> Result<Self> {
        let ckpt = |path: &Path| read_ckpt(path).with_context(|| format!("reading checkpoint {}", path.display()));
        let psi = match &p.psi {
            Some(path) => Some(ckpt(path)?.into_segmenter()?),
            None => None,
        };
        let guided = match cfg.sampler.gamma {
            GammaPolicy::Fixed(g) => g > 0.0,
            GammaPolicy::Uniform { max } => max > 0.0,
        };
        if guided && psi.is_none() {
            bail!("segmentation guidance needs --psi (or pass --gamma-max 0)");
        }
        Ok(Self {
            scene: ckpt(&p.scene)?.into_denoiser(ModelRole::Scene)?,
            motion: ckpt(&p.motion)?.into_denoiser(ModelRole::Motion)?,
            psi,
        })
    }

    fn models(&self) -> Models<'_> {
        Models {
            scene: &self.scene,
            motion: &self.motion,
            psi: self.psi.as_ref(),
        }
    }
}

fn corpus_from(path: &Path) -> Result<Corpus> {
    let (m, fvideos) = load(path)?;
    Ok(Corpus {
        fvideos,
        split: m.split,
        scene_pool: Vec::new(),
    })
}

fn synthesize(cfg: &RunConfig, a: &Synthesize) -> Result<()> {
    let models = Loaded::read(&a.models, cfg)?;
    if a.masks.is_dir() {
        let corpus = corpus_from(&a.masks)?;
        let (generated, sources) =
            synthesize_from_split(&corpus, models.models(), &cfg.sampler, cfg.synthetic_count, cfg.seed)?;
        let videos: Vec<LabeledVideo> = generated.iter().map(|g| g.to_labeled()).collect();
        let manifest = DatasetManifest {
            kind: "synthetic".into(),
            seed: cfg.seed,
            scene: cfg.scene,
            annotated_fraction: 1.0,
            videos: video_names(videos.len()),
            split: Split {
                train: (0..videos.len() as u64).collect(),
                ..Split::default()
            },
            sources,
        };
        write_dataset(&a.out, &manifest, &videos)?;
        if let Some(png) = &a.png {
            write_contact_sheet(png, &videos[0].frames, &videos[0].masks)?;
        }
        println!("wrote {} videos to {}", videos.len(), a.out.display());
        return Ok(());
    }
    let masks = read_fvd(&a.masks).with_context(|| format!("reading masks {}", a.masks.display()))?.masks;
    let video = generate_video(&masks, models.models(), &cfg.sampler, cfg.seed)?;
    write_fvd(&a.out, &video.to_labeled())?;
    let png = a.png.clone().unwrap_or_else(|| a.out.with_extension("png"));
    write_contact_sheet(&png, &video.frames, &video.masks)?;
    println!(
        "wrote {} frames (gamma {:.3}, order {:?}) to {} and {}",
        video.frames.len(),
        video.gamma,
        video.order,
        a.out.display(),
        png.display()
    );
    Ok(())
}

fn segment(a: &Segment) -> Result<()> {
    let psi = read_ckpt(&a.psi)?.into_segmenter()?;
    let mut video = read_fvd(&a.input)?;
    video.masks = video.frames.iter().map(|f| predict_mask(&psi, f)).collect::<sfvd_core::Result<_>>()?;
    video.annotated = vec![true; video.frames.len()];
    write_fvd(&a.out, &video)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn augment_eval(cfg: &RunConfig, a: &AugmentEval) -> Result<()> {
    let (m, real) = load(&a.data)?;
    let (sm, synthetic) = load(&a.synthetic)?;
    if sm.sources.len() != synthetic.len() {
        bail!("synthetic dataset {} does not record its mask sources", a.synthetic.display());
    }
    let data = AugmentationData {
        real: &real,
        split: &m.split,
        synthetic: &synthetic,
        synthetic_sources: &sm.sources,
    };
    let report = augmentation_experiment(&data, &cfg.segmenter, &cfg.augment_seeds)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut records = Vec::new();
    for run in &report.runs {
        for (arm, table) in [("baseline", &run.baseline), ("augmented", &run.augmented)] {
            write_atomic(&a.out_dir.join(format!("{arm}_seed{}.csv", run.seed)), table.to_csv().as_bytes())?;
            let mut rec = table.to_json_records(run.seed);
            if let Some(items) = rec.as_array_mut() {
                for item in items {
                    item["arm"] = arm.into();
                }
            }
            records.push(rec);
        }
    }
    write_atomic(&a.out_dir.join("report.json"), &serde_json::to_vec_pretty(&records)?)?;
    println!(
        "dice gains per seed {:?}; median {:.4}",
        report.dice_gains(),
        report.median_dice_gain()
    );
    Ok(())
}

fn metrics(a: &Metrics) -> Result<()> {
    if a.pred.len() != a.truth.len() {
        bail!("{} --pred files but {} --truth files", a.pred.len(), a.truth.len());
    }
    let mut rows = Vec::new();
    for (p, t) in a.pred.iter().zip(&a.truth) {
        let pred = read_fvd(p).with_context(|| format!("reading {}", p.display()))?;
        let truth = read_fvd(t).with_context(|| format!("reading {}", t.display()))?;
        if pred.len() != truth.len() {
            bail!("{} has {} frames, {} has {}", p.display(), pred.len(), t.display(), truth.len());
        }
        let frames = pred
            .masks
            .iter()
            .zip(&truth.masks)
            .zip(&truth.annotated)
            .filter(|(_, &ann)| ann)
            .map(|((pm, gm), _)| SegMetricsReport::evaluate(pm, gm, a.tolerance))
            .collect::<sfvd_core::Result<Vec<_>>>()?;
        rows.push(SegMetricsReport::mean(&frames)?);
    }
    let table = MetricTable::from_rows(rows)?;
    match &a.out {
        Some(path) => write_atomic(path, table.to_csv().as_bytes())?,
        None => print!("{}", table.to_csv()),
    }
    if let Some(path) = &a.json {
        write_atomic(path, &serde_json::to_vec_pretty(&table.to_json_records(0))?)?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, a: &Ablate) -> Result<()> {
    let models = Loaded::read(&a.models, cfg)?;
    let corpus = corpus_from(&a.data)?;
    let cells = ablation_grid(&corpus, models.models(), &cfg.desk(), cfg.synthetic_count)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let csv = ablation_csv(&cells);
    write_atomic(&a.out_dir.join("ablation.csv"), csv.as_bytes())?;
    write_atomic(&a.out_dir.join("ablation.json"), &serde_json::to_vec_pretty(&cells)?)?;
    print!("{csv}");
    Ok(())
}
