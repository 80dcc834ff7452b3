//! `oclf` — synthesize datasets, train the three classifiers, evaluate
//! the fused detector, predict single images, sweep vote weights, and
//! render reports.
//!
//! Exit codes: 0 success, 1 generic failure, 2 missing or unreadable
//! data files, 3 degenerate dataset, 4 missing model checkpoint,
//! 5 malformed checkpoint or weights, 6 malformed history CSV.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use oclf::datasets::{
    generate_synthetic, load_manifest, load_mask, load_split, ArtifactKind, SplitCounts,
    SynthConfig,
};
use oclf::fusion::{
    read_results_jsonl, run_pipeline, run_pipeline_early_exit, write_results_jsonl,
    PipelineConfig, PipelineModels,
};
use oclf::gramnet::{
    build_gramnet, save_checkpoint, CheckpointMeta, ClassifierHead, GramNetConfig,
};
use oclf::metrics::{
    default_weight_candidates, metrics_for_path, occlusion_ratio, per_patch_accuracy,
    weight_sweep, Metrics, PathSelector,
};
use oclf::plot::{bar_chart, line_chart, Series};
use oclf::trainer::{
    prepare_patches, prepare_whole_face, train_classifier, train_concat_head,
    train_patch_model, training_fingerprint, TrainConfig, TrainHistory,
};
use oclf::types::{BinaryLabel, FaceLandmarks, ImageSample, PatchName, PatchWeights, Split};
use oclf::SeedableRng as _;

#[derive(Parser)]
#[command(
    name = "oclf",
    version,
    about = "Occlusion-aware patch-based detector for GAN-generated faces"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset with landmarks and masks.
    Synth(SynthArgs),
    /// Train the whole-face model, patch model, and concat head.
    Train(TrainArgs),
    /// Run the fused pipeline over a split and report metrics.
    Eval(EvalArgs),
    /// Classify one face image.
    Predict(PredictArgs),
    /// Score vote-weight candidates against recorded results.
    Sweep(SweepArgs),
    /// Render charts and a summary from a training run.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images, masks, and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Images per class in the train split.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Images per class in the val split.
    #[arg(long, default_value_t = 50)]
    val: usize,
    /// Images per class in the test split.
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 256)]
    side: usize,
    /// Artifact stamped on fakes: checkerboard or ring-spectrum.
    #[arg(long, default_value = "checkerboard")]
    artifact: String,
    /// Probability that an image gets a rectangular occluder.
    #[arg(long, default_value_t = 0.25)]
    occlusion_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the dataset manifest (manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, histories, and run.json.
    #[arg(long)]
    out: PathBuf,
    /// Model preset: toy or default. Ignored when --config sets one.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// JSON file with optional "model", "train", "pad" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Padding fraction around semantic patch boxes.
    #[arg(long)]
    pad: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory holding whole.oclf, patch.oclf, concat.oclf.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = oclf::facepatch::DEFAULT_PAD)]
    pad: f64,
    /// JSON file mapping patch names to positive integer weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Skip the whole-face pass when the patch paths agree.
    #[arg(long)]
    early_exit: bool,
    /// Write per-sample results as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    models: PathBuf,
    /// Face image (PNG/JPEG), already cropped to the face.
    #[arg(long)]
    image: PathBuf,
    /// JSON file with 68 [x, y] landmark pairs in image coordinates.
    #[arg(long)]
    landmarks: PathBuf,
    /// Optional {0,255} occlusion mask PNG, same size as the image.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = oclf::facepatch::DEFAULT_PAD)]
    pad: f64,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    early_exit: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// results.jsonl from `oclf eval --out`.
    #[arg(long)]
    results: PathBuf,
    /// JSON array of {patch name: weight} maps; defaults to a small
    /// built-in grid.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// How many top entries to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Write the full ranking as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Training output directory (with *_history.csv).
    #[arg(long)]
    run: PathBuf,
    /// Optional results.jsonl for per-patch and fused metrics.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying a process exit code.
#[derive(Debug)]
struct ExitWith {
    code: i32,
    msg: String,
}

impl fmt::Display for ExitWith {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for ExitWith {}

fn exit_with(code: i32, msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ExitWith {
        code,
        msg: msg.into(),
    })
}

/// Errors from reading datasets and images.
fn data_err(e: oclf::Error) -> anyhow::Error {
    let code = match &e {
        oclf::Error::Io(_)
        | oclf::Error::NotFound(_)
        | oclf::Error::Image(_)
        | oclf::Error::ManifestInvalid { .. } => 2,
        oclf::Error::DegenerateDataset(_) | oclf::Error::SplitMissing(_) => 3,
        _ => 1,
    };
    exit_with(code, e.to_string())
}

/// Errors from loading model checkpoints.
fn model_err(e: oclf::Error) -> anyhow::Error {
    let code = match &e {
        oclf::Error::NotFound(_) | oclf::Error::Io(_) => 4,
        oclf::Error::CheckpointCorrupt(_)
        | oclf::Error::VersionError { .. }
        | oclf::Error::ConfigError(_) => 5,
        _ => 1,
    };
    exit_with(code, e.to_string())
}

fn main() {
    // Die quietly when output is piped into a closed reader (e.g.
    // `oclf predict ... | head`), like other line-oriented tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        let code = e.downcast_ref::<ExitWith>().map(|x| x.code).unwrap_or(1);
        eprintln!("error: {e:#}");
        std::process::exit(code);
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let artifact_kind = match a.artifact.as_str() {
        "checkerboard" => ArtifactKind::Checkerboard,
        "ring-spectrum" => ArtifactKind::RingSpectrum,
        other => {
            return Err(exit_with(
                1,
                format!("unknown artifact {other:?}; use checkerboard or ring-spectrum"),
            ))
        }
    };
    let config = SynthConfig {
        n_per_class_per_split: SplitCounts {
            train: a.train,
            val: a.val,
            test: a.test,
        },
        image_side: a.side,
        artifact_kind,
        occlusion_probability: a.occlusion_prob,
        seed: a.seed,
    };
    let started = Instant::now();
    let manifest = generate_synthetic(&config, &a.out).map_err(data_err)?;
    println!(
        "wrote {} images to {} in {:.1}s",
        manifest.records.len(),
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    println!("manifest: {}", a.out.join("manifest.jsonl").display());
    println!("fingerprint: {}", manifest.fingerprint);
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = manifest.records.iter().filter(|r| r.split == split).count();
        let ratio = occlusion_ratio(&manifest, Some(split)).map_err(data_err)?;
        println!("  {split:?}: {n} images, occlusion ratio {ratio:.2}");
    }
    Ok(())
}

/// Optional sections of a --config file.
struct FileConfig {
    model: Option<GramNetConfig>,
    train: Option<TrainConfig>,
    pad: Option<f64>,
}

fn read_file_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| exit_with(2, format!("config {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| exit_with(1, format!("config {}: {e}", path.display())))?;
    let section = |key: &str| v.get(key).cloned();
    Ok(FileConfig {
        model: match section("model") {
            Some(m) => Some(
                serde_json::from_value(m)
                    .map_err(|e| exit_with(1, format!("config model section: {e}")))?,
            ),
            None => None,
        },
        train: match section("train") {
            Some(t) => Some(
                serde_json::from_value(t)
                    .map_err(|e| exit_with(1, format!("config train section: {e}")))?,
            ),
            None => None,
        },
        pad: match section("pad") {
            Some(p) => Some(
                serde_json::from_value(p)
                    .map_err(|e| exit_with(1, format!("config pad section: {e}")))?,
            ),
            None => None,
        },
    })
}

fn file_sha256(path: &Path) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)
        .map_err(|e| exit_with(2, format!("hash {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let file_cfg = match &a.config {
        Some(p) => read_file_config(p)?,
        None => FileConfig {
            model: None,
            train: None,
            pad: None,
        },
    };
    let model_cfg = match file_cfg.model {
        Some(cfg) => cfg,
        None => match a.preset.as_str() {
            "toy" => GramNetConfig::toy(),
            "default" => GramNetConfig::default(),
            other => {
                return Err(exit_with(
                    1,
                    format!("unknown preset {other:?}; use toy or default"),
                ))
            }
        },
    };
    model_cfg
        .validate()
        .map_err(|e| exit_with(1, e.to_string()))?;
    let mut tc = file_cfg.train.unwrap_or_default();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    if let Some(m) = a.momentum {
        tc.momentum = m;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate().map_err(|e| exit_with(1, e.to_string()))?;
    let pad = a
        .pad
        .or(file_cfg.pad)
        .unwrap_or(oclf::facepatch::DEFAULT_PAD);

    let manifest = load_manifest(&a.data).map_err(data_err)?;
    let train_samples = load_split(&manifest, Split::Train).map_err(data_err)?;
    let val_samples = load_split(&manifest, Split::Val).map_err(data_err)?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| exit_with(2, format!("create {}: {e}", a.out.display())))?;
    let side = model_cfg.input_side;
    let fingerprint = training_fingerprint(&manifest.fingerprint, &tc);
    let meta = CheckpointMeta {
        rng_seed: tc.seed,
        training_fingerprint: fingerprint.clone(),
    };
    let train_err = |e: oclf::Error| match &e {
        oclf::Error::DegenerateDataset(_) => exit_with(3, e.to_string()),
        _ => exit_with(1, e.to_string()),
    };

    // Whole-face model.
    let started = Instant::now();
    let whole_train = prepare_whole_face(&train_samples, side).map_err(train_err)?;
    let whole_val = prepare_whole_face(&val_samples, side).map_err(train_err)?;
    let mut whole_model = build_gramnet(&model_cfg, tc.seed.wrapping_add(1))
        .map_err(|e| exit_with(1, e.to_string()))?;
    let mut head_rng = oclf::ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let mut whole_head = ClassifierHead::whole_face(model_cfg.feature_dim(), &mut head_rng);
    let whole_hist = train_classifier(
        &mut whole_model,
        &mut whole_head,
        &whole_train.images,
        &whole_train.labels,
        &whole_val.images,
        &whole_val.labels,
        &tc,
    )
    .map_err(train_err)?;
    whole_hist
        .to_csv(a.out.join("whole_history.csv"))
        .map_err(|e| exit_with(2, e.to_string()))?;
    save_checkpoint(
        &mut whole_model,
        &mut [whole_head],
        &meta,
        a.out.join("whole.oclf"),
    )
    .map_err(|e| exit_with(2, e.to_string()))?;
    eprintln!(
        "whole-face model: best val acc {:.4} (epoch {}) in {:.1}s",
        whole_hist.best_val_acc,
        whole_hist.best_epoch,
        started.elapsed().as_secs_f64()
    );

    // Shared patch model.
    let started = Instant::now();
    let patch_train = prepare_patches(&train_samples, side, pad).map_err(train_err)?;
    let patch_val = prepare_patches(&val_samples, side, pad).map_err(train_err)?;
    let mut patch_model = build_gramnet(&model_cfg, tc.seed.wrapping_add(3))
        .map_err(|e| exit_with(1, e.to_string()))?;
    let mut patch_head = ClassifierHead::per_patch(model_cfg.feature_dim(), &mut head_rng);
    let patch_hist = train_patch_model(
        &mut patch_model,
        &mut patch_head,
        &patch_train,
        &patch_val,
        &tc,
    )
    .map_err(train_err)?;
    patch_hist
        .to_csv(a.out.join("patch_history.csv"))
        .map_err(|e| exit_with(2, e.to_string()))?;
    save_checkpoint(
        &mut patch_model,
        &mut [patch_head],
        &meta,
        a.out.join("patch.oclf"),
    )
    .map_err(|e| exit_with(2, e.to_string()))?;
    eprintln!(
        "patch model: best val acc {:.4} (epoch {}) in {:.1}s",
        patch_hist.best_val_acc,
        patch_hist.best_epoch,
        started.elapsed().as_secs_f64()
    );

    // Concat head over the frozen patch model; its checkpoint carries
    // a copy of that model so it loads self-contained.
    let started = Instant::now();
    let mut concat_head = ClassifierHead::concat(model_cfg.feature_dim(), 7, &mut head_rng);
    let concat_hist = train_concat_head(
        &patch_model,
        &mut concat_head,
        &patch_train,
        &patch_val,
        &tc,
    )
    .map_err(train_err)?;
    concat_hist
        .to_csv(a.out.join("concat_history.csv"))
        .map_err(|e| exit_with(2, e.to_string()))?;
    save_checkpoint(
        &mut patch_model,
        &mut [concat_head],
        &meta,
        a.out.join("concat.oclf"),
    )
    .map_err(|e| exit_with(2, e.to_string()))?;
    eprintln!(
        "concat head: best val acc {:.4} (epoch {}) in {:.1}s",
        concat_hist.best_val_acc,
        concat_hist.best_epoch,
        started.elapsed().as_secs_f64()
    );

    // Run manifest: everything needed to audit or reproduce the run.
    let run = serde_json::json!({
        "data": a.data.display().to_string(),
        "dataset_fingerprint": manifest.fingerprint,
        "training_fingerprint": fingerprint,
        "model_config": model_cfg,
        "train_config": tc,
        "pad": pad,
        "checkpoints": {
            "whole": { "file": "whole.oclf", "sha256": file_sha256(&a.out.join("whole.oclf"))? },
            "patch": { "file": "patch.oclf", "sha256": file_sha256(&a.out.join("patch.oclf"))? },
            "concat": { "file": "concat.oclf", "sha256": file_sha256(&a.out.join("concat.oclf"))? },
        },
        "histories": {
            "whole": { "file": "whole_history.csv", "best_epoch": whole_hist.best_epoch, "best_val_acc": whole_hist.best_val_acc },
            "patch": { "file": "patch_history.csv", "best_epoch": patch_hist.best_epoch, "best_val_acc": patch_hist.best_val_acc },
            "concat": { "file": "concat_history.csv", "best_epoch": concat_hist.best_epoch, "best_val_acc": concat_hist.best_val_acc },
        },
    });
    std::fs::write(
        a.out.join("run.json"),
        serde_json::to_string_pretty(&run)? + "\n",
    )
    .map_err(|e| exit_with(2, format!("write run.json: {e}")))?;
    println!(
        "trained 3 models -> {} (best val acc: whole {:.4}, patch {:.4}, concat {:.4})",
        a.out.display(),
        whole_hist.best_val_acc,
        patch_hist.best_val_acc,
        concat_hist.best_val_acc
    );
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(exit_with(1, format!("unknown split {other:?}"))),
    }
}

fn read_weights(path: &Path) -> anyhow::Result<PatchWeights> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| exit_with(5, format!("weights {}: {e}", path.display())))?;
    parse_weights_json(&text).map_err(|e| exit_with(5, format!("weights {}: {e}", path.display())))
}

fn parse_weights_json(text: &str) -> Result<PatchWeights, String> {
    let map: BTreeMap<String, u32> =
        serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut named = BTreeMap::new();
    for (k, v) in map {
        let name = PatchName::from_str_opt(&k).ok_or(format!("unknown patch name {k:?}"))?;
        named.insert(name, v);
    }
    PatchWeights::new(named).map_err(|e| e.to_string())
}

fn load_pipeline(models_dir: &Path, pad: f64, weights: Option<&Path>) -> anyhow::Result<(PipelineModels, PipelineConfig)> {
    let models = PipelineModels::from_checkpoints(
        models_dir.join("whole.oclf"),
        models_dir.join("patch.oclf"),
        models_dir.join("concat.oclf"),
    )
    .map_err(model_err)?;
    let mut config = PipelineConfig {
        pad,
        ..PipelineConfig::default()
    };
    if let Some(wpath) = weights {
        config.weights = read_weights(wpath)?;
    }
    Ok((models, config))
}

fn print_metrics_line(name: &str, m: &Metrics) {
    println!(
        "{name:<12} accuracy {:6.2}%  precision {:6.2}%  recall {:6.2}%  F {:6.2}%",
        m.accuracy * 100.0,
        m.macro_precision * 100.0,
        m.macro_recall * 100.0,
        m.macro_f * 100.0
    );
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let split = parse_split(&a.split)?;
    let manifest = load_manifest(&a.data).map_err(data_err)?;
    let samples = load_split(&manifest, split).map_err(data_err)?;
    let (models, config) = load_pipeline(&a.models, a.pad, a.weights.as_deref())?;

    let started = Instant::now();
    let mut results = Vec::with_capacity(samples.len());
    for sample in &samples {
        let r = if a.early_exit {
            run_pipeline_early_exit(&models, &config, sample)
        } else {
            run_pipeline(&models, &config, sample)
        }
        .map_err(|e| exit_with(1, format!("sample {}: {e}", sample.id)))?;
        results.push(r);
    }
    let elapsed = started.elapsed().as_secs_f64();

    let ratio = occlusion_ratio(&manifest, Some(split)).map_err(data_err)?;
    println!(
        "split {}: {} samples, occlusion ratio {ratio:.2}, {elapsed:.1}s",
        a.split,
        samples.len()
    );
    for (name, sel) in [
        ("whole_face", PathSelector::WholeFace),
        ("patch_vote", PathSelector::PatchVote),
        ("concat", PathSelector::Concat),
        ("fused", PathSelector::Fused),
    ] {
        match metrics_for_path(&results, sel) {
            Ok(m) => print_metrics_line(name, &m),
            Err(e) => println!("{name:<12} not scored: {e}"),
        }
    }
    if let Ok(m) = metrics_for_path(&results, PathSelector::Fused) {
        println!("confusion (fused):\n{}", m.confusion);
    }
    if a.early_exit {
        println!(
            "whole-face forwards: {} / {}",
            models.whole_face_forward_count(),
            samples.len()
        );
    }
    if let Some(out) = &a.out {
        write_results_jsonl(&results, out).map_err(|e| exit_with(2, e.to_string()))?;
        println!("results: {}", out.display());
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let pixels = oclf::datasets::decode_image(&a.image).map_err(data_err)?;
    let (h, w, _) = pixels.dim();
    let text = std::fs::read_to_string(&a.landmarks)
        .map_err(|e| exit_with(2, format!("landmarks {}: {e}", a.landmarks.display())))?;
    let points: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| exit_with(1, format!("landmarks {}: {e}", a.landmarks.display())))?;
    let landmarks = FaceLandmarks::new(points).map_err(|e| exit_with(1, e.to_string()))?;
    let id = a
        .image
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.image.display().to_string());
    let mut sample = ImageSample::new(id, pixels, None, Split::Test);
    sample.landmarks = Some(landmarks);
    if let Some(mask_path) = &a.mask {
        sample.occlusion = Some(load_mask(mask_path, h, w).map_err(data_err)?);
    }

    let (models, config) = load_pipeline(&a.models, a.pad, a.weights.as_deref())?;
    let result = if a.early_exit {
        run_pipeline_early_exit(&models, &config, &sample)
    } else {
        run_pipeline(&models, &config, &sample)
    }
    .map_err(|e| exit_with(1, e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let results = read_results_jsonl(&a.results).map_err(data_err)?;
    let candidates = match &a.candidates {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| exit_with(5, format!("candidates {}: {e}", path.display())))?;
            let raw: Vec<BTreeMap<String, u32>> = serde_json::from_str(&text)
                .map_err(|e| exit_with(5, format!("candidates {}: {e}", path.display())))?;
            let mut out = Vec::with_capacity(raw.len());
            for (i, map) in raw.into_iter().enumerate() {
                let json = serde_json::to_string(&map)?;
                out.push(parse_weights_json(&json).map_err(|e| {
                    exit_with(5, format!("candidates entry {i}: {e}"))
                })?);
            }
            out
        }
        None => default_weight_candidates(),
    };
    let entries = weight_sweep(&results, &candidates, BinaryLabel::Real)
        .map_err(|e| exit_with(1, e.to_string()))?;
    println!("{} candidates over {} results:", entries.len(), results.len());
    for (rank, entry) in entries.iter().take(a.top).enumerate() {
        let desc = if entry.weights.entries().is_empty() {
            "uniform".to_string()
        } else {
            entry
                .weights
                .entries()
                .iter()
                .map(|(n, w)| format!("{n}={w}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        println!(
            "{:>3}. accuracy {:6.2}%  F {:6.2}%  [{desc}]",
            rank + 1,
            entry.metrics.accuracy * 100.0,
            entry.metrics.macro_f * 100.0
        );
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&entries)? + "\n")
            .map_err(|e| exit_with(2, format!("write {}: {e}", out.display())))?;
        println!("ranking: {}", out.display());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let out_dir = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| exit_with(2, format!("create {}: {e}", out_dir.display())))?;
    let mut report = String::from("# Training report\n\n");
    let mut rendered_any = false;

    for name in ["whole", "patch", "concat"] {
        let csv_path = a.run.join(format!("{name}_history.csv"));
        if !csv_path.is_file() {
            continue;
        }
        let hist = TrainHistory::from_csv(&csv_path).map_err(|e| match e {
            oclf::Error::NotFound(_) => exit_with(2, e.to_string()),
            _ => exit_with(6, e.to_string()),
        })?;
        let loss: Vec<f64> = hist.epochs.iter().map(|e| e.train_loss).collect();
        let train_acc: Vec<f64> = hist.epochs.iter().map(|e| e.train_acc).collect();
        let val_acc: Vec<f64> = hist.epochs.iter().map(|e| e.val_acc).collect();
        let png = out_dir.join(format!("{name}_curves.png"));
        line_chart(
            &png,
            &format!("{name} training"),
            &[
                Series {
                    name: "train loss",
                    values: &loss,
                },
                Series {
                    name: "train acc",
                    values: &train_acc,
                },
                Series {
                    name: "val acc",
                    values: &val_acc,
                },
            ],
            "epoch",
        )
        .map_err(|e| exit_with(2, e.to_string()))?;
        report.push_str(&format!(
            "## {name}\n\n- best epoch: {} (val acc {:.4})\n- curves: `{}`\n\n",
            hist.best_epoch,
            hist.best_val_acc,
            png.file_name().unwrap().to_string_lossy()
        ));
        rendered_any = true;
    }

    if let Some(results_path) = &a.results {
        let results = read_results_jsonl(results_path).map_err(data_err)?;
        report.push_str("## Evaluation\n\n");
        for (name, sel) in [
            ("whole_face", PathSelector::WholeFace),
            ("patch_vote", PathSelector::PatchVote),
            ("concat", PathSelector::Concat),
            ("fused", PathSelector::Fused),
        ] {
            if let Ok(m) = metrics_for_path(&results, sel) {
                report.push_str(&format!("- {name}: {m}\n"));
            }
        }
        if let Ok(acc) = per_patch_accuracy(&results) {
            let bars: Vec<(String, f64)> = acc
                .iter()
                .map(|(k, v)| (k.clone(), v.accuracy()))
                .collect();
            let png = out_dir.join("per_patch_accuracy.png");
            bar_chart(&png, "per-patch accuracy", &bars)
                .map_err(|e| exit_with(2, e.to_string()))?;
            report.push_str(&format!(
                "- per-patch accuracy chart: `{}`\n",
                png.file_name().unwrap().to_string_lossy()
            ));
        }
        report.push('\n');
        rendered_any = true;
    }

    if !rendered_any {
        return Err(exit_with(
            2,
            format!("nothing to report in {}", a.run.display()),
        ));
    }
    let md = out_dir.join("report.md");
    std::fs::write(&md, &report)
        .map_err(|e| exit_with(2, format!("write {}: {e}", md.display())))?;
    println!("report: {}", md.display());
    Ok(())
}
