//! Command-line surface tying the pipeline together: pretrain a toy base,
//! train subject and motion adapters, compose them into generated videos,
//! run the weight-change analysis, and evaluate outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use vidadapt_core::analysis;
use vidadapt_core::compose::{
    generate, load_motion_checkpoint, load_subject_checkpoint, save_motion_checkpoint,
    save_subject_checkpoint, GenerationRequest, GuidanceSource,
};
use vidadapt_core::config::RunConfig;
use vidadapt_core::eval::{evaluate_run, render_report, SeededProjectionProvider};
use vidadapt_core::ingest;
use vidadapt_core::model::BaseModel;
use vidadapt_core::motion::{train_motion_adapter, MotionDataset};
use vidadapt_core::optim::TrainRunConfig;
use vidadapt_core::storage::{self, write_atomic};
use vidadapt_core::subject::{train_identity_adapter, train_textual_identity, SubjectDataset};
use vidadapt_core::synthetic;
use vidadapt_core::trainer::TrainItem;
use vidadapt_core::unet::LayerDomain;

#[derive(Parser)]
#[command(
    name = "vidadapt",
    version,
    about = "Decoupled subject/motion video customization at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML config file; flags override file values, file overrides defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a toy base model on synthetic captioned clips.
    PretrainBase {
        #[command(flatten)]
        common: CommonOpts,
        /// Number of synthetic corpus clips.
        #[arg(long, default_value_t = 48)]
        corpus_size: usize,
        /// Override pretraining iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-step subject learning: textual identity, then identity adapters.
    TrainSubject {
        #[command(flatten)]
        common: CommonOpts,
        /// Base model checkpoint directory.
        #[arg(long)]
        base: PathBuf,
        /// Directory of subject images (PNG or tensor containers).
        #[arg(long)]
        images: PathBuf,
        /// Class word initializing the pseudo-word embedding.
        #[arg(long)]
        class_word: String,
        #[arg(long)]
        stage1_iterations: Option<usize>,
        #[arg(long)]
        stage2_iterations: Option<usize>,
        #[arg(long)]
        stage1_lr: Option<f64>,
        #[arg(long)]
        stage2_lr: Option<f64>,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train motion adapters on one or more videos.
    TrainMotion {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base: PathBuf,
        /// Directory of videos, each a subdirectory of ordered frames.
        #[arg(long)]
        videos: PathBuf,
        /// Caption applied to clips lacking a caption.txt.
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compose subject and motion adapters into one generation.
    Compose {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Explicit guidance image (defaults to a random subject training image).
        #[arg(long)]
        guidance_image: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate with the identity adapter only.
    GenerateSubject {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate with the motion adapter only (requires guidance).
    GenerateMotion {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        guidance_image: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune one parameter domain of the base (for weight analysis).
    FinetuneDomain {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base: PathBuf,
        /// spatial or temporal.
        #[arg(long)]
        domain: String,
        /// Subject images (spatial) ...
        #[arg(long)]
        images: Option<PathBuf>,
        /// ... or motion videos (temporal).
        #[arg(long)]
        videos: Option<PathBuf>,
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer weight-change report between two base checkpoints.
    AnalyzeWeights {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// spatial or temporal.
        #[arg(long)]
        domain: String,
        /// Output report (JSON; a .txt table is written alongside).
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric suite over generated videos.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        videos: PathBuf,
        /// Tab-separated "video_id<TAB>prompt" lines.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 101)]
        clip_seed: u64,
        #[arg(long, default_value_t = 202)]
        dino_seed: u64,
        #[arg(long, default_value_t = 64)]
        embed_dim: usize,
        /// Output directory (report.txt, records.jsonl, aggregate.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Chart an analysis report (bar) or a training log (curve) as SVG.
    PlotReport {
        #[command(flatten)]
        common: CommonOpts,
        /// Analysis report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training log JSONL.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic demo data as image files.
    MakeSynthetic {
        #[command(flatten)]
        common: CommonOpts,
        /// subject | motion
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &CommonOpts) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).context("loading config")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_base(path: &Path, common: &CommonOpts) -> anyhow::Result<BaseModel> {
    let mut base = BaseModel::load(path)
        .with_context(|| format!("loading base checkpoint {}", path.display()))?;
    if let Some(seed) = common.seed {
        base.cfg.seed = seed;
    }
    Ok(base)
}

fn run_cfg(cfg: &RunConfig, lr: f64, iterations: usize, batch: usize) -> TrainRunConfig {
    TrainRunConfig {
        learning_rate: lr,
        iterations,
        batch_size: batch,
        seed: cfg.seed,
        adam: cfg.adam(),
    }
}

fn apply_overrides(request: &mut GenerationRequest, common: &CommonOpts, steps: Option<usize>, scale: Option<f64>) {
    if let Some(s) = common.seed {
        request.seed = s;
    }
    if let Some(s) = steps {
        request.num_steps = s;
    }
    if let Some(s) = scale {
        request.guidance_scale = s;
    }
}

fn write_video_outputs(
    out: &Path,
    video: &vidadapt_core::latent::LatentVideo,
    metadata: &vidadapt_core::compose::GenerationMetadata,
    fps: usize,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    ingest::save_video(&out.join("video.vt"), video)?;
    let mut sidecar = metadata.render();
    sidecar.push_str(&format!("fps: {fps}\n"));
    write_atomic(&out.join("metadata.txt"), sidecar.as_bytes())?;
    let c = video.dims()[4];
    if c == 1 || c == 3 || c == 4 {
        ingest::dump_frames(&out.join("frames"), video)?;
    }
    println!("wrote {}", out.join("video.vt").display());
    Ok(())
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::PretrainBase { common, corpus_size, iterations, out } => {
            let cfg = load_config(&common)?;
            let base = BaseModel::build(&cfg)?;
            let corpus: Vec<TrainItem> = synthetic::pretrain_items(
                corpus_size,
                cfg.frames,
                cfg.latent_h,
                cfg.latent_w,
                cfg.latent_channels,
                cfg.seed,
            )
            .into_iter()
            .map(|(video, prompt)| TrainItem { video, prompt })
            .collect();
            let run = run_cfg(
                &cfg,
                cfg.pretrain_lr,
                iterations.unwrap_or(cfg.pretrain_iterations),
                cfg.pretrain_batch,
            );
            let log = analysis::pretrain_base(&base, &corpus, &run)?;
            base.save(&out)?;
            log.write_jsonl(&out.join("pretrain_log.jsonl"))?;
            println!(
                "pretrained base: loss {:.4} -> {:.4}; saved to {}",
                log.initial_loss(50),
                log.final_loss(50),
                out.display()
            );
            Ok(())
        }
        Command::TrainSubject {
            common,
            base,
            images,
            class_word,
            stage1_iterations,
            stage2_iterations,
            stage1_lr,
            stage2_lr,
            out,
        } => {
            let mut model = load_base(&base, &common)?;
            let cfg = model.cfg.clone();
            let imgs = ingest::ingest_subject(&images, cfg.latent_h, cfg.latent_w, cfg.latent_channels)?;
            let dataset = SubjectDataset::new(imgs, &cfg.prompt_template, &class_word)?;
            let run1 = run_cfg(
                &cfg,
                stage1_lr.unwrap_or(cfg.stage1_lr),
                stage1_iterations.unwrap_or(cfg.stage1_iterations),
                cfg.stage1_batch,
            );
            let (identity, log1) = train_textual_identity(&mut model, &dataset, &run1)?;
            let run2 = run_cfg(
                &cfg,
                stage2_lr.unwrap_or(cfg.stage2_lr),
                stage2_iterations.unwrap_or(cfg.stage2_iterations),
                cfg.stage2_batch,
            );
            let (set, log2) = train_identity_adapter(&model, &dataset, &run2)?;
            save_subject_checkpoint(&out, &model, &identity, &set, &dataset.images, cfg.seed)?;
            log1.write_jsonl(&out.join("stage1_log.jsonl"))?;
            log2.write_jsonl(&out.join("stage2_log.jsonl"))?;
            println!(
                "subject trained: stage1 {:.4} -> {:.4}, stage2 {:.4} -> {:.4}; saved to {}",
                log1.initial_loss(50),
                log1.final_loss(50),
                log2.initial_loss(50),
                log2.final_loss(50),
                out.display()
            );
            Ok(())
        }
        Command::TrainMotion { common, base, videos, caption, iterations, lr, out } => {
            let model = load_base(&base, &common)?;
            let cfg = model.cfg.clone();
            let clips =
                ingest::ingest_motion(&videos, cfg.frames, cfg.latent_h, cfg.latent_w, cfg.latent_channels)?;
            let mut vids = Vec::new();
            let mut captions = Vec::new();
            for clip in clips {
                let text = clip
                    .caption
                    .or_else(|| caption.clone())
                    .ok_or_else(|| anyhow::anyhow!("clip {} has no caption.txt and no --caption", clip.name))?;
                vids.push(clip.video);
                captions.push(text);
            }
            let dataset = MotionDataset::new(vids, captions)?;
            let single = dataset.mode == vidadapt_core::motion::MotionMode::SingleVideo;
            let mut run = model.cfg.motion_run(cfg.seed, single);
            if let Some(iters) = iterations {
                run.iterations = iters;
            }
            if let Some(lr) = lr {
                run.learning_rate = lr;
            }
            let (set, log) = train_motion_adapter(&model, &dataset, &run)?;
            save_motion_checkpoint(&out, &model, &set, cfg.seed)?;
            log.write_jsonl(&out.join("train_log.jsonl"))?;
            println!(
                "motion trained: loss {:.4} -> {:.4}; saved to {}",
                log.initial_loss(50),
                log.final_loss(50),
                out.display()
            );
            Ok(())
        }
        Command::Compose { common, base, subject, motion, prompt, guidance_image, steps, scale, out } => {
            let mut model = load_base(&base, &common)?;
            let subject = load_subject_checkpoint(&subject)?;
            let motion = load_motion_checkpoint(&motion)?;
            let mut request = GenerationRequest::from_config(&model.cfg, &prompt, model.cfg.seed);
            apply_overrides(&mut request, &common, steps, scale);
            let guidance = match guidance_image {
                Some(path) => GuidanceSource::Frame(ingest::load_frame(
                    &path,
                    model.cfg.latent_h,
                    model.cfg.latent_w,
                    model.cfg.latent_channels,
                )?),
                None => GuidanceSource::FromSubjectImages,
            };
            let fps = model.cfg.fps;
            let (video, meta) = generate(&mut model, Some(subject), Some(motion), guidance, &request)?;
            write_video_outputs(&out, &video, &meta, fps)
        }
        Command::GenerateSubject { common, base, subject, prompt, steps, scale, out } => {
            let mut model = load_base(&base, &common)?;
            let subject = load_subject_checkpoint(&subject)?;
            let mut request = GenerationRequest::from_config(&model.cfg, &prompt, model.cfg.seed);
            apply_overrides(&mut request, &common, steps, scale);
            let fps = model.cfg.fps;
            let (video, meta) = generate(&mut model, Some(subject), None, GuidanceSource::None, &request)?;
            write_video_outputs(&out, &video, &meta, fps)
        }
        Command::GenerateMotion { common, base, motion, prompt, guidance_image, steps, scale, out } => {
            let mut model = load_base(&base, &common)?;
            let motion = load_motion_checkpoint(&motion)?;
            let mut request = GenerationRequest::from_config(&model.cfg, &prompt, model.cfg.seed);
            apply_overrides(&mut request, &common, steps, scale);
            let guidance = match guidance_image {
                Some(path) => GuidanceSource::Frame(ingest::load_frame(
                    &path,
                    model.cfg.latent_h,
                    model.cfg.latent_w,
                    model.cfg.latent_channels,
                )?),
                None => GuidanceSource::None,
            };
            let fps = model.cfg.fps;
            let (video, meta) = generate(&mut model, None, Some(motion), guidance, &request)?;
            write_video_outputs(&out, &video, &meta, fps)
        }
        Command::FinetuneDomain { common, base, domain, images, videos, caption, iterations, lr, out } => {
            let model = load_base(&base, &common)?;
            let cfg = model.cfg.clone();
            let domain: LayerDomain = domain.parse()?;
            let items: Vec<TrainItem> = match (&images, &videos) {
                (Some(images), None) => {
                    let caption = caption.unwrap_or_else(|| "a photo".to_string());
                    ingest::ingest_subject(images, cfg.latent_h, cfg.latent_w, cfg.latent_channels)?
                        .into_iter()
                        .map(|video| TrainItem { video, prompt: caption.clone() })
                        .collect()
                }
                (None, Some(videos)) => ingest::ingest_motion(
                    videos,
                    cfg.frames,
                    cfg.latent_h,
                    cfg.latent_w,
                    cfg.latent_channels,
                )?
                .into_iter()
                .map(|clip| {
                    let prompt =
                        clip.caption.or_else(|| caption.clone()).unwrap_or_else(|| "a video".into());
                    TrainItem { video: clip.video, prompt }
                })
                .collect(),
                _ => bail!("provide exactly one of --images or --videos"),
            };
            let run = run_cfg(
                &cfg,
                lr.unwrap_or(cfg.analysis_lr),
                iterations.unwrap_or(cfg.analysis_iterations),
                cfg.analysis_batch,
            );
            let log = analysis::fine_tune_for_analysis(&model, &items, domain, &run)?;
            model.save(&out)?;
            log.write_jsonl(&out.join("finetune_log.jsonl"))?;
            println!(
                "fine-tuned {} domain: loss {:.4} -> {:.4}; saved to {}",
                domain.name(),
                log.initial_loss(50),
                log.final_loss(50),
                out.display()
            );
            Ok(())
        }
        Command::AnalyzeWeights { common: _, before, after, domain, out } => {
            let before_ckpt = storage::load_checkpoint(&before)?;
            let after_ckpt = storage::load_checkpoint(&after)?;
            let cfg = RunConfig::from_json(&before_ckpt.manifest.core.config)?;
            let domain: LayerDomain = domain.parse()?;
            let report = analysis::analyze(&cfg, &before_ckpt, &after_ckpt, domain)?;
            write_atomic(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
            let table_path = out.with_extension("txt");
            write_atomic(&table_path, report.render_table().as_bytes())?;
            print!("{}", report.render_table());
            println!("wrote {} and {}", out.display(), table_path.display());
            Ok(())
        }
        Command::Evaluate { common, videos, prompts, references, clip_seed, dino_seed, embed_dim, out } => {
            let cfg = load_config(&common)?;
            let clip = SeededProjectionProvider::new("clip", clip_seed, embed_dim);
            let dino = SeededProjectionProvider::new("dino", dino_seed, embed_dim);
            let (records, agg) = evaluate_run(
                &videos,
                &prompts,
                &references,
                &clip,
                &dino,
                (cfg.latent_h, cfg.latent_w),
                cfg.latent_channels,
            )?;
            std::fs::create_dir_all(&out)?;
            let mut jsonl = String::new();
            for r in &records {
                jsonl.push_str(&serde_json::to_string(r)?);
                jsonl.push('\n');
            }
            write_atomic(&out.join("records.jsonl"), jsonl.as_bytes())?;
            write_atomic(&out.join("aggregate.json"), serde_json::to_string_pretty(&agg)?.as_bytes())?;
            let report = render_report(&records, &agg);
            write_atomic(&out.join("report.txt"), report.as_bytes())?;
            print!("{report}");
            Ok(())
        }
        Command::PlotReport { common: _, report, log, out } => match (report, log) {
            (Some(report), None) => {
                let text = std::fs::read_to_string(&report)?;
                let parsed: analysis::AnalysisReport = serde_json::from_str(&text)?;
                let labels: Vec<String> = parsed.per_category_mean.keys().cloned().collect();
                let values: Vec<f64> = parsed.per_category_mean.values().cloned().collect();
                let title = format!("mean weight change by category ({})", parsed.domain.name());
                vidadapt_core::plot::write_svg(
                    &out,
                    &vidadapt_core::plot::bar_chart_svg(&title, &labels, &values),
                )?;
                println!("wrote {}", out.display());
                Ok(())
            }
            (None, Some(log)) => {
                let text = std::fs::read_to_string(&log)?;
                let mut losses = Vec::new();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let step: vidadapt_core::optim::TrainStep = serde_json::from_str(line)?;
                    losses.push(step.loss);
                }
                vidadapt_core::plot::write_svg(
                    &out,
                    &vidadapt_core::plot::line_chart_svg("training loss", &losses),
                )?;
                println!("wrote {}", out.display());
                Ok(())
            }
            _ => bail!("provide exactly one of --report or --log"),
        },
        Command::MakeSynthetic { common, kind, count, out } => {
            let cfg = load_config(&common)?;
            let (h, w, c) = (cfg.latent_h, cfg.latent_w, cfg.latent_channels);
            if !(c == 1 || c == 3 || c == 4) {
                bail!("latent_channels {c} cannot be written as image files");
            }
            std::fs::create_dir_all(&out)?;
            match kind.as_str() {
                "subject" => {
                    let spec = synthetic::subject_spec(cfg.seed, c);
                    let images = synthetic::subject_images(&spec, count, h, w, c, cfg.seed + 1);
                    for (i, img) in images.iter().enumerate() {
                        let px = ingest::latent_to_pixels(&img.frame_data(0, 0), h, w, c)?;
                        px.save(out.join(format!("img_{i:02}.png")))?;
                    }
                    write_atomic(&out.join("class_word.txt"), format!("{}\n", spec.class_word).as_bytes())?;
                    println!("wrote {count} subject images (class {:?}) to {}", spec.class_word, out.display());
                }
                "motion" => {
                    for i in 0..count {
                        let clip = synthetic::motion_clip(cfg.seed + i as u64, cfg.frames, h, w, c);
                        let dir = out.join(format!("clip_{i:02}"));
                        ingest::dump_frames(&dir, &clip.video)?;
                        write_atomic(&dir.join("caption.txt"), format!("{}\n", clip.caption).as_bytes())?;
                    }
                    println!("wrote {count} motion clips to {}", out.display());
                }
                other => bail!("unknown synthetic kind {other:?} (use subject or motion)"),
            }
            Ok(())
        }
    }
}
