use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use cfsynth::checkpoint::{load_codec, load_model, read_meta, save_codec};
use cfsynth::codec::{train_codec, Codec, CodecTrainConfig};
use cfsynth::dataio::{discover_manifests, generate_dataset, load_clip, DatasetSpec};
use cfsynth::evalkit::{evaluate_frames, load_frames, write_report};
use cfsynth::imaging::save_png_rgb;
use cfsynth::model::{Model, ModelConfig};
use cfsynth::pipeline::{
    composite_preview, pretrain_base, render_job_poses, synthesize, train, write_frames, JobSpec, PreparedClip,
    TrainConfig, TrainOutput,
};
use cfsynth::{ClipF32, Error, ModelF32};

use crate::{Cli, Command, GlobalArgs};

/// 1 for bad input, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None if err.is::<UsageError>() => 1,
        None => 2,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::Train => train_cmd(g),
        Command::RenderPose => render_pose(g),
        Command::Synthesize { checkpoint } => synthesize_cmd(g, checkpoint),
        Command::Evaluate { pred, gt } => evaluate_cmd(g, pred, gt),
    }
}

fn config_path(g: &GlobalArgs) -> Result<&Path> {
    g.config.as_deref().ok_or_else(|| usage("--config is required for this command"))
}

fn out_dir(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn gen_data(g: &GlobalArgs) -> Result<()> {
    let path = config_path(g)?;
    let mut spec = DatasetSpec::from_toml(&read_text(path)?)?;
    if let Some(seed) = g.seed {
        // Offsets every clip's seeds so one flag re-rolls the corpus.
        for c in &mut spec.clips {
            c.identity_seed = c.identity_seed.wrapping_add(seed);
            c.motion_seed = c.motion_seed.wrapping_add(seed);
        }
    }
    let out = out_dir(g)?;
    let manifests = generate_dataset(&spec, out)?;
    for m in &manifests {
        load_clip::<f32>(m).with_context(|| format!("generated clip {} failed validation", m.display()))?;
    }
    println!("{} clips written to {}", manifests.len(), out.display());
    Ok(())
}

/// Training configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Directory holding clip manifests (defaults to `CFSYNTH_DATA_ROOT`).
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Model checkpoint to continue from (required for phase 2).
    #[serde(default)]
    pub init: Option<PathBuf>,
    /// Trained codec to reuse instead of training one.
    #[serde(default)]
    pub codec: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub codec_train: CodecTrainConfig,
    /// Optional base training of all non-temporal networks on another
    /// corpus before the phase runs.
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSection {
    pub data: PathBuf,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn load_clips(dir: &Path) -> Result<Vec<ClipF32>> {
    let manifests = discover_manifests(dir)?;
    if manifests.is_empty() {
        return Err(Error::invalid(format!("no clip manifests under {}", dir.display())).into());
    }
    manifests
        .iter()
        .map(|m| load_clip(m).with_context(|| format!("loading {}", m.display())))
        .collect()
}

fn prepare(model: &ModelF32, clips: Vec<ClipF32>) -> Result<Vec<PreparedClip<f32>>> {
    Ok(clips.into_iter().map(|c| PreparedClip::new(model, c)).collect::<cfsynth::Result<_>>()?)
}

fn train_cmd(g: &GlobalArgs) -> Result<()> {
    let path = config_path(g)?;
    let base = base_dir(path);
    let mut file: TrainFile =
        toml::from_str(&read_text(path)?).map_err(|e| Error::format("training config", e.to_string()))?;
    if let Some(seed) = g.seed {
        file.train.seed = seed;
        file.codec_train.seed = seed;
    }
    file.train.validate()?;
    file.model.validate()?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if file.train.phase == 2 && file.init.is_none() {
        return Err(Error::MissingCheckpoint(
            "phase 2 needs `init` pointing at a phase-1 checkpoint; run phase 1 first".into(),
        )
        .into());
    }
    let out = g
        .out
        .clone()
        .or_else(|| file.out.as_deref().map(resolve))
        .ok_or_else(|| usage("no output directory: pass --out or set `out` in the config"))?;
    let data = file
        .data
        .as_deref()
        .map(resolve)
        .or_else(|| g.data_root.clone())
        .ok_or_else(|| usage("no training data: set `data` in the config or CFSYNTH_DATA_ROOT"))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let clips = load_clips(&data)?;
    info!("loaded {} clips from {}", clips.len(), data.display());

    let mut model = match &file.init {
        Some(p) => {
            let (m, meta) = load_model::<f32>(&resolve(p))?;
            info!("continuing from {} (phase {}, step {})", p.display(), meta.phase, meta.step);
            m
        }
        None => {
            let codec = match &file.codec {
                Some(p) => load_codec::<f32>(&resolve(p))?,
                None => {
                    let corpus: Vec<_> = clips.iter().flat_map(|c| c.frames.iter().cloned()).collect();
                    info!("training codec on {} frames for {} steps", corpus.len(), file.codec_train.steps);
                    let fresh = Codec::new(file.model.codec.clone(), file.codec_train.seed)?;
                    let log = out.join("codec_log.jsonl");
                    let (codec, _) = train_codec(fresh, &corpus, &file.codec_train, Some(&log))?;
                    save_codec(&out.join("codec.ckpt"), &codec)?;
                    codec
                }
            };
            let mut m = Model::with_codec(file.model.clone(), codec, file.train.seed)?;
            if let Some(pre) = &file.pretrain {
                let pre_clips = prepare(&m, load_clips(&resolve(&pre.data))?)?;
                info!("base training on {} clips for {} steps", pre_clips.len(), pre.train.steps);
                let pre_out = TrainOutput {
                    log_path: out.join("pretrain_log.jsonl"),
                    checkpoint_dir: out.join("pretrain"),
                };
                pretrain_base(&mut m, &pre_clips, &pre.train, Some(&pre_out))?;
            }
            m
        }
    };
    let prepared = prepare(&model, clips)?;
    let output = TrainOutput {
        log_path: out.join("train_log.jsonl"),
        checkpoint_dir: out.clone(),
    };
    let outcome = train(&mut model, &prepared, &file.train, Some(&output))?;
    if let Some(last) = outcome.log.last() {
        info!("phase {} finished: final loss {:.5}", file.train.phase, last.loss);
    }
    println!(
        "{} steps, {} checkpoints in {}",
        outcome.log.len(),
        outcome.checkpoints.len(),
        out.display()
    );
    Ok(())
}

fn load_job(g: &GlobalArgs, seed: u64) -> Result<cfsynth::pipeline::InferenceJob<f32>> {
    let path = config_path(g)?;
    let spec = JobSpec::load(path)?;
    Ok(spec.build(&base_dir(path), seed)?)
}

fn render_pose(g: &GlobalArgs) -> Result<()> {
    let job = load_job(g, g.seed.unwrap_or(0))?;
    let out = out_dir(g)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let maps = render_job_poses(&job)?;
    for (i, (m, bg)) in maps.iter().zip(&job.backgrounds).enumerate() {
        save_png_rgb(&out.join(format!("pose_{i:04}.png")), &m.pixels)?;
        save_png_rgb(&out.join(format!("preview_{i:04}.png")), &composite_preview(m, bg)?)?;
    }
    println!("{} pose maps written to {}", maps.len(), out.display());
    Ok(())
}

fn synthesize_cmd(g: &GlobalArgs, checkpoint: &Path) -> Result<()> {
    if !checkpoint.exists() {
        return Err(Error::MissingCheckpoint(checkpoint.display().to_string()).into());
    }
    let meta = read_meta(checkpoint)?;
    let seed = g.seed.unwrap_or(meta.seed);
    let (model, _) = load_model::<f32>(checkpoint)?;
    let job = load_job(g, seed)?;
    let out = out_dir(g)?;
    let frames = synthesize(&model, &job)?;
    let manifest = write_frames(out, &frames, &model, &job)?;
    println!("{} frames written to {}", manifest.frames, out.display());
    Ok(())
}

fn frames_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("frames");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn evaluate_cmd(g: &GlobalArgs, pred: &Path, gt: &Path) -> Result<()> {
    let report_path = g
        .out
        .clone()
        .unwrap_or_else(|| pred.join("metrics.jsonl"));
    let p = load_frames(&frames_dir(pred))?;
    let t = load_frames(&frames_dir(gt))?;
    if p.is_empty() {
        bail!(Error::invalid(format!("no PNG frames in {}", pred.display())));
    }
    let clip = gt
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = evaluate_frames(&p, &t, &clip)?;
    write_report(&report_path, &report)?;
    let s = &report.summary;
    println!(
        "frames {}  L1 {:.5}  PSNR {:.2}  SSIM {:.4}  -> {}",
        s.frames,
        s.l1,
        s.psnr,
        s.ssim,
        report_path.display()
    );
    Ok(())
}
