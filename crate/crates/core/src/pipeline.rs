//! Training phases, loss evaluation and windowed synthesis.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::body_render::{
    humanoid, render_sequence, trajectory_from_text, BodyModelState, CameraPose, PoseMap, UVTextureMap,
};
use crate::checkpoint::{save_model, TrainingStamp};
use crate::codec::cosine_lr;
use crate::conditioning::{ConditioningBundle, WindowInputs};
use crate::dataio::{generate_synthetic_clip, load_clip, window_sample, ClipRecord, SyntheticSceneSpec, TrainSample};
use crate::diffusion::sampler::{ddim_step, ddim_timesteps, SamplerConfig};
use crate::diffusion::schedule::forward_diffuse_frames;
use crate::error::{Error, Result, StageExt};
use crate::imaging::{self, Mask};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, Ctx, FreezePlan, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// 1 trains the spatial conditioning groups, 2 the temporal layers.
    pub phase: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Frames per training window.
    pub window: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_interval: usize,
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: 1,
            steps: 1000,
            batch_size: 1,
            lr: 1e-3,
            window: 8,
            seed: 0,
            checkpoint_interval: 0,
            flip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.phase, 1 | 2) {
            return Err(Error::invalid(format!("training phase must be 1 or 2, got {}", self.phase)));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.window == 0 || self.batch_size == 0 {
            return Err(Error::invalid("window and batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability outside [0, 1]"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub checksums: BTreeMap<String, String>,
}

/// A clip with its frames and plates already encoded by the frozen codec,
/// in both orientations.
#[derive(Debug, Clone)]
pub struct PreparedClip<T> {
    pub clip: ClipRecord<T>,
    latents: [Tensor<T>; 2],
    plate_latents: [Tensor<T>; 2],
}

fn encode_all<T: Scalar>(model: &Model<T>, images: &[Tensor<T>], flip: bool) -> Result<Tensor<T>> {
    let imgs = if flip {
        images.iter().map(|i| i.flip_horizontal()).collect::<Result<Vec<_>>>()?
    } else {
        images.to_vec()
    };
    // Encode in small chunks to bound graph memory.
    let parts = imgs
        .chunks(8)
        .map(|c| model.codec.encode_batch(&Tensor::stack(c)?))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<Tensor<T>> = parts.iter().flat_map(|p| p.unstack()).collect();
    Tensor::stack(&frames)
}

impl<T: Scalar> PreparedClip<T> {
    pub fn new(model: &Model<T>, clip: ClipRecord<T>) -> Result<Self> {
        clip.validate()?;
        let latents = [encode_all(model, &clip.frames, false)?, encode_all(model, &clip.frames, true)?];
        let plate_latents = [encode_all(model, &clip.plates, false)?, encode_all(model, &clip.plates, true)?];
        Ok(Self {
            clip,
            latents,
            plate_latents,
        })
    }

    pub fn len(&self) -> usize {
        self.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip.is_empty()
    }
}

fn slice_frames<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    Tensor::stack(&(start..start + len).map(|i| t.index_axis0(i)).collect::<Vec<_>>())
}

/// Everything one loss term needs: the window's clean latents and its
/// conditioning inputs.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub z0: Tensor<T>,
    pub inputs: WindowInputs<T>,
}

impl<T: Scalar> TrainExample<T> {
    pub fn frames(&self) -> usize {
        self.z0.dim(0)
    }
}

/// Window `start..start+window` of a prepared clip.
pub fn example_from<T: Scalar>(
    prepared: &PreparedClip<T>,
    start: usize,
    window: usize,
    flip: bool,
) -> Result<TrainExample<T>> {
    let s: TrainSample<T> = window_sample(&prepared.clip, 0, start, window, flip)?;
    let k = usize::from(flip);
    Ok(TrainExample {
        z0: slice_frames(&prepared.latents[k], start, window)?,
        inputs: WindowInputs {
            pose_maps: s.pose_maps,
            reference: s.reference,
            reference_mask: s.reference_mask,
            background: slice_frames(&prepared.plate_latents[k], start, window)?,
        },
    })
}

/// Per-frame timesteps and Gaussian noise for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    /// Uniform `t` in `1..=T` per frame and standard normal noise.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], total: usize, rng: &mut R) -> Self {
        let ts = (0..shape[0]).map(|_| rng.random_range(1..=total)).collect();
        Self {
            ts,
            eps: Tensor::randn(shape, rng),
        }
    }
}

/// Graph of the noise-prediction loss for one example.
pub fn example_loss_graph<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    model: &Model<T>,
    example: &TrainExample<T>,
    draw: &NoiseDraw<T>,
    temporal: bool,
) -> Result<Var> {
    if draw.eps.shape() != example.z0.shape() || draw.ts.len() != example.frames() {
        return Err(Error::shape("noise draw", example.z0.shape(), draw.eps.shape()));
    }
    let z_t = forward_diffuse_frames(&example.z0, &draw.ts, &draw.eps, &model.schedule)?;
    let cond = model.condition_graph(ctx, &example.inputs, true)?;
    let z = ctx.constant(z_t);
    let pred = model.denoiser.forward(ctx, z, &draw.ts, &cond, temporal)?;
    let eps = ctx.constant(draw.eps.clone());
    ctx.mse(pred, eps)
}

/// Mean noise-prediction error over examples with unit weighting.
pub fn training_loss<T: Scalar>(
    model: &Model<T>,
    examples: &[TrainExample<T>],
    draws: &[NoiseDraw<T>],
    temporal: bool,
) -> Result<f64> {
    if examples.is_empty() || examples.len() != draws.len() {
        return Err(Error::invalid("need one noise draw per example"));
    }
    let mut total = 0.0;
    for (ex, d) in examples.iter().zip(draws) {
        let mut ctx = Ctx::inference(&model.store);
        let l = example_loss_graph(&mut ctx, model, ex, d, temporal)?;
        total += ctx.value(l).data()[0].f64();
    }
    Ok(total / examples.len() as f64)
}

/// Loss and mean parameter gradients over a batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    plan: &FreezePlan,
    examples: &[TrainExample<T>],
    draws: &[NoiseDraw<T>],
    temporal: bool,
) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    if examples.is_empty() || examples.len() != draws.len() {
        return Err(Error::invalid("need one noise draw per example"));
    }
    let inv = T::c(1.0 / examples.len() as f64);
    let mut total = 0.0;
    let mut acc: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
    for (ex, d) in examples.iter().zip(draws) {
        let mut ctx = Ctx::training(&model.store, plan);
        let l = example_loss_graph(&mut ctx, model, ex, d, temporal)?;
        total += ctx.value(l).data()[0].f64();
        for (id, g) in ctx.param_grads(l)? {
            let g = g.scale(inv);
            match acc.get_mut(&id) {
                Some(a) => *a = a.zip_map(&g, |x, y| x + y)?,
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    Ok((total / examples.len() as f64, acc.into_iter().collect()))
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn run_training<T: Scalar>(
    model: &mut Model<T>,
    clips: &[PreparedClip<T>],
    cfg: &TrainConfig,
    plan: &FreezePlan,
    temporal: bool,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    if !model.codec.frozen {
        return Err(Error::invalid("the codec must be trained and frozen before diffusion training"));
    }
    let eligible: Vec<usize> = (0..clips.len())
        .filter(|&i| {
            let ok = clips[i].len() >= cfg.window;
            if !ok {
                log::warn!("skipping clip {} shorter than window {}", clips[i].clip.identity, cfg.window);
            }
            ok
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!("no clip has at least {} frames", cfg.window)));
    }
    let mut log_file = match output {
        Some(o) => {
            if let Some(dir) = o.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::create_dir_all(&o.checkpoint_dir).map_err(|e| Error::io(&o.checkpoint_dir, e))?;
            Some(std::fs::File::create(&o.log_path).map_err(|e| Error::io(&o.log_path, e))?)
        }
        None => None,
    };
    let codec_sum = model.codec.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let total = model.schedule.len();
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.steps {
        let mut examples = Vec::with_capacity(cfg.batch_size);
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let c = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=clips[c].len() - cfg.window);
            let flip = rng.random_bool(cfg.flip_prob);
            let ex = example_from(&clips[c], start, cfg.window, flip)?;
            draws.push(NoiseDraw::random(ex.z0.shape(), total, &mut rng));
            examples.push(ex);
        }
        let (loss, grads) = loss_and_grads(model, plan, &examples, &draws, temporal)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at step {step}")));
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let grad_norm = opt.step(&mut model.store, plan, &grads, lr);
        let rec = TrainLogRecord {
            step,
            loss,
            lr,
            grad_norm,
            checksums: plan
                .trainable()
                .iter()
                .filter(|g| !model.store.ids_in(**g).is_empty())
                .map(|g| (g.name().to_string(), model.store.group_checksum(*g)))
                .collect(),
        };
        if let (Some(f), Some(o)) = (log_file.as_mut(), output) {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&o.log_path, e))?;
        }
        outcome.log.push(rec);
        let last = step + 1 == cfg.steps;
        let due = cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0;
        if let Some(o) = output.filter(|_| last || due) {
            let path = o.checkpoint_dir.join(format!("checkpoint_{:06}.ckpt", step + 1));
            let phase_before = model.trained_phase;
            if last {
                model.trained_phase = cfg.phase;
            }
            save_model(&path, model, TrainingStamp { step: step + 1, seed: cfg.seed })?;
            model.trained_phase = phase_before;
            outcome.checkpoints.push(path);
        }
    }
    if model.codec.checksum() != codec_sum {
        return Err(Error::Numerical("codec weights changed during diffusion training".into()));
    }
    Ok(outcome)
}

/// Two-phase training. Phase 1 updates the pose extractor, the
/// foreground-encoder spatial attention, the denoiser cross-attention and
/// the background encoder with temporal layers disabled. Phase 2 updates
/// only the temporal layers and requires a model that finished phase 1.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    clips: &[PreparedClip<T>],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (plan, temporal) = match cfg.phase {
        1 => (FreezePlan::phase1(), false),
        _ => {
            if model.trained_phase < 1 {
                return Err(Error::MissingCheckpoint(
                    "phase 2 continues from a phase-1 checkpoint; train phase 1 first".into(),
                ));
            }
            (FreezePlan::phase2(), true)
        }
    };
    let out = run_training(model, clips, cfg, &plan, temporal, output)?;
    if cfg.steps > 0 {
        model.trained_phase = cfg.phase;
    }
    Ok(out)
}

/// Base training of every non-temporal network on a corpus. This stands
/// in for the pretrained weights the spatial phase starts from; the model
/// keeps phase 0.
pub fn pretrain_base<T: Scalar>(
    model: &mut Model<T>,
    clips: &[PreparedClip<T>],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate_common()?;
    use crate::nn::ParamGroup as G;
    let plan = FreezePlan::new(G::ALL.into_iter().filter(|g| {
        !matches!(g, G::DenoiserTemporal | G::CodecEncoder | G::CodecDecoder)
    }));
    let cfg = TrainConfig { phase: 0, ..cfg.clone() };
    let out = run_training(model, clips, &cfg, &plan, false, output)?;
    model.trained_phase = 0;
    // The reference network restarts as a copy of the trained denoiser.
    model.store.copy_prefix("denoiser.", "reference.")?;
    Ok(out)
}

/// Start frames of windows of length `window` with stride `stride` that
/// cover `0..n`; the last window is aligned to the end.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if n == 0 || window == 0 || stride == 0 || stride > window {
        return Err(Error::invalid(format!("need n >= 1 and 1 <= stride <= window (n={n}, F={window}, s={stride})")));
    }
    if window >= n {
        return Ok(vec![0]);
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window <= n).collect();
    if starts.last().is_some_and(|&s| s + window < n) {
        starts.push(n - window);
    }
    Ok(starts)
}

/// Uniform average of window outputs `[F_w, ...]` placed at `starts`.
/// Every frame of `0..n` must be covered.
pub fn aggregate_at<T: Scalar>(outputs: &[Tensor<T>], starts: &[usize], n: usize) -> Result<Tensor<T>> {
    if outputs.is_empty() || outputs.len() != starts.len() {
        return Err(Error::invalid("one start per window output required"));
    }
    let tail = outputs[0].shape()[1..].to_vec();
    let per: usize = tail.iter().product();
    let mut sum = vec![0.0f64; n * per];
    let mut count = vec![0usize; n];
    for (o, &s) in outputs.iter().zip(starts) {
        if o.ndim() == 0 || o.shape()[1..] != tail[..] {
            return Err(Error::shape("window output", &tail, &o.shape()[1.min(o.ndim())..]));
        }
        let f = o.dim(0);
        if s + f > n {
            return Err(Error::invalid(format!("window at {s} of {f} frames exceeds {n} frames")));
        }
        for (k, v) in o.data().iter().enumerate() {
            sum[s * per + k] += v.f64();
        }
        for c in &mut count[s..s + f] {
            *c += 1;
        }
    }
    if let Some(gap) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("frame {gap} is not covered by any window")));
    }
    let mut shape = vec![n];
    shape.extend(&tail);
    let data = sum.iter().enumerate().map(|(k, s)| T::c(s / count[k / per] as f64)).collect();
    Tensor::new(&shape, data)
}

/// Averages overlapping window outputs laid out by [`window_starts`].
pub fn aggregate_windows<T: Scalar>(outputs: &[Tensor<T>], n: usize, window: usize, stride: usize) -> Result<Tensor<T>> {
    let starts = window_starts(n, window, stride)?;
    if outputs.len() != starts.len() {
        return Err(Error::invalid(format!(
            "{} window outputs for {} windows; coverage would have gaps",
            outputs.len(),
            starts.len()
        )));
    }
    aggregate_at(outputs, &starts, n)
}

/// Deterministic estimate of the noise-prediction loss on a clip:
/// `strata` evenly spaced timesteps, fixed-seed noise, non-overlapping
/// windows.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    clip: &PreparedClip<T>,
    window: usize,
    strata: usize,
    seed: u64,
    temporal: bool,
) -> Result<f64> {
    if strata == 0 {
        return Err(Error::invalid("need at least one timestep stratum"));
    }
    let total = model.schedule.len();
    let window = window.min(clip.len());
    let starts = window_starts(clip.len(), window, window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..strata {
        let t = 1 + ((2 * k + 1) * total) / (2 * strata);
        for &s in &starts {
            let ex = example_from(clip, s, window, false)?;
            let draw = NoiseDraw {
                ts: vec![t.min(total); window],
                eps: Tensor::randn(ex.z0.shape(), &mut rng),
            };
            sum += training_loss(model, std::slice::from_ref(&ex), std::slice::from_ref(&draw), temporal)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Everything needed to synthesize a clip.
#[derive(Debug, Clone)]
pub struct InferenceJob<T> {
    /// Reference photo `[H, W, 3]` and its foreground mask.
    pub reference: Tensor<T>,
    pub mask: Mask,
    pub texture: UVTextureMap<T>,
    pub states: Vec<BodyModelState<T>>,
    pub trajectory: Vec<CameraPose<T>>,
    /// Background plates `[H, W, 3]`, one per output frame.
    pub backgrounds: Vec<Tensor<T>>,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
    pub sampler_steps: usize,
}

impl<T: Scalar> InferenceJob<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::invalid("job has no frames"));
        }
        if self.trajectory.len() != n || self.backgrounds.len() != n {
            return Err(Error::invalid(format!(
                "job has {n} body states, {} cameras and {} background frames",
                self.trajectory.len(),
                self.backgrounds.len()
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::invalid("stride must satisfy 1 <= stride <= window"));
        }
        let s = self.reference.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::invalid("reference must be an [H, W, 3] image"));
        }
        for (i, b) in self.backgrounds.iter().enumerate() {
            if b.shape() != s {
                return Err(Error::ClipInvariant {
                    frame: i,
                    reason: format!("background is {:?}, reference is {s:?}", b.shape()),
                });
            }
        }
        Ok(())
    }

    /// Re-synthesis job for a clip: its reference frame, estimated
    /// texture, motion, cameras and plates.
    pub fn from_clip(clip: &ClipRecord<T>, window: usize, stride: usize, seed: u64, sampler_steps: usize) -> Result<Self> {
        let (reference, mask) = clip.reference()?;
        let texture = clip
            .texture
            .clone()
            .ok_or_else(|| Error::invalid("clip carries no texture for pose rendering"))?;
        Ok(Self {
            reference,
            mask,
            texture,
            states: clip.states.clone(),
            trajectory: clip.cameras.clone(),
            backgrounds: clip.plates.clone(),
            window,
            stride,
            seed,
            sampler_steps,
        })
    }
}

/// Where the reference, texture, motion and plates of a job come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobSource {
    /// A clip manifest on disk; relative paths resolve against the job file.
    Clip(PathBuf),
    /// A procedurally generated scene.
    Scene(SyntheticSceneSpec),
}

/// On-disk description of a synthesis or pose-rendering job (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub source: JobSource,
    /// Optional camera trajectory file, one camera per line; replaces the
    /// source cameras.
    #[serde(default)]
    pub trajectory: Option<PathBuf>,
    /// Number of output frames; defaults to the trajectory or clip length.
    /// Motion and plates repeat cyclically when it exceeds the source.
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Defaults to half the window.
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_sampler_steps")]
    pub sampler_steps: usize,
}

fn default_window() -> usize {
    8
}

fn default_sampler_steps() -> usize {
    20
}

impl JobSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("job file", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Resolves the job into concrete inputs. `base` is the directory
    /// relative paths are taken from.
    pub fn build<T: Scalar>(&self, base: &Path, seed: u64) -> Result<InferenceJob<T>> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let clip = match &self.source {
            JobSource::Clip(p) => load_clip::<T>(&resolve(p))?,
            JobSource::Scene(spec) => generate_synthetic_clip::<T>(spec)?,
        };
        let cameras = match &self.trajectory {
            Some(p) => {
                let path = resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let cams = trajectory_from_text::<T>(&text)?;
                if cams.is_empty() {
                    return Err(Error::invalid("camera trajectory is empty"));
                }
                cams
            }
            None => clip.cameras.clone(),
        };
        let n = self.frames.unwrap_or(cameras.len());
        if n == 0 {
            return Err(Error::invalid("job asks for zero frames"));
        }
        for (i, c) in cameras.iter().enumerate() {
            c.validate().map_err(|e| Error::invalid(format!("camera {i}: {e}")))?;
        }
        let stride = self.stride.unwrap_or((self.window / 2).max(1));
        let mut job = InferenceJob::from_clip(&clip, self.window, stride, seed, self.sampler_steps)?;
        let cycle = |len: usize| (0..n).map(move |i| i % len);
        job.states = cycle(clip.len())
            .enumerate()
            .map(|(k, i)| BodyModelState {
                frame_index: k,
                ..clip.states[i].clone()
            })
            .collect();
        job.backgrounds = cycle(clip.len()).map(|i| clip.plates[i].clone()).collect();
        job.trajectory = cycle(cameras.len()).map(|i| cameras[i].clone()).collect();
        job.validate()?;
        Ok(job)
    }
}

/// Pose maps of a job, quantized to 8-bit levels like stored assets.
pub fn render_job_poses<T: Scalar>(job: &InferenceJob<T>) -> Result<Vec<PoseMap<T>>> {
    let (h, w) = (job.reference.dim(0), job.reference.dim(1));
    let mesh = humanoid::<T>((job.texture.height(), job.texture.width()));
    let maps = render_sequence(&mesh, &job.texture, &job.states, &job.trajectory, (h, w))?;
    Ok(maps
        .into_iter()
        .map(|m| PoseMap {
            pixels: imaging::quantize(&m.pixels),
            ..m
        })
        .collect())
}

/// Windowed DDIM over all frames. At every step each window predicts the
/// noise of its frames; per-frame predictions are averaged over the
/// windows covering the frame before the shared update.
pub fn sample_windows<T: Scalar>(
    model: &Model<T>,
    bundle: &ConditioningBundle<T>,
    z_t: &Tensor<T>,
    window: usize,
    stride: usize,
    sampler: &SamplerConfig,
) -> Result<Tensor<T>> {
    if sampler.eta != 0.0 {
        return Err(Error::invalid("windowed sampling supports only the deterministic sampler"));
    }
    let n = z_t.dim(0);
    let window = window.min(n);
    let starts = window_starts(n, window, stride.min(window))?;
    let bundles = starts
        .iter()
        .map(|&s| bundle.window(s..s + window))
        .collect::<Result<Vec<_>>>()?;
    let taus = ddim_timesteps(model.schedule.len(), sampler.steps)?;
    let mut z = z_t.clone();
    for (i, &t) in taus.iter().enumerate() {
        let t_prev = taus.get(i + 1).copied().unwrap_or(0);
        let preds = starts
            .iter()
            .zip(&bundles)
            .map(|(&s, b)| model.predict_noise(&slice_frames(&z, s, window)?, &vec![t; window], b, true))
            .collect::<Result<Vec<_>>>()?;
        let eps = aggregate_at(&preds, &starts, n)?;
        z = ddim_step(&z, &eps, t, t_prev, &model.schedule, 0.0, None)?.0;
    }
    Ok(z)
}

/// Synthesizes the frames of a job; a pure function of job, weights and
/// seed. Errors carry the stage they came from.
pub fn synthesize<T: Scalar>(model: &Model<T>, job: &InferenceJob<T>) -> Result<Vec<Tensor<T>>> {
    job.validate()?;
    let n = job.len();
    let poses = render_job_poses(job).stage("pose rendering")?;
    let pose_maps = Tensor::stack(&poses.iter().map(|p| p.pixels.clone()).collect::<Vec<_>>())?;
    let bg = encode_all(model, &job.backgrounds, false).stage("background encoding")?;
    let inputs = WindowInputs {
        pose_maps,
        reference: job.reference.clone(),
        reference_mask: job.mask.clone(),
        background: bg,
    };
    let bundle = model.build_bundle(&inputs).stage("conditioning")?;
    let [h, w, c] = model.codec.latent_shape(job.reference.dim(0), job.reference.dim(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let z_t = Tensor::randn(&[n, h, w, c], &mut rng);
    let sampler = SamplerConfig {
        steps: job.sampler_steps,
        eta: 0.0,
        seed: job.seed,
    };
    let z0 = sample_windows(model, &bundle, &z_t, job.window, job.stride, &sampler).stage("sampling")?;
    let frames = z0
        .unstack()
        .chunks(8)
        .map(|c| model.codec.decode_batch(&Tensor::stack(c)?))
        .collect::<Result<Vec<_>>>()
        .stage("decoding")?;
    Ok(frames.iter().flat_map(|f| f.unstack()).collect())
}

/// Output manifest of a synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub config_hash: String,
    pub window: usize,
    pub stride: usize,
    pub sampler_steps: usize,
    pub files: Vec<String>,
}

/// Writes `frame_XXXX.png` files and `manifest.json` into `dir`.
pub fn write_frames<T: Scalar>(dir: &Path, frames: &[Tensor<T>], model: &Model<T>, job: &InferenceJob<T>) -> Result<SynthesisManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        imaging::save_png_rgb(&dir.join(&name), f).stage("writing frames")?;
        files.push(name);
    }
    let manifest = SynthesisManifest {
        frames: frames.len(),
        height: frames.first().map_or(0, |f| f.dim(0)),
        width: frames.first().map_or(0, |f| f.dim(1)),
        seed: job.seed,
        config_hash: model.config.hash(),
        window: job.window,
        stride: job.stride,
        sampler_steps: job.sampler_steps,
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("synthesis manifest", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Debug overlay: the pose map where it covers the body, the background
/// elsewhere.
pub fn composite_preview<T: Scalar>(pose: &PoseMap<T>, background: &Tensor<T>) -> Result<Tensor<T>> {
    imaging::composite(&pose.pixels, background, &pose.coverage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_with_end_alignment() {
        assert_eq!(window_starts(10, 4, 2).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(window_starts(9, 4, 4).unwrap(), vec![0, 4, 5]);
        assert_eq!(window_starts(3, 8, 4).unwrap(), vec![0]);
        assert!(window_starts(5, 2, 3).is_err());
    }

    #[test]
    fn gaps_are_rejected() {
        let o = vec![Tensor::<f64>::zeros(&[2, 1])];
        assert!(aggregate_at(&o, &[0], 3).is_err());
        assert!(aggregate_windows(&o, 3, 2, 1).is_err());
    }
}
