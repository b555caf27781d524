//! Clip records, the synthetic scene generator, manifests and batching.
//!
//! A clip holds per-frame ground-truth frames, binary foreground masks,
//! humanless background plates, pose maps and the body/camera state that
//! produced them. Synthetic frames satisfy
//! `frame = render * mask + plate * (1 - mask)` bit-exactly, including
//! after a PNG round trip, because renders and plates are quantized to
//! 8-bit levels before compositing.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_render::mesh::joints;
use crate::body_render::{
    complete_texture, extract_partial_texture, humanoid, pose_mesh, render_sequence, render_with_correspondence,
    BodyMesh, BodyModelState, CameraPose, Intrinsics, NearestValid, RenderOptions, UVTextureMap,
};
use crate::error::{Error, Result};
use crate::imaging::{self, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Texture resolution of synthetic bodies: each atlas face gets 8x8 texels.
pub const TEXTURE_SIZE: (usize, usize) = (48, 64);
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraPath {
    Static,
    /// One full horizontal revolution over the clip.
    Orbit,
    /// Sideways translation with a matching background shift.
    Pan,
}

/// Recipe for one synthetic clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// Seeds the body texture.
    pub identity_seed: u64,
    /// Seeds joint trajectories and the background palette.
    pub motion_seed: u64,
    pub camera: CameraPath,
    pub frames: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Scales every joint swing; 0 gives a motionless body.
    #[serde(default = "default_motion")]
    pub motion_amplitude: f64,
}

fn default_image_size() -> usize {
    64
}

fn default_motion() -> f64 {
    1.0
}

impl SyntheticSceneSpec {
    pub fn new(identity_seed: u64, motion_seed: u64, camera: CameraPath, frames: usize) -> Self {
        Self {
            identity_seed,
            motion_seed,
            camera,
            frames,
            image_size: default_image_size(),
            motion_amplitude: default_motion(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("a clip needs at least one frame"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(Error::invalid(format!("image size {} must be a multiple of 8, at least 16", self.image_size)));
        }
        if !self.motion_amplitude.is_finite() || self.motion_amplitude < 0.0 {
            return Err(Error::invalid("motion amplitude must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn identity_name(&self) -> String {
        format!("synthetic-{:016x}", self.identity_seed)
    }

    /// Body state at frame `i`. Motion is periodic in the clip length, so
    /// frame `N` repeats frame 0.
    pub fn state<T: Scalar>(&self, i: usize) -> Result<BodyModelState<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.motion_seed);
        // (joint, axis, base amplitude in radians)
        let swings = [
            (joints::ROOT, 1, 0.3),
            (joints::NECK, 1, 0.3),
            (joints::L_SHOULDER, 2, 0.8),
            (joints::L_ELBOW, 2, 0.6),
            (joints::R_SHOULDER, 2, 0.8),
            (joints::R_ELBOW, 2, 0.6),
            (joints::L_HIP, 0, 0.5),
            (joints::R_HIP, 0, 0.5),
        ];
        let phase_t = TAU * (i % self.frames) as f64 / self.frames as f64;
        let mut theta = vec![[T::zero(); 3]; joints::COUNT];
        for (j, axis, amp) in swings {
            let scale: f64 = rng.random_range(0.5..1.0);
            let phase: f64 = rng.random_range(0.0..TAU);
            theta[j][axis] = T::c(self.motion_amplitude * amp * scale * (phase_t + phase).sin());
        }
        BodyModelState::new(theta, i)
    }

    pub fn camera<T: Scalar>(&self, i: usize) -> Result<CameraPose<T>> {
        let s = self.image_size;
        let k = Intrinsics::centered(T::c(1.4 * s as f64), s, s);
        let target = [0.0, -0.05, 0.0];
        let c = |v: [f64; 3]| v.map(T::c);
        let up = c([0.0, 1.0, 0.0]);
        match self.camera {
            CameraPath::Static => CameraPose::look_at(c([0.0, 0.2, 4.0]), c(target), up, k),
            CameraPath::Orbit => {
                let turns = T::from_usize_lossy(i) / T::from_usize_lossy(self.frames);
                CameraPose::orbit(c(target), T::c(4.0), T::c(0.25), turns, k)
            }
            CameraPath::Pan => {
                let x = 0.8 * (i as f64 / self.frames as f64 - 0.5);
                CameraPose::look_at(c([x, 0.2, 4.0]), c([x, target[1], target[2]]), up, k)
            }
        }
    }

    /// Horizontal background shift in pixels at frame `i`.
    pub fn plate_shift(&self, i: usize) -> usize {
        let w = self.image_size;
        match self.camera {
            CameraPath::Static => 0,
            CameraPath::Orbit => (i * w / self.frames) % w,
            CameraPath::Pan => (i * w / (2 * self.frames)) % w,
        }
    }

    /// Procedural plate: vertical gradient times a checkerboard, periodic
    /// horizontally with the image width.
    pub fn plate<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let s = self.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.motion_seed.rotate_left(17) ^ self.identity_seed.wrapping_mul(31));
        let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
        let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.7));
        let cell = (s / 8).max(1);
        let shift = self.plate_shift(i);
        let img = Tensor::from_fn(&[s, s, 3], |idx| {
            let (p, ch) = (idx / 3, idx % 3);
            let (y, x) = (p / s, p % s);
            let xs = (x + shift) % s;
            let t = y as f64 / (s - 1) as f64;
            let checker = if (xs / cell + y / cell) % 2 == 0 { 1.0 } else { 0.85 };
            let wave = 0.05 * (TAU * xs as f64 / s as f64).sin();
            let v = (top[ch] * (1.0 - t) + bottom[ch] * t) * checker + wave;
            T::c(v.clamp(0.0, 1.0))
        });
        imaging::quantize(&img)
    }

    /// Ground-truth body texture: a base colour per part, brightness per
    /// face and a seeded stripe pattern.
    pub fn texture<T: Scalar>(&self) -> Result<UVTextureMap<T>> {
        let (th, tw) = TEXTURE_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(self.identity_seed);
        let parts = 8;
        let faces = 6;
        let base: Vec<[f64; 3]> = (0..parts).map(|_| std::array::from_fn(|_| rng.random_range(0.15..0.95))).collect();
        let shade: Vec<f64> = (0..faces).map(|_| rng.random_range(0.7..1.0)).collect();
        let period = rng.random_range(2..5usize);
        let horizontal = rng.random_bool(0.5);
        let tex = Tensor::from_fn(&[th, tw, 3], |idx| {
            let (p, ch) = (idx / 3, idx % 3);
            let (r, c) = (p / tw, p % tw);
            let part = c * parts / tw;
            let face = r * faces / th;
            let stripe_pos = if horizontal { r } else { c };
            let stripe = if (stripe_pos / period) % 2 == 0 { 1.0 } else { 0.6 };
            T::c((base[part][ch] * shade[face] * stripe).clamp(0.0, 1.0))
        });
        UVTextureMap::complete(imaging::quantize(&tex))
    }
}

/// One clip held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord<T> {
    pub identity: String,
    /// `[H, W, 3]` each.
    pub frames: Vec<Tensor<T>>,
    pub masks: Vec<Mask>,
    pub plates: Vec<Tensor<T>>,
    /// Control renders from the texture estimated on the reference frame.
    pub pose_maps: Vec<Tensor<T>>,
    pub states: Vec<BodyModelState<T>>,
    pub cameras: Vec<CameraPose<T>>,
    /// Texture the pose maps were rendered with, when known.
    pub texture: Option<UVTextureMap<T>>,
}

impl<T: Scalar> ClipRecord<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.dim(0), f.dim(1)))
    }

    /// Reference image: frame 0 with the background zeroed.
    pub fn reference(&self) -> Result<(Tensor<T>, Mask)> {
        let (f, m) = (self.frames.first(), self.masks.first());
        match (f, m) {
            (Some(f), Some(m)) => Ok((imaging::apply_mask(f, m)?, m.clone())),
            _ => Err(Error::invalid("empty clip has no reference frame")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::ClipInvariant {
                frame: 0,
                reason: "clip has no frames".into(),
            });
        }
        let lens = [
            ("masks", self.masks.len()),
            ("plates", self.plates.len()),
            ("pose maps", self.pose_maps.len()),
            ("body states", self.states.len()),
            ("cameras", self.cameras.len()),
        ];
        for (what, len) in lens {
            if len != n {
                return Err(Error::ClipInvariant {
                    frame: len.min(n),
                    reason: format!("{n} frames but {len} {what}"),
                });
            }
        }
        let (h, w) = self.size();
        let bad = |frame: usize, reason: String| Error::ClipInvariant { frame, reason };
        for i in 0..n {
            for (what, img) in [("frame", &self.frames[i]), ("plate", &self.plates[i]), ("pose map", &self.pose_maps[i])] {
                if img.shape() != [h, w, 3] {
                    return Err(bad(i, format!("{what} has shape {:?}, expected [{h}, {w}, 3]", img.shape())));
                }
                if img.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                    return Err(bad(i, format!("{what} has values outside [0, 1]")));
                }
            }
            let m = &self.masks[i];
            if (m.height(), m.width()) != (h, w) {
                return Err(bad(i, format!("mask is {}x{}, expected {h}x{w}", m.height(), m.width())));
            }
            self.states[i].validate(joints::COUNT).map_err(|e| bad(i, e.to_string()))?;
            self.cameras[i].validate().map_err(|e| bad(i, e.to_string()))?;
        }
        Ok(())
    }

    /// Every element mirrored left to right.
    pub fn flip_frame(&self, i: usize) -> Result<(Tensor<T>, Mask, Tensor<T>, Tensor<T>)> {
        Ok((
            self.frames[i].flip_horizontal()?,
            self.masks[i].flip_horizontal(),
            self.plates[i].flip_horizontal()?,
            self.pose_maps[i].flip_horizontal()?,
        ))
    }
}

/// Foreground render, mask, plate and composited frame for frame `i`
/// using the ground-truth texture.
pub struct RenderedFrame<T> {
    pub render: Tensor<T>,
    pub mask: Mask,
    pub plate: Tensor<T>,
    pub frame: Tensor<T>,
}

pub fn render_synthetic_frame<T: Scalar>(
    spec: &SyntheticSceneSpec,
    mesh: &BodyMesh<T>,
    texture: &UVTextureMap<T>,
    i: usize,
) -> Result<RenderedFrame<T>> {
    let s = spec.image_size;
    let posed = pose_mesh(mesh, &spec.state(i)?)?;
    let (pm, _) = render_with_correspondence(&posed, texture, &spec.camera(i)?, (s, s), &RenderOptions::default())?;
    let render = imaging::quantize(&pm.pixels);
    let plate = spec.plate(i);
    let frame = imaging::composite(&render, &plate, &pm.coverage)?;
    Ok(RenderedFrame {
        render,
        mask: pm.coverage,
        plate,
        frame,
    })
}

/// Renders a synthetic clip. The pose maps use a texture re-estimated
/// from frame 0 (observed pixels scattered into UV space, holes filled by
/// nearest valid texel), as they would be for a real reference photo.
pub fn generate_synthetic_clip<T: Scalar>(spec: &SyntheticSceneSpec) -> Result<ClipRecord<T>> {
    spec.validate()?;
    let s = spec.image_size;
    let mesh = humanoid::<T>(TEXTURE_SIZE);
    let truth = spec.texture::<T>()?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut plates = Vec::with_capacity(spec.frames);
    let mut states = Vec::with_capacity(spec.frames);
    let mut cameras = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let r = render_synthetic_frame(spec, &mesh, &truth, i)?;
        frames.push(r.frame);
        masks.push(r.mask);
        plates.push(r.plate);
        states.push(spec.state(i)?);
        cameras.push(spec.camera(i)?);
    }
    let posed0 = pose_mesh(&mesh, &states[0])?;
    let (_, corr) = render_with_correspondence(&posed0, &truth, &cameras[0], (s, s), &RenderOptions::default())?;
    let reference = imaging::apply_mask(&frames[0], &masks[0])?;
    let partial = extract_partial_texture(&reference, &corr, TEXTURE_SIZE)?;
    let estimated = complete_texture(&partial, &NearestValid)?;
    let pose_maps = render_sequence(&mesh, &estimated, &states, &cameras, (s, s))?
        .into_iter()
        .map(|pm| imaging::quantize(&pm.pixels))
        .collect();
    let clip = ClipRecord {
        identity: spec.identity_name(),
        frames,
        masks,
        plates,
        pose_maps,
        states,
        cameras,
        texture: Some(estimated),
    };
    clip.validate()?;
    Ok(clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: String,
    pub mask: String,
    pub plate: String,
    pub pose: String,
    /// Axis-angle rotation per joint.
    pub state: Vec<[f64; 3]>,
    /// Row-major rotation, translation, then `fx fy cx cy`.
    pub camera: Vec<f64>,
}

/// On-disk clip description. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub version: u32,
    pub identity: String,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub texture: Option<String>,
    #[serde(default)]
    pub spec: Option<SyntheticSceneSpec>,
    pub frames: Vec<FrameEntry>,
}

fn camera_numbers<T: Scalar>(c: &CameraPose<T>) -> Vec<f64> {
    let k = &c.intrinsics;
    c.rotation
        .iter()
        .flatten()
        .chain(&c.translation)
        .chain([&k.fx, &k.fy, &k.cx, &k.cy])
        .map(|v| v.f64())
        .collect()
}

fn camera_from_numbers<T: Scalar>(n: &[f64]) -> Result<CameraPose<T>> {
    if n.len() != 16 {
        return Err(Error::invalid(format!("camera needs 16 numbers, got {}", n.len())));
    }
    let t = |i: usize| T::c(n[i]);
    Ok(CameraPose {
        rotation: [[t(0), t(1), t(2)], [t(3), t(4), t(5)], [t(6), t(7), t(8)]],
        translation: [t(9), t(10), t(11)],
        intrinsics: Intrinsics {
            fx: t(12),
            fy: t(13),
            cx: t(14),
            cy: t(15),
        },
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes PNG assets and `manifest.json` under `dir`; returns the manifest
/// path.
pub fn write_clip<T: Scalar>(dir: &Path, clip: &ClipRecord<T>, spec: Option<&SyntheticSceneSpec>) -> Result<PathBuf> {
    clip.validate()?;
    for sub in ["frames", "masks", "plates", "pose"] {
        create_dir(&dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(clip.len());
    for i in 0..clip.len() {
        let name = format!("{i:04}.png");
        let e = FrameEntry {
            frame: format!("frames/{name}"),
            mask: format!("masks/{name}"),
            plate: format!("plates/{name}"),
            pose: format!("pose/{name}"),
            state: clip.states[i].theta.iter().map(|r| r.map(|v| v.f64())).collect(),
            camera: camera_numbers(&clip.cameras[i]),
        };
        imaging::save_png_rgb(&dir.join(&e.frame), &clip.frames[i])?;
        clip.masks[i].save_png(&dir.join(&e.mask))?;
        imaging::save_png_rgb(&dir.join(&e.plate), &clip.plates[i])?;
        imaging::save_png_rgb(&dir.join(&e.pose), &clip.pose_maps[i])?;
        entries.push(e);
    }
    let texture = match &clip.texture {
        Some(t) => {
            t.save_png(&dir.join("texture.png"))?;
            Some("texture.png".to_string())
        }
        None => None,
    };
    let (height, width) = clip.size();
    let manifest = ClipManifest {
        version: MANIFEST_VERSION,
        identity: clip.identity.clone(),
        height,
        width,
        texture,
        spec: spec.cloned(),
        frames: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("clip manifest", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<ClipManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: ClipManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("clip manifest", format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format("clip manifest", format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

/// Loads and fully validates a clip. Failures name the offending frame.
pub fn load_clip<T: Scalar>(manifest_path: &Path) -> Result<ClipRecord<T>> {
    let m = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let at = |frame: usize| move |e: Error| Error::ClipInvariant { frame, reason: e.to_string() };
    let n = m.frames.len();
    let mut clip = ClipRecord {
        identity: m.identity.clone(),
        frames: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        plates: Vec::with_capacity(n),
        pose_maps: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        cameras: Vec::with_capacity(n),
        texture: None,
    };
    for (i, e) in m.frames.iter().enumerate() {
        clip.frames.push(imaging::load_png_rgb(&root.join(&e.frame)).map_err(at(i))?);
        clip.masks.push(Mask::load_png(&root.join(&e.mask)).map_err(at(i))?);
        clip.plates.push(imaging::load_png_rgb(&root.join(&e.plate)).map_err(at(i))?);
        clip.pose_maps.push(imaging::load_png_rgb(&root.join(&e.pose)).map_err(at(i))?);
        let theta = e.state.iter().map(|r| r.map(T::c)).collect();
        clip.states.push(BodyModelState { theta, frame_index: i });
        clip.cameras.push(camera_from_numbers(&e.camera).map_err(at(i))?);
    }
    if let Some(t) = &m.texture {
        clip.texture = Some(UVTextureMap::load_png(&root.join(t))?);
    }
    clip.validate()?;
    if clip.size() != (m.height, m.width) {
        return Err(Error::ClipInvariant {
            frame: 0,
            reason: format!("frames are {:?}, manifest declares {}x{}", clip.size(), m.height, m.width),
        });
    }
    Ok(clip)
}

/// One training window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    /// `[F, H, W, 3]` ground-truth frames.
    pub frames: Tensor<T>,
    pub masks: Vec<Mask>,
    /// `[F, H, W, 3]` background plates.
    pub plates: Tensor<T>,
    /// `[F, H, W, 3]`
    pub pose_maps: Tensor<T>,
    /// Clip reference frame times its mask.
    pub reference: Tensor<T>,
    pub reference_mask: Mask,
    pub flipped: bool,
    pub clip: usize,
    pub start: usize,
}

/// Cuts the window `start..start+window` of `clip`, optionally mirrored.
pub fn window_sample<T: Scalar>(
    clip: &ClipRecord<T>,
    clip_index: usize,
    start: usize,
    window: usize,
    flip: bool,
) -> Result<TrainSample<T>> {
    if window == 0 || start + window > clip.len() {
        return Err(Error::invalid(format!("window {start}+{window} exceeds clip of {} frames", clip.len())));
    }
    let (mut reference, mut reference_mask) = clip.reference()?;
    let mut frames = Vec::with_capacity(window);
    let mut masks = Vec::with_capacity(window);
    let mut plates = Vec::with_capacity(window);
    let mut poses = Vec::with_capacity(window);
    for i in start..start + window {
        if flip {
            let (f, m, p, q) = clip.flip_frame(i)?;
            frames.push(f);
            masks.push(m);
            plates.push(p);
            poses.push(q);
        } else {
            frames.push(clip.frames[i].clone());
            masks.push(clip.masks[i].clone());
            plates.push(clip.plates[i].clone());
            poses.push(clip.pose_maps[i].clone());
        }
    }
    if flip {
        reference = reference.flip_horizontal()?;
        reference_mask = reference_mask.flip_horizontal();
    }
    Ok(TrainSample {
        frames: Tensor::stack(&frames)?,
        masks,
        plates: Tensor::stack(&plates)?,
        pose_maps: Tensor::stack(&poses)?,
        reference,
        reference_mask,
        flipped: flip,
        clip: clip_index,
        start,
    })
}

/// Samples `batch_size` contiguous windows of `window` frames. Clips
/// shorter than the window are skipped with a warning. Each sample is
/// mirrored with probability `flip_prob`, consistently across frames,
/// masks, plates, pose maps and the reference.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    records: &[ClipRecord<T>],
    window: usize,
    batch_size: usize,
    flip_prob: f64,
    rng: &mut R,
) -> Result<Vec<TrainSample<T>>> {
    if window == 0 || batch_size == 0 {
        return Err(Error::invalid("window and batch size must be positive"));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::invalid("flip probability outside [0, 1]"));
    }
    let eligible: Vec<usize> = (0..records.len())
        .filter(|&i| {
            let ok = records[i].len() >= window;
            if !ok {
                log::warn!(
                    "skipping clip {} ({} frames) shorter than window {window}",
                    records[i].identity,
                    records[i].len()
                );
            }
            ok
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!("no clip has at least {window} frames")));
    }
    (0..batch_size)
        .map(|_| {
            let c = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=records[c].len() - window);
            let flip = rng.random_bool(flip_prob);
            window_sample(&records[c], c, start, window, flip)
        })
        .collect()
}

/// Specification file for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(rename = "clip")]
    pub clips: Vec<SyntheticSceneSpec>,
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::format("dataset spec", e.to_string()))?;
        if spec.clips.is_empty() {
            return Err(Error::invalid("dataset spec lists no clips"));
        }
        for c in &spec.clips {
            c.validate()?;
        }
        Ok(spec)
    }
}

/// Generates every clip of `spec` into `out/clip_XXX`; returns the manifest
/// paths.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let clip = generate_synthetic_clip::<f32>(c)?;
            write_clip(&out.join(format!("clip_{i:03}")), &clip, Some(c))
        })
        .collect()
}

/// Finds clip manifests directly below `dir` (or `dir` itself).
pub fn discover_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    let own = dir.join("manifest.json");
    if own.is_file() {
        return Ok(vec![own]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join("manifest.json")))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::invalid(format!("no clip manifests under {}", dir.display())));
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_motionless_clip_repeats() {
        let mut spec = SyntheticSceneSpec::new(1, 2, CameraPath::Static, 3);
        spec.motion_amplitude = 0.0;
        let clip = generate_synthetic_clip::<f32>(&spec).unwrap();
        assert_eq!(clip.frames[0], clip.frames[2]);
        assert!(clip.masks[0].count() > 100, "body should be visible");
    }

    #[test]
    fn orbit_is_periodic() {
        let spec = SyntheticSceneSpec::new(4, 5, CameraPath::Orbit, 4);
        let mesh = humanoid::<f64>(TEXTURE_SIZE);
        let tex = spec.texture::<f64>().unwrap();
        let a = render_synthetic_frame(&spec, &mesh, &tex, 0).unwrap();
        let b = render_synthetic_frame(&spec, &mesh, &tex, 4).unwrap();
        assert_eq!(a.frame, b.frame);
    }

    #[test]
    fn short_clips_are_skipped() {
        let clip = generate_synthetic_clip::<f32>(&SyntheticSceneSpec::new(1, 1, CameraPath::Pan, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_batch(std::slice::from_ref(&clip), 3, 1, 0.0, &mut rng).is_err());
        let b = make_batch(std::slice::from_ref(&clip), 2, 2, 0.5, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
    }
}
