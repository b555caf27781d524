use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfsynth::checkpoint::read_meta;
use cfsynth::evalkit::read_report;
use cfsynth::imaging::load_png_rgb;
use cfsynth::pipeline::{render_job_poses, JobSpec, SynthesisManifest};

const DATASET: &str = r#"
[[clip]]
identity_seed = 1
motion_seed = 2
camera = "orbit"
frames = 3
image_size = 32

[[clip]]
identity_seed = 3
motion_seed = 4
camera = "pan"
frames = 3
image_size = 32
"#;

const MODEL: &str = r#"
[model]
image_size = 32
channels = [8, 8, 8]
time_dim = 16
pose_channels = 4
identity_tokens = 2
identity_dim = 8

[model.codec]
scale_factor = 8
latent_channels = 4
widths = [4, 4, 8, 8]
"#;

fn cfsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsynth"))
        .args(args)
        .args(["--log-level", "error"])
        .env_remove("CFSYNTH_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen_data(root: &Path) -> PathBuf {
    let spec = write(&root.join("dataset.toml"), DATASET);
    let data = root.join("data");
    ok(&cfsynth(&["gen-data", "--config", s(&spec), "--out", s(&data)]));
    data
}

/// Trains a one-step phase-1 model and returns its checkpoint.
fn train_tiny(root: &Path, data: &Path) -> PathBuf {
    let cfg = format!(
        "data = {:?}\n[train]\nphase = 1\nsteps = 1\nwindow = 2\n[codec_train]\nsteps = 2\n{MODEL}",
        s(data)
    );
    let cfg = write(&root.join("train.toml"), &cfg);
    let out = root.join("run");
    ok(&cfsynth(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "4"]));
    out.join("checkpoint_000001.ckpt")
}

fn job_file(root: &Path, frames: usize) -> PathBuf {
    let text = format!(
        "frames = {frames}\nwindow = 2\nsampler_steps = 2\n[source.scene]\nidentity_seed = 5\nmotion_seed = 6\ncamera = \"orbit\"\nframes = 3\nimage_size = 32\n"
    );
    write(&root.join(format!("job{frames}.toml")), &text)
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = gen_data(a.path());
    let db = gen_data(b.path());
    assert!(da.join("clip_000/manifest.json").is_file());
    assert!(da.join("clip_001/manifest.json").is_file());
    assert_eq!(files(&da), files(&db));

    let reseeded = a.path().join("reseeded");
    let spec = a.path().join("dataset.toml");
    ok(&cfsynth(&["gen-data", "--config", s(&spec), "--out", s(&reseeded), "--seed", "9"]));
    assert_ne!(files(&da), files(&reseeded));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let ckpt = train_tiny(dir.path(), &data);
    let meta = read_meta(&ckpt).unwrap();
    assert_eq!((meta.phase, meta.step, meta.seed), (1, 1, 4));
    let run = dir.path().join("run");
    let ckpts: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint_"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert_eq!(std::fs::read_to_string(run.join("codec_log.jsonl")).unwrap().lines().count(), 2);

    // Phase 2 on top of the phase-1 checkpoint.
    let cfg = format!(
        "data = {:?}\ninit = {:?}\n[train]\nphase = 2\nsteps = 3\nwindow = 2\n{MODEL}",
        s(&data),
        s(&ckpt)
    );
    let cfg = write(&dir.path().join("phase2.toml"), &cfg);
    let out2 = dir.path().join("run2");
    ok(&cfsynth(&["train", "--config", s(&cfg), "--out", s(&out2)]));
    assert_eq!(std::fs::read_to_string(out2.join("train_log.jsonl")).unwrap().lines().count(), 3);
    assert_eq!(read_meta(&out2.join("checkpoint_000003.ckpt")).unwrap().phase, 2);
}

#[test]
fn bad_inputs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = format!("data = {:?}\n[train]\nphase = 2\nsteps = 1\n", s(&data));
    let cfg = write(&dir.path().join("p2.toml"), &cfg);
    let out = cfsynth(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase 1"));

    let bad = write(&dir.path().join("bad.toml"), "[train]\nstepz = 3\n");
    assert_eq!(cfsynth(&["train", "--config", s(&bad), "--out", s(&dir.path().join("y"))]).status.code(), Some(1));
    assert_eq!(cfsynth(&["train", "--out", "z"]).status.code(), Some(1));
    assert_eq!(cfsynth(&["no-such-command"]).status.code(), Some(1));

    let job = job_file(dir.path(), 1);
    let missing = dir.path().join("missing.ckpt");
    let out = cfsynth(&["synthesize", "--config", s(&job), "--checkpoint", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = cfsynth(&["evaluate", "--pred", s(&empty), "--gt", s(&data.join("clip_000"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = cfsynth(&["evaluate", "--pred", s(&data.join("clip_000/pose")), "--gt", s(&data.join("clip_000/pose/0000.png"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn help_documents_the_global_flags() {
    let out = cfsynth(&["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--out", "--log-level", "CFSYNTH_DATA_ROOT"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn render_pose_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let job = job_file(dir.path(), 3);
    let out = dir.path().join("poses");
    ok(&cfsynth(&["render-pose", "--config", s(&job), "--out", s(&out)]));
    let names: Vec<String> = files(&out).iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    assert_eq!(names.len(), 6);
    assert_eq!(names.iter().filter(|n| n.starts_with("pose_")).count(), 3);

    let lib = render_job_poses(&JobSpec::load(&job).unwrap().build::<f32>(dir.path(), 0).unwrap()).unwrap();
    for (i, m) in lib.iter().enumerate() {
        let png: cfsynth::TensorF32 = load_png_rgb(&out.join(format!("pose_{i:04}.png"))).unwrap();
        assert!(png.max_abs_diff(&m.pixels) < 1e-6, "pose map {i}");
    }

    let again = dir.path().join("poses2");
    ok(&cfsynth(&["render-pose", "--config", s(&job), "--out", s(&again)]));
    assert_eq!(files(&out), files(&again));
}

#[test]
fn synthesize_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let ckpt = train_tiny(dir.path(), &data);
    let job = job_file(dir.path(), 1);
    let out = dir.path().join("synth");
    ok(&cfsynth(&["synthesize", "--config", s(&job), "--checkpoint", s(&ckpt), "--out", s(&out)]));
    let manifest: SynthesisManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((manifest.frames, manifest.height, manifest.width), (1, 32, 32));
    assert_eq!(manifest.seed, 4, "seed defaults to the checkpoint's");
    assert_eq!(manifest.config_hash, read_meta(&ckpt).unwrap().config_hash);
    let frame: cfsynth::TensorF32 = load_png_rgb(&out.join("frame_0000.png")).unwrap();
    assert_eq!(frame.shape(), &[32, 32, 3]);

    // Identical inputs give a perfect report.
    let gt = data.join("clip_000");
    let report = dir.path().join("report.jsonl");
    ok(&cfsynth(&["evaluate", "--pred", s(&gt.join("frames")), "--gt", s(&gt), "--out", s(&report)]));
    let r = read_report(&report).unwrap();
    assert_eq!(r.frames.len(), 3);
    assert_eq!(r.summary.l1, 0.0);
    assert_eq!(r.summary.psnr, cfsynth::evalkit::PSNR_CAP);
    assert!((r.summary.ssim - 1.0).abs() < 1e-12);

    // Summary means equal the mean of the per-frame values.
    let report2 = dir.path().join("report2.jsonl");
    ok(&cfsynth(&["evaluate", "--pred", s(&gt.join("pose")), "--gt", s(&gt), "--out", s(&report2)]));
    let r = read_report(&report2).unwrap();
    let mean = |f: fn(&cfsynth::evalkit::FrameMetrics) -> f64| r.frames.iter().map(f).sum::<f64>() / r.frames.len() as f64;
    assert!((r.summary.l1 - mean(|m| m.l1)).abs() < 1e-12);
    assert!((r.summary.psnr - mean(|m| m.psnr)).abs() < 1e-12);
    assert!((r.summary.ssim - mean(|m| m.ssim)).abs() < 1e-12);
    assert!(r.summary.l1 > 0.0);

    // A frame-count mismatch is a validation error.
    let out = cfsynth(&["evaluate", "--pred", s(&out), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(1));
}
