//! Command-line surface: scene generation, training, rendering, evaluation
//! and mesh export.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cameras::{procrustes_align, CameraPose};
use crate::error::{InvrenderError, Result};
use crate::mesh::{extract_mesh, write_ply};
use crate::metrics::{psnr, ssim};
use crate::render::write_png_srgb;
use crate::scenegen::{generate_scene, load_dataset, parse_illum, SceneSpec};
use crate::trainer::{csv_header, csv_line, schedule_at, TrainConfig, TrainState};

#[derive(Parser)]
#[command(
    name = "invrender",
    about = "Inverse rendering of shape, BRDF, illumination and camera poses from coarsely posed images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth poses and illumination
    Gen(GenArgs),
    /// Optimize a field and cameras against a dataset
    Train(TrainArgs),
    /// Render trained views, turntables, or relit variants
    Render(RenderArgs),
    /// Image metrics on held-out views plus pose errors
    Eval(EvalArgs),
    /// Export the density level set as an ASCII PLY mesh
    Mesh(MeshArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene preset: textured_sphere | textured_box | half_metallic_sphere | lambertian_sphere
    #[arg(long, default_value = "textured_sphere")]
    scene: String,
    #[arg(long, default_value_t = 24)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Rotation jitter (degrees) for the poses_init.txt sidecar
    #[arg(long, default_value_t = 0.0)]
    jitter_deg: f64,
    /// Translation jitter (scene units) for poses_init.txt
    #[arg(long, default_value_t = 0.0)]
    jitter_trans: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `gen` or compatible)
    #[arg(long)]
    data: PathBuf,
    /// Plain-text key = value training config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual config overrides, e.g. --set total_steps=5000
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed when given
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv, checkpoint.ckpt and poses_est.txt
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint every N steps (0 = only at the end)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Print a progress line every N steps
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View index to render (ignored for --turntable > 0)
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Long-side resolution; defaults to the capture resolution
    #[arg(long)]
    long: Option<usize>,
    /// Number of turntable frames orbiting the first view's camera
    #[arg(long, default_value_t = 0)]
    turntable: usize,
    /// Replace the view's illumination with the first row of this file
    #[arg(long)]
    illum: Option<PathBuf>,
    /// Render the view-dependent radiance head instead of the BRDF shading
    #[arg(long, default_value_t = false)]
    radiance: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the per-view metrics CSV here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Steps of held-out camera/illumination fitting before measuring
    #[arg(long, default_value_t = 0)]
    holdout_steps: usize,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Density level defining the surface
    #[arg(long, default_value_t = 10.0)]
    threshold: f64,
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders --help/--version as "errors" with success status
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Mesh(a) => cmd_mesh(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn scene_preset(name: &str) -> Result<SceneSpec> {
    Ok(match name {
        "textured_sphere" => SceneSpec::textured_sphere(),
        "textured_box" => SceneSpec::textured_box(),
        "half_metallic_sphere" => SceneSpec::half_metallic_sphere(),
        "lambertian_sphere" => SceneSpec::lambertian_sphere(),
        _ => {
            return Err(InvrenderError::Config(format!(
                "unknown scene preset `{name}`"
            )))
        }
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = scene_preset(&a.scene)?;
    spec.width = a.size;
    spec.height = a.size;
    spec.init_jitter_deg = a.jitter_deg;
    spec.init_jitter_trans = a.jitter_trans;
    let generated = generate_scene(&spec, a.views, a.seed, &a.out)?;
    println!(
        "wrote {} views of `{}` to {}",
        generated.names.len(),
        a.scene,
        a.out.display()
    );
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_text(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            InvrenderError::Config(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_estimated_poses(state: &TrainState, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("# name eye_x eye_y eye_z focal\n");
    for vi in 0..state.views.len() {
        let pose = state.pose_of(vi);
        let eye = pose.eye();
        let _ = writeln!(
            s,
            "{} {:.17e} {:.17e} {:.17e} {:.17e}",
            state.dataset.views[vi].name, eye[0], eye[1], eye[2], pose.focal
        );
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join("checkpoint.ckpt");
    let mut state = match &a.resume {
        Some(path) => TrainState::load_checkpoint(path, dataset)?,
        None => TrainState::new(dataset, load_config(&a)?)?,
    };
    let total = state.config.total_steps;
    let mut csv = String::from(&csv_header());
    csv.push('\n');

    let mut consecutive_failures = 0usize;
    while state.step < total {
        match state.train_step() {
            Ok(report) => {
                consecutive_failures = 0;
                csv.push_str(&csv_line(state.step - 1, &report));
                csv.push('\n');
                if a.log_every > 0 && (state.step - 1) % a.log_every == 0 {
                    let sched = schedule_at(state.step - 1, &state.config);
                    println!(
                        "step {:>6}/{total}  image {:.4}  mask {:.4}  res {}  m {}",
                        state.step - 1,
                        report.get("image").unwrap_or(0.0),
                        report.get("mask").unwrap_or(0.0),
                        sched.resolution,
                        sched.multiplex_size,
                    );
                }
            }
            Err(InvrenderError::NonFiniteStep { step }) => {
                consecutive_failures += 1;
                eprintln!("step {step}: non-finite loss or gradient, skipped");
                if consecutive_failures > 50 {
                    return Err(InvrenderError::NonFiniteStep { step });
                }
                state.step += 1;
            }
            Err(e) => return Err(e),
        }
        if a.checkpoint_every > 0 && state.step % a.checkpoint_every == 0 {
            state.save_checkpoint(&ckpt_path)?;
        }
    }
    state.save_checkpoint(&ckpt_path)?;
    fs::write(a.out.join("metrics.csv"), csv)?;
    write_estimated_poses(&state, &a.out.join("poses_est.txt"))?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn load_state(checkpoint: &Path, data: &Path) -> Result<TrainState> {
    let dataset = load_dataset(data)?;
    TrainState::load_checkpoint(checkpoint, dataset)
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut state = load_state(&a.checkpoint, &a.data)?;
    fs::create_dir_all(&a.out)?;
    if a.view >= state.views.len() {
        return Err(InvrenderError::Config(format!(
            "view {} out of range ({} views)",
            a.view,
            state.views.len()
        )));
    }
    let dv = &state.dataset.views[a.view];
    let long = a.long.unwrap_or_else(|| dv.width.max(dv.height));
    let blend = if a.radiance { 1.0 } else { 0.0 };

    if let Some(illum_path) = &a.illum {
        let text = fs::read_to_string(illum_path)?;
        let rows = parse_illum(&text, &illum_path.display().to_string())?;
        let (_, illum) = rows.first().ok_or_else(|| InvrenderError::Dataset {
            file: illum_path.display().to_string(),
            reason: "no illumination rows".into(),
        })?;
        state.set_view_illum(a.view, illum);
    }

    if a.turntable > 0 {
        let base = state.pose_of(a.view);
        let eye = base.eye();
        let radius = (eye[0] * eye[0] + eye[1] * eye[1]).sqrt();
        let phi0 = eye[1].atan2(eye[0]);
        for k in 0..a.turntable {
            let phi = phi0 + 2.0 * std::f64::consts::PI * k as f64 / a.turntable as f64;
            let mut pose = CameraPose::new(
                [radius * phi.cos(), radius * phi.sin(), eye[2]],
                base.width,
                base.height,
            );
            pose.focal = base.focal;
            let (w, h, rgb, _) = state.render_image_from(a.view, &pose, long, blend)?;
            write_png_srgb(&a.out.join(format!("turntable_{k:03}.png")), w, h, &rgb)?;
        }
        println!("wrote {} turntable frames to {}", a.turntable, a.out.display());
    } else {
        let (w, h, rgb, alpha) = state.render_image(a.view, long, blend)?;
        let name = &state.dataset.views[a.view].name;
        write_png_srgb(&a.out.join(format!("{name}.png")), w, h, &rgb)?;
        crate::render::write_png_gray(&a.out.join(format!("{name}_alpha.png")), w, h, &alpha)?;
        println!("wrote {name}.png ({w}x{h}) to {}", a.out.display());
    }
    Ok(())
}

/// Per-view image metrics against the mask-premultiplied capture.
pub fn view_metrics(state: &TrainState, view: usize) -> Result<(f64, f64)> {
    let dv = &state.dataset.views[view];
    let long = dv.width.max(dv.height);
    let (w, h, rgb, _) = state.render_image(view, long, 0.0)?;
    let gt: Vec<f64> = dv
        .image
        .iter()
        .enumerate()
        .map(|(i, v)| v * dv.mask[i / 3])
        .collect();
    let clamped: Vec<f64> = rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok((psnr(&clamped, &gt, w, h)?, ssim(&clamped, &gt, w, h)?))
}

/// Pose accuracy of the current member-0 estimates against the dataset's
/// ground truth, Procrustes-aligned.
pub fn pose_metrics(state: &TrainState) -> Result<crate::cameras::AlignmentReport> {
    let mut est = Vec::new();
    let mut reference = Vec::new();
    for vi in 0..state.views.len() {
        let dv = &state.dataset.views[vi];
        if let Some(gt) = dv.gt_pose {
            est.push(state.pose_of(vi));
            reference.push(CameraPose::new(
                crate::scenegen::eye_of_pose(&gt),
                dv.width,
                dv.height,
            ));
        }
    }
    procrustes_align(&est, &reference)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut state = load_state(&a.checkpoint, &a.data)?;
    if a.holdout_steps > 0 {
        state.holdout_protocol(a.holdout_steps)?;
    }
    let eval_views: Vec<usize> = if state.test_views.is_empty() {
        (0..state.views.len()).collect()
    } else {
        state.test_views.clone()
    };

    let mut csv = String::from("view,psnr,ssim\n");
    println!("{:<12} {:>8} {:>8}", "view", "psnr", "ssim");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for &vi in &eval_views {
        let (p, s) = view_metrics(&state, vi)?;
        let name = &state.dataset.views[vi].name;
        println!("{name:<12} {p:>8.2} {s:>8.4}");
        csv.push_str(&format!("{name},{p:.4},{s:.6}\n"));
        sum_p += p;
        sum_s += s;
    }
    let n = eval_views.len() as f64;
    println!("{:<12} {:>8.2} {:>8.4}", "mean", sum_p / n, sum_s / n);
    csv.push_str(&format!("mean,{:.4},{:.6}\n", sum_p / n, sum_s / n));

    match pose_metrics(&state) {
        Ok(report) => {
            println!(
                "pose error: rotation {:.2} ± {:.2} deg, translation {:.4} ± {:.4}",
                report.mean_rotation_deg,
                report.std_rotation_deg,
                report.mean_translation,
                report.std_translation
            );
            csv.push_str(&format!(
                "pose,{:.4},{:.6}\n",
                report.mean_rotation_deg, report.mean_translation
            ));
        }
        Err(InvrenderError::TooFewPoses { .. }) => {
            println!("pose error: not enough ground-truth poses");
        }
        Err(e) => return Err(e),
    }
    if let Some(path) = &a.out {
        fs::write(path, csv)?;
    }
    Ok(())
}

fn cmd_mesh(a: MeshArgs) -> Result<()> {
    let state = load_state(&a.checkpoint, &a.data)?;
    let mesh = extract_mesh(&state.field, &state.store, a.resolution, a.threshold)?;
    write_ply(&a.out, &mesh)?;
    println!(
        "wrote {} vertices / {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from(["invrender", "bogus"]), 2);
        assert_eq!(run_from(["invrender", "gen", "--unknown-flag"]), 2);
        assert_eq!(run_from(["invrender", "train"]), 2); // missing required flags
        assert_eq!(run_from(["invrender", "--help"]), 0);
    }

    #[test]
    fn structured_errors_exit_1() {
        assert_eq!(
            run_from(["invrender", "train", "--data", "/nonexistent", "--out", "/tmp/x"]),
            1
        );
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("d");
        assert_eq!(
            run_from([
                "invrender",
                "gen",
                "--scene",
                "no_such_preset",
                "--out",
                out.to_str().unwrap()
            ]),
            1
        );
    }

    #[test]
    fn gen_then_short_train_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let run_dir = tmp.path().join("run");
        assert_eq!(
            run_from([
                "invrender", "gen",
                "--scene", "textured_sphere",
                "--views", "4",
                "--seed", "3",
                "--size", "16",
                "--out", data.to_str().unwrap(),
            ]),
            0
        );
        assert!(data.join("manifest.txt").exists());
        assert_eq!(
            run_from([
                "invrender", "train",
                "--data", data.to_str().unwrap(),
                "--out", run_dir.to_str().unwrap(),
                "--seed", "3",
                "--set", "total_steps=6",
                "--set", "field_scale=tiny",
                "--set", "patch_side=8",
                "--set", "patches_per_step=1",
                "--set", "samples_per_ray=8",
                "--set", "res_start=16",
                "--set", "res_end=16",
                "--set", "freeze_poses=true",
                "--log-every", "0",
            ]),
            0
        );
        let ckpt = run_dir.join("checkpoint.ckpt");
        assert!(ckpt.exists());
        assert!(run_dir.join("metrics.csv").exists());
        // untrained density: mesh extraction reports the no-surface path
        let ply = tmp.path().join("m.ply");
        assert_eq!(
            run_from([
                "invrender", "mesh",
                "--data", data.to_str().unwrap(),
                "--checkpoint", ckpt.to_str().unwrap(),
                "--out", ply.to_str().unwrap(),
                "--resolution", "16",
                "--threshold", "1e9",
            ]),
            1
        );
    }

    #[test]
    fn config_overrides_and_presets() {
        assert!(scene_preset("textured_box").is_ok());
        assert!(scene_preset("half_metallic_sphere").is_ok());
        assert!(scene_preset("nope").is_err());
        let a = TrainArgs {
            data: PathBuf::new(),
            config: None,
            overrides: vec!["total_steps=123".into(), "lr_network=5e-4".into()],
            seed: Some(9),
            out: PathBuf::new(),
            resume: None,
            checkpoint_every: 0,
            log_every: 0,
        };
        let cfg = load_config(&a).unwrap();
        assert_eq!(cfg.total_steps, 123);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr_network, 5e-4);
        let bad = TrainArgs { overrides: vec!["nonsense".into()], ..a };
        assert!(load_config(&bad).is_err());
    }
}
