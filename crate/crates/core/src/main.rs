//! Command-line entry point: synthesize datasets, train, render novel
//! space-time views under arbitrary sensor configurations, and evaluate.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lidarfield::data::{load_scene, save_scene, Checkpoint};
use lidarfield::metrics::{evaluate_frame, EvalOptions, MetricsReport};
use lidarfield::model::RenderedScan;
use lidarfield::sensor::{range_to_pointcloud, SensorPose};
use lidarfield::synth::{generate_synthetic, SyntheticSpec};
use lidarfield::train::{refine_stage, train, TrainConfig};
use lidarfield::unet::{apply_mask, DEFAULT_MASK_THRESHOLD};
use lidarfield::{Image, RangeScan};
use nalgebra::Matrix4;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "lidarfield",
    about = "Fit a 4D neural field to LiDAR scans and synthesize novel space-time range views",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory from a TOML spec file.
    Synth {
        /// SyntheticSpec TOML file.
        #[arg(long)]
        spec: PathBuf,
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a field on a scene directory and write a checkpoint.
    Train {
        /// Scene directory.
        #[arg(long)]
        scene: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long = "rays-per-batch")]
        rays_per_batch: Option<usize>,
        /// Skip the ray-drop refinement stage.
        #[arg(long = "no-refine", default_value_t = false)]
        no_refine: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
    },
    /// Render a range view at an arbitrary pose, time, and sensor layout.
    Render {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Sensor-to-world pose: 16 whitespace-separated values, row-major.
        #[arg(long)]
        pose: String,
        /// Normalized time in [0, 1].
        #[arg(long)]
        time: f64,
        /// Override the vertical beam count.
        #[arg(long)]
        beams: Option<usize>,
        /// Override the upper elevation limit (degrees).
        #[arg(long = "fov-up")]
        fov_up: Option<f64>,
        /// Override the lower elevation limit (degrees).
        #[arg(long = "fov-down")]
        fov_down: Option<f64>,
        /// Override the azimuth column count.
        #[arg(long)]
        azimuths: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a scene's held-out frames.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Apply the ground-truth ray-drop mask to the image metrics.
        #[arg(long = "gt-mask", default_value_t = false)]
        gt_mask: bool,
        /// Report output file.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Train {
            scene,
            out,
            iters,
            rays_per_batch,
            no_refine,
            seed,
            preset,
        } => cmd_train(&scene, &out, iters, rays_per_batch, no_refine, seed, preset),
        Command::Render {
            ckpt,
            pose,
            time,
            beams,
            fov_up,
            fov_down,
            azimuths,
            out,
        } => cmd_render(&ckpt, &pose, time, beams, fov_up, fov_down, azimuths, &out),
        Command::Eval {
            ckpt,
            scene,
            gt_mask,
            report,
        } => cmd_eval(&ckpt, &scene, gt_mask, &report),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn echo_and_save_config<T: Serialize>(label: &str, config: &T, path: &Path) -> anyhow::Result<()> {
    let toml = toml::to_string_pretty(config).context("encode resolved config")?;
    println!("# resolved {label} config\n{toml}");
    fs::write(path, toml).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("read spec {}", spec_path.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text).context("parse synthetic spec")?;
    let (dataset, _) = generate_synthetic(&spec, seed)?;
    fs::create_dir_all(out)?;
    save_scene(&dataset, out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        spec: &'a SyntheticSpec,
    }
    echo_and_save_config("synth", &Resolved { seed, spec: &spec }, &out.join("config.toml"))?;
    println!(
        "wrote {} frames ({} held out) to {}",
        dataset.frames.len(),
        dataset.heldout.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    scene: &Path,
    out: &Path,
    iters: Option<usize>,
    rays_per_batch: Option<usize>,
    no_refine: bool,
    seed: Option<u64>,
    preset: Preset,
) -> anyhow::Result<()> {
    let dataset = load_scene(scene)?;
    let mut config = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    if let Some(i) = iters {
        config.iterations = i;
    }
    if let Some(r) = rays_per_batch {
        config.rays_per_batch = r;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let config_path = out.with_extension("config.toml");
    echo_and_save_config("train", &config, &config_path)?;
    let ckpt = train(&dataset, &config)?;
    let final_ckpt = if no_refine {
        ckpt
    } else {
        let (refined, report) = refine_stage(&ckpt, &dataset, &config)?;
        if let (Some(first), Some(last)) = (report.epoch_bce.first(), report.epoch_bce.last()) {
            println!("refinement bce {first:.6} -> {last:.6}");
        }
        refined
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    final_ckpt.save(out)?;
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn parse_pose(text: &str) -> anyhow::Result<SensorPose> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>())
        .collect::<Result<_, _>>()
        .context("pose values must be numbers")?;
    if values.len() != 16 {
        bail!("pose needs 16 values, found {}", values.len());
    }
    Ok(SensorPose::new_orthonormalized(
        Matrix4::from_row_slice(&values),
        1e-3,
    )?)
}

fn to_gray(img: &Image, scale: f64) -> image::GrayImage {
    image::GrayImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(y as usize, x as usize) * scale).clamp(0.0, 255.0);
        image::Luma([v as u8])
    })
}

/// Applies the checkpoint's refiner when present, otherwise thresholds the
/// rendered mask probabilities directly.
fn finalize_scan(
    ckpt: &Checkpoint,
    rendered: &RenderedScan,
    max_range: f64,
    timestamp: f64,
) -> anyhow::Result<(RangeScan, Image)> {
    let prob = match ckpt.build_refiner()? {
        Some((store, net)) => {
            let depth_norm = rendered.depth_m.map(|d| (d / max_range).clamp(0.0, 1.0));
            net.refine_mask(&store, &rendered.mask_prob, &depth_norm, &rendered.intensity)?
        }
        None => rendered.mask_prob.clone(),
    };
    let scan = apply_mask(rendered, &prob, DEFAULT_MASK_THRESHOLD, timestamp);
    Ok((scan, prob))
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    ckpt_path: &Path,
    pose_text: &str,
    time: f64,
    beams: Option<usize>,
    fov_up: Option<f64>,
    fov_down: Option<f64>,
    azimuths: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&time) {
        bail!("--time must lie in [0, 1], got {time}");
    }
    let ckpt = Checkpoint::load(ckpt_path)?;
    let pose = parse_pose(pose_text)?;
    let mut sensor = ckpt.sensor.clone();
    if let Some(b) = beams {
        sensor.n_beams = b;
    }
    if let Some(a) = azimuths {
        sensor.azimuth_count = a;
    }
    if let Some(f) = fov_up {
        sensor.fov_up_deg = f;
    }
    if let Some(f) = fov_down {
        sensor.fov_down_deg = f;
    }
    sensor.validate()?;

    #[derive(Serialize)]
    struct Resolved {
        checkpoint: PathBuf,
        pose: Vec<f64>,
        time: f64,
        sensor: lidarfield::SensorConfig,
    }
    fs::create_dir_all(out)?;
    echo_and_save_config(
        "render",
        &Resolved {
            checkpoint: ckpt_path.to_path_buf(),
            pose: pose.matrix().transpose().as_slice().to_vec(),
            time,
            sensor: sensor.clone(),
        },
        &out.join("config.toml"),
    )?;

    let (store, model) = ckpt.build_model()?;
    let rendered = model.render_scan(&store, &sensor, &pose, time, &ckpt.scene_scale);
    let timestamp = ckpt.scene_scale.time_to_seconds(time);
    let (scan, prob) = finalize_scan(&ckpt, &rendered, sensor.max_range_m, timestamp)?;

    // Binary scan in the scene-directory layout (loadable as a one-frame
    // scene), a plain-text point cloud, and grayscale previews.
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)?;
    lidarfield::data::write_frame(&frames_dir, 0, &scan)?;
    fs::write(out.join("timestamps.txt"), format!("{timestamp}\n"))?;
    fs::write(
        out.join("sensor.cfg"),
        format!(
            "n_beams={}\nazimuth_count={}\nfov_up_deg={}\nfov_down_deg={}\nmax_range_m={}\n",
            sensor.n_beams,
            sensor.azimuth_count,
            sensor.fov_up_deg,
            sensor.fov_down_deg,
            sensor.max_range_m
        ),
    )?;
    let cloud = range_to_pointcloud(&scan, &sensor);
    let mut cloud_text = String::with_capacity(cloud.len() * 32);
    for (p, i) in cloud.points.iter().zip(&cloud.intensity) {
        cloud_text.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, i));
    }
    fs::write(out.join("pointcloud.txt"), cloud_text)?;
    to_gray(&scan.depth, 255.0 / sensor.max_range_m)
        .save(out.join("depth.png"))
        .context("write depth.png")?;
    to_gray(&scan.intensity, 255.0)
        .save(out.join("intensity.png"))
        .context("write intensity.png")?;
    to_gray(&prob, 255.0)
        .save(out.join("mask.png"))
        .context("write mask.png")?;
    println!(
        "rendered {}x{} scan ({} returns) to {}",
        sensor.n_beams,
        sensor.azimuth_count,
        scan.valid_count(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, scene: &Path, gt_mask: bool, report_path: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset = load_scene(scene)?;
    if dataset.config != ckpt.sensor {
        bail!(
            "scene sensor config does not match the checkpoint ({:?} vs {:?})",
            dataset.config,
            ckpt.sensor
        );
    }
    #[derive(Serialize)]
    struct Resolved {
        checkpoint: PathBuf,
        scene: PathBuf,
        gt_mask: bool,
        heldout: Vec<usize>,
    }
    echo_and_save_config(
        "eval",
        &Resolved {
            checkpoint: ckpt_path.to_path_buf(),
            scene: scene.to_path_buf(),
            gt_mask,
            heldout: dataset.heldout.clone(),
        },
        &report_path.with_extension("config.toml"),
    )?;
    if dataset.heldout.is_empty() {
        bail!("scene has no held-out frames to evaluate");
    }
    let (store, model) = ckpt.build_model()?;
    let opts = EvalOptions {
        gt_masked: gt_mask,
        depth_range: ckpt.sensor.max_range_m,
    };
    let mut reports = Vec::new();
    for &fi in &dataset.heldout {
        let gt = &dataset.frames[fi];
        let t = ckpt.scene_scale.time_to_normalized(gt.timestamp);
        let rendered = model.render_scan(&store, &ckpt.sensor, &gt.pose, t, &ckpt.scene_scale);
        let (scan, _) = finalize_scan(&ckpt, &rendered, ckpt.sensor.max_range_m, gt.timestamp)?;
        let report = evaluate_frame(&scan, gt, &ckpt.sensor, &opts)?;
        println!("frame {fi}:");
        for line in report.to_lines().lines() {
            println!("  {line}");
        }
        reports.push(report);
    }
    let mean = MetricsReport::mean(&reports).expect("non-empty reports");
    println!("mean over {} held-out frames:", reports.len());
    for line in mean.to_lines().lines() {
        println!("  {line}");
    }
    fs::write(report_path, mean.to_lines())
        .with_context(|| format!("write {}", report_path.display()))?;
    Ok(())
}
