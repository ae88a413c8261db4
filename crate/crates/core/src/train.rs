//! Two-stage optimization: joint field + flow training under the weighted
//! composite loss, then frozen-field ray-drop refinement.

use crate::data::{Checkpoint, SceneDataset};
use crate::error::{Error, Result};
use crate::flow::{flow_loss, limit_range, remove_ground_ransac};
use crate::img::Image;
use crate::model::{FieldModel, GradScale, ModelConfig, RayTarget, RayWork};
use crate::nn::{Adam, Gradients, ParamGroup, ParamStore};
use crate::render::sample_along_ray;
use crate::sensor::{normalize_scene, range_to_pointcloud, scan_rays, PointCloud, Ray, RangeScan};
use crate::unet::{RefinerConfig, RefinerNet};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

/// Weights of the composite reconstruction loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub flow: f64,
    pub refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            intensity: 0.1,
            raydrop: 0.01,
            flow: 0.01,
            refine: 1.0,
        }
    }
}

/// Individual loss terms; absent terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub flow: f64,
    pub refine: f64,
}

/// Weighted sum of the loss terms.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.depth * parts.depth
        + weights.intensity * parts.intensity
        + weights.raydrop * parts.raydrop
        + weights.flow * parts.flow
        + weights.refine * parts.refine
}

static EMPTY_MASK_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_empty_mask() {
    if !EMPTY_MASK_WARNED.swap(true, Ordering::Relaxed) {
        eprintln!("warning: loss batch contained no valid rays");
    }
}

/// Mean absolute depth error over valid (mask = 1) rays.
pub fn depth_loss(pred: &[f64], gt: &[f64], mask: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] == 1.0 {
            sum += (pred[i] - gt[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        warn_empty_mask();
        return 0.0;
    }
    sum / count as f64
}

/// Mean squared intensity error over valid rays.
pub fn intensity_loss(pred: &[f64], gt: &[f64], mask: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] == 1.0 {
            let d = pred[i] - gt[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        warn_empty_mask();
        return 0.0;
    }
    sum / count as f64
}

/// Mean squared error between the rendered return probability and the
/// ground-truth mask, over all rays (the drop pattern is the signal).
pub fn raydrop_loss(pred: &[f64], gt_mask: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(gt_mask)
        .map(|(p, m)| (p - m) * (p - m))
        .sum::<f64>()
        / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_grids: f64,
    pub lr_mlps: f64,
    /// Exponential decay: the learning rate at the final iteration is this
    /// factor times the initial one.
    pub lr_final_factor: f64,
    pub refine_epochs: usize,
    pub refine_lr: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub refiner: RefinerConfig,
    /// RANSAC iterations for ground removal of the flow clouds.
    pub ransac_iters: usize,
    /// RANSAC inlier tolerance in normalized units.
    pub ransac_tol: f64,
    /// Flow clouds keep only points within this many meters of the sensor.
    pub flow_range_limit_m: f64,
    /// Print a loss line every this many iterations (0 silences).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale configuration.
    pub fn paper() -> Self {
        Self {
            iterations: 30_000,
            rays_per_batch: 1024,
            lr_grids: 0.01,
            lr_mlps: 0.001,
            lr_final_factor: 0.1,
            refine_epochs: 300,
            refine_lr: 0.001,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            refiner: RefinerConfig::default(),
            ransac_iters: 100,
            ransac_tol: 0.05,
            flow_range_limit_m: 50.0,
            log_every: 100,
        }
    }

    /// Desk-scale preset: 16x128 scans, small grids and heads, minutes of
    /// CPU time instead of GPU hours. Everything else scales through the
    /// same fields.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.iterations = 2000;
        cfg.rays_per_batch = 160;
        cfg.model.planar.levels = 2;
        cfg.model.planar.base_resolution = 16;
        cfg.model.planar.channels = 4;
        cfg.model.planar.time_resolution = 8;
        cfg.model.hash.levels = 4;
        cfg.model.hash.min_resolution = 32;
        cfg.model.hash.max_resolution = 256;
        cfg.model.hash.channels = 2;
        cfg.model.hash.table_size = 1 << 14;
        cfg.model.hash.time_resolution = 8;
        cfg.model.flow.layers = 3;
        cfg.model.flow.hidden_dim = 32;
        cfg.model.trunk_hidden = vec![24];
        cfg.model.geom_dim = 8;
        cfg.model.head_hidden = vec![24, 24];
        cfg.model.view_enc_bands = 4;
        cfg.model.n_samples = 64;
        cfg.refiner = RefinerConfig {
            channels: [3, 6, 12, 24],
        };
        // Desk scenes normalize tens of meters into the unit cube, so the
        // ground-plane inlier band must be much tighter than the paper-scale
        // default or it swallows the whole scene.
        cfg.ransac_tol = 0.01;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rays_per_batch == 0 {
            return Err(Error::invalid("iterations and batch size must be positive"));
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0) {
            return Err(Error::invalid("lr_final_factor must be in (0, 1]"));
        }
        self.model.validate()
    }

    /// Learning-rate decay factor at iteration `i`.
    pub fn lr_factor(&self, i: usize) -> f64 {
        if self.iterations <= 1 {
            return 1.0;
        }
        self.lr_final_factor
            .powf(i as f64 / (self.iterations - 1) as f64)
    }
}

/// Number of deterministic gradient lanes a batch is split into. Lanes are
/// reduced in fixed order, so results do not depend on thread scheduling.
const GRAD_LANES: usize = 4;

struct FlowSupervision {
    /// Per original frame index: preprocessed cloud (ground removed, range
    /// limited) in normalized world coordinates, when usable.
    clouds: Vec<Option<PointCloud>>,
    /// Train-frame indices that have at least one adjacent train frame.
    candidates: Vec<usize>,
}

fn prepare_flow_clouds(
    frames: &[RangeScan],
    train_set: &[bool],
    dataset: &SceneDataset,
    config: &TrainConfig,
    scale_factor: f64,
    rng: &mut ChaCha8Rng,
) -> FlowSupervision {
    let n = frames.len();
    let mut clouds: Vec<Option<PointCloud>> = vec![None; n];
    for (i, frame) in frames.iter().enumerate() {
        if !train_set[i] {
            continue;
        }
        let cloud = range_to_pointcloud(frame, &dataset.config);
        if cloud.len() < 3 {
            continue;
        }
        let (filtered, _) = remove_ground_ransac(&cloud, config.ransac_iters, config.ransac_tol, rng);
        let limited = limit_range(
            &filtered,
            &frame.pose.translation(),
            config.flow_range_limit_m * scale_factor,
        );
        if !limited.is_empty() {
            clouds[i] = Some(limited);
        }
    }
    let candidates = (0..n)
        .filter(|&i| {
            clouds[i].is_some()
                && ((i > 0 && clouds[i - 1].is_some()) || (i + 1 < n && clouds[i + 1].is_some()))
        })
        .collect();
    FlowSupervision { clouds, candidates }
}

/// First- and last-iteration loss terms of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub first: LossParts,
    pub last: LossParts,
}

/// Stage 1: joint field + flow optimization. Returns a checkpoint holding
/// the trained parameters (no refiner yet).
pub fn train(dataset: &SceneDataset, config: &TrainConfig) -> Result<Checkpoint> {
    train_with_report(dataset, config).map(|(ckpt, _)| ckpt)
}

/// [`train`], also reporting the first and last iteration's loss terms.
pub fn train_with_report(
    dataset: &SceneDataset,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    dataset.validate()?;
    let (frames, scene_scale) = normalize_scene(&dataset.config, &dataset.frames)?;
    let n_frames = frames.len();
    let time_step = if n_frames > 1 {
        1.0 / (n_frames - 1) as f64
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let model = FieldModel::new(&mut store, config.model.clone(), time_step, &mut rng)?;

    let train_indices = dataset.train_indices();
    if train_indices.is_empty() {
        return Err(Error::invalid("no training frames"));
    }
    let mut train_set = vec![false; n_frames];
    for &i in &train_indices {
        train_set[i] = true;
    }

    // Per-frame ray grids in the normalized scene.
    let h = dataset.config.n_beams;
    let w = dataset.config.azimuth_count;
    let pixels = h * w;
    let far_limit = scene_scale.depth_to_normalized(dataset.config.max_range_m);
    let ray_grids: Vec<Vec<Option<Ray>>> = frames
        .iter()
        .map(|f| {
            let mut rays = scan_rays(&dataset.config, &f.pose);
            crate::sensor::clamp_ray_far(&mut rays, far_limit);
            rays
        })
        .collect();

    let use_flow = config.model.use_flow && config.weights.flow > 0.0;
    let flow_sup = if use_flow {
        Some(prepare_flow_clouds(
            &frames,
            &train_set,
            dataset,
            config,
            scene_scale.scale,
            &mut rng,
        ))
    } else {
        None
    };

    let mut adam = Adam::new(&store, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut lanes: Vec<Gradients> = (0..GRAD_LANES).map(|_| Gradients::zeros(&store)).collect();
    let mut flow_grads = Gradients::zeros(&store);
    let samples = config.model.n_samples;
    let mut train_report = TrainReport::default();

    for iter in 0..config.iterations {
        // Assemble the batch sequentially so RNG consumption is fixed.
        let mut batch = Vec::with_capacity(config.rays_per_batch);
        let mut valid = 0usize;
        let mut guard = 0usize;
        while batch.len() < config.rays_per_batch {
            let fi = train_indices[rng.gen_range(0..train_indices.len())];
            let px = rng.gen_range(0..pixels);
            let Some(ray) = &ray_grids[fi][px] else {
                guard += 1;
                if guard > 100 * config.rays_per_batch {
                    return Err(Error::invalid("could not sample rays inside the scene"));
                }
                continue;
            };
            let frame = &frames[fi];
            let (row, col) = (px / w, px % w);
            let mask = frame.mask.get(row, col);
            if mask == 1.0 {
                valid += 1;
            }
            let mut jitter = || rng.gen_range(0.0..1.0);
            let (z, delta) = sample_along_ray(ray, samples, Some(&mut jitter))?;
            batch.push(RayWork {
                ray: ray.clone(),
                t: frame.timestamp,
                z,
                delta,
                target: Some(RayTarget {
                    depth: frame.depth.get(row, col),
                    intensity: frame.intensity.get(row, col),
                    mask,
                }),
            });
        }
        if valid == 0 {
            warn_empty_mask();
        }
        let inv_valid = if valid > 0 { 1.0 / valid as f64 } else { 0.0 };
        let inv_rays = 1.0 / batch.len() as f64;
        let scale = GradScale {
            depth: config.weights.depth * inv_valid,
            intensity: config.weights.intensity * inv_valid,
            raydrop: config.weights.raydrop * inv_rays,
        };

        // Fixed-lane parallel forward/backward; reduce in lane order.
        let lane_size = batch.len().div_ceil(GRAD_LANES);
        let sums: Vec<crate::model::LossSums> = lanes
            .par_iter_mut()
            .enumerate()
            .map(|(li, grads)| {
                grads.clear();
                let lo = (li * lane_size).min(batch.len());
                let hi = ((li + 1) * lane_size).min(batch.len());
                let (_, sums) = model.process_rays(&store, &batch[lo..hi], &scale, Some(grads));
                sums
            })
            .collect();
        let mut batch_sums = crate::model::LossSums::default();
        for s in &sums {
            batch_sums.add(s);
        }
        for li in 1..GRAD_LANES {
            let (head, tail) = lanes.split_at_mut(li);
            head[0].add_from(&tail[0]);
        }

        // Flow loss from one random frame per iteration.
        let mut flow_value = 0.0;
        if let Some(sup) = &flow_sup {
            if !sup.candidates.is_empty() {
                let fi = sup.candidates[rng.gen_range(0..sup.candidates.len())];
                let cloud = sup.clouds[fi].as_ref().unwrap();
                let prev = (fi > 0).then(|| sup.clouds[fi - 1].as_ref()).flatten();
                let next = sup
                    .clouds
                    .get(fi + 1)
                    .and_then(|c| c.as_ref());
                if prev.is_some() || next.is_some() {
                    flow_grads.clear();
                    flow_value = flow_loss(
                        model.flow.as_ref().expect("flow enabled"),
                        &store,
                        cloud,
                        frames[fi].timestamp,
                        prev,
                        next,
                        Some(&mut flow_grads),
                    )?;
                    flow_grads.scale(config.weights.flow);
                    lanes[0].add_from(&flow_grads);
                }
            }
        }

        let parts = LossParts {
            depth: batch_sums.depth_abs * inv_valid,
            intensity: batch_sums.intensity_sq * inv_valid,
            raydrop: batch_sums.raydrop_sq * inv_rays,
            flow: flow_value,
            refine: 0.0,
        };
        let total = total_loss(&parts, &config.weights);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                detail: format!(
                    "depth {} intensity {} raydrop {} flow {}",
                    parts.depth, parts.intensity, parts.raydrop, parts.flow
                ),
            });
        }
        if iter == 0 {
            train_report.first = parts;
        }
        if iter + 1 == config.iterations {
            train_report.last = parts;
        }
        let factor = config.lr_factor(iter);
        adam.step(&mut store, &lanes[0], |group| match group {
            ParamGroup::Grid => config.lr_grids * factor,
            ParamGroup::Mlp => config.lr_mlps * factor,
        });
        if config.log_every > 0 && (iter % config.log_every == 0 || iter + 1 == config.iterations)
        {
            println!(
                "iter {iter:>6}/{} total {total:.6} depth {:.6} intensity {:.6} raydrop {:.6} flow {:.6} lr_factor {factor:.4}",
                config.iterations, parts.depth, parts.intensity, parts.raydrop, parts.flow
            );
        }
    }

    Ok((
        Checkpoint {
            sensor: dataset.config.clone(),
            scene_scale,
            model_config: config.model.clone(),
            train_config: config.clone(),
            refiner_config: None,
            seed: config.seed,
            time_step,
            field_params: store,
            refiner_params: None,
        },
        train_report,
    ))
}

/// Per-epoch training BCE of the refinement stage.
#[derive(Debug, Clone)]
pub struct RefineReport {
    pub epoch_bce: Vec<f64>,
}

/// Stage 2: renders every training frame once with the frozen field, then
/// optimizes the refiner network against the ground-truth masks.
pub fn refine_stage(
    ckpt: &Checkpoint,
    dataset: &SceneDataset,
    config: &TrainConfig,
) -> Result<(Checkpoint, RefineReport)> {
    let (field_store, model) = ckpt.build_model()?;
    let (frames, _) = normalize_scene(&dataset.config, &dataset.frames)?;
    let train_indices = dataset.train_indices();
    if train_indices.is_empty() {
        return Err(Error::invalid("no training frames"));
    }

    // Render refiner inputs once; the field stays frozen afterwards.
    let mut inputs: Vec<(Image, Image, Image, Image)> = Vec::with_capacity(train_indices.len());
    for &fi in &train_indices {
        let rendered = model.render_scan(
            &field_store,
            &dataset.config,
            &dataset.frames[fi].pose,
            frames[fi].timestamp,
            &ckpt.scene_scale,
        );
        let depth_norm = rendered
            .depth_m
            .map(|d| (d / dataset.config.max_range_m).clamp(0.0, 1.0));
        inputs.push((
            rendered.mask_prob,
            depth_norm,
            rendered.intensity,
            dataset.frames[fi].mask.clone(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let net = RefinerNet::new(&mut store, config.refiner, &mut rng);
    let mut adam = Adam::new(&store, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut grads = Gradients::zeros(&store);
    let mut epoch_bce = Vec::with_capacity(config.refine_epochs + 1);
    for epoch in 0..=config.refine_epochs {
        let mut epoch_loss = 0.0;
        for (prob, depth, intensity, gt_mask) in &inputs {
            let (_, cache) = net.forward(&store, prob, depth, intensity)?;
            if epoch == config.refine_epochs {
                // Final epoch only measures the loss.
                epoch_loss += crate::unet::refine_loss(
                    &Image::from_vec(gt_mask.height(), gt_mask.width(), cache_prob(&cache))?,
                    gt_mask,
                )?;
                continue;
            }
            grads.clear();
            epoch_loss += net.backward_bce(&store, &cache, gt_mask, &mut grads);
            adam.step(&mut store, &grads, |_| config.refine_lr);
        }
        epoch_bce.push(epoch_loss / inputs.len() as f64);
        if config.log_every > 0 && epoch % 50 == 0 {
            println!(
                "refine epoch {epoch:>4}/{} bce {:.6}",
                config.refine_epochs,
                epoch_bce.last().unwrap()
            );
        }
    }

    let mut out = ckpt.clone();
    out.refiner_config = Some(config.refiner);
    out.refiner_params = Some(store);
    Ok((out, RefineReport { epoch_bce }))
}

fn cache_prob(cache: &crate::unet::RefinerCache) -> Vec<f64> {
    cache.prob_values().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    #[test]
    fn loss_op_examples() {
        assert_eq!(depth_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]), 0.0);
        assert_eq!(depth_loss(&[1.5, 2.5], &[1.0, 2.0], &[1.0, 1.0]), 0.5);
        // Mixed residuals (0.1, -0.3) -> mean abs 0.2.
        let l = depth_loss(&[1.1, 1.7], &[1.0, 2.0], &[1.0, 1.0]);
        assert!((l - 0.2).abs() < 1e-12);
        // Masked-out rays do not contribute.
        assert_eq!(depth_loss(&[9.0, 2.0], &[1.0, 2.0], &[0.0, 1.0]), 0.0);
        assert_eq!(depth_loss(&[9.0], &[1.0], &[0.0]), 0.0);

        assert_eq!(intensity_loss(&[0.5], &[0.0], &[1.0]), 0.25);
        let l = intensity_loss(&[0.1, 0.3], &[0.0, 0.0], &[1.0, 1.0]);
        assert!((l - 0.05).abs() < 1e-12);
        assert_eq!(raydrop_loss(&[0.5, 0.5], &[1.0, 0.0]), 0.25);
    }

    #[test]
    fn total_loss_composition() {
        let ones = LossParts {
            depth: 1.0,
            intensity: 1.0,
            raydrop: 1.0,
            flow: 1.0,
            refine: 0.0,
        };
        let w = LossWeights::default();
        assert!((total_loss(&ones, &w) - 1.12).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        // Stage 2: only the refine term active.
        let stage2 = LossWeights {
            depth: 0.0,
            intensity: 0.0,
            raydrop: 0.0,
            flow: 0.0,
            refine: 1.0,
        };
        let parts = LossParts {
            refine: 0.7,
            ..Default::default()
        };
        assert_eq!(total_loss(&parts, &stage2), 0.7);
        // One-hot weights recover each component exactly.
        let parts = LossParts {
            depth: 0.3,
            intensity: 0.5,
            raydrop: 0.7,
            flow: 0.9,
            refine: 0.2,
        };
        let one = |f: fn(&mut LossWeights)| {
            let mut w = LossWeights {
                depth: 0.0,
                intensity: 0.0,
                raydrop: 0.0,
                flow: 0.0,
                refine: 0.0,
            };
            f(&mut w);
            total_loss(&parts, &w)
        };
        assert_eq!(one(|w| w.depth = 1.0), 0.3);
        assert_eq!(one(|w| w.intensity = 1.0), 0.5);
        assert_eq!(one(|w| w.raydrop = 1.0), 0.7);
        assert_eq!(one(|w| w.flow = 1.0), 0.9);
        assert_eq!(one(|w| w.refine = 1.0), 0.2);
    }

    #[test]
    fn lr_decay_reaches_final_factor() {
        let mut cfg = TrainConfig::desk();
        cfg.iterations = 500;
        assert_eq!(cfg.lr_factor(0), 1.0);
        assert!((cfg.lr_factor(cfg.iterations - 1) - 0.1).abs() < 1e-12);
        let mid = cfg.lr_factor(250);
        assert!(mid < 1.0 && mid > 0.1);
    }

    fn smoke_config(iterations: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.iterations = iterations;
        cfg.rays_per_batch = 64;
        cfg.model.n_samples = 16;
        cfg.seed = seed;
        cfg.log_every = 0;
        cfg
    }

    fn small_scene() -> SceneDataset {
        let mut spec = SyntheticSpec::desk_static();
        spec.sensor.n_beams = 8;
        spec.sensor.azimuth_count = 32;
        spec.n_frames = 6;
        generate_synthetic(&spec, 11).unwrap().0
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let dataset = small_scene();
        let cfg = smoke_config(40, 7);
        let a = train(&dataset, &cfg).unwrap();
        let b = train(&dataset, &cfg).unwrap();
        assert_eq!(a.field_params.data(), b.field_params.data());
        assert_eq!(
            a.field_params.content_hash(),
            b.field_params.content_hash()
        );
        // A different seed gives different parameters.
        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        let c = train(&dataset, &cfg2).unwrap();
        assert_ne!(a.field_params.data(), c.field_params.data());
    }

    #[test]
    fn refine_stage_freezes_field_and_runs_epochs() {
        let dataset = small_scene();
        let mut cfg = smoke_config(30, 3);
        cfg.refine_epochs = 3;
        cfg.refiner = RefinerConfig {
            channels: [2, 2, 2, 2],
        };
        let ckpt = train(&dataset, &cfg).unwrap();
        let field_hash = ckpt.field_params.content_hash();
        let (refined, report) = refine_stage(&ckpt, &dataset, &cfg).unwrap();
        assert_eq!(refined.field_params.content_hash(), field_hash);
        assert!(refined.refiner_params.is_some());
        assert_eq!(report.epoch_bce.len(), 4); // epochs 0..=3
    }
}
