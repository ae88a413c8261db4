//! The neural LiDAR field: hybrid feature grids, flow-aggregated dynamic
//! features, trunk and heads, and full-scan rendering.
//!
//! `process_rays` is the single forward path shared by training and
//! evaluation; the backward pass is fused into it so gradients follow
//! exactly the computation that produced the loss.

use crate::field::{FeatureLayout, HashConfig, HybridField, PlanarConfig};
use crate::flow::{positional_encode, FlowConfig, FlowNet};
use crate::img::Image;
use crate::nn::{Gradients, Mlp, ParamStore};
use crate::render::{backward_sigma, render_average, render_depth, transmittance_weights};
use crate::sensor::{scan_rays, Ray, SceneScale, SensorConfig, SensorPose};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Aggregation weight of each warped neighbor query; missing neighbors at
/// sequence endpoints hand their weight back to the center.
pub const AGG_NEIGHBOR_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub planar: PlanarConfig,
    pub hash: HashConfig,
    pub flow: FlowConfig,
    /// Hidden widths of the trunk (outputs density + geometric feature).
    pub trunk_hidden: Vec<usize>,
    /// Geometric-feature dimensionality produced by the trunk.
    pub geom_dim: usize,
    /// Hidden widths of the intensity and ray-drop heads.
    pub head_hidden: Vec<usize>,
    /// Frequency-encoding bands for the view direction.
    pub view_enc_bands: usize,
    /// Shift applied before the softplus density activation.
    pub density_bias: f64,
    /// Rays whose total rendered weight falls below this are marked dropped
    /// at evaluation regardless of the ray-drop head.
    pub min_weight_sum: f64,
    /// Samples per ray.
    pub n_samples: usize,
    /// Hybrid planar features on top of the hash grids.
    pub use_planar: bool,
    /// Time-conditioned dynamic feature parts.
    pub use_dynamic: bool,
    /// Flow-warped temporal aggregation of dynamic features.
    pub use_flow: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            planar: PlanarConfig::default(),
            hash: HashConfig::default(),
            flow: FlowConfig::default(),
            trunk_hidden: vec![64],
            geom_dim: 15,
            head_hidden: vec![64, 64],
            view_enc_bands: 12,
            density_bias: -1.0,
            min_weight_sum: 0.05,
            n_samples: 768,
            use_planar: true,
            use_dynamic: true,
            use_flow: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.use_flow && !self.use_dynamic {
            return Err(crate::Error::invalid(
                "flow aggregation requires dynamic features",
            ));
        }
        if self.n_samples < 2 {
            return Err(crate::Error::invalid("need at least 2 samples per ray"));
        }
        Ok(())
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-ray supervision target in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct RayTarget {
    pub depth: f64,
    pub intensity: f64,
    pub mask: f64,
}

/// One ray prepared for the field: world-frame geometry, a normalized
/// timestamp, pre-drawn sample depths, and an optional target.
#[derive(Debug, Clone)]
pub struct RayWork {
    pub ray: Ray,
    pub t: f64,
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
    pub target: Option<RayTarget>,
}

/// Rendered quantities of one ray.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayOutput {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
    pub weight_sum: f64,
}

/// Loss-term scaling baked into the backward pass: each entry is the loss
/// weight divided by the relevant ray count of the whole batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradScale {
    pub depth: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

/// Unweighted per-term sums accumulated over a slice of rays.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSums {
    pub depth_abs: f64,
    pub intensity_sq: f64,
    pub raydrop_sq: f64,
}

impl LossSums {
    pub fn add(&mut self, other: &LossSums) {
        self.depth_abs += other.depth_abs;
        self.intensity_sq += other.intensity_sq;
        self.raydrop_sq += other.raydrop_sq;
    }
}

/// Aggregation weights at normalized time `t` with frame spacing `dt`:
/// `(center, forward, backward)`; absent neighbors are `None` and their
/// weight is folded into the center. Weights always sum to 1.
pub fn aggregation_weights(t: f64, dt: f64) -> (f64, Option<f64>, Option<f64>) {
    const TOL: f64 = 1e-9;
    if dt <= 0.0 {
        return (1.0, None, None);
    }
    let fwd = (t + dt <= 1.0 + TOL).then_some(AGG_NEIGHBOR_WEIGHT);
    let bwd = (t - dt >= -TOL).then_some(AGG_NEIGHBOR_WEIGHT);
    let center = 1.0 - fwd.unwrap_or(0.0) - bwd.unwrap_or(0.0);
    (center, fwd, bwd)
}

/// The complete trainable field: grids, optional flow net, trunk and heads.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub config: ModelConfig,
    pub grids: HybridField,
    pub flow: Option<FlowNet>,
    pub trunk: Mlp,
    pub intensity_head: Mlp,
    pub raydrop_head: Mlp,
    /// Normalized frame spacing; 0 disables temporal neighbors.
    pub time_step: f64,
}

impl FieldModel {
    /// Builds the model, allocating all parameters in `store` in a fixed
    /// order (grids, flow, trunk, intensity head, ray-drop head).
    pub fn new(
        store: &mut ParamStore,
        config: ModelConfig,
        time_step: f64,
        rng: &mut impl Rng,
    ) -> crate::Result<Self> {
        config.validate()?;
        let layout = FeatureLayout {
            planar: config.use_planar,
            dynamic: config.use_dynamic,
        };
        let grids = HybridField::new(store, &config.planar, &config.hash, layout, rng);
        let flow = config
            .use_flow
            .then(|| FlowNet::new(store, &config.flow, rng));
        let feature_dim = grids.feature_dim();
        let mut trunk_dims = vec![feature_dim];
        trunk_dims.extend_from_slice(&config.trunk_hidden);
        trunk_dims.push(1 + config.geom_dim);
        let trunk = Mlp::new(store, "trunk", &trunk_dims, rng);
        let head_in = feature_dim + config.geom_dim + 6 * config.view_enc_bands;
        let mut head_dims = vec![head_in];
        head_dims.extend_from_slice(&config.head_hidden);
        head_dims.push(1);
        let intensity_head = Mlp::new(store, "intensity", &head_dims, rng);
        let raydrop_head = Mlp::new(store, "raydrop", &head_dims, rng);
        Ok(Self {
            config,
            grids,
            flow,
            trunk,
            intensity_head,
            raydrop_head,
            time_step,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.grids.feature_dim()
    }

    fn encode_view(&self, direction: &[f64; 3], out: &mut Vec<f64>) {
        positional_encode(direction, self.config.view_enc_bands, out);
    }

    /// Flow-aggregated dynamic feature at one space-time point, evaluated
    /// in delta form (`f0 + sum_q w_q (f_q - f0)`) so zero flow over
    /// time-constant features reproduces the center query exactly.
    pub fn aggregate_dynamic(&self, store: &ParamStore, x: &[f64; 3], t: f64) -> Vec<f64> {
        let dim = self.grids.dynamic_dim();
        let mut center = vec![0.0; dim];
        if dim == 0 {
            return center;
        }
        self.grids.sample_dynamic(store, x, t, &mut center);
        if !self.config.use_flow {
            return center;
        }
        let (_, wf, wb) = aggregation_weights(t, self.time_step);
        if wf.is_none() && wb.is_none() {
            return center;
        }
        let flow = self.flow.as_ref().expect("flow net present when use_flow");
        let (dfwd, dbwd) = flow.forward(store, x, t);
        let mut out = center.clone();
        let mut buf = vec![0.0; dim];
        if let Some(w) = wf {
            let xq = [x[0] + dfwd.x, x[1] + dfwd.y, x[2] + dfwd.z];
            self.grids.sample_dynamic(store, &xq, t + self.time_step, &mut buf);
            for i in 0..dim {
                out[i] += w * (buf[i] - center[i]);
            }
        }
        if let Some(w) = wb {
            let xq = [x[0] + dbwd.x, x[1] + dbwd.y, x[2] + dbwd.z];
            self.grids.sample_dynamic(store, &xq, t - self.time_step, &mut buf);
            for i in 0..dim {
                out[i] += w * (buf[i] - center[i]);
            }
        }
        out
    }

    /// Shared forward (and optional fused backward) pass over a slice of
    /// rays. With `grads`, loss gradients scaled by `scale` are accumulated
    /// over all parameters; the returned sums are always computed.
    pub fn process_rays(
        &self,
        store: &ParamStore,
        rays: &[RayWork],
        scale: &GradScale,
        mut grads: Option<&mut Gradients>,
    ) -> (Vec<RayOutput>, LossSums) {
        let n_rays = rays.len();
        if n_rays == 0 {
            return (Vec::new(), LossSums::default());
        }
        let feature_dim = self.grids.feature_dim();
        let static_dim = self.grids.static_dim();
        let dyn_dim = self.grids.dynamic_dim();
        let geom = self.config.geom_dim;
        let total: usize = rays.iter().map(|r| r.z.len()).sum();

        // Sample positions and per-ray aggregation bookkeeping.
        let mut positions = Vec::with_capacity(total);
        let mut sample_ray = Vec::with_capacity(total);
        for (ri, rw) in rays.iter().enumerate() {
            for &z in &rw.z {
                let p = rw.ray.point_at(z);
                positions.push([p.x, p.y, p.z]);
                sample_ray.push(ri);
            }
        }
        let agg: Vec<(f64, Option<f64>, Option<f64>)> = rays
            .iter()
            .map(|rw| {
                if self.config.use_flow {
                    aggregation_weights(rw.t, self.time_step)
                } else {
                    (1.0, None, None)
                }
            })
            .collect();

        // Flow displacements per sample (forward, backward).
        let flow_pass = self.config.use_flow && self.flow.is_some();
        let (disp, flow_cache) = if flow_pass {
            let queries: Vec<([f64; 3], f64)> = positions
                .iter()
                .zip(&sample_ray)
                .map(|(p, &ri)| (*p, rays[ri].t))
                .collect();
            let (d, c) = self.flow.as_ref().unwrap().forward_batch(store, &queries);
            (d, Some(c))
        } else {
            (Vec::new(), None)
        };

        // Hybrid features, dynamic parts aggregated in delta form.
        let mut features = vec![0.0; total * feature_dim];
        let mut buf = vec![0.0; dyn_dim];
        let mut center_vals = vec![0.0; dyn_dim];
        for (si, p) in positions.iter().enumerate() {
            let t = rays[sample_ray[si]].t;
            let row = &mut features[si * feature_dim..(si + 1) * feature_dim];
            self.grids.sample_static(store, p, &mut row[..static_dim]);
            if dyn_dim > 0 {
                let slot = &mut row[static_dim..];
                self.grids.sample_dynamic(store, p, t, slot);
                if flow_pass {
                    let (_, wf, wb) = agg[sample_ray[si]];
                    if wf.is_none() && wb.is_none() {
                        continue;
                    }
                    let d = &disp[si * 6..(si + 1) * 6];
                    center_vals.copy_from_slice(slot);
                    if let Some(w) = wf {
                        let xq = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                        self.grids
                            .sample_dynamic(store, &xq, t + self.time_step, &mut buf);
                        for i in 0..dyn_dim {
                            slot[i] += w * (buf[i] - center_vals[i]);
                        }
                    }
                    if let Some(w) = wb {
                        let xq = [p[0] + d[3], p[1] + d[4], p[2] + d[5]];
                        self.grids
                            .sample_dynamic(store, &xq, t - self.time_step, &mut buf);
                        for i in 0..dyn_dim {
                            slot[i] += w * (buf[i] - center_vals[i]);
                        }
                    }
                }
            }
        }

        // Trunk: density + geometric feature.
        let (trunk_out, trunk_cache) = self.trunk.forward(store, &features, total);
        let trunk_width = 1 + geom;
        let mut sigma = Vec::with_capacity(total);
        for si in 0..total {
            sigma.push(softplus(trunk_out[si * trunk_width] + self.config.density_bias));
        }

        // Heads: intensity and ray-drop on (features, geom, view encoding).
        let head_in_dim = feature_dim + geom + 6 * self.config.view_enc_bands;
        let view_len = 6 * self.config.view_enc_bands;
        let mut view_enc = Vec::with_capacity(n_rays * view_len);
        for rw in rays {
            let d = &rw.ray.direction;
            self.encode_view(&[d.x, d.y, d.z], &mut view_enc);
        }
        let mut head_in = Vec::with_capacity(total * head_in_dim);
        for si in 0..total {
            head_in.extend_from_slice(&features[si * feature_dim..(si + 1) * feature_dim]);
            head_in.extend_from_slice(&trunk_out[si * trunk_width + 1..(si + 1) * trunk_width]);
            let ri = sample_ray[si];
            head_in.extend_from_slice(&view_enc[ri * view_len..(ri + 1) * view_len]);
        }
        let (int_raw, int_cache) = self.intensity_head.forward(store, &head_in, total);
        let (ray_raw, ray_cache) = self.raydrop_head.forward(store, &head_in, total);
        let intensity: Vec<f64> = int_raw.iter().map(|&v| sigmoid(v)).collect();
        let raydrop: Vec<f64> = ray_raw.iter().map(|&v| sigmoid(v)).collect();

        // Volume rendering per ray, loss sums, and weight gradients.
        let mut outputs = Vec::with_capacity(n_rays);
        let mut sums = LossSums::default();
        let want_grads = grads.is_some();
        let mut grad_int = vec![0.0; if want_grads { total } else { 0 }];
        let mut grad_ray = vec![0.0; if want_grads { total } else { 0 }];
        let mut grad_sigma = vec![0.0; if want_grads { total } else { 0 }];
        let mut gw_buf = Vec::new();
        let mut cursor = 0usize;
        for rw in rays.iter() {
            let s = rw.z.len();
            let sig = &sigma[cursor..cursor + s];
            let (w, _) = transmittance_weights(sig, &rw.delta);
            let depth = render_depth(&w, &rw.z);
            let ivals = &intensity[cursor..cursor + s];
            let pvals = &raydrop[cursor..cursor + s];
            let int = render_average(&w, ivals);
            let drop = render_average(&w, pvals);
            let wsum: f64 = w.iter().sum();
            outputs.push(RayOutput {
                depth,
                intensity: int,
                raydrop: drop,
                weight_sum: wsum,
            });
            if let Some(target) = &rw.target {
                let mut d_depth = 0.0;
                let mut d_int = 0.0;
                if target.mask == 1.0 {
                    let resid = depth - target.depth;
                    sums.depth_abs += resid.abs();
                    d_depth = scale.depth * resid.signum();
                    let iresid = int - target.intensity;
                    sums.intensity_sq += iresid * iresid;
                    d_int = scale.intensity * 2.0 * iresid;
                }
                let presid = drop - target.mask;
                sums.raydrop_sq += presid * presid;
                let d_drop = scale.raydrop * 2.0 * presid;
                if want_grads {
                    gw_buf.clear();
                    for i in 0..s {
                        gw_buf.push(d_depth * rw.z[i] + d_int * ivals[i] + d_drop * pvals[i]);
                        grad_int[cursor + i] = d_int * w[i];
                        grad_ray[cursor + i] = d_drop * w[i];
                    }
                    let gs = backward_sigma(sig, &rw.delta, &gw_buf);
                    grad_sigma[cursor..cursor + s].copy_from_slice(&gs);
                }
            }
            cursor += s;
        }

        let Some(grads) = grads.as_deref_mut() else {
            return (outputs, sums);
        };

        // Output nonlinearities.
        let grad_int_raw: Vec<f64> = grad_int
            .iter()
            .zip(&intensity)
            .map(|(g, i)| g * i * (1.0 - i))
            .collect();
        let grad_ray_raw: Vec<f64> = grad_ray
            .iter()
            .zip(&raydrop)
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        let grad_head_int = self
            .intensity_head
            .backward(store, &int_cache, &grad_int_raw, grads);
        let grad_head_ray = self
            .raydrop_head
            .backward(store, &ray_cache, &grad_ray_raw, grads);

        // Trunk output gradient: density column plus geometric feature.
        let mut grad_trunk_out = vec![0.0; total * trunk_width];
        for si in 0..total {
            let pre = trunk_out[si * trunk_width] + self.config.density_bias;
            grad_trunk_out[si * trunk_width] = grad_sigma[si] * sigmoid(pre);
            for gdim in 0..geom {
                grad_trunk_out[si * trunk_width + 1 + gdim] = grad_head_int
                    [si * head_in_dim + feature_dim + gdim]
                    + grad_head_ray[si * head_in_dim + feature_dim + gdim];
            }
        }
        let grad_trunk_in = self.trunk.backward(store, &trunk_cache, &grad_trunk_out, grads);

        // Feature gradient: direct head paths plus the trunk path.
        let mut grad_features = grad_trunk_in;
        for si in 0..total {
            for f in 0..feature_dim {
                grad_features[si * feature_dim + f] += grad_head_int[si * head_in_dim + f]
                    + grad_head_ray[si * head_in_dim + f];
            }
        }

        // Scatter into the grids; warped dynamic queries also produce
        // position gradients that feed the flow network.
        let mut grad_disp = vec![0.0; disp.len()];
        let mut gdyn = vec![0.0; dyn_dim];
        for (si, p) in positions.iter().enumerate() {
            let ri = sample_ray[si];
            let t = rays[ri].t;
            let grow = &grad_features[si * feature_dim..(si + 1) * feature_dim];
            self.grids.backward_static(store, p, &grow[..static_dim], grads);
            if dyn_dim == 0 {
                continue;
            }
            let gslot = &grow[static_dim..];
            let (_, wf, wb) = agg[ri];
            if !flow_pass || (wf.is_none() && wb.is_none()) {
                self.grids.backward_dynamic(store, p, t, gslot, grads, None);
                continue;
            }
            // Delta form: center weight = 1 - (present neighbor weights).
            let w_center = 1.0 - wf.unwrap_or(0.0) - wb.unwrap_or(0.0);
            for (i, g) in gslot.iter().enumerate() {
                gdyn[i] = g * w_center;
            }
            self.grids.backward_dynamic(store, p, t, &gdyn, grads, None);
            let d = &disp[si * 6..(si + 1) * 6];
            if let Some(w) = wf {
                for (i, g) in gslot.iter().enumerate() {
                    gdyn[i] = g * w;
                }
                let xq = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                let mut gpos = [0.0; 3];
                self.grids.backward_dynamic(
                    store,
                    &xq,
                    t + self.time_step,
                    &gdyn,
                    grads,
                    Some(&mut gpos),
                );
                grad_disp[si * 6] += gpos[0];
                grad_disp[si * 6 + 1] += gpos[1];
                grad_disp[si * 6 + 2] += gpos[2];
            }
            if let Some(w) = wb {
                for (i, g) in gslot.iter().enumerate() {
                    gdyn[i] = g * w;
                }
                let xq = [p[0] + d[3], p[1] + d[4], p[2] + d[5]];
                let mut gpos = [0.0; 3];
                self.grids.backward_dynamic(
                    store,
                    &xq,
                    t - self.time_step,
                    &gdyn,
                    grads,
                    Some(&mut gpos),
                );
                grad_disp[si * 6 + 3] += gpos[0];
                grad_disp[si * 6 + 4] += gpos[1];
                grad_disp[si * 6 + 5] += gpos[2];
            }
        }
        if let (Some(cache), Some(flow)) = (&flow_cache, &self.flow) {
            flow.backward_batch(store, cache, &grad_disp, grads);
        }
        (outputs, sums)
    }

    /// Evaluation-mode forward over rays (no gradients, no targets needed).
    pub fn forward_rays(&self, store: &ParamStore, rays: &[RayWork]) -> Vec<RayOutput> {
        self.process_rays(store, rays, &GradScale::default(), None).0
    }
}

/// Full-frame rendering output, before ray-drop refinement. Depth is in
/// meters; `mask_prob` is the continuous rendered return probability with
/// the low-weight evaluation rule already applied.
#[derive(Debug, Clone)]
pub struct RenderedScan {
    pub depth_m: Image,
    pub intensity: Image,
    pub mask_prob: Image,
    pub weight_sum: Image,
    pub pose: SensorPose,
    pub time_norm: f64,
}

impl FieldModel {
    /// Renders a complete range view at a world pose (meters) and a
    /// normalized time. Pixel rows are rendered in parallel.
    pub fn render_scan(
        &self,
        store: &ParamStore,
        sensor: &SensorConfig,
        pose_world: &SensorPose,
        t: f64,
        scene: &SceneScale,
    ) -> RenderedScan {
        let pose_norm = pose_world.rescaled(scene);
        let mut rays = scan_rays(sensor, &pose_norm);
        crate::sensor::clamp_ray_far(&mut rays, scene.depth_to_normalized(sensor.max_range_m));
        let (h, w) = (sensor.n_beams, sensor.azimuth_count);
        let mut rows: Vec<Vec<RayOutput>> = Vec::with_capacity(h);
        (0..h)
            .into_par_iter()
            .map(|row| {
                let work: Vec<Option<RayWork>> = (0..w)
                    .map(|col| {
                        rays[row * w + col].as_ref().map(|ray| {
                            let (z, delta) =
                                crate::render::sample_along_ray(ray, self.config.n_samples, None)
                                    .expect("clipped rays have near < far");
                            RayWork {
                                ray: ray.clone(),
                                t,
                                z,
                                delta,
                                target: None,
                            }
                        })
                    })
                    .collect();
                let present: Vec<RayWork> = work.iter().flatten().cloned().collect();
                let outputs = self.forward_rays(store, &present);
                let mut row_out = vec![RayOutput::default(); w];
                let mut oi = 0;
                for (col, maybe) in work.iter().enumerate() {
                    if maybe.is_some() {
                        row_out[col] = outputs[oi];
                        oi += 1;
                    }
                }
                row_out
            })
            .collect_into_vec(&mut rows);
        let mut depth_m = Image::zeros(h, w);
        let mut intensity = Image::zeros(h, w);
        let mut mask_prob = Image::zeros(h, w);
        let mut weight_sum = Image::zeros(h, w);
        for (row, outs) in rows.iter().enumerate() {
            for (col, o) in outs.iter().enumerate() {
                depth_m.set(row, col, scene.depth_to_meters(o.depth));
                intensity.set(row, col, o.intensity);
                weight_sum.set(row, col, o.weight_sum);
                let p = if o.weight_sum < self.config.min_weight_sum {
                    0.0
                } else {
                    o.raydrop
                };
                mask_prob.set(row, col, p);
            }
        }
        RenderedScan {
            depth_m,
            intensity,
            mask_prob,
            weight_sum,
            pose: pose_world.clone(),
            time_norm: t,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            planar: PlanarConfig {
                levels: 1,
                base_resolution: 3,
                channels: 1,
                time_resolution: 3,
            },
            hash: HashConfig {
                levels: 1,
                min_resolution: 3,
                max_resolution: 3,
                channels: 1,
                table_size: 64,
                time_resolution: 3,
            },
            flow: FlowConfig {
                layers: 2,
                hidden_dim: 4,
                enc_bands: 1,
            },
            trunk_hidden: vec![4],
            geom_dim: 2,
            head_hidden: vec![4],
            view_enc_bands: 1,
            density_bias: -1.0,
            min_weight_sum: 0.05,
            n_samples: 8,
            use_planar: true,
            use_dynamic: true,
            use_flow: true,
        }
    }

    pub(crate) fn toy_rays(n: usize, with_targets: bool, seed: u64) -> Vec<RayWork> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let dir = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.3..0.3),
                )
                .normalize();
                let ray = Ray {
                    origin: Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                        0.0,
                    ),
                    direction: dir,
                    near: 0.05,
                    far: 1.3,
                };
                let (z, delta) = crate::render::sample_along_ray(&ray, 8, None).unwrap();
                RayWork {
                    ray,
                    t: rng.gen_range(0.2..0.8),
                    z,
                    delta,
                    target: with_targets.then(|| RayTarget {
                        depth: rng.gen_range(0.3..1.0),
                        intensity: rng.gen_range(0.1..0.9),
                        mask: if rng.gen_bool(0.8) { 1.0 } else { 0.0 },
                    }),
                }
            })
            .collect()
    }

    #[test]
    fn aggregation_weights_sum_to_one() {
        for &(t, dt) in &[(0.5, 0.1), (0.0, 0.1), (1.0, 0.1), (0.05, 0.1), (0.3, 0.0)] {
            let (c, f, b) = aggregation_weights(t, dt);
            let total = c + f.unwrap_or(0.0) + b.unwrap_or(0.0);
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
        // Interior keeps both neighbors, endpoints lose one.
        assert!(aggregation_weights(0.5, 0.1).1.is_some());
        assert!(aggregation_weights(0.5, 0.1).2.is_some());
        assert!(aggregation_weights(0.0, 0.1).2.is_none());
        assert!(aggregation_weights(1.0, 0.1).1.is_none());
    }

    #[test]
    fn zero_flow_time_constant_features_reduce_to_center_query() {
        // With the flow net zero-initialized and dynamic features constant
        // in time, aggregation is bit-identical to the center query (the
        // aggregation-disabled pipeline).
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        let model = FieldModel::new(&mut store, toy_config(), 0.25, &mut rng).unwrap();
        for meta in store.entries().to_vec() {
            if meta.name.contains("dynamic") {
                let v = 0.05 + (meta.offset % 7) as f64 * 0.01;
                for i in meta.offset..meta.offset + meta.len {
                    store.data_mut()[i] = v;
                }
            }
        }
        let x = [0.3, -0.2, 0.4];
        let t = 0.5;
        let agg = model.aggregate_dynamic(&store, &x, t);
        let mut center = vec![0.0; model.grids.dynamic_dim()];
        model.grids.sample_dynamic(&store, &x, t, &mut center);
        assert_eq!(agg, center);
    }

    #[test]
    fn aggregation_matches_hand_weighted_sum() {
        // Hand-set dynamic features at the three query times with zero
        // flow: the aggregate is 0.5 f0 + 0.25 f+ + 0.25 f-.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut store = ParamStore::new();
        let model = FieldModel::new(&mut store, toy_config(), 0.5, &mut rng).unwrap();
        // Hash dynamics to zero so only planar dynamics contribute; yt and
        // zt planes to 1; the xt plane varies across time nodes.
        for meta in store.entries().to_vec() {
            let range = meta.offset..meta.offset + meta.len;
            if meta.name.contains("hash") && meta.name.contains("dynamic") {
                store.data_mut()[range].iter_mut().for_each(|v| *v = 0.0);
            } else if meta.name.contains("planar.l0.dynamic.yt")
                || meta.name.contains("planar.l0.dynamic.zt")
            {
                store.data_mut()[range].iter_mut().for_each(|v| *v = 1.0);
            } else if meta.name.contains("planar.l0.dynamic.xt") {
                // Resolution 3 x time 3, 1 channel: value = time index + 1.
                for row in 0..3 {
                    for ti in 0..3 {
                        store.data_mut()[meta.offset + row * 3 + ti] = (ti + 1) as f64;
                    }
                }
            }
        }
        // Query at a spatial lattice node (x = 0 is node 1 of 3), t = 0.5.
        let agg = model.aggregate_dynamic(&store, &[0.0, 0.0, 0.0], 0.5);
        // Dynamic layout is planar (1 ch) then hash (1 ch); f0 = 2 at time
        // node 1, f+ = 3, f- = 1.
        let expected = 0.5 * 2.0 + 0.25 * 3.0 + 0.25 * 1.0;
        assert_relative_eq!(agg[0], expected, epsilon = 1e-12);
        assert_eq!(agg[1], 0.0);
    }

    #[test]
    fn untrained_field_renders_near_vacuum() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut store = ParamStore::new();
        let model = FieldModel::new(&mut store, toy_config(), 0.25, &mut rng).unwrap();
        let rays = toy_rays(16, false, 3);
        let out = model.forward_rays(&store, &rays);
        for o in &out {
            assert!(o.weight_sum < 0.6);
            assert!(o.depth < 1.0);
            assert!(o.raydrop <= o.weight_sum + 1e-12);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::new();
        let model = FieldModel::new(&mut store, toy_config(), 0.25, &mut rng).unwrap();
        let rays = toy_rays(4, true, 9);
        let valid = rays
            .iter()
            .filter(|r| r.target.is_some_and(|t| t.mask == 1.0))
            .count() as f64;
        let scale = GradScale {
            depth: 1.0 / valid,
            intensity: 0.1 / valid,
            raydrop: 0.01 / rays.len() as f64,
        };
        let loss_of = |store: &ParamStore| {
            let (_, sums) = model.process_rays(store, &rays, &scale, None);
            sums.depth_abs / valid
                + 0.1 * sums.intensity_sq / valid
                + 0.01 * sums.raydrop_sq / rays.len() as f64
        };
        let mut grads = Gradients::zeros(&store);
        model.process_rays(&store, &rays, &scale, Some(&mut grads));
        let eps = 1e-6;
        let mut checked = 0;
        for idx in (0..store.len()).step_by(3) {
            let orig = store.data()[idx];
            store.data_mut()[idx] = orig + eps;
            let lp = loss_of(&store);
            store.data_mut()[idx] = orig - eps;
            let lm = loss_of(&store);
            store.data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.data()[idx];
            // Relative error below 1e-4 with an absolute floor of 1e-8.
            assert!(
                (fd - an).abs() <= 1e-8 + 1e-4 * fd.abs().max(an.abs()),
                "param {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn render_scan_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut store = ParamStore::new();
        let model = FieldModel::new(&mut store, toy_config(), 0.25, &mut rng).unwrap();
        let sensor = SensorConfig {
            n_beams: 4,
            azimuth_count: 12,
            fov_up_deg: 5.0,
            fov_down_deg: -15.0,
            max_range_m: 50.0,
        };
        let scene = SceneScale {
            center: [0.0; 3],
            scale: 0.1,
            t_start: 0.0,
            t_end: 1.0,
        };
        let rendered = model.render_scan(&store, &sensor, &SensorPose::identity(), 0.5, &scene);
        assert_eq!(rendered.depth_m.height(), 4);
        assert_eq!(rendered.depth_m.width(), 12);
        assert_eq!(rendered.mask_prob.height(), 4);
        // Untrained field: near-vacuum everywhere.
        assert!(rendered.mask_prob.data().iter().all(|&p| p < 0.5));
    }
}
