//! Scene-flow prior: a coordinate MLP predicting forward/backward
//! inter-frame displacements, chamfer-distance geometric regularization,
//! and RANSAC ground removal for the supervision clouds.

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::nn::{Gradients, Mlp, MlpCache, ParamStore};
use crate::sensor::PointCloud;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Appends the frequency encoding of `v`: per component x and band k,
/// `sin(2^k x), cos(2^k x)`. Output length grows by `2 * bands * v.len()`.
pub fn positional_encode(v: &[f64], bands: usize, out: &mut Vec<f64>) {
    for &x in v {
        let mut scaled = x;
        for _ in 0..bands {
            let (s, c) = scaled.sin_cos();
            out.push(s);
            out.push(c);
            scaled *= 2.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Total number of linear layers.
    pub layers: usize,
    /// Width of the hidden layers.
    pub hidden_dim: usize,
    /// Frequency-encoding bands for the (x, t) input.
    pub enc_bands: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden_dim: 128,
            enc_bands: 6,
        }
    }
}

/// Coordinate MLP mapping encoded (x, t) to forward and backward
/// displacements toward the adjacent frames, in normalized scene units.
/// The final layer is zero-initialized so both displacements start at zero.
#[derive(Debug, Clone)]
pub struct FlowNet {
    mlp: Mlp,
    pub enc_bands: usize,
}

impl FlowNet {
    pub fn new(store: &mut ParamStore, config: &FlowConfig, rng: &mut impl Rng) -> Self {
        assert!(config.layers >= 2);
        let in_dim = 2 * config.enc_bands * 4;
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(config.hidden_dim).take(config.layers - 1));
        dims.push(6);
        let mlp = Mlp::new(store, "flow", &dims, rng);
        mlp.layers.last().unwrap().zero_init(store);
        Self {
            mlp,
            enc_bands: config.enc_bands,
        }
    }

    pub fn encode_into(&self, x: &[f64; 3], t: f64, out: &mut Vec<f64>) {
        positional_encode(&[x[0], x[1], x[2], t], self.enc_bands, out);
    }

    /// Displacements `(forward, backward)` at one space-time point.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[f64; 3],
        t: f64,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let mut enc = Vec::with_capacity(self.mlp.in_dim());
        self.encode_into(x, t, &mut enc);
        let y = self.mlp.forward_nocache(store, &enc, 1);
        (
            Vector3::new(y[0], y[1], y[2]),
            Vector3::new(y[3], y[4], y[5]),
        )
    }

    /// Batched displacements; rows are (x, t) queries. Output has 6 values
    /// per row: forward then backward displacement.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        queries: &[([f64; 3], f64)],
    ) -> (Vec<f64>, MlpCache) {
        let mut enc = Vec::with_capacity(queries.len() * self.mlp.in_dim());
        for (x, t) in queries {
            self.encode_into(x, *t, &mut enc);
        }
        self.mlp.forward(store, &enc, queries.len())
    }

    pub fn backward_batch(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        grad_out: &[f64],
        grads: &mut Gradients,
    ) {
        // The encoded input is not a trainable quantity; discard its grad.
        let _ = self.mlp.backward(store, cache, grad_out, grads);
    }
}

const NN_ACCEL_THRESHOLD: usize = 64;

/// Nearest squared distance from each of `from` to the set `to`, plus the
/// index of the chosen neighbor. Uses a kd-tree above a size threshold; both
/// paths return exactly the linear-scan result.
pub(crate) fn nearest_sq(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<(f64, usize)> {
    if to.len() >= NN_ACCEL_THRESHOLD {
        let tree = KdTree::build(to);
        from.iter()
            .map(|p| tree.nearest(p).expect("non-empty target"))
            .collect()
    } else {
        from.iter()
            .map(|p| {
                let mut best = (f64::INFINITY, usize::MAX);
                for (j, q) in to.iter().enumerate() {
                    let d2 = (p - q).norm_squared();
                    if d2 < best.0 {
                        best = (d2, j);
                    }
                }
                best
            })
            .collect()
    }
}

/// Symmetric chamfer distance between two clouds: squared nearest-neighbor
/// distances, each direction averaged over its own cloud size.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

pub fn chamfer_points(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs non-empty clouds"));
    }
    let ab: f64 = nearest_sq(a, b).iter().map(|(d2, _)| d2).sum();
    let ba: f64 = nearest_sq(b, a).iter().map(|(d2, _)| d2).sum();
    Ok(ab / a.len() as f64 + ba / b.len() as f64)
}

/// Chamfer distance plus its gradient with respect to the points of `a`
/// (nearest-neighbor assignments treated as fixed).
pub fn chamfer_with_grad(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs non-empty clouds"));
    }
    let mut grad = vec![Vector3::zeros(); a.len()];
    let ab = nearest_sq(a, b);
    let mut total = 0.0;
    let inv_a = 1.0 / a.len() as f64;
    for (i, (d2, j)) in ab.iter().enumerate() {
        total += d2 * inv_a;
        grad[i] += (a[i] - b[*j]) * (2.0 * inv_a);
    }
    let ba = nearest_sq(b, a);
    let inv_b = 1.0 / b.len() as f64;
    for (j, (d2, i)) in ba.iter().enumerate() {
        total += d2 * inv_b;
        grad[*i] += (a[*i] - b[j]) * (2.0 * inv_b);
    }
    Ok((total, grad))
}

/// Scene-flow loss for frame `i`: chamfer between the forward-warped cloud
/// and the next frame plus chamfer between the backward-warped cloud and the
/// previous frame; missing neighbors at sequence ends are skipped. When
/// `grads` is given, gradients flow into the flow network parameters.
pub fn flow_loss(
    net: &FlowNet,
    store: &ParamStore,
    cloud: &PointCloud,
    t: f64,
    prev: Option<&PointCloud>,
    next: Option<&PointCloud>,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::invalid("flow loss needs a non-empty center cloud"));
    }
    let queries: Vec<([f64; 3], f64)> = cloud
        .points
        .iter()
        .map(|p| ([p.x, p.y, p.z], t))
        .collect();
    let (disp, cache) = net.forward_batch(store, &queries);
    let mut total = 0.0;
    let mut grad_disp = vec![0.0; disp.len()];
    let mut run_term = |neighbor: &PointCloud, offset: usize| -> Result<()> {
        let warped: Vec<Vector3<f64>> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p + Vector3::new(
                    disp[i * 6 + offset],
                    disp[i * 6 + offset + 1],
                    disp[i * 6 + offset + 2],
                )
            })
            .collect();
        if grads.is_some() {
            let (value, g) = chamfer_with_grad(&warped, &neighbor.points)?;
            total += value;
            for (i, gi) in g.iter().enumerate() {
                grad_disp[i * 6 + offset] += gi.x;
                grad_disp[i * 6 + offset + 1] += gi.y;
                grad_disp[i * 6 + offset + 2] += gi.z;
            }
        } else {
            total += chamfer_points(&warped, &neighbor.points)?;
        }
        Ok(())
    };
    if let Some(next) = next {
        run_term(next, 0)?;
    }
    if let Some(prev) = prev {
        run_term(prev, 3)?;
    }
    if let Some(grads) = grads.as_deref_mut() {
        net.backward_batch(store, &cache, &grad_disp, grads);
    }
    Ok(total)
}

/// Fits the dominant plane by random 3-point sampling and removes its
/// inliers. Returns the filtered cloud and a flag that is true when the
/// cloud was too small to fit a plane (returned unchanged).
pub fn remove_ground_ransac(
    pc: &PointCloud,
    iters: usize,
    inlier_tol: f64,
    rng: &mut impl Rng,
) -> (PointCloud, bool) {
    if pc.len() < 3 {
        return (pc.clone(), true);
    }
    let n = pc.len();
    let mut best_inliers = 0usize;
    let mut best_plane: Option<(Vector3<f64>, f64)> = None; // (unit normal, offset)
    for _ in 0..iters {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (pc.points[j] - pc.points[i]).cross(&(pc.points[k] - pc.points[i]));
        let norm = normal.norm();
        if norm < 1e-12 {
            continue;
        }
        let normal = normal / norm;
        let offset = normal.dot(&pc.points[i]);
        let inliers = pc
            .points
            .iter()
            .filter(|p| (normal.dot(p) - offset).abs() <= inlier_tol)
            .count();
        if inliers > best_inliers {
            best_inliers = inliers;
            best_plane = Some((normal, offset));
        }
    }
    let Some((normal, offset)) = best_plane else {
        return (pc.clone(), true);
    };
    let mut out = PointCloud::new(pc.frame);
    for (p, &i) in pc.points.iter().zip(pc.intensity.iter()) {
        if (normal.dot(p) - offset).abs() > inlier_tol {
            out.points.push(*p);
            out.intensity.push(i);
        }
    }
    (out, false)
}

/// Drops points farther than `max_dist` from `center` (the sensor origin).
pub fn limit_range(pc: &PointCloud, center: &Vector3<f64>, max_dist: f64) -> PointCloud {
    let mut out = PointCloud::new(pc.frame);
    for (p, &i) in pc.points.iter().zip(pc.intensity.iter()) {
        if (p - center).norm() <= max_dist {
            out.points.push(*p);
            out.intensity.push(i);
        }
    }
    out
}
