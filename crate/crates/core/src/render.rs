//! Differentiable volume rendering along LiDAR rays: uniform depth
//! sampling, transmittance weights, and the depth / intensity / ray-drop
//! integrals with their reverse-mode gradients.

use crate::error::{Error, Result};
use crate::sensor::Ray;

/// Uniform samples along `[near, far]`: deterministic bin midpoints at
/// evaluation, stratified jitter within each bin during training. Segment
/// lengths are consecutive differences, the last one the far-bound
/// remainder.
pub fn sample_along_ray(
    ray: &Ray,
    n: usize,
    mut jitter: Option<&mut dyn FnMut() -> f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(ray.near < ray.far) {
        return Err(Error::invalid("ray needs near < far"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two samples per ray"));
    }
    let step = (ray.far - ray.near) / n as f64;
    let z: Vec<f64> = (0..n)
        .map(|i| {
            let offset = match jitter.as_deref_mut() {
                Some(j) => j(),
                None => 0.5,
            };
            ray.near + (i as f64 + offset) * step
        })
        .collect();
    let mut delta = Vec::with_capacity(n);
    for i in 0..n - 1 {
        delta.push(z[i + 1] - z[i]);
    }
    delta.push(ray.far - z[n - 1]);
    Ok((z, delta))
}

/// Transmittance-weighted opacities: `T_i = exp(-sum_{j<i} sigma_j delta_j)`
/// and `w_i = T_i (1 - exp(-sigma_i delta_i))`. Returns `(w, T)`.
pub fn transmittance_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(sigma.len(), delta.len());
    let n = sigma.len();
    let mut w = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut log_t = 0.0f64;
    for i in 0..n {
        let ti = log_t.exp();
        t.push(ti);
        let a = sigma[i] * delta[i];
        w.push(ti * (1.0 - (-a).exp()));
        log_t -= a;
    }
    (w, t)
}

/// Gradient of a loss with respect to `sigma`, given the gradient with
/// respect to the weights. Uses the suffix identity
/// `dL/dA_i = gw_i T_i e^{-A_i} - sum_{j>i} gw_j w_j` with `A_i = sigma_i
/// delta_i`.
pub fn backward_sigma(sigma: &[f64], delta: &[f64], grad_w: &[f64]) -> Vec<f64> {
    let (w, t) = transmittance_weights(sigma, delta);
    let n = sigma.len();
    let mut grad_sigma = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let a = sigma[i] * delta[i];
        let da = grad_w[i] * t[i] * (-a).exp() - suffix;
        grad_sigma[i] = da * delta[i];
        suffix += grad_w[i] * w[i];
    }
    grad_sigma
}

/// Expected return distance along the ray.
pub fn render_depth(w: &[f64], z: &[f64]) -> f64 {
    w.iter().zip(z).map(|(wi, zi)| wi * zi).sum()
}

/// Alpha-composited per-sample quantity (intensity or drop probability).
pub fn render_average(w: &[f64], values: &[f64]) -> f64 {
    w.iter().zip(values).map(|(wi, vi)| wi * vi).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(1.0, 0.0, 0.0),
            near,
            far,
        }
    }

    #[test]
    fn eval_samples_are_bin_midpoints() {
        let (z, delta) = sample_along_ray(&unit_ray(0.0, 1.0), 5, None).unwrap();
        let expected = [0.1, 0.3, 0.5, 0.7, 0.9];
        for (a, b) in z.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // Consecutive differences plus the far-bound remainder telescope to
        // far - z[0].
        let total: f64 = delta.iter().sum();
        assert_relative_eq!(total, 1.0 - z[0], epsilon = 1e-12);
        assert!(delta.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn default_sample_count() {
        let (z, _) = sample_along_ray(&unit_ray(0.1, 2.0), 768, None).unwrap();
        assert_eq!(z.len(), 768);
    }

    #[test]
    fn jittered_samples_stay_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut jitter = || rng.gen_range(0.0..1.0);
        let (z, delta) = sample_along_ray(&unit_ray(0.2, 1.7), 64, Some(&mut jitter)).unwrap();
        for i in 1..z.len() {
            assert!(z[i] > z[i - 1]);
        }
        assert!(delta.iter().all(|&d| d > 0.0));
        assert!(z[0] >= 0.2 && *z.last().unwrap() <= 1.7);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(sample_along_ray(&unit_ray(1.0, 1.0), 4, None).is_err());
        assert!(sample_along_ray(&unit_ray(0.0, 1.0), 1, None).is_err());
    }

    #[test]
    fn vacuum_and_opaque_weights() {
        let (w, t) = transmittance_weights(&[0.0, 0.0, 0.0], &[0.1, 0.1, 0.1]);
        assert!(w.iter().all(|&x| x == 0.0));
        assert!(t.iter().all(|&x| x == 1.0));
        // Opaque single sample: sigma * delta = 20.
        let (w, _) = transmittance_weights(&[200.0], &[0.1]);
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn two_sample_half_weights() {
        // sigma_1 delta_1 = ln 2 makes w_1 = 0.5; an opaque second sample
        // takes essentially all remaining transmittance.
        let ln2 = std::f64::consts::LN_2;
        let (w, _) = transmittance_weights(&[ln2 / 0.5, 20.0 / 0.5], &[0.5, 0.5]);
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-3);
        assert!(w.iter().sum::<f64>() <= 1.0 + 1e-9);
        // Rendered depth for z = (2, 4) is 3.
        assert_relative_eq!(render_depth(&w, &[2.0, 4.0]), 3.0, epsilon = 1e-3);
        // Intensity (0.2, 0.8) composes to 0.5.
        assert_relative_eq!(render_average(&w, &[0.2, 0.8]), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn rendered_depth_cases() {
        assert_eq!(render_depth(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let (w, _) = transmittance_weights(&[300.0], &[0.1]);
        assert_relative_eq!(render_depth(&w, &[7.3]), 7.3, epsilon = 1e-6);
        // Constant intensity under an opaque ray reproduces the constant.
        let (w, _) = transmittance_weights(&[5.0, 5.0, 300.0], &[0.1, 0.1, 0.1]);
        assert_relative_eq!(render_average(&w, &[0.37, 0.37, 0.37]), 0.37, epsilon = 1e-6);
    }

    #[test]
    fn weight_invariants_over_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.gen_range(1..32);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-4..0.3)).collect();
            let (w, t) = transmittance_weights(&sigma, &delta);
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(w.iter().sum::<f64>() <= 1.0 + 1e-9);
            for i in 1..n {
                assert!(t[i] <= t[i - 1] + 1e-15);
            }
        }
    }

    #[test]
    fn depth_is_monotone_in_geometry() {
        // Moving density mass from an early sample to a later one never
        // decreases the rendered depth.
        let z = [1.0, 2.0, 3.0, 4.0];
        let delta = [1.0, 1.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut sigma: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
            let (w, _) = transmittance_weights(&sigma, &delta);
            let d_before = render_depth(&w, &z);
            let moved = sigma[0] * rng.gen_range(0.0..1.0);
            sigma[0] -= moved;
            sigma[3] += moved;
            let (w, _) = transmittance_weights(&sigma, &delta);
            let d_after = render_depth(&w, &z);
            assert!(d_after >= d_before - 1e-12);
        }
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.4)).collect();
            let coeff: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |sigma: &[f64]| {
                let (w, _) = transmittance_weights(sigma, &delta);
                w.iter().zip(&coeff).map(|(wi, ci)| wi * ci).sum::<f64>()
            };
            let grad = backward_sigma(&sigma, &delta, &coeff);
            let eps = 1e-7;
            for i in 0..n {
                let mut s = sigma.clone();
                s[i] += eps;
                let lp = loss(&s);
                s[i] = sigma[i] - eps;
                let lm = loss(&s);
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - grad[i]).abs() <= 1e-6 + 1e-6 * fd.abs(),
                    "fd {fd} vs {}",
                    grad[i]
                );
            }
        }
    }
}
