//! Quantitative evaluation: chamfer distance and F-score on point clouds,
//! RMSE / MedAE / PSNR / SSIM on range-view images.

use crate::error::{Error, Result};
use crate::flow::{chamfer, nearest_sq};
use crate::img::Image;
use crate::sensor::{range_to_pointcloud, PointCloud, RangeScan, SensorConfig};

/// Default F-score match threshold in meters (5 cm).
pub const FSCORE_THRESHOLD_M: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMetrics {
    pub rmse: f64,
    pub medae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cd: f64,
    pub fscore: f64,
    pub depth: ChannelMetrics,
    pub intensity: ChannelMetrics,
}

impl MetricsReport {
    /// Fixed-order machine-readable key/value lines.
    pub fn to_lines(&self) -> String {
        format!(
            "cd {}\nfscore {}\ndepth_rmse {}\ndepth_medae {}\ndepth_psnr {}\ndepth_ssim {}\nintensity_rmse {}\nintensity_medae {}\nintensity_psnr {}\nintensity_ssim {}\n",
            self.cd,
            self.fscore,
            self.depth.rmse,
            self.depth.medae,
            self.depth.psnr,
            self.depth.ssim,
            self.intensity.rmse,
            self.intensity.medae,
            self.intensity.psnr,
            self.intensity.ssim,
        )
    }

    pub fn keys() -> [&'static str; 10] {
        [
            "cd",
            "fscore",
            "depth_rmse",
            "depth_medae",
            "depth_psnr",
            "depth_ssim",
            "intensity_rmse",
            "intensity_medae",
            "intensity_psnr",
            "intensity_ssim",
        ]
    }

    /// Mean of several reports (used to average over held-out frames).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            cd: avg(&|r| r.cd),
            fscore: avg(&|r| r.fscore),
            depth: ChannelMetrics {
                rmse: avg(&|r| r.depth.rmse),
                medae: avg(&|r| r.depth.medae),
                psnr: avg(&|r| r.depth.psnr),
                ssim: avg(&|r| r.depth.ssim),
            },
            intensity: ChannelMetrics {
                rmse: avg(&|r| r.intensity.rmse),
                medae: avg(&|r| r.intensity.medae),
                psnr: avg(&|r| r.intensity.psnr),
                ssim: avg(&|r| r.intensity.ssim),
            },
        })
    }
}

/// F-score at threshold `tau` (meters): harmonic mean of the fraction of
/// predicted points within `tau` of the ground truth (precision) and vice
/// versa (recall).
pub fn fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("fscore needs non-empty clouds"));
    }
    let tau_sq = tau * tau;
    let precision = nearest_sq(&pred.points, &gt.points)
        .iter()
        .filter(|(d2, _)| *d2 < tau_sq)
        .count() as f64
        / pred.len() as f64;
    let recall = nearest_sq(&gt.points, &pred.points)
        .iter()
        .filter(|(d2, _)| *d2 < tau_sq)
        .count() as f64
        / gt.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// RMSE, MedAE, PSNR (capped at 100) and SSIM between two aligned images.
pub fn image_metrics(pred: &Image, gt: &Image, data_range: f64) -> Result<ChannelMetrics> {
    if !pred.same_dims(gt) {
        return Err(Error::invalid("image metrics need matching dimensions"));
    }
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be positive"));
    }
    let n = pred.data().len() as f64;
    let mut sq = 0.0;
    let mut abs: Vec<f64> = Vec::with_capacity(pred.data().len());
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let d = p - g;
        sq += d * d;
        abs.push(d.abs());
    }
    let rmse = (sq / n).sqrt();
    abs.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let medae = if abs.len() % 2 == 1 {
        abs[abs.len() / 2]
    } else {
        0.5 * (abs[abs.len() / 2 - 1] + abs[abs.len() / 2])
    };
    let psnr = if rmse < data_range * 1e-5 {
        100.0
    } else {
        20.0 * (data_range / rmse).log10()
    };
    let ssim = ssim_mean(pred, gt, data_range)?;
    Ok(ChannelMetrics {
        rmse,
        medae,
        psnr,
        ssim,
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), evaluated at
/// every position where the window fits fully inside the image.
fn ssim_mean(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let half = SSIM_WINDOW / 2;
    let mut kernel = [0.0; SSIM_WINDOW];
    let mut norm = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - half as f64;
        *k = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        norm += *k;
    }
    kernel.iter_mut().for_each(|k| *k /= norm);
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                let wy = kernel[ky];
                let row = cy + ky - half;
                for kx in 0..SSIM_WINDOW {
                    let wgt = wy * kernel[kx];
                    let va = a.get(row, cx + kx - half);
                    let vb = b.get(row, cx + kx - half);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Evaluation protocol options.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Apply the ground-truth ray-drop mask to both scans for the image
    /// metrics instead of each scan's own mask.
    pub gt_masked: bool,
    /// PSNR/SSIM data range for depth; the sensor max range by convention.
    pub depth_range: f64,
}

/// Scores one predicted frame against ground truth: chamfer distance and
/// F-score on the unprojected clouds (each masked by its own mask), and
/// image metrics on the range views with dropped pixels set to zero.
pub fn evaluate_frame(
    pred: &RangeScan,
    gt: &RangeScan,
    config: &SensorConfig,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if !pred.depth.same_dims(&gt.depth) {
        return Err(Error::invalid("scans must share dimensions"));
    }
    let pred_cloud = range_to_pointcloud(pred, config);
    let gt_cloud = range_to_pointcloud(gt, config);
    let cd = chamfer(&pred_cloud, &gt_cloud)?;
    let f = fscore(&pred_cloud, &gt_cloud, FSCORE_THRESHOLD_M)?;
    let (pred_mask, gt_mask) = if opts.gt_masked {
        (&gt.mask, &gt.mask)
    } else {
        (&pred.mask, &gt.mask)
    };
    let depth = image_metrics(
        &pred.depth.masked_by(pred_mask),
        &gt.depth.masked_by(gt_mask),
        opts.depth_range,
    )?;
    let intensity = image_metrics(
        &pred.intensity.masked_by(pred_mask),
        &gt.intensity.masked_by(gt_mask),
        1.0,
    )?;
    Ok(MetricsReport {
        cd,
        fscore: f,
        depth,
        intensity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{Frame, SensorPose};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(points: &[[f64; 3]]) -> PointCloud {
        PointCloud {
            points: points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            intensity: vec![0.5; points.len()],
            frame: Frame::World,
        }
    }

    #[test]
    fn fscore_hand_cases() {
        let a = cloud_from(&[[0.0, 0.0, 0.0]]);
        assert_eq!(fscore(&a, &a, 0.05).unwrap(), 1.0);
        let far = cloud_from(&[[1.0, 0.0, 0.0]]);
        assert_eq!(fscore(&a, &far, 0.05).unwrap(), 0.0);
        // P = 0.5, R = 1 -> F = 2/3.
        let pred = cloud_from(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_relative_eq!(fscore(&pred, &a, 0.05).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        let empty = PointCloud::new(Frame::World);
        assert!(fscore(&a, &empty, 0.05).is_err());
    }

    #[test]
    fn image_metrics_identity_and_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_vec(12, 16, (0..192).map(|_| rng.gen_range(0.0..50.0)).collect())
            .unwrap();
        let m = image_metrics(&img, &img, 80.0).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.medae, 0.0);
        assert_eq!(m.psnr, 100.0);
        assert_relative_eq!(m.ssim, 1.0, epsilon = 1e-12);

        // Constant offset 1 on range 80: rmse 1, psnr = 20 log10(80).
        let shifted = img.map(|v| v + 1.0);
        let m = image_metrics(&shifted, &img, 80.0).unwrap();
        assert_relative_eq!(m.rmse, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.psnr, 20.0 * 80.0f64.log10(), epsilon = 1e-9);

        // Alternating +/-1 residuals: medae 1, rmse 1.
        let alternating = Image::from_vec(
            12,
            16,
            (0..192)
                .map(|i| img.data()[i] + if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let m = image_metrics(&alternating, &img, 80.0).unwrap();
        assert_relative_eq!(m.rmse, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.medae, 1.0, epsilon = 1e-12);

        let wrong = Image::zeros(12, 15);
        assert!(image_metrics(&wrong, &img, 80.0).is_err());
    }

    #[test]
    fn psnr_decreases_as_rmse_grows() {
        let base = Image::zeros(12, 12);
        let mut last_psnr = f64::INFINITY;
        for k in 1..6 {
            let off = base.map(|_| k as f64);
            let m = image_metrics(&off, &base, 80.0).unwrap();
            assert!(m.psnr < last_psnr);
            last_psnr = m.psnr;
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Image::from_vec(14, 14, (0..196).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let b = Image::from_vec(14, 14, (0..196).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let s_ab = image_metrics(&a, &b, 1.0).unwrap().ssim;
        let s_ba = image_metrics(&b, &a, 1.0).unwrap().ssim;
        assert_relative_eq!(s_ab, s_ba, epsilon = 1e-12);
    }

    fn synthetic_scan(seed: u64) -> (SensorConfig, RangeScan) {
        let config = SensorConfig {
            n_beams: 12,
            azimuth_count: 32,
            fov_up_deg: 10.0,
            fov_down_deg: -20.0,
            max_range_m: 60.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scan = RangeScan::empty(&config, SensorPose::identity(), 0.0);
        for r in 0..12 {
            for c in 0..32 {
                scan.depth.set(r, c, rng.gen_range(5.0..40.0));
                scan.intensity.set(r, c, rng.gen_range(0.1..0.9));
                scan.mask.set(r, c, 1.0);
            }
        }
        (config, scan)
    }

    #[test]
    fn evaluate_frame_identity() {
        let (config, scan) = synthetic_scan(11);
        let opts = EvalOptions {
            gt_masked: false,
            depth_range: config.max_range_m,
        };
        let report = evaluate_frame(&scan, &scan, &config, &opts).unwrap();
        assert_eq!(report.cd, 0.0);
        assert_eq!(report.fscore, 1.0);
        assert_relative_eq!(report.depth.ssim, 1.0, epsilon = 1e-12);
        assert_eq!(report.depth.psnr, 100.0);
        // Report serialization carries exactly the fixed keys in order.
        let text = report.to_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        for (line, key) in lines.iter().zip(MetricsReport::keys()) {
            assert!(line.starts_with(key));
        }
    }

    #[test]
    fn mask_inversion_isolated_by_gt_masked_protocol() {
        // Flip the mask on ~10% of pixels while keeping the stored images:
        // point-cloud metrics degrade, GT-masked image metrics do not.
        let (config, gt) = synthetic_scan(13);
        let mut pred = gt.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..38 {
            let r = rng.gen_range(0..12);
            let c = rng.gen_range(0..32);
            let m = pred.mask.get(r, c);
            pred.mask.set(r, c, 1.0 - m);
        }
        let default = evaluate_frame(
            &pred,
            &gt,
            &config,
            &EvalOptions {
                gt_masked: false,
                depth_range: config.max_range_m,
            },
        )
        .unwrap();
        assert!(default.cd > 0.0);
        assert!(default.depth.rmse > 0.0);
        let masked = evaluate_frame(
            &pred,
            &gt,
            &config,
            &EvalOptions {
                gt_masked: true,
                depth_range: config.max_range_m,
            },
        )
        .unwrap();
        assert_eq!(masked.depth.rmse, 0.0);
        assert_eq!(masked.depth.psnr, 100.0);
        assert_relative_eq!(masked.intensity.ssim, 1.0, epsilon = 1e-12);
    }
}
