//! Spinning-LiDAR geometry: angular grids, range-image/point-cloud
//! projections, rigid sensor poses and scene normalization.
//!
//! Pixel convention: the elevation span `[fov_down, fov_up]` is partitioned
//! into `n_beams` bins and the azimuth circle `[-pi, pi)` into
//! `azimuth_count` bins; a pixel's ray passes through its bin center. Beam
//! row 0 is the lowest elevation, azimuth column 0 starts at -pi.

use crate::error::{Error, Result};
use crate::img::Image;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Angular layout and range limit of a spinning LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Number of vertical channels (range-image height).
    pub n_beams: usize,
    /// Number of horizontal columns per revolution (range-image width).
    pub azimuth_count: usize,
    /// Upper elevation limit in degrees.
    pub fov_up_deg: f64,
    /// Lower elevation limit in degrees; must be below `fov_up_deg`.
    pub fov_down_deg: f64,
    /// Maximum measurable range in meters.
    pub max_range_m: f64,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_beams < 1 || self.azimuth_count < 1 {
            return Err(Error::invalid("sensor needs at least one beam and one azimuth"));
        }
        if !(self.fov_up_deg > self.fov_down_deg) {
            return Err(Error::invalid(format!(
                "fov_up_deg ({}) must exceed fov_down_deg ({})",
                self.fov_up_deg, self.fov_down_deg
            )));
        }
        if !(self.max_range_m > 0.0) || !self.max_range_m.is_finite() {
            return Err(Error::invalid("max_range_m must be positive and finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn fov_up_rad(&self) -> f64 {
        self.fov_up_deg.to_radians()
    }

    #[inline]
    pub fn fov_down_rad(&self) -> f64 {
        self.fov_down_deg.to_radians()
    }

    /// Elevation bin width in radians.
    #[inline]
    pub fn elevation_step(&self) -> f64 {
        (self.fov_up_rad() - self.fov_down_rad()) / self.n_beams as f64
    }

    /// Azimuth bin width in radians.
    #[inline]
    pub fn azimuth_step(&self) -> f64 {
        2.0 * PI / self.azimuth_count as f64
    }

    /// Elevation of beam `row` (bin center), row 0 lowest.
    #[inline]
    pub fn beam_elevation(&self, row: usize) -> f64 {
        self.fov_down_rad() + (row as f64 + 0.5) * self.elevation_step()
    }

    /// Azimuth of column `col` (bin center), column 0 adjacent to -pi.
    #[inline]
    pub fn azimuth(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.azimuth_step()
    }

    /// Bins a direction given by `(theta, phi)` to a pixel, or `None` when
    /// the elevation falls outside the vertical field of view.
    pub fn bin(&self, theta: f64, phi: f64) -> Option<(usize, usize)> {
        let down = self.fov_down_rad();
        let up = self.fov_up_rad();
        if !(phi >= down && phi <= up) {
            return None;
        }
        let row = (((phi - down) / self.elevation_step()) as usize).min(self.n_beams - 1);
        // Wrap azimuth into [-pi, pi).
        let mut t = theta;
        while t < -PI {
            t += 2.0 * PI;
        }
        while t >= PI {
            t -= 2.0 * PI;
        }
        let col = (((t + PI) / self.azimuth_step()) as usize).min(self.azimuth_count - 1);
        Some((row, col))
    }
}

/// Rigid sensor-to-world transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorPose {
    transform: Matrix4<f64>,
}

impl SensorPose {
    pub fn identity() -> Self {
        Self {
            transform: Matrix4::identity(),
        }
    }

    /// Builds a pose from a 4x4 matrix, rejecting non-rigid transforms.
    /// The rotation block must be orthonormal with determinant +1 to 1e-6.
    pub fn new(transform: Matrix4<f64>) -> Result<Self> {
        let r = transform.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho_err > 1e-6 {
            return Err(Error::invalid(format!(
                "pose rotation is not orthonormal (deviation {ortho_err:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("pose rotation must have determinant +1"));
        }
        let bottom = transform.row(3);
        if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::invalid("pose bottom row must be (0, 0, 0, 1)"));
        }
        Ok(Self { transform })
    }

    /// Like [`SensorPose::new`] but re-orthonormalizes rotations that are
    /// within `tol` of orthonormal (Gram-Schmidt), rejecting worse ones.
    pub fn new_orthonormalized(transform: Matrix4<f64>, tol: f64) -> Result<Self> {
        let r = transform.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho_err > tol {
            return Err(Error::invalid(format!(
                "pose rotation deviates from orthonormal by {ortho_err:.2e} (tolerance {tol:.2e})"
            )));
        }
        let c0 = r.column(0).normalize();
        let mut c1 = r.column(1).into_owned();
        c1 -= c0 * c0.dot(&c1);
        let c1 = c1.normalize();
        let c2 = c0.cross(&c1);
        let mut fixed = transform;
        fixed.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_columns(&[c0, c1, c2]));
        Self::new(fixed)
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(m)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.transform
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.transform.fixed_view::<3, 3>(0, 0).into_owned()
    }

    #[inline]
    pub fn translation(&self) -> Vector3<f64> {
        self.transform.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    #[inline]
    pub fn transform_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * d
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Pose with the translation remapped by a uniform scene scale.
    pub fn rescaled(&self, scale: &SceneScale) -> SensorPose {
        let mut m = self.transform;
        let t = scale.point_to_normalized(&self.translation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        SensorPose { transform: m }
    }
}

/// A single LiDAR ray in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn validate(&self) -> Result<()> {
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::invalid("ray bounds must satisfy 0 <= near < far"));
        }
        Ok(())
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Unit direction for azimuth `theta` and elevation `phi` (from horizontal).
pub fn ray_direction(theta: f64, phi: f64) -> Result<Vector3<f64>> {
    if !theta.is_finite() || !phi.is_finite() {
        return Err(Error::invalid("ray angles must be finite"));
    }
    let (ct, st) = (theta.cos(), theta.sin());
    let (cp, sp) = (phi.cos(), phi.sin());
    Ok(Vector3::new(cp * ct, cp * st, sp))
}

/// Inverse of [`ray_direction`]: `(theta, phi)` of a direction.
pub fn direction_angles(d: &Vector3<f64>) -> (f64, f64) {
    let r = d.norm();
    (d.y.atan2(d.x), (d.z / r).asin())
}

/// Normalized-scene bounding cube used to clip rays; the unit cube is
/// expanded by 5% so geometry on the boundary stays renderable.
pub const SCENE_CUBE_HALF_EXTENT: f64 = 1.05;
const RAY_NEAR_MIN: f64 = 1e-4;

/// Intersects a ray with the expanded normalized cube; `None` on a miss.
pub fn clip_to_scene_cube(origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<(f64, f64)> {
    let h = SCENE_CUBE_HALF_EXTENT;
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis];
        let d = direction[axis];
        if d.abs() < 1e-15 {
            if o < -h || o > h {
                return None;
            }
            continue;
        }
        let t0 = (-h - o) / d;
        let t1 = (h - o) / d;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    let near = t_enter.max(RAY_NEAR_MIN);
    if t_exit <= near {
        return None;
    }
    Some((near, t_exit))
}

/// One LiDAR frame: aligned depth/intensity/mask range images plus pose and
/// a timestamp. Depth is positive exactly where the mask is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeScan {
    pub depth: Image,
    pub intensity: Image,
    pub mask: Image,
    pub pose: SensorPose,
    pub timestamp: f64,
}

impl RangeScan {
    pub fn empty(config: &SensorConfig, pose: SensorPose, timestamp: f64) -> Self {
        Self {
            depth: Image::zeros(config.n_beams, config.azimuth_count),
            intensity: Image::zeros(config.n_beams, config.azimuth_count),
            mask: Image::zeros(config.n_beams, config.azimuth_count),
            pose,
            timestamp,
        }
    }

    pub fn validate(&self, config: &SensorConfig) -> Result<()> {
        if self.depth.height() != config.n_beams || self.depth.width() != config.azimuth_count {
            return Err(Error::invalid(format!(
                "scan dims {}x{} do not match sensor {}x{}",
                self.depth.height(),
                self.depth.width(),
                config.n_beams,
                config.azimuth_count
            )));
        }
        if !self.depth.same_dims(&self.intensity) || !self.depth.same_dims(&self.mask) {
            return Err(Error::invalid("scan channels must share dimensions"));
        }
        for i in 0..self.mask.data().len() {
            let (d, v, m) = (self.depth.data()[i], self.intensity.data()[i], self.mask.data()[i]);
            if m != 0.0 && m != 1.0 {
                return Err(Error::invalid("mask must be binary"));
            }
            if (m == 1.0) != (d > 0.0) {
                return Err(Error::invalid("depth must be positive exactly where mask = 1"));
            }
            if m == 0.0 && v != 0.0 {
                return Err(Error::invalid("intensity must be 0 where mask = 0"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("intensity must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

/// Coordinate frame tag for point clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Sensor,
    World,
}

/// Points with per-point reflection intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Vec<f64>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(frame: Frame) -> Self {
        Self {
            points: Vec::new(),
            intensity: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.intensity.len() {
            return Err(Error::invalid("points and intensity lengths differ"));
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite() || !p.z.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(())
    }
}

/// Clamps ray far bounds to the sensor's reach (normalized units); rays
/// whose clipped segment vanishes are dropped.
pub fn clamp_ray_far(rays: &mut [Option<Ray>], far_limit: f64) {
    for slot in rays.iter_mut() {
        if let Some(ray) = slot {
            ray.far = ray.far.min(far_limit);
            if ray.far <= ray.near {
                *slot = None;
            }
        }
    }
}

/// Builds the full H x W grid of world-frame rays for one scan; `None`
/// entries are rays that miss the expanded scene cube entirely.
pub fn scan_rays(config: &SensorConfig, pose: &SensorPose) -> Vec<Option<Ray>> {
    let origin = pose.translation();
    let rot = pose.rotation();
    let mut rays = Vec::with_capacity(config.n_beams * config.azimuth_count);
    for row in 0..config.n_beams {
        let phi = config.beam_elevation(row);
        for col in 0..config.azimuth_count {
            let theta = config.azimuth(col);
            let dir = rot * ray_direction(theta, phi).expect("grid angles are finite");
            rays.push(clip_to_scene_cube(&origin, &dir).map(|(near, far)| Ray {
                origin,
                direction: dir,
                near,
                far,
            }));
        }
    }
    rays
}

/// Projects a sensor-frame cloud into a range scan. Each point is binned by
/// its (elevation, azimuth); the nearest return per pixel wins, ties broken
/// by lower point index. Points outside the FOV or beyond `max_range_m` are
/// discarded. Stored depths are rounded to f32 precision, the precision of
/// the on-disk scan format, which keeps projection round trips exact.
pub fn pointcloud_to_range(
    pc: &PointCloud,
    config: &SensorConfig,
    pose: SensorPose,
    timestamp: f64,
) -> RangeScan {
    assert_eq!(pc.frame, Frame::Sensor, "pointcloud_to_range expects sensor-frame points");
    let mut scan = RangeScan::empty(config, pose, timestamp);
    for (idx, p) in pc.points.iter().enumerate() {
        let range = p.norm();
        if !(range > 0.0) || range > config.max_range_m {
            continue;
        }
        let (theta, phi) = direction_angles(p);
        let Some((row, col)) = config.bin(theta, phi) else {
            continue;
        };
        let range = range as f32 as f64;
        let current = scan.depth.get(row, col);
        if scan.mask.get(row, col) == 0.0 || range < current {
            scan.depth.set(row, col, range);
            scan.intensity.set(row, col, pc.intensity[idx]);
            scan.mask.set(row, col, 1.0);
        }
    }
    scan
}

/// Unprojects a range scan to a world-frame cloud through its pose.
pub fn range_to_pointcloud(scan: &RangeScan, config: &SensorConfig) -> PointCloud {
    let mut pc = PointCloud::new(Frame::World);
    for row in 0..config.n_beams {
        let phi = config.beam_elevation(row);
        for col in 0..config.azimuth_count {
            if scan.mask.get(row, col) != 1.0 {
                continue;
            }
            let theta = config.azimuth(col);
            let p_sensor = ray_direction(theta, phi).expect("grid angles are finite")
                * scan.depth.get(row, col);
            pc.points.push(scan.pose.transform_point(&p_sensor));
            pc.intensity.push(scan.intensity.get(row, col));
        }
    }
    pc
}

/// Invertible record of the map from world meters to the normalized scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScale {
    pub center: [f64; 3],
    pub scale: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl SceneScale {
    #[inline]
    pub fn point_to_normalized(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - Vector3::from(self.center)) * self.scale
    }

    #[inline]
    pub fn point_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + Vector3::from(self.center)
    }

    #[inline]
    pub fn depth_to_normalized(&self, meters: f64) -> f64 {
        meters * self.scale
    }

    #[inline]
    pub fn depth_to_meters(&self, normalized: f64) -> f64 {
        normalized / self.scale
    }

    pub fn time_to_normalized(&self, seconds: f64) -> f64 {
        if self.t_end > self.t_start {
            (seconds - self.t_start) / (self.t_end - self.t_start)
        } else {
            0.0
        }
    }

    pub fn time_to_seconds(&self, normalized: f64) -> f64 {
        self.t_start + normalized * (self.t_end - self.t_start)
    }
}

/// Maps a scan sequence into the normalized scene: all world-frame returns
/// plus sensor positions fit in `[-1, 1]^3` after a uniform scale and
/// translation, and timestamps map linearly to `[0, 1]`.
pub fn normalize_scene(
    config: &SensorConfig,
    scans: &[RangeScan],
) -> Result<(Vec<RangeScan>, SceneScale)> {
    if scans.is_empty() {
        return Err(Error::invalid("normalize_scene needs at least one scan"));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: &Vector3<f64>| {
        lo = lo.inf(p);
        hi = hi.sup(p);
    };
    for scan in scans {
        for p in range_to_pointcloud(scan, config).points.iter() {
            grow(p);
        }
        grow(&scan.pose.translation());
    }
    let extent = hi - lo;
    let half = extent.max() * 0.5;
    if !(half > 0.0) || !half.is_finite() {
        return Err(Error::invalid("scene has zero or non-finite extent"));
    }
    let center = (lo + hi) * 0.5;
    let scale = SceneScale {
        center: center.into(),
        scale: 1.0 / half,
        t_start: scans[0].timestamp,
        t_end: scans[scans.len() - 1].timestamp,
    };
    let normalized = scans
        .iter()
        .map(|scan| RangeScan {
            depth: scan.depth.map(|d| d * scale.scale),
            intensity: scan.intensity.clone(),
            mask: scan.mask.clone(),
            pose: scan.pose.rescaled(&scale),
            timestamp: scale.time_to_normalized(scan.timestamp),
        })
        .collect();
    Ok((normalized, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_config() -> SensorConfig {
        SensorConfig {
            n_beams: 16,
            azimuth_count: 128,
            fov_up_deg: 10.0,
            fov_down_deg: -25.0,
            max_range_m: 80.0,
        }
    }

    #[test]
    fn ray_direction_axis_cases() {
        let d = ray_direction(0.0, 0.0).unwrap();
        assert_relative_eq!(d.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(d.y, 0.0, epsilon = 1e-12);
        let d = ray_direction(PI / 2.0, 0.0).unwrap();
        assert_relative_eq!(d.y, 1.0, epsilon = 1e-12);
        assert!(d.x.abs() < 1e-12);
    }

    #[test]
    fn ray_direction_diagonal() {
        // Direct trigonometric evaluation at theta = phi = pi/4.
        let d = ray_direction(PI / 4.0, PI / 4.0).unwrap();
        assert_relative_eq!(d.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(d.y, 0.5, epsilon = 1e-12);
        assert_relative_eq!(d.z, 0.70710678, epsilon = 1e-8);
        assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_direction_rejects_non_finite() {
        assert!(ray_direction(f64::NAN, 0.0).is_err());
        assert!(ray_direction(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn ray_direction_unit_norm_over_grid() {
        for i in 0..60 {
            for j in 0..30 {
                let theta = -PI + 2.0 * PI * i as f64 / 60.0;
                let phi = -PI / 2.0 + PI * (j as f64 + 0.5) / 30.0;
                let d = ray_direction(theta, phi).unwrap();
                assert!((d.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scan_rays_dims_and_identity_case() {
        // Single beam centered at phi = 0, single azimuth centered at theta = 0.
        let config = SensorConfig {
            n_beams: 1,
            azimuth_count: 1,
            fov_up_deg: 1.0,
            fov_down_deg: -1.0,
            max_range_m: 10.0,
        };
        let rays = scan_rays(&config, &SensorPose::identity());
        assert_eq!(rays.len(), 1);
        let ray = rays[0].as_ref().unwrap();
        assert_relative_eq!(ray.origin.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.x, 1.0, epsilon = 1e-12);
        assert!(ray.direction.y.abs() < 1e-12 && ray.direction.z.abs() < 1e-12);
        assert!(ray.near < ray.far);

        let kitti = SensorConfig {
            n_beams: 66,
            azimuth_count: 1030,
            fov_up_deg: 2.0,
            fov_down_deg: -24.4,
            max_range_m: 80.0,
        };
        assert_eq!(scan_rays(&kitti, &SensorPose::identity()).len(), 66 * 1030);
        let nuscenes = SensorConfig {
            n_beams: 32,
            azimuth_count: 1080,
            fov_up_deg: 10.0,
            fov_down_deg: -30.0,
            max_range_m: 100.0,
        };
        assert_eq!(scan_rays(&nuscenes, &SensorPose::identity()).len(), 32 * 1080);
    }

    #[test]
    fn pointcloud_binning_rules() {
        let config = SensorConfig {
            n_beams: 3,
            azimuth_count: 8,
            fov_up_deg: 15.0,
            fov_down_deg: -15.0,
            max_range_m: 50.0,
        };
        // Single point straight ahead lands in the middle beam.
        let mut pc = PointCloud::new(Frame::Sensor);
        pc.points.push(Vector3::new(10.0, 0.0, 0.0));
        pc.intensity.push(0.5);
        let scan = pointcloud_to_range(&pc, &config, SensorPose::identity(), 0.0);
        assert_eq!(scan.valid_count(), 1);
        let (row, col) = config.bin(0.0, 0.0).unwrap();
        assert_eq!(scan.depth.get(row, col), 10.0);
        assert_eq!(scan.intensity.get(row, col), 0.5);

        // Two points in one pixel: nearest wins.
        pc.points.push(Vector3::new(5.0, 0.0, 0.0));
        pc.intensity.push(0.9);
        let scan = pointcloud_to_range(&pc, &config, SensorPose::identity(), 0.0);
        assert_eq!(scan.depth.get(row, col), 5.0);
        assert_eq!(scan.intensity.get(row, col), 0.9);

        // Point above fov_up is rejected.
        let mut high = PointCloud::new(Frame::Sensor);
        high.points.push(Vector3::new(1.0, 0.0, 1.0)); // 45 degrees up
        high.intensity.push(1.0);
        let scan = pointcloud_to_range(&high, &config, SensorPose::identity(), 0.0);
        assert_eq!(scan.valid_count(), 0);
    }

    #[test]
    fn range_to_pointcloud_axis_case() {
        let config = SensorConfig {
            n_beams: 1,
            azimuth_count: 1,
            fov_up_deg: 1.0,
            fov_down_deg: -1.0,
            max_range_m: 10.0,
        };
        let mut scan = RangeScan::empty(&config, SensorPose::identity(), 0.0);
        scan.depth.set(0, 0, 2.0);
        scan.intensity.set(0, 0, 0.25);
        scan.mask.set(0, 0, 1.0);
        let pc = range_to_pointcloud(&scan, &config);
        assert_eq!(pc.len(), 1);
        assert_relative_eq!(pc.points[0].x, 2.0, epsilon = 1e-12);
        assert!(pc.points[0].y.abs() < 1e-12 && pc.points[0].z.abs() < 1e-12);

        let empty = RangeScan::empty(&config, SensorPose::identity(), 0.0);
        assert!(range_to_pointcloud(&empty, &config).is_empty());
    }

    #[test]
    fn projection_round_trip_from_random_clouds() {
        // Random in-FOV clouds: cloud -> range -> cloud stays within the
        // angular-quantization bound, and re-projecting reproduces depths.
        let config = desk_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bound_angle =
            0.5 * (config.elevation_step().powi(2) + config.azimuth_step().powi(2)).sqrt();
        for _ in 0..20 {
            let mut pc = PointCloud::new(Frame::Sensor);
            for _ in 0..300 {
                let theta = rng.gen_range(-PI..PI);
                let phi = rng.gen_range(config.fov_down_rad()..config.fov_up_rad());
                let r = rng.gen_range(1.0..70.0);
                pc.points.push(ray_direction(theta, phi).unwrap() * r);
                pc.intensity.push(rng.gen_range(0.0..1.0));
            }
            let scan = pointcloud_to_range(&pc, &config, SensorPose::identity(), 0.0);
            let back = range_to_pointcloud(&scan, &config);
            // Every surviving point is within depth * half-bin-arc of some input.
            for p in &back.points {
                let best = pc
                    .points
                    .iter()
                    .map(|q| (p - q).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(best <= p.norm() * bound_angle + 1e-9, "{best} vs bound");
            }
            // Re-binning the reconstructed cloud reproduces the depth image.
            let back_sensor = PointCloud {
                points: back.points.clone(),
                intensity: back.intensity.clone(),
                frame: Frame::Sensor,
            };
            let scan2 = pointcloud_to_range(&back_sensor, &config, SensorPose::identity(), 0.0);
            assert_eq!(scan.depth, scan2.depth);
            assert_eq!(scan.mask, scan2.mask);
        }
    }

    #[test]
    fn normalize_scene_affine_map() {
        // Geometry spanning [0, 100] on each axis: scale 1/50, center 50.
        // A 1x1 sensor has its single ray along +x; the return at depth 100
        // spans x, the second pose spans y and z.
        let config = SensorConfig {
            n_beams: 1,
            azimuth_count: 1,
            fov_up_deg: 1.0,
            fov_down_deg: -1.0,
            max_range_m: 200.0,
        };
        let mut scan0 = RangeScan::empty(&config, SensorPose::identity(), 0.0);
        scan0.depth.set(0, 0, 100.0);
        scan0.mask.set(0, 0, 1.0);
        scan0.intensity.set(0, 0, 0.5);
        let pose1 = SensorPose::from_rotation_translation(
            Matrix3::identity(),
            Vector3::new(0.0, 100.0, 100.0),
        )
        .unwrap();
        let scan1 = RangeScan::empty(&config, pose1, 5.0);
        let (normed, scale) = normalize_scene(&config, &[scan0, scan1]).unwrap();
        assert_relative_eq!(scale.scale, 1.0 / 50.0, epsilon = 1e-9);
        // Timestamps 0 s and 5 s map to 0 and 1.
        assert_eq!(normed[0].timestamp, 0.0);
        assert_eq!(normed[1].timestamp, 1.0);
        // Round trip is identity to 1e-9.
        let p = Vector3::new(13.0, -4.0, 77.0);
        let back = scale.point_to_world(&scale.point_to_normalized(&p));
        assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-9);
        // All returns and poses inside the unit cube.
        for scan in &normed {
            for q in range_to_pointcloud(scan, &config).points {
                assert!(q.amax() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn normalize_scene_rejects_degenerate() {
        let config = desk_config();
        let scan = RangeScan::empty(&config, SensorPose::identity(), 0.0);
        assert!(normalize_scene(&config, &[scan]).is_err());
    }

    #[test]
    fn pose_validation() {
        assert!(SensorPose::new(Matrix4::identity()).is_ok());
        let mut skewed = Matrix4::identity();
        skewed[(0, 1)] = 0.1;
        assert!(SensorPose::new(skewed).is_err());
        // Mild drift is re-orthonormalized, large drift rejected.
        let mut drift = Matrix4::identity();
        drift[(0, 0)] = 1.0 + 1e-5;
        assert!(SensorPose::new_orthonormalized(drift, 1e-3).is_ok());
        assert!(SensorPose::new_orthonormalized(skewed, 1e-3).is_err());
    }

    #[test]
    fn cube_clipping() {
        // From the center, every axis ray spans (near, 1.05].
        let (near, far) =
            clip_to_scene_cube(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(near > 0.0 && near < 1e-3);
        assert_relative_eq!(far, SCENE_CUBE_HALF_EXTENT, epsilon = 1e-12);
        // A ray pointing away from the cube misses.
        assert!(clip_to_scene_cube(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(1.0, 0.0, 0.0))
            .is_none());
    }
}
