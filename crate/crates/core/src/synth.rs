//! Synthetic dynamic scenes with an exact analytic ray-casting oracle.
//!
//! Scenes are collections of bounded axis-aligned planes and boxes; dynamic
//! boxes follow linear or turning trajectories. The oracle answers exact
//! depth queries for arbitrary rays and times, which makes generated
//! datasets their own ground truth for held-out validation.

use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::sensor::{ray_direction, RangeScan, SensorConfig, SensorPose};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes, in ascending order.
    fn others(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// Bounded axis-aligned plane: `point[axis] == offset` within the rectangle
/// spanned by `min`/`max` on the two remaining axes (ascending order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub axis: Axis,
    pub offset: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub intensity: f64,
    pub drop_prob: f64,
}

/// Axis-aligned box; `velocity` (m/s) and `yaw_rate_deg` (deg/s) give linear
/// or turning trajectories of the box center (the box itself stays
/// axis-aligned).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub intensity: f64,
    pub drop_prob: f64,
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub yaw_rate_deg: f64,
}

impl BoxSpec {
    /// Box center at time `t` seconds.
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        let c0 = Vector3::from(self.center);
        let v = Vector3::from(self.velocity);
        let omega = self.yaw_rate_deg.to_radians();
        if omega.abs() < 1e-12 {
            return c0 + v * t;
        }
        // Heading rotates about z at a constant rate; integrate exactly.
        let (s, c) = (omega * t).sin_cos();
        let dx = (s * v.x + (c - 1.0) * v.y) / omega;
        let dy = ((1.0 - c) * v.x + s * v.y) / omega;
        c0 + Vector3::new(dx, dy, v.z * t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sensor: SensorConfig,
    pub n_frames: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    /// Gaussian depth noise sigma in meters (0 disables).
    #[serde(default)]
    pub noise_sigma_m: f64,
    pub sensor_start: [f64; 3],
    /// Sensor velocity in m/s (linear path, identity orientation).
    pub sensor_velocity: [f64; 3],
    pub planes: Vec<PlaneSpec>,
    pub boxes: Vec<BoxSpec>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.n_frames == 0 {
            return Err(Error::invalid("need at least one frame"));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::invalid("frame_dt must be positive"));
        }
        for p in &self.planes {
            if !(0.0..=1.0).contains(&p.intensity) || !(0.0..=1.0).contains(&p.drop_prob) {
                return Err(Error::invalid("plane intensity/drop_prob must be in [0,1]"));
            }
        }
        for b in &self.boxes {
            if b.half_extents.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::invalid("box half extents must be positive"));
            }
            if !(0.0..=1.0).contains(&b.intensity) || !(0.0..=1.0).contains(&b.drop_prob) {
                return Err(Error::invalid("box intensity/drop_prob must be in [0,1]"));
            }
            if b.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("box velocity must be finite"));
            }
        }
        Ok(())
    }

    pub fn sensor_pose(&self, frame: usize) -> SensorPose {
        let t = frame as f64 * self.frame_dt;
        let pos = Vector3::from(self.sensor_start) + Vector3::from(self.sensor_velocity) * t;
        SensorPose::from_rotation_translation(Matrix3::identity(), pos)
            .expect("identity rotation is rigid")
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.frame_dt
    }
}

/// Identifies which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceId {
    Plane(usize),
    Box(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Ray parameter = distance in meters (unit direction).
    pub depth: f64,
    pub surface: SurfaceId,
    pub normal: Vector3<f64>,
    pub intensity_base: f64,
    pub drop_prob: f64,
}

/// Analytic ray caster over a [`SyntheticSpec`].
#[derive(Debug, Clone)]
pub struct SynthOracle {
    pub spec: SyntheticSpec,
}

impl SynthOracle {
    pub fn new(spec: SyntheticSpec) -> Self {
        Self { spec }
    }

    fn cast_plane(plane: &PlaneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let ax = plane.axis.index();
        if dir[ax].abs() < 1e-12 {
            return None;
        }
        let t = (plane.offset - origin[ax]) / dir[ax];
        if t <= 1e-9 {
            return None;
        }
        let (a, b) = plane.axis.others();
        let pa = origin[a] + t * dir[a];
        let pb = origin[b] + t * dir[b];
        if pa < plane.min[0] || pa > plane.max[0] || pb < plane.min[1] || pb > plane.max[1] {
            return None;
        }
        Some(t)
    }

    fn cast_box(
        center: &Vector3<f64>,
        half: &[f64; 3],
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Option<(f64, Vector3<f64>)> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut enter_axis = 0usize;
        for ax in 0..3 {
            let lo = center[ax] - half[ax];
            let hi = center[ax] + half[ax];
            if dir[ax].abs() < 1e-12 {
                if origin[ax] < lo || origin[ax] > hi {
                    return None;
                }
                continue;
            }
            let t0 = (lo - origin[ax]) / dir[ax];
            let t1 = (hi - origin[ax]) / dir[ax];
            let (tn, tf) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            if tn > t_enter {
                t_enter = tn;
                enter_axis = ax;
            }
            t_exit = t_exit.min(tf);
        }
        if t_exit < t_enter || t_exit <= 1e-9 {
            return None;
        }
        if t_enter <= 1e-9 {
            // Origin inside the box; treat as no return.
            return None;
        }
        let mut normal = Vector3::zeros();
        normal[enter_axis] = -dir[enter_axis].signum();
        Some((t_enter, normal))
    }

    /// Nearest surface hit of a world-frame ray at time `time_s`, within
    /// the sensor's max range.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, time_s: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |hit: Hit| {
            if hit.depth <= self.spec.sensor.max_range_m
                && best.as_ref().is_none_or(|b| hit.depth < b.depth)
            {
                best = Some(hit);
            }
        };
        for (i, plane) in self.spec.planes.iter().enumerate() {
            if let Some(t) = Self::cast_plane(plane, origin, dir) {
                let mut normal = Vector3::zeros();
                normal[plane.axis.index()] = -dir[plane.axis.index()].signum();
                consider(Hit {
                    depth: t,
                    surface: SurfaceId::Plane(i),
                    normal,
                    intensity_base: plane.intensity,
                    drop_prob: plane.drop_prob,
                });
            }
        }
        for (i, bx) in self.spec.boxes.iter().enumerate() {
            let center = bx.center_at(time_s);
            if let Some((t, normal)) = Self::cast_box(&center, &bx.half_extents, origin, dir) {
                consider(Hit {
                    depth: t,
                    surface: SurfaceId::Box(i),
                    normal,
                    intensity_base: bx.intensity,
                    drop_prob: bx.drop_prob,
                });
            }
        }
        best
    }

    /// Exact depth for a sensor pose and beam angles at an arbitrary time.
    pub fn depth_at(&self, pose: &SensorPose, theta: f64, phi: f64, time_s: f64) -> Option<f64> {
        let dir = pose.transform_direction(&ray_direction(theta, phi).ok()?);
        self.cast(&pose.translation(), &dir, time_s).map(|h| h.depth)
    }

    /// View-dependent intensity: surface base value times |cos| of the
    /// incidence angle.
    pub fn shade(hit: &Hit, dir: &Vector3<f64>) -> f64 {
        (hit.intensity_base * hit.normal.dot(&-dir).abs()).clamp(0.0, 1.0)
    }
}

/// Renders the spec into a dataset. Depth/intensity are rounded to f32 (the
/// on-disk precision); ray drops are Bernoulli per pixel from the seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(SceneDataset, SynthOracle)> {
    spec.validate()?;
    let oracle = SynthOracle::new(spec.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = &spec.sensor;
    let mut frames = Vec::with_capacity(spec.n_frames);
    for frame in 0..spec.n_frames {
        let pose = spec.sensor_pose(frame);
        let time = spec.frame_time(frame);
        let mut scan = RangeScan::empty(sensor, pose.clone(), time);
        let origin = pose.translation();
        let rot = pose.rotation();
        for row in 0..sensor.n_beams {
            let phi = sensor.beam_elevation(row);
            for col in 0..sensor.azimuth_count {
                let theta = sensor.azimuth(col);
                let dir = rot * ray_direction(theta, phi).expect("grid angles finite");
                let Some(hit) = oracle.cast(&origin, &dir, time) else {
                    continue;
                };
                if hit.drop_prob > 0.0 && rng.gen_bool(hit.drop_prob) {
                    continue;
                }
                let mut depth = hit.depth;
                if spec.noise_sigma_m > 0.0 {
                    // Box-Muller; cheap and keeps the dependency set small.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    depth += spec.noise_sigma_m * (-2.0 * u1.ln()).sqrt() * u2.cos();
                }
                if !(depth > 0.0) || depth > sensor.max_range_m {
                    continue;
                }
                let depth = depth as f32 as f64;
                let intensity = SynthOracle::shade(&hit, &dir) as f32 as f64;
                scan.depth.set(row, col, depth);
                scan.intensity.set(row, col, intensity);
                scan.mask.set(row, col, 1.0);
            }
        }
        frames.push(scan);
    }
    let dataset = SceneDataset::new(sensor.clone(), frames);
    dataset.validate()?;
    Ok((dataset, oracle))
}

/// Desk-scale sensor: 16 x 128 range images, downward-looking so every ray
/// returns from the ground plane within range.
pub fn desk_sensor() -> SensorConfig {
    SensorConfig {
        n_beams: 16,
        azimuth_count: 128,
        fov_up_deg: -5.0,
        fov_down_deg: -24.0,
        max_range_m: 25.0,
    }
}

impl SyntheticSpec {
    /// Static desk scene: ground plane, two walls, two boxes; no drops.
    pub fn desk_static() -> Self {
        Self {
            sensor: desk_sensor(),
            n_frames: 20,
            frame_dt: 0.5,
            noise_sigma_m: 0.0,
            sensor_start: [0.0, 0.0, 1.8],
            sensor_velocity: [0.8, 0.15, 0.0],
            planes: vec![
                PlaneSpec {
                    axis: Axis::Z,
                    offset: 0.0,
                    min: [-100.0, -100.0],
                    max: [100.0, 100.0],
                    intensity: 0.5,
                    drop_prob: 0.0,
                },
                PlaneSpec {
                    axis: Axis::X,
                    offset: 14.0,
                    min: [-20.0, 0.0],
                    max: [20.0, 4.0],
                    intensity: 0.65,
                    drop_prob: 0.0,
                },
                PlaneSpec {
                    axis: Axis::Y,
                    offset: 8.0,
                    min: [-15.0, 0.0],
                    max: [25.0, 4.0],
                    intensity: 0.75,
                    drop_prob: 0.0,
                },
            ],
            boxes: vec![
                BoxSpec {
                    center: [8.0, 2.5, 1.0],
                    half_extents: [1.5, 1.0, 1.0],
                    intensity: 0.8,
                    drop_prob: 0.0,
                    velocity: [0.0; 3],
                    yaw_rate_deg: 0.0,
                },
                BoxSpec {
                    center: [5.0, -3.0, 0.75],
                    half_extents: [1.0, 1.8, 0.75],
                    intensity: 0.35,
                    drop_prob: 0.0,
                    velocity: [0.0; 3],
                    yaw_rate_deg: 0.0,
                },
            ],
        }
    }

    /// Dynamic desk scene: the static scene plus one translating box whose
    /// total displacement is `displacement_frac` of the scene extent.
    pub fn desk_dynamic(displacement_frac: f64) -> Self {
        let mut spec = Self::desk_static();
        // The downward FOV reaches the ground at ~21 m; with the sensor
        // path that spans roughly 48 m of scene extent.
        let extent = 48.0;
        let duration = (spec.n_frames - 1) as f64 * spec.frame_dt;
        let speed = displacement_frac * extent / duration;
        spec.boxes.push(BoxSpec {
            center: [9.0, -1.5, 1.2],
            half_extents: [2.5, 1.6, 1.2],
            intensity: 0.95,
            drop_prob: 0.0,
            velocity: [0.0, speed, 0.0],
            yaw_rate_deg: 0.0,
        });
        spec
    }

    /// Static desk scene with per-surface drop probabilities.
    pub fn desk_raydrop() -> Self {
        let mut spec = Self::desk_static();
        spec.planes[0].drop_prob = 0.03;
        spec.planes[2].drop_prob = 0.9;
        spec.boxes[0].drop_prob = 0.75;
        spec.boxes[1].drop_prob = 0.1;
        spec
    }
}
