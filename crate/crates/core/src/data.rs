//! Dataset and checkpoint persistence.
//!
//! Scene directory layout:
//! `scene/{sensor.cfg, timestamps.txt, frames/NNNNNN.depth.f32,
//! frames/NNNNNN.intensity.f32, frames/NNNNNN.pose.txt}` with depth and
//! intensity stored as row-major little-endian f32, the mask derived as
//! `depth > 0`, poses as 16 whitespace-separated decimals, and the sensor
//! config as flat `key=value` text.
//!
//! Checkpoints are a single binary file: a 16-byte magic+version header, a
//! length-prefixed TOML configuration block, then length-prefixed named
//! tensors (field parameters first, refiner parameters when present).

use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::{FieldModel, ModelConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::sensor::{RangeScan, SceneScale, SensorConfig, SensorPose};
use crate::train::TrainConfig;
use crate::unet::{RefinerConfig, RefinerNet};
use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Frames held out for novel-view evaluation: every 10th frame, excluding
/// the sequence endpoints (51 frames give 4 held-out samples).
pub fn default_holdout(n_frames: usize) -> Vec<usize> {
    if n_frames < 2 {
        return Vec::new();
    }
    (10..n_frames - 1).step_by(10).collect()
}

/// An ordered scan sequence with its train/heldout split.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub config: SensorConfig,
    pub frames: Vec<RangeScan>,
    pub heldout: Vec<usize>,
}

impl SceneDataset {
    pub fn new(config: SensorConfig, frames: Vec<RangeScan>) -> Self {
        let heldout = default_holdout(frames.len());
        Self {
            config,
            frames,
            heldout,
        }
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|i| !self.heldout.contains(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (i, frame) in self.frames.iter().enumerate() {
            frame
                .validate(&self.config)
                .map_err(|e| Error::invalid(format!("frame {i}: {e}")))?;
        }
        for w in self.frames.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::invalid("timestamps must be strictly increasing"));
            }
        }
        if self.heldout.iter().any(|&i| i >= self.frames.len()) {
            return Err(Error::invalid("heldout index out of range"));
        }
        Ok(())
    }
}

fn frame_stem(index: usize) -> String {
    format!("{index:06}")
}

fn write_f32_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for &v in img.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_image(path: &Path, height: usize, width: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let expected = height * width * 4;
    if bytes.len() != expected {
        return Err(Error::load(
            path,
            format!("expected {expected} bytes for {height}x{width} f32, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(height, width, data)
}

fn write_pose(path: &Path, pose: &SensorPose) -> Result<()> {
    let m = pose.matrix();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_pose(path: &Path) -> Result<SensorPose> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::load(path, format!("bad pose value: {e}")))?;
    if values.len() != 16 {
        return Err(Error::load(
            path,
            format!("pose needs 16 values, found {}", values.len()),
        ));
    }
    let m = Matrix4::from_row_slice(&values);
    SensorPose::new_orthonormalized(m, 1e-3).map_err(|e| Error::load(path, e.to_string()))
}

fn write_sensor_config(path: &Path, config: &SensorConfig) -> Result<()> {
    let text = format!(
        "n_beams={}\nazimuth_count={}\nfov_up_deg={}\nfov_down_deg={}\nmax_range_m={}\n",
        config.n_beams,
        config.azimuth_count,
        config.fov_up_deg,
        config.fov_down_deg,
        config.max_range_m
    );
    fs::write(path, text)?;
    Ok(())
}

fn read_sensor_config(path: &Path) -> Result<SensorConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut n_beams = None;
    let mut azimuth_count = None;
    let mut fov_up = None;
    let mut fov_down = None;
    let mut max_range = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::load(path, format!("line {}: expected key=value", ln + 1)));
        };
        let bad = |e: String| Error::load(path, format!("line {}: {e}", ln + 1));
        match key.trim() {
            "n_beams" => n_beams = Some(value.trim().parse().map_err(|e| bad(format!("{e}")))?),
            "azimuth_count" => {
                azimuth_count = Some(value.trim().parse().map_err(|e| bad(format!("{e}")))?)
            }
            "fov_up_deg" => fov_up = Some(value.trim().parse().map_err(|e| bad(format!("{e}")))?),
            "fov_down_deg" => {
                fov_down = Some(value.trim().parse().map_err(|e| bad(format!("{e}")))?)
            }
            "max_range_m" => {
                max_range = Some(value.trim().parse().map_err(|e| bad(format!("{e}")))?)
            }
            other => return Err(Error::load(path, format!("unknown key '{other}'"))),
        }
    }
    let missing = |what: &str| Error::load(path, format!("missing key '{what}'"));
    let config = SensorConfig {
        n_beams: n_beams.ok_or_else(|| missing("n_beams"))?,
        azimuth_count: azimuth_count.ok_or_else(|| missing("azimuth_count"))?,
        fov_up_deg: fov_up.ok_or_else(|| missing("fov_up_deg"))?,
        fov_down_deg: fov_down.ok_or_else(|| missing("fov_down_deg"))?,
        max_range_m: max_range.ok_or_else(|| missing("max_range_m"))?,
    };
    config.validate()?;
    Ok(config)
}

/// Writes one frame's channel files into an existing `frames/` directory.
pub fn write_frame(frames_dir: &Path, index: usize, scan: &RangeScan) -> Result<()> {
    let stem = frame_stem(index);
    write_f32_image(&frames_dir.join(format!("{stem}.depth.f32")), &scan.depth)?;
    write_f32_image(
        &frames_dir.join(format!("{stem}.intensity.f32")),
        &scan.intensity,
    )?;
    write_pose(&frames_dir.join(format!("{stem}.pose.txt")), &scan.pose)?;
    Ok(())
}

pub fn save_scene(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    write_sensor_config(&dir.join("sensor.cfg"), &dataset.config)?;
    let timestamps: String = dataset
        .frames
        .iter()
        .map(|f| format!("{}\n", f.timestamp))
        .collect();
    fs::write(dir.join("timestamps.txt"), timestamps)?;
    for (i, frame) in dataset.frames.iter().enumerate() {
        write_frame(&frames_dir, i, frame)?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let config = read_sensor_config(&dir.join("sensor.cfg"))?;
    let ts_path = dir.join("timestamps.txt");
    let ts_text = fs::read_to_string(&ts_path).map_err(|e| Error::load(&ts_path, e.to_string()))?;
    let timestamps: Vec<f64> = ts_text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::load(&ts_path, format!("bad timestamp: {e}")))?;
    if timestamps.is_empty() {
        return Err(Error::load(&ts_path, "no timestamps"));
    }
    let frames_dir = dir.join("frames");
    let mut frames = Vec::with_capacity(timestamps.len());
    for (i, &timestamp) in timestamps.iter().enumerate() {
        let stem = frame_stem(i);
        let depth = read_f32_image(
            &frames_dir.join(format!("{stem}.depth.f32")),
            config.n_beams,
            config.azimuth_count,
        )?;
        let intensity = read_f32_image(
            &frames_dir.join(format!("{stem}.intensity.f32")),
            config.n_beams,
            config.azimuth_count,
        )?;
        let pose = read_pose(&frames_dir.join(format!("{stem}.pose.txt")))?;
        let mask = depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        // The mask is derived from depth, so stray intensity on dropped
        // pixels is cleared rather than rejected.
        let intensity = intensity.masked_by(&mask);
        frames.push(RangeScan {
            depth,
            intensity,
            mask,
            pose,
            timestamp,
        });
    }
    let dataset = SceneDataset::new(config, frames);
    dataset.validate()?;
    Ok(dataset)
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LFRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    sensor: SensorConfig,
    scene_scale: SceneScale,
    model: ModelConfig,
    train: TrainConfig,
    refiner: Option<RefinerConfig>,
    seed: u64,
    time_step: f64,
}

/// A trained model: every table and network parameter plus the scene and
/// training configuration needed to rebuild and render it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub sensor: SensorConfig,
    pub scene_scale: SceneScale,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub refiner_config: Option<RefinerConfig>,
    pub seed: u64,
    pub time_step: f64,
    pub field_params: ParamStore,
    pub refiner_params: Option<ParamStore>,
}

fn write_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.entries().len() as u32).to_le_bytes());
    for meta in store.entries() {
        let name = meta.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(meta.shape.len() as u8);
        for &d in &meta.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len as u64).to_le_bytes());
        for &v in &store.data()[meta.offset..meta.offset + meta.len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::load(&self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_store(r: &mut Reader) -> Result<ParamStore> {
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::load(&r.path, "bad tensor name"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = r.u64()? as usize;
        if shape.iter().product::<usize>() != len {
            return Err(Error::load(&r.path, format!("tensor {name}: shape/len mismatch")));
        }
        let tref = store.alloc(&name, &shape, ParamGroup::Mlp);
        let bytes = r.take(len * 8)?;
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            store.slice_mut(tref)[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            sensor: self.sensor.clone(),
            scene_scale: self.scene_scale.clone(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            refiner: self.refiner_config,
            seed: self.seed,
            time_step: self.time_step,
        };
        let header_toml =
            toml::to_string(&header).map_err(|e| Error::invalid(format!("config encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(header_toml.len() as u64).to_le_bytes());
        out.extend_from_slice(header_toml.as_bytes());
        write_store(&mut out, &self.field_params);
        out.push(self.refiner_params.is_some() as u8);
        if let Some(store) = &self.refiner_params {
            write_store(&mut out, store);
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::load(path, e.to_string()))?
            .read_to_end(&mut bytes)?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::load(path, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let _reserved = r.u32()?;
        let header_len = r.u64()? as usize;
        let header_bytes = r.take(header_len)?;
        let header: CheckpointHeader = toml::from_str(
            std::str::from_utf8(header_bytes).map_err(|_| Error::load(path, "bad header utf-8"))?,
        )
        .map_err(|e| Error::load(path, format!("bad header: {e}")))?;
        let field_params = read_store(&mut r)?;
        let has_refiner = r.take(1)?[0] != 0;
        let refiner_params = has_refiner.then(|| read_store(&mut r)).transpose()?;
        if r.pos != bytes.len() {
            return Err(Error::load(path, "trailing bytes after checkpoint"));
        }
        if has_refiner != header.refiner.is_some() {
            return Err(Error::load(path, "refiner config/parameters mismatch"));
        }
        Ok(Checkpoint {
            sensor: header.sensor,
            scene_scale: header.scene_scale,
            model_config: header.model,
            train_config: header.train,
            refiner_config: header.refiner,
            seed: header.seed,
            time_step: header.time_step,
            field_params,
            refiner_params,
        })
    }

    /// Rebuilds the field model and fills it with the stored parameters.
    pub fn build_model(&self) -> Result<(ParamStore, FieldModel)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let model = FieldModel::new(&mut store, self.model_config.clone(), self.time_step, &mut rng)?;
        copy_params(&self.field_params, &mut store, "field")?;
        Ok((store, model))
    }

    /// Rebuilds the refiner, when the checkpoint carries one.
    pub fn build_refiner(&self) -> Result<Option<(ParamStore, RefinerNet)>> {
        let (Some(config), Some(params)) = (&self.refiner_config, &self.refiner_params) else {
            return Ok(None);
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let net = RefinerNet::new(&mut store, *config, &mut rng);
        copy_params(params, &mut store, "refiner")?;
        Ok(Some((store, net)))
    }
}

fn copy_params(from: &ParamStore, into: &mut ParamStore, what: &str) -> Result<()> {
    if from.entries().len() != into.entries().len() {
        return Err(Error::invalid(format!(
            "{what} parameters do not match the configuration (tensor count {} vs {})",
            from.entries().len(),
            into.entries().len()
        )));
    }
    for (a, b) in from.entries().iter().zip(into.entries()) {
        if a.name != b.name || a.shape != b.shape {
            return Err(Error::invalid(format!(
                "{what} tensor mismatch: {} {:?} vs {} {:?}",
                a.name, a.shape, b.name, b.shape
            )));
        }
    }
    let src = from.data().to_vec();
    into.data_mut().copy_from_slice(&src);
    Ok(())
}
