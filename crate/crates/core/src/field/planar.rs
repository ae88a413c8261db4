//! Multi-scale orthogonal feature planes.
//!
//! Per level: three static planes (xy, xz, yz) and three dynamic planes
//! (xt, yt, zt). A query is projected onto each plane, sampled bilinearly,
//! and the three plane results are fused by Hadamard product; levels are
//! concatenated coarse-to-fine.

use super::{spatial_coord, time_coord, GridCoord};
use crate::nn::{Gradients, ParamGroup, ParamStore, TensorRef};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarConfig {
    /// Number of levels; spatial resolution doubles per level.
    pub levels: usize,
    /// Spatial vertex count of the coarsest level.
    pub base_resolution: usize,
    /// Feature channels per level.
    pub channels: usize,
    /// Temporal vertex count of the dynamic planes.
    pub time_resolution: usize,
}

impl Default for PlanarConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_resolution: 64,
            channels: 8,
            time_resolution: 25,
        }
    }
}

#[derive(Debug, Clone)]
struct PlanarLevel {
    resolution: usize,
    time_resolution: usize,
    /// xy, xz, yz.
    static_planes: [TensorRef; 3],
    /// xt, yt, zt.
    dynamic_planes: Option<[TensorRef; 3]>,
}

/// Axis pairs of the static planes (indices into the query point).
const STATIC_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Upper bound on per-level channels; sized for stack scratch buffers in
/// the hot sampling paths.
pub const MAX_CHANNELS: usize = 16;

#[derive(Debug, Clone)]
pub struct PlanarField {
    levels: Vec<PlanarLevel>,
    channels: usize,
}

const PLANE_INIT_BASE: f64 = 0.1;
const PLANE_INIT_JITTER: f64 = 1e-2;

impl PlanarField {
    pub fn new(
        store: &mut ParamStore,
        config: &PlanarConfig,
        with_dynamic: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(config.levels >= 1 && config.base_resolution >= 2);
        assert!(config.time_resolution >= 2);
        assert!(config.channels <= MAX_CHANNELS, "channels capped at {MAX_CHANNELS}");
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let res = config.base_resolution << l;
            let c = config.channels;
            let mut make = |name: String, rows: usize, cols: usize| {
                let t = store.alloc(&name, &[rows, cols, c], ParamGroup::Grid);
                // Hadamard products of zero-mean features collapse gradients;
                // start the planes at a small positive offset instead.
                store.fill_with(t, || {
                    PLANE_INIT_BASE + rng.gen_range(-PLANE_INIT_JITTER..PLANE_INIT_JITTER)
                });
                t
            };
            let static_planes = [
                make(format!("planar.l{l}.static.xy"), res, res),
                make(format!("planar.l{l}.static.xz"), res, res),
                make(format!("planar.l{l}.static.yz"), res, res),
            ];
            let dynamic_planes = with_dynamic.then(|| {
                [
                    make(format!("planar.l{l}.dynamic.xt"), res, config.time_resolution),
                    make(format!("planar.l{l}.dynamic.yt"), res, config.time_resolution),
                    make(format!("planar.l{l}.dynamic.zt"), res, config.time_resolution),
                ]
            });
            levels.push(PlanarLevel {
                resolution: res,
                time_resolution: config.time_resolution,
                static_planes,
                dynamic_planes,
            });
        }
        Self {
            levels,
            channels: config.channels,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.levels.len() * self.channels
    }

    pub fn has_dynamic(&self) -> bool {
        self.levels.first().is_some_and(|l| l.dynamic_planes.is_some())
    }

    /// Bilinear sample of one plane; multiplies `out` in place (Hadamard).
    fn plane_mul(
        store: &ParamStore,
        plane: TensorRef,
        cols: usize,
        channels: usize,
        a: GridCoord,
        b: GridCoord,
        out: &mut [f64],
    ) {
        let data = store.slice(plane);
        let (wa0, wa1) = (1.0 - a.frac, a.frac);
        let (wb0, wb1) = (1.0 - b.frac, b.frac);
        let base00 = (a.i0 * cols + b.i0) * channels;
        let base01 = (a.i0 * cols + b.i0 + 1) * channels;
        let base10 = ((a.i0 + 1) * cols + b.i0) * channels;
        let base11 = ((a.i0 + 1) * cols + b.i0 + 1) * channels;
        for c in 0..channels {
            let v = wa0 * (wb0 * data[base00 + c] + wb1 * data[base01 + c])
                + wa1 * (wb0 * data[base10 + c] + wb1 * data[base11 + c]);
            out[c] *= v;
        }
    }

    /// Bilinear sample of one plane into `out` (overwrites).
    fn plane_sample(
        store: &ParamStore,
        plane: TensorRef,
        cols: usize,
        channels: usize,
        a: GridCoord,
        b: GridCoord,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 1.0);
        Self::plane_mul(store, plane, cols, channels, a, b, out);
    }

    /// Scatters `g` into the plane's four interpolation corners and, when
    /// requested, returns d(sample)/d(coordinate) contributions.
    #[allow(clippy::too_many_arguments)]
    fn plane_backward(
        store: &ParamStore,
        plane: TensorRef,
        cols: usize,
        channels: usize,
        a: GridCoord,
        b: GridCoord,
        g: &[f64],
        grads: &mut Gradients,
        grad_coords: Option<(&mut f64, &mut f64)>,
    ) {
        let (wa0, wa1) = (1.0 - a.frac, a.frac);
        let (wb0, wb1) = (1.0 - b.frac, b.frac);
        let base00 = (a.i0 * cols + b.i0) * channels;
        let base01 = (a.i0 * cols + b.i0 + 1) * channels;
        let base10 = ((a.i0 + 1) * cols + b.i0) * channels;
        let base11 = ((a.i0 + 1) * cols + b.i0 + 1) * channels;
        {
            let gp = grads.slice_mut(plane);
            for c in 0..channels {
                let gc = g[c];
                gp[base00 + c] += gc * wa0 * wb0;
                gp[base01 + c] += gc * wa0 * wb1;
                gp[base10 + c] += gc * wa1 * wb0;
                gp[base11 + c] += gc * wa1 * wb1;
            }
        }
        if let Some((ga, gb)) = grad_coords {
            let data = store.slice(plane);
            for c in 0..channels {
                let gc = g[c];
                let v00 = data[base00 + c];
                let v01 = data[base01 + c];
                let v10 = data[base10 + c];
                let v11 = data[base11 + c];
                // d(sample)/d(ua) and d(sample)/d(ub) of bilinear weights.
                *ga += gc * (wb0 * (v10 - v00) + wb1 * (v11 - v01)) * a.dscale;
                *gb += gc * (wa0 * (v01 - v00) + wa1 * (v11 - v10)) * b.dscale;
            }
        }
    }

    /// Static features: per level, Hadamard product of the three static
    /// plane samples; levels concatenated coarse-to-fine.
    pub fn sample_static(&self, store: &ParamStore, p: &[f64; 3], out: &mut [f64]) {
        let c = self.channels;
        for (li, level) in self.levels.iter().enumerate() {
            let coords: [GridCoord; 3] =
                std::array::from_fn(|ax| spatial_coord(p[ax], level.resolution));
            let slot = &mut out[li * c..(li + 1) * c];
            slot.iter_mut().for_each(|v| *v = 1.0);
            for (pi, &(a, b)) in STATIC_AXES.iter().enumerate() {
                Self::plane_mul(
                    store,
                    level.static_planes[pi],
                    level.resolution,
                    c,
                    coords[a],
                    coords[b],
                    slot,
                );
            }
        }
    }

    pub fn backward_static(
        &self,
        store: &ParamStore,
        p: &[f64; 3],
        grad_out: &[f64],
        grads: &mut Gradients,
    ) {
        let c = self.channels;
        let mut vals = [0.0; 3 * MAX_CHANNELS];
        let mut gp = [0.0; MAX_CHANNELS];
        for (li, level) in self.levels.iter().enumerate() {
            let coords: [GridCoord; 3] =
                std::array::from_fn(|ax| spatial_coord(p[ax], level.resolution));
            for (pi, &(a, b)) in STATIC_AXES.iter().enumerate() {
                Self::plane_sample(
                    store,
                    level.static_planes[pi],
                    level.resolution,
                    c,
                    coords[a],
                    coords[b],
                    &mut vals[pi * c..(pi + 1) * c],
                );
            }
            let g = &grad_out[li * c..(li + 1) * c];
            for pi in 0..3 {
                let (o1, o2) = ((pi + 1) % 3, (pi + 2) % 3);
                for ch in 0..c {
                    gp[ch] = g[ch] * vals[o1 * c + ch] * vals[o2 * c + ch];
                }
                let (a, b) = STATIC_AXES[pi];
                Self::plane_backward(
                    store,
                    level.static_planes[pi],
                    level.resolution,
                    c,
                    coords[a],
                    coords[b],
                    &gp[..c],
                    grads,
                    None,
                );
            }
        }
    }

    /// Dynamic features from the xt/yt/zt planes, Hadamard per level.
    pub fn sample_dynamic(&self, store: &ParamStore, p: &[f64; 3], t: f64, out: &mut [f64]) {
        let c = self.channels;
        for (li, level) in self.levels.iter().enumerate() {
            let planes = level.dynamic_planes.as_ref().expect("dynamic planes absent");
            let tc = time_coord(t, level.time_resolution);
            let slot = &mut out[li * c..(li + 1) * c];
            slot.iter_mut().for_each(|v| *v = 1.0);
            for (pi, plane) in planes.iter().enumerate() {
                let sc = spatial_coord(p[pi], level.resolution);
                Self::plane_mul(store, *plane, level.time_resolution, c, sc, tc, slot);
            }
        }
    }

    pub fn backward_dynamic(
        &self,
        store: &ParamStore,
        p: &[f64; 3],
        t: f64,
        grad_out: &[f64],
        grads: &mut Gradients,
        mut grad_pos: Option<&mut [f64; 3]>,
    ) {
        let c = self.channels;
        let mut vals = [0.0; 3 * MAX_CHANNELS];
        let mut gp = [0.0; MAX_CHANNELS];
        for (li, level) in self.levels.iter().enumerate() {
            let planes = level.dynamic_planes.as_ref().expect("dynamic planes absent");
            let tc = time_coord(t, level.time_resolution);
            let coords: [GridCoord; 3] =
                std::array::from_fn(|ax| spatial_coord(p[ax], level.resolution));
            for (pi, plane) in planes.iter().enumerate() {
                Self::plane_sample(
                    store,
                    *plane,
                    level.time_resolution,
                    c,
                    coords[pi],
                    tc,
                    &mut vals[pi * c..(pi + 1) * c],
                );
            }
            let g = &grad_out[li * c..(li + 1) * c];
            for pi in 0..3 {
                let (o1, o2) = ((pi + 1) % 3, (pi + 2) % 3);
                for ch in 0..c {
                    gp[ch] = g[ch] * vals[o1 * c + ch] * vals[o2 * c + ch];
                }
                let mut gt_unused = 0.0;
                let coord_sink = grad_pos
                    .as_deref_mut()
                    .map(|gpos| (&mut gpos[pi], &mut gt_unused));
                Self::plane_backward(
                    store,
                    planes[pi],
                    level.time_resolution,
                    c,
                    coords[pi],
                    tc,
                    &gp[..c],
                    grads,
                    coord_sink,
                );
            }
        }
    }

    /// Convenience for the full (static, dynamic) planar sample.
    pub fn sample(&self, store: &ParamStore, p: &[f64; 3], t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![0.0; self.out_dim()];
        self.sample_static(store, p, &mut s);
        let d = if self.has_dynamic() {
            let mut d = vec![0.0; self.out_dim()];
            self.sample_dynamic(store, p, t, &mut d);
            d
        } else {
            Vec::new()
        };
        (s, d)
    }

    /// Writes a single value into every channel of one static-plane vertex;
    /// test support for lattice-node cases.
    #[cfg(test)]
    pub(crate) fn set_static_vertex(
        &self,
        store: &mut ParamStore,
        level: usize,
        plane: usize,
        row: usize,
        col: usize,
        value: f64,
    ) {
        let lv = &self.levels[level];
        let c = self.channels;
        let base = (row * lv.resolution + col) * c;
        let s = store.slice_mut(lv.static_planes[plane]);
        for ch in 0..c {
            s[base + ch] = value;
        }
    }
}
