//! Multi-level hashed voxel grids.
//!
//! Per level: one static table indexed by (x, y, z) cells and three dynamic
//! tables indexed by (x, y, t), (x, z, t), (y, z, t) cells. Virtual
//! resolutions grow geometrically across levels; levels whose dense vertex
//! count fits in the table are stored densely (row-major, collision-free),
//! larger ones are compressed through the XOR spatial hash.

use super::{spatial_coord, time_coord, GridCoord};
use crate::nn::{Gradients, ParamGroup, ParamStore, TensorRef};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashConfig {
    pub levels: usize,
    /// Vertex count per axis of the coarsest level.
    pub min_resolution: usize,
    /// Vertex count per axis of the finest level.
    pub max_resolution: usize,
    /// Feature channels per level.
    pub channels: usize,
    /// Hash table rows per table.
    pub table_size: usize,
    /// Temporal vertex count of the dynamic tables.
    pub time_resolution: usize,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            min_resolution: 512,
            max_resolution: 1 << 15,
            channels: 4,
            table_size: 1 << 19,
            time_resolution: 25,
        }
    }
}

const HASH_PRIMES: [u32; 3] = [1, 2654435761, 805459861];

/// Table index of an integer cell. Levels whose dense vertex count fits the
/// table use the row-major linear index (collision-free); larger levels use
/// the XOR of coordinate-wise prime products, modulo the table size.
pub fn hash_index(cell: [usize; 3], dims: [usize; 3], table_size: usize) -> usize {
    let dense_count = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
    if dense_count <= table_size as u64 {
        cell[0] + cell[1] * dims[0] + cell[2] * dims[0] * dims[1]
    } else {
        let h = (cell[0] as u32).wrapping_mul(HASH_PRIMES[0])
            ^ (cell[1] as u32).wrapping_mul(HASH_PRIMES[1])
            ^ (cell[2] as u32).wrapping_mul(HASH_PRIMES[2]);
        h as usize % table_size
    }
}

/// Hot-path variant of [`hash_index`] for power-of-two tables: the modulo
/// reduces to a mask, which matters at eight lookups per interpolation.
#[inline(always)]
fn hash_index_masked(cell: [usize; 3], dims: [usize; 3], dense: bool, mask: usize) -> usize {
    if dense {
        cell[0] + cell[1] * dims[0] + cell[2] * dims[0] * dims[1]
    } else {
        let h = (cell[0] as u32).wrapping_mul(HASH_PRIMES[0])
            ^ (cell[1] as u32).wrapping_mul(HASH_PRIMES[1])
            ^ (cell[2] as u32).wrapping_mul(HASH_PRIMES[2]);
        h as usize & mask
    }
}

#[derive(Debug, Clone)]
struct HashLevel {
    resolution: usize,
    time_resolution: usize,
    static_table: TensorRef,
    /// xyt, xzt, yzt.
    dynamic_tables: Option<[TensorRef; 3]>,
    table_size: usize,
}

impl HashLevel {
    fn static_dims(&self) -> [usize; 3] {
        [self.resolution; 3]
    }

    fn dynamic_dims(&self) -> [usize; 3] {
        [self.resolution, self.resolution, self.time_resolution]
    }

    fn is_dense(&self, dims: [usize; 3]) -> bool {
        dims[0] as u64 * dims[1] as u64 * dims[2] as u64 <= self.table_size as u64
    }

    fn mask(&self) -> usize {
        self.table_size - 1
    }
}

/// Spatial axis pairs of the dynamic tables (third axis is time).
const DYNAMIC_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

use super::planar::MAX_CHANNELS;

#[derive(Debug, Clone)]
pub struct HashGridField {
    levels: Vec<HashLevel>,
    channels: usize,
}

const HASH_INIT: f64 = 1e-4;

impl HashGridField {
    pub fn new(
        store: &mut ParamStore,
        config: &HashConfig,
        with_dynamic: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(config.levels >= 1 && config.min_resolution >= 2);
        assert!(config.max_resolution >= config.min_resolution);
        assert!(config.time_resolution >= 2);
        assert!(config.channels <= MAX_CHANNELS, "channels capped at {MAX_CHANNELS}");
        assert!(config.table_size.is_power_of_two(), "table_size must be a power of two");
        let growth = if config.levels > 1 {
            ((config.max_resolution as f64).ln() - (config.min_resolution as f64).ln())
                / (config.levels - 1) as f64
        } else {
            0.0
        };
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let res = ((config.min_resolution as f64) * (growth * l as f64).exp()).round() as usize;
            let res = res.max(2);
            let c = config.channels;
            let rows = |dims: [usize; 3]| -> usize {
                let dense = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
                dense.min(config.table_size as u64) as usize
            };
            let mut make = |name: String, dims: [usize; 3]| {
                let t = store.alloc(&name, &[rows(dims), c], ParamGroup::Grid);
                store.fill_with(t, || rng.gen_range(-HASH_INIT..HASH_INIT));
                t
            };
            let static_table = make(format!("hash.l{l}.static.xyz"), [res; 3]);
            let dynamic_tables = with_dynamic.then(|| {
                let dims = [res, res, config.time_resolution];
                [
                    make(format!("hash.l{l}.dynamic.xyt"), dims),
                    make(format!("hash.l{l}.dynamic.xzt"), dims),
                    make(format!("hash.l{l}.dynamic.yzt"), dims),
                ]
            });
            levels.push(HashLevel {
                resolution: res,
                time_resolution: config.time_resolution,
                static_table,
                dynamic_tables,
                table_size: config.table_size,
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
        self.levels.first().is_some_and(|l| l.dynamic_tables.is_some())
    }

    pub fn level_resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.resolution).collect()
    }

    /// Trilinear sample over the 8 cell corners; multiplies `out` in place.
    #[allow(clippy::too_many_arguments)]
    fn grid_mul(
        store: &ParamStore,
        table: TensorRef,
        dims: [usize; 3],
        dense: bool,
        mask: usize,
        coords: [GridCoord; 3],
        channels: usize,
        out: &mut [f64],
    ) {
        let data = store.slice(table);
        let mut acc = [0.0; MAX_CHANNELS];
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut cell = [0usize; 3];
            for ax in 0..3 {
                if corner >> ax & 1 == 1 {
                    cell[ax] = coords[ax].i0 + 1;
                    w *= coords[ax].frac;
                } else {
                    cell[ax] = coords[ax].i0;
                    w *= 1.0 - coords[ax].frac;
                }
            }
            let base = hash_index_masked(cell, dims, dense, mask) * channels;
            for c in 0..channels {
                acc[c] += w * data[base + c];
            }
        }
        for c in 0..channels {
            out[c] *= acc[c];
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn grid_sample(
        store: &ParamStore,
        table: TensorRef,
        dims: [usize; 3],
        dense: bool,
        mask: usize,
        coords: [GridCoord; 3],
        channels: usize,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 1.0);
        Self::grid_mul(store, table, dims, dense, mask, coords, channels, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn grid_backward(
        store: &ParamStore,
        table: TensorRef,
        dims: [usize; 3],
        dense: bool,
        mask: usize,
        coords: [GridCoord; 3],
        channels: usize,
        g: &[f64],
        grads: &mut Gradients,
        mut grad_coords: Option<&mut [f64; 3]>,
    ) {
        let data_range = table.offset..table.offset + table.len;
        let gt = &mut grads.data_mut()[data_range.clone()];
        for corner in 0..8usize {
            let mut cell = [0usize; 3];
            let mut ws = [0.0; 3];
            let mut signs = [0.0; 3];
            for ax in 0..3 {
                if corner >> ax & 1 == 1 {
                    cell[ax] = coords[ax].i0 + 1;
                    ws[ax] = coords[ax].frac;
                    signs[ax] = 1.0;
                } else {
                    cell[ax] = coords[ax].i0;
                    ws[ax] = 1.0 - coords[ax].frac;
                    signs[ax] = -1.0;
                }
            }
            let w = ws[0] * ws[1] * ws[2];
            let base = hash_index_masked(cell, dims, dense, mask) * channels;
            for c in 0..channels {
                gt[base + c] += w * g[c];
            }
            if let Some(gc) = grad_coords.as_deref_mut() {
                let data = store.slice(table);
                let dot: f64 = (0..channels).map(|c| g[c] * data[base + c]).sum();
                for ax in 0..3 {
                    let others = ws[(ax + 1) % 3] * ws[(ax + 2) % 3];
                    gc[ax] += dot * signs[ax] * others * coords[ax].dscale;
                }
            }
        }
    }

    pub fn sample_static(&self, store: &ParamStore, p: &[f64; 3], out: &mut [f64]) {
        let c = self.channels;
        for (li, level) in self.levels.iter().enumerate() {
            let coords = [
                spatial_coord(p[0], level.resolution),
                spatial_coord(p[1], level.resolution),
                spatial_coord(p[2], level.resolution),
            ];
            Self::grid_sample(
                store,
                level.static_table,
                level.static_dims(),
                level.is_dense(level.static_dims()),
                level.mask(),
                coords,
                c,
                &mut out[li * c..(li + 1) * c],
            );
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
        for (li, level) in self.levels.iter().enumerate() {
            let coords = [
                spatial_coord(p[0], level.resolution),
                spatial_coord(p[1], level.resolution),
                spatial_coord(p[2], level.resolution),
            ];
            Self::grid_backward(
                store,
                level.static_table,
                level.static_dims(),
                level.is_dense(level.static_dims()),
                level.mask(),
                coords,
                c,
                &grad_out[li * c..(li + 1) * c],
                grads,
                None,
            );
        }
    }

    /// Dynamic features: Hadamard product of the three dynamic-table samples
    /// per level, concatenated across levels.
    pub fn sample_dynamic(&self, store: &ParamStore, p: &[f64; 3], t: f64, out: &mut [f64]) {
        let c = self.channels;
        for (li, level) in self.levels.iter().enumerate() {
            let tables = level.dynamic_tables.as_ref().expect("dynamic tables absent");
            let tc = time_coord(t, level.time_resolution);
            let slot = &mut out[li * c..(li + 1) * c];
            slot.iter_mut().for_each(|v| *v = 1.0);
            for (ti, &(a, b)) in DYNAMIC_AXES.iter().enumerate() {
                let coords = [
                    spatial_coord(p[a], level.resolution),
                    spatial_coord(p[b], level.resolution),
                    tc,
                ];
                Self::grid_mul(
                    store,
                    tables[ti],
                    level.dynamic_dims(),
                    level.is_dense(level.dynamic_dims()),
                    level.mask(),
                    coords,
                    c,
                    slot,
                );
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
            let tables = level.dynamic_tables.as_ref().expect("dynamic tables absent");
            let tc = time_coord(t, level.time_resolution);
            for (ti, &(a, b)) in DYNAMIC_AXES.iter().enumerate() {
                let coords = [
                    spatial_coord(p[a], level.resolution),
                    spatial_coord(p[b], level.resolution),
                    tc,
                ];
                Self::grid_sample(
                    store,
                    tables[ti],
                    level.dynamic_dims(),
                    level.is_dense(level.dynamic_dims()),
                    level.mask(),
                    coords,
                    c,
                    &mut vals[ti * c..(ti + 1) * c],
                );
            }
            let g = &grad_out[li * c..(li + 1) * c];
            for (ti, &(a, b)) in DYNAMIC_AXES.iter().enumerate() {
                let (o1, o2) = ((ti + 1) % 3, (ti + 2) % 3);
                for ch in 0..c {
                    gp[ch] = g[ch] * vals[o1 * c + ch] * vals[o2 * c + ch];
                }
                let coords = [
                    spatial_coord(p[a], level.resolution),
                    spatial_coord(p[b], level.resolution),
                    tc,
                ];
                if let Some(gpos) = grad_pos.as_deref_mut() {
                    let mut gc = [0.0; 3];
                    Self::grid_backward(
                        store,
                        tables[ti],
                        level.dynamic_dims(),
                        level.is_dense(level.dynamic_dims()),
                        level.mask(),
                        coords,
                        c,
                        &gp[..c],
                        grads,
                        Some(&mut gc),
                    );
                    gpos[a] += gc[0];
                    gpos[b] += gc[1];
                    // gc[2] is the time gradient; time is never warped.
                } else {
                    Self::grid_backward(
                        store,
                        tables[ti],
                        level.dynamic_dims(),
                        level.is_dense(level.dynamic_dims()),
                        level.mask(),
                        coords,
                        c,
                        &gp[..c],
                        grads,
                        None,
                    );
                }
            }
        }
    }

    /// Convenience for the full (static, dynamic) hash sample.
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_index_examples() {
        // Zero cell maps to zero under both schemes.
        assert_eq!(hash_index([0, 0, 0], [4, 4, 4], 1 << 19), 0);
        assert_eq!(hash_index([0, 0, 0], [1024, 1024, 1024], 1 << 19), 0);
        // Dense regime, resolution 4: row-major.
        assert_eq!(hash_index([1, 2, 3], [4, 4, 4], 1 << 19), 1 + 2 * 4 + 3 * 16);
        // Hashed regime: 1*1 xor 0 xor 0 mod 2^19.
        assert_eq!(hash_index([1, 0, 0], [1024, 1024, 1024], 1 << 19), 1);
    }

    #[test]
    fn dense_regime_is_bijective() {
        let dims = [6, 6, 4];
        let table = 1 << 10;
        let mut seen = vec![false; 6 * 6 * 4];
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..4 {
                    let idx = hash_index([x, y, z], dims, table);
                    assert!(idx < seen.len());
                    assert!(!seen[idx], "collision in dense regime");
                    seen[idx] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    fn build(levels: usize, min_res: usize, max_res: usize, table: usize) -> (ParamStore, HashGridField) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = HashGridField::new(
            &mut store,
            &HashConfig {
                levels,
                min_resolution: min_res,
                max_resolution: max_res,
                channels: 2,
                table_size: table,
                time_resolution: 4,
            },
            true,
            &mut rng,
        );
        (store, field)
    }

    #[test]
    fn constant_tables_give_constant_and_cubed_features() {
        let (mut store, field) = build(2, 4, 8, 1 << 10);
        let v = 0.7;
        store.data_mut().iter_mut().for_each(|x| *x = v);
        let (s, d) = field.sample(&store, &[0.21, -0.43, 0.65], 0.3);
        for &sv in &s {
            assert_relative_eq!(sv, v, epsilon = 1e-12);
        }
        for &dv in &d {
            assert_relative_eq!(dv, v * v * v, epsilon = 1e-12);
        }
    }

    #[test]
    fn corner_query_returns_stored_feature() {
        let (mut store, field) = build(1, 4, 4, 1 << 10);
        // Vertex (0, 0, 0) of the coarsest level is table row 0.
        let meta = store.entries()[0].clone();
        assert!(meta.name.contains("static"));
        store.data_mut()[meta.offset] = 3.25;
        store.data_mut()[meta.offset + 1] = -1.5;
        let mut out = vec![0.0; 2];
        field.sample_static(&store, &[-1.0, -1.0, -1.0], &mut out);
        assert_relative_eq!(out[0], 3.25, epsilon = 1e-12);
        assert_relative_eq!(out[1], -1.5, epsilon = 1e-12);
    }

    #[test]
    fn random_queries_match_brute_force_trilinear() {
        // Independent 8-corner weighted sum, written from the definition.
        let (store, field) = build(2, 4, 16, 1 << 6); // level 1 is hashed (16^3 > 64)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let mut out = vec![0.0; field.out_dim()];
            field.sample_static(&store, &p, &mut out);
            for (li, level) in field.levels.iter().enumerate() {
                let res = level.resolution;
                let u: Vec<f64> = p.iter().map(|x| (x + 1.0) * 0.5 * (res - 1) as f64).collect();
                let i: Vec<usize> = u.iter().map(|v| (*v as usize).min(res - 2)).collect();
                let f: Vec<f64> = u.iter().zip(&i).map(|(v, idx)| v - *idx as f64).collect();
                let data = store.slice(level.static_table);
                for c in 0..2 {
                    let mut acc = 0.0;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                                let cell = [i[0] + dx, i[1] + dy, i[2] + dz];
                                let idx = hash_index(cell, [res; 3], level.table_size);
                                acc += w * data[idx * 2 + c];
                            }
                        }
                    }
                    assert_relative_eq!(out[li * 2 + c], acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn locality_of_table_entries() {
        let (mut store, field) = build(1, 9, 9, 1 << 12);
        let far = [-0.9, -0.9, -0.9];
        let near = [0.95, 0.95, 0.95];
        let mut before_far = vec![0.0; 2];
        let mut before_near = vec![0.0; 2];
        field.sample_static(&store, &far, &mut before_far);
        field.sample_static(&store, &near, &mut before_near);
        // Perturb the vertex at the (8,8,8) corner (dense row-major last row).
        let meta = store.entries()[0].clone();
        store.data_mut()[meta.offset + meta.len - 1] += 0.5;
        let mut after_far = vec![0.0; 2];
        let mut after_near = vec![0.0; 2];
        field.sample_static(&store, &far, &mut after_far);
        field.sample_static(&store, &near, &mut after_near);
        assert_eq!(before_far, after_far);
        assert_ne!(before_near, after_near);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, field) = build(2, 4, 8, 1 << 5); // finest level hashed
        let p = [0.17, -0.33, 0.59];
        let t = 0.41;
        let ws: Vec<f64> = (0..field.out_dim()).map(|i| 0.2 + 0.15 * i as f64).collect();
        let loss = |store: &ParamStore| {
            let (s, d) = field.sample(store, &p, t);
            s.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>()
                + d.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>()
        };
        let mut grads = Gradients::zeros(&store);
        field.backward_static(&store, &p, &ws, &mut grads);
        field.backward_dynamic(&store, &p, t, &ws, &mut grads, None);
        let eps = 1e-6;
        for idx in 0..store.len() {
            let orig = store.data()[idx];
            store.data_mut()[idx] = orig + eps;
            let lp = loss(&store);
            store.data_mut()[idx] = orig - eps;
            let lm = loss(&store);
            store.data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-7 + 1e-5 * fd.abs().max(an.abs()),
                "idx {idx}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn position_gradients_match_finite_differences() {
        let (store, field) = build(1, 5, 5, 1 << 10);
        let t = 0.41;
        let ws: Vec<f64> = (0..field.out_dim()).map(|i| 0.2 + 0.15 * i as f64).collect();
        let loss = |p: &[f64; 3]| {
            let mut d = vec![0.0; field.out_dim()];
            field.sample_dynamic(&store, p, t, &mut d);
            d.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>()
        };
        let p = [0.17, -0.33, 0.59];
        let mut grads = Gradients::zeros(&store);
        let mut gpos = [0.0; 3];
        field.backward_dynamic(&store, &p, t, &ws, &mut grads, Some(&mut gpos));
        let eps = 1e-7;
        for ax in 0..3 {
            let mut pp = p;
            pp[ax] += eps;
            let lp = loss(&pp);
            pp[ax] = p[ax] - eps;
            let lm = loss(&pp);
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - gpos[ax]).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "axis {ax}: fd {fd} vs {}",
                gpos[ax]
            );
        }
    }
}
