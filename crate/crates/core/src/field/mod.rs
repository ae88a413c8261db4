//! 4D hybrid feature representation: multi-scale orthogonal feature planes
//! (coarse, smooth) plus multi-level hashed voxel grids (fine,
//! high-frequency), each split into static and dynamic parts.
//!
//! Feature-vector concatenation order is planar-static, planar-dynamic,
//! hash-static, hash-dynamic; with the default configuration that is
//! 32 + 32 + 32 + 32 = 128 channels.

pub mod hash;
pub mod planar;

pub use hash::{hash_index, HashConfig, HashGridField};
pub use planar::{PlanarConfig, PlanarField};

use crate::nn::{Gradients, ParamStore};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Continuous grid coordinate with its interpolation cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridCoord {
    pub i0: usize,
    pub frac: f64,
    /// d(grid coordinate)/d(input coordinate); 0 when clamped out of domain.
    pub dscale: f64,
}

fn warn_clamp_once() {
    if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        eprintln!("warning: field query outside the normalized domain was clamped");
    }
}

/// Maps a spatial coordinate in [-1, 1] onto a grid with `vertices` nodes.
pub(crate) fn spatial_coord(x: f64, vertices: usize) -> GridCoord {
    let span = (vertices - 1) as f64;
    let mut u = (x + 1.0) * 0.5 * span;
    let mut dscale = 0.5 * span;
    if u < 0.0 || u > span {
        warn_clamp_once();
        u = u.clamp(0.0, span);
        dscale = 0.0;
    }
    let i0 = (u as usize).min(vertices - 2);
    GridCoord {
        i0,
        frac: u - i0 as f64,
        dscale,
    }
}

/// Maps a time coordinate in [0, 1] onto a grid with `vertices` nodes.
pub(crate) fn time_coord(t: f64, vertices: usize) -> GridCoord {
    let span = (vertices - 1) as f64;
    let mut u = t * span;
    let mut dscale = span;
    if u < 0.0 || u > span {
        warn_clamp_once();
        u = u.clamp(0.0, span);
        dscale = 0.0;
    }
    let i0 = (u as usize).min(vertices - 2);
    GridCoord {
        i0,
        frac: u - i0 as f64,
        dscale,
    }
}

/// Which parts of the hybrid representation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub planar: bool,
    pub dynamic: bool,
}

/// Hybrid feature sampler over the planar and hash fields.
#[derive(Debug, Clone)]
pub struct HybridField {
    pub planar: Option<PlanarField>,
    pub hash: HashGridField,
    pub layout: FeatureLayout,
}

impl HybridField {
    pub fn new(
        store: &mut ParamStore,
        planar_cfg: &PlanarConfig,
        hash_cfg: &HashConfig,
        layout: FeatureLayout,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let planar = layout
            .planar
            .then(|| PlanarField::new(store, planar_cfg, layout.dynamic, rng));
        let hash = HashGridField::new(store, hash_cfg, layout.dynamic, rng);
        Self {
            planar,
            hash,
            layout,
        }
    }

    /// Total feature dimensionality in concatenation order.
    pub fn feature_dim(&self) -> usize {
        self.static_dim() + self.dynamic_dim()
    }

    pub fn static_dim(&self) -> usize {
        self.planar.as_ref().map_or(0, |p| p.out_dim()) + self.hash.out_dim()
    }

    pub fn dynamic_dim(&self) -> usize {
        if self.layout.dynamic {
            self.static_dim()
        } else {
            0
        }
    }

    /// Samples the static feature parts into `out` (planar first).
    pub fn sample_static(&self, store: &ParamStore, p: &[f64; 3], out: &mut [f64]) {
        let mut cursor = 0;
        if let Some(planar) = &self.planar {
            planar.sample_static(store, p, &mut out[..planar.out_dim()]);
            cursor = planar.out_dim();
        }
        self.hash.sample_static(store, p, &mut out[cursor..cursor + self.hash.out_dim()]);
    }

    pub fn backward_static(
        &self,
        store: &ParamStore,
        p: &[f64; 3],
        grad_out: &[f64],
        grads: &mut Gradients,
    ) {
        let mut cursor = 0;
        if let Some(planar) = &self.planar {
            planar.backward_static(store, p, &grad_out[..planar.out_dim()], grads);
            cursor = planar.out_dim();
        }
        self.hash.backward_static(
            store,
            p,
            &grad_out[cursor..cursor + self.hash.out_dim()],
            grads,
        );
    }

    /// Samples the dynamic feature parts (planar first). Panics when the
    /// layout carries no dynamic part.
    pub fn sample_dynamic(&self, store: &ParamStore, p: &[f64; 3], t: f64, out: &mut [f64]) {
        assert!(self.layout.dynamic);
        let mut cursor = 0;
        if let Some(planar) = &self.planar {
            planar.sample_dynamic(store, p, t, &mut out[..planar.out_dim()]);
            cursor = planar.out_dim();
        }
        self.hash
            .sample_dynamic(store, p, t, &mut out[cursor..cursor + self.hash.out_dim()]);
    }

    /// Backward through the dynamic sample; `grad_pos`, when given,
    /// accumulates the gradient with respect to the spatial query position
    /// (needed when the query position came from a flow warp).
    pub fn backward_dynamic(
        &self,
        store: &ParamStore,
        p: &[f64; 3],
        t: f64,
        grad_out: &[f64],
        grads: &mut Gradients,
        mut grad_pos: Option<&mut [f64; 3]>,
    ) {
        let mut cursor = 0;
        if let Some(planar) = &self.planar {
            planar.backward_dynamic(
                store,
                p,
                t,
                &grad_out[..planar.out_dim()],
                grads,
                grad_pos.as_deref_mut(),
            );
            cursor = planar.out_dim();
        }
        self.hash.backward_dynamic(
            store,
            p,
            t,
            &grad_out[cursor..cursor + self.hash.out_dim()],
            grads,
            grad_pos,
        );
    }

    /// Full (non-aggregated) feature vector at a space-time point, in
    /// concatenation order. Dynamic parts are the raw center-query values;
    /// temporal aggregation happens in the model on top of this.
    pub fn hybrid_features(&self, store: &ParamStore, p: &[f64; 3], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        let sd = self.static_dim();
        self.sample_static(store, p, &mut out[..sd]);
        if self.layout.dynamic {
            self.sample_dynamic(store, p, t, &mut out[sd..]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_field(planar: bool, dynamic: bool) -> (ParamStore, HybridField) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = HybridField::new(
            &mut store,
            &PlanarConfig {
                levels: 1,
                base_resolution: 4,
                channels: 2,
                time_resolution: 3,
            },
            &HashConfig {
                levels: 1,
                min_resolution: 4,
                max_resolution: 4,
                channels: 2,
                table_size: 1 << 10,
                time_resolution: 3,
            },
            FeatureLayout { planar, dynamic },
            &mut rng,
        );
        (store, field)
    }

    #[test]
    fn feature_dims_follow_layout() {
        let (_, full) = toy_field(true, true);
        assert_eq!(full.feature_dim(), 8); // 2 + 2 + 2 + 2
        let (_, hash_only) = toy_field(false, true);
        assert_eq!(hash_only.feature_dim(), 4);
        let (_, static_only) = toy_field(true, false);
        assert_eq!(static_only.feature_dim(), 4);
    }

    #[test]
    fn default_configuration_is_128_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = HybridField::new(
            &mut store,
            &PlanarConfig::default(),
            &HashConfig::default(),
            FeatureLayout {
                planar: true,
                dynamic: true,
            },
            &mut rng,
        );
        assert_eq!(field.feature_dim(), 128);
    }

    #[test]
    fn zero_fields_give_zero_features() {
        let (mut store, field) = toy_field(true, true);
        store.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let f = field.hybrid_features(&store, &[0.3, -0.2, 0.1], 0.4);
        assert!(f.iter().all(|&v| v == 0.0));
    }
}
