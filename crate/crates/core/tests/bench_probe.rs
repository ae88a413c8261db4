use lidarfield::model::{FieldModel, GradScale, RayTarget, RayWork};
use lidarfield::nn::{Gradients, ParamStore};
use lidarfield::render::sample_along_ray;
use lidarfield::sensor::Ray;
use lidarfield::train::TrainConfig;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn rays(n: usize) -> Vec<RayWork> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..-0.05),
            )
            .normalize();
            let ray = Ray {
                origin: Vector3::new(0.0, 0.0, 0.07),
                direction: dir,
                near: 1e-4,
                far: 1.1,
            };
            let (z, delta) = sample_along_ray(&ray, 64, None).unwrap();
            RayWork {
                ray,
                t: rng.gen_range(0.0..1.0),
                z,
                delta,
                target: Some(RayTarget { depth: 0.5, intensity: 0.5, mask: 1.0 }),
            }
        })
        .collect()
}

fn time_config(label: &str, mutate: impl Fn(&mut lidarfield::model::ModelConfig)) {
    let mut cfg = TrainConfig::desk();
    mutate(&mut cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let model = FieldModel::new(&mut store, cfg.model.clone(), 0.05, &mut rng).unwrap();
    let batch = rays(160);
    let scale = GradScale { depth: 1.0, intensity: 0.1, raydrop: 0.01 };
    let mut grads = Gradients::zeros(&store);
    let t0 = Instant::now();
    for _ in 0..5 {
        grads.clear();
        model.process_rays(&store, &batch, &scale, Some(&mut grads));
    }
    println!("{label}: {:.1} ms/batch", t0.elapsed().as_secs_f64() * 200.0);
}

#[test]
fn dynamic_path_split() {
    time_config("full (dyn+flow)", |_| {});
    time_config("dyn, no flow", |m| m.use_flow = false);
    time_config("static only", |m| { m.use_dynamic = false; m.use_flow = false; });
    time_config("full, flow hidden 16", |m| m.flow.hidden_dim = 16);
}
