use equilib_core::cells::{CellKind, Model};
use equilib_core::equilibrium::GradAlgorithm;
use equilib_core::harness::{sample_grads, TrainPlan};
use equilib_core::pathfinder::{generate_sample, PathfinderConfig};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = Model::init(CellKind::HGru, 8, 5, 5, &mut rng);
    let s = generate_sample(&PathfinderConfig::default(), 3).unwrap();
    for (name, algo, steps) in [
        ("bptt n=6", GradAlgorithm::Bptt, 6usize),
        ("crbp n=20", GradAlgorithm::Crbp { neumann_terms: 15, neumann_tol: 1e-6, lambda: 0.9, penalty_weight: 1.0 }, 20),
    ] {
        let plan = TrainPlan { algorithm: algo, steps, per_step_loss: false, lambda: 0.9, penalty_weight: 0.0 };
        let t = Instant::now();
        let reps = 6;
        for _ in 0..reps {
            let out = sample_grads(&model, &plan, &s.image, &s.mask, false).unwrap();
            std::hint::black_box(out.loss);
        }
        println!("{name}: {:.1} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    }
}
