//! Bulk generation reliability at the desk and dense profiles.

use equilib_core::pathfinder::{generate_sample, PathfinderConfig};

#[test]
fn bulk_generation_succeeds_across_seed_ranges() {
    let desk = PathfinderConfig::default();
    let dense = PathfinderConfig {
        n_distractor_contours: 8,
        distractor_dashes: 8,
        ..Default::default()
    };
    for (name, cfg) in [("desk", desk), ("dense", dense)] {
        for seed in 0..3000u64 {
            assert!(
                generate_sample(&cfg, seed).is_ok(),
                "{name} profile failed at seed {seed}"
            );
        }
    }
}
