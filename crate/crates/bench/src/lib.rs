//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uav_intent::tracking::FeatureWindow;
use uav_intent::IntentLabel;

/// `n` random windows of `rows x width` cycling through three classes.
pub fn random_windows(n: usize, rows: usize, width: usize, seed: u64) -> Vec<FeatureWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FeatureWindow {
            features: (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rows,
            width,
            intent: IntentLabel::new(["a", "b", "c"][i % 3]),
            intrusion_flag: false,
            intrusion_time: f64::INFINITY,
            window_start_time: 0.0,
            window_end_time: rows as f64 / 10.0,
            trajectory_id: i as u64,
        })
        .collect()
}
