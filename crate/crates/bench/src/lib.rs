//! Shared fixtures for the criterion benchmarks.

use maglive_core::dsp::SEGMENT_LEN;
use maglive_core::MagLiveModel;

/// A deterministic 100-sample magnetometer window.
pub fn fixture_window() -> Vec<f64> {
    (0..SEGMENT_LEN)
        .map(|i| (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 1.7).cos())
        .collect()
}

/// A freshly initialized model; benchmarks measure compute, not accuracy.
pub fn fixture_model() -> MagLiveModel {
    MagLiveModel::init(7)
}

/// Deterministic noise for the ranging benchmarks.
pub fn fixture_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.max(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) - 0.5
        })
        .collect()
}
