//! Sound-source distance estimation from two-microphone audio.
//!
//! TDOA comes from generalized cross-correlation with phase-transform
//! weighting; distances follow from the inverse-square energy relation
//! E_near * d_near^2 = E_far * d_far^2, which gives
//! d_far = sqrt(E_near) / (sqrt(E_near) - sqrt(E_far)) * delta_d and the
//! symmetric expression for d_near. The authentication gate compares the
//! nearest-microphone distance against a configured threshold.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::trace::AudioClip;
use crate::vad::VoiceSegment;

#[derive(Debug, thiserror::Error)]
pub enum RangingError {
    #[error("no signal: {0}")]
    NoSignal(String),
    #[error("indeterminate range: {0}")]
    Indeterminate(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("parameter error: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangingConfig {
    /// Microphone spacing in meters.
    pub mic_spacing: f64,
    /// Speed of sound, m/s.
    pub sound_speed: f64,
    /// Authentication gate distance, meters.
    pub distance_threshold: f64,
    /// Relative energy difference below which the source is equidistant.
    pub energy_epsilon: f64,
}

impl Default for RangingConfig {
    fn default() -> Self {
        Self {
            mic_spacing: 0.15,
            sound_speed: 340.0,
            distance_threshold: 0.06,
            energy_epsilon: 1e-6,
        }
    }
}

impl RangingConfig {
    pub fn validate(&self) -> Result<(), RangingError> {
        if self.mic_spacing <= 0.0
            || self.sound_speed <= 0.0
            || self.distance_threshold <= 0.0
            || self.energy_epsilon <= 0.0
        {
            return Err(RangingError::Parameter(
                "ranging configuration values must be positive".into(),
            ));
        }
        if self.distance_threshold >= 1.0 {
            return Err(RangingError::Parameter(
                "distance threshold must be below 1 m".into(),
            ));
        }
        Ok(())
    }
}

/// Distance estimate for one voiced interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangeEstimate {
    /// Positive when channel 2 received the signal later than channel 1.
    pub tdoa: f64,
    /// |d1 - d2| in meters.
    pub delta_d: f64,
    /// Distance to microphone 1 (channel 1), meters.
    pub d1: f64,
    /// Distance to microphone 2 (channel 2), meters.
    pub d2: f64,
    /// min(d1, d2): the distance compared against the threshold.
    pub gate_distance: f64,
    pub passed: bool,
}

/// Gate result: mono clips cannot be ranged and are reported explicitly
/// rather than silently passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RangeGateOutcome {
    Measured(RangeEstimate),
    Unavailable { reason: String },
}

/// PHAT spectral guard against zero-magnitude bins.
const PHAT_EPS: f64 = 1e-12;
/// Minimum channel length in samples.
const MIN_SAMPLES: usize = 256;

/// GCC-PHAT time difference of arrival in seconds. Positive result means the
/// signal reached channel 2 `tdoa` seconds after channel 1 (channel 2 is the
/// far microphone).
pub fn gcc_phat_tdoa(
    ch1: &[f64],
    ch2: &[f64],
    rate: f64,
    max_lag: f64,
) -> Result<f64, RangingError> {
    if ch1.len() != ch2.len() {
        return Err(RangingError::Parameter(format!(
            "channel lengths differ: {} vs {}",
            ch1.len(),
            ch2.len()
        )));
    }
    if ch1.len() < MIN_SAMPLES {
        return Err(RangingError::Parameter(format!(
            "channels too short: {} samples (minimum {MIN_SAMPLES})",
            ch1.len()
        )));
    }
    if max_lag <= 0.0 {
        return Err(RangingError::Parameter("max_lag must be positive".into()));
    }
    let energy1: f64 = ch1.iter().map(|v| v * v).sum();
    let energy2: f64 = ch2.iter().map(|v| v * v).sum();
    if energy1 == 0.0 || energy2 == 0.0 {
        return Err(RangingError::NoSignal("a channel is all zero".into()));
    }

    let max_lag_samples = ((max_lag * rate).ceil() as usize).max(1);
    let n = (ch1.len() + max_lag_samples + 1).next_power_of_two();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut f1 = vec![Complex64::new(0.0, 0.0); n];
    let mut f2 = vec![Complex64::new(0.0, 0.0); n];
    for (i, (&a, &b)) in ch1.iter().zip(ch2).enumerate() {
        f1[i].re = a;
        f2[i].re = b;
    }
    fft.process(&mut f1);
    fft.process(&mut f2);

    // Cross-power spectrum of ch2 against ch1 so a delayed ch2 yields a
    // positive lag, whitened by its own magnitude (PHAT).
    let mut cross: Vec<Complex64> = f2
        .iter()
        .zip(&f1)
        .map(|(&b, &a)| {
            let c = b * a.conj();
            c / (c.norm() + PHAT_EPS)
        })
        .collect();
    ifft.process(&mut cross);

    let mut best_lag = 0i64;
    let mut best = f64::NEG_INFINITY;
    let m = max_lag_samples as i64;
    for lag in -m..=m {
        let idx = if lag >= 0 { lag as usize } else { (n as i64 + lag) as usize };
        let v = cross[idx].re;
        if v > best {
            best = v;
            best_lag = lag;
        }
    }
    Ok(best_lag as f64 / rate)
}

/// Solves the two-microphone geometry from a TDOA and the per-channel RMS
/// energies: the higher-energy channel is the nearer microphone.
pub fn estimate_distances(
    tdoa: f64,
    e1: f64,
    e2: f64,
    cfg: &RangingConfig,
) -> Result<RangeEstimate, RangingError> {
    cfg.validate()?;
    if e1 <= 0.0 || e2 <= 0.0 {
        return Err(RangingError::NoSignal("non-positive channel energy".into()));
    }
    let delta_d = cfg.sound_speed * tdoa.abs();
    if delta_d > cfg.mic_spacing * 1.1 {
        return Err(RangingError::Geometry(format!(
            "path difference {delta_d:.3} m exceeds microphone spacing {:.3} m",
            cfg.mic_spacing
        )));
    }
    let (e_near, e_far) = if e1 >= e2 { (e1, e2) } else { (e2, e1) };
    let (sqrt_near, sqrt_far) = (e_near.sqrt(), e_far.sqrt());
    if (sqrt_near - sqrt_far).abs() < cfg.energy_epsilon * sqrt_near {
        return Err(RangingError::Indeterminate(
            "channel energies are equal: source equidistant or too distant".into(),
        ));
    }
    let d_far = sqrt_near / (sqrt_near - sqrt_far) * delta_d;
    let d_near = sqrt_far / (sqrt_near - sqrt_far) * delta_d;
    let (d1, d2) = if e1 >= e2 { (d_near, d_far) } else { (d_far, d_near) };
    let gate_distance = d1.min(d2);
    Ok(RangeEstimate {
        tdoa,
        delta_d,
        d1,
        d2,
        gate_distance,
        passed: gate_distance <= cfg.distance_threshold,
    })
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Full gate for one voiced interval of a stereo clip: crop both channels to
/// the interval, estimate TDOA and per-channel energy, then solve distances.
pub fn range_gate(
    audio: &AudioClip,
    voice: &VoiceSegment,
    cfg: &RangingConfig,
) -> Result<RangeGateOutcome, RangingError> {
    cfg.validate()?;
    if audio.num_channels() < 2 {
        return Ok(RangeGateOutcome::Unavailable {
            reason: "ranging unavailable: mono recording".into(),
        });
    }
    let rate = audio.sample_rate as f64;
    let s = ((voice.start * rate).floor().max(0.0)) as usize;
    let e = ((voice.end * rate).ceil() as usize).min(audio.num_samples());
    if e <= s {
        return Err(RangingError::NoSignal("empty voiced interval".into()));
    }
    let ch1 = &audio.channels[0][s..e];
    let ch2 = &audio.channels[1][s..e];
    let max_lag = cfg.mic_spacing / cfg.sound_speed;
    let tdoa = gcc_phat_tdoa(ch1, ch2, rate, max_lag)?;
    let (e1, e2) = (rms(ch1).powi(2), rms(ch2).powi(2));
    let estimate = estimate_distances(tdoa, e1, e2, cfg)?;
    Ok(RangeGateOutcome::Measured(estimate))
}
