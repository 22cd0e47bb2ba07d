//! Deterministic generator of labeled audio + magnetometer recordings.
//!
//! Loudspeaker scenes add an audio-correlated magnetic disturbance: the word
//! envelope modulates a band-limited (device-specific) low-frequency carrier
//! whose amplitude falls off as 1/distance^q, projected on a per-recording
//! orientation axis. Human scenes carry the same sensor noise, drift, and
//! per-user hand-motion signature but no audio-correlated term, so the two
//! classes differ exactly by the coil physics. Stereo scenes delay and scale
//! the source per microphone so energy follows the inverse-square law.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trace::{
    write_audio, write_trace, AudioClip, Label, ManifestEntry, RecordingPair, SensorTrace,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
}

/// Magnetic personality of a spoofing device.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Disturbance amplitude in microtesla * m^falloff at unit distance.
    pub coil_gain: f64,
    /// Distance falloff exponent (3 = dipole).
    pub falloff_exponent: f64,
    /// Carrier band in Hz within the magnetometer bandwidth.
    pub carrier_band: (f64, f64),
}

impl DeviceProfile {
    /// Built-in catalog of distinguishable loudspeaker profiles.
    pub fn catalog(n: usize) -> Vec<DeviceProfile> {
        let base = [
            ("dev0", 2.5e-4, 3.0, (8.0, 22.0)),
            ("dev1", 4.0e-4, 3.0, (15.0, 32.0)),
            ("dev2", 1.8e-4, 2.8, (22.0, 42.0)),
            ("dev3", 3.0e-4, 3.2, (6.0, 18.0)),
        ];
        (0..n)
            .map(|i| {
                let (name, gain, q, band) = base[i % base.len()];
                let bump = (i / base.len()) as f64;
                DeviceProfile {
                    name: if i < base.len() {
                        name.to_string()
                    } else {
                        format!("dev{i}")
                    },
                    coil_gain: gain * (1.0 + 0.15 * bump),
                    falloff_exponent: q,
                    carrier_band: band,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.coil_gain < 0.0 {
            return Err(SynthError::Config("coil_gain must be nonnegative".into()));
        }
        if !(2.0..=4.0).contains(&self.falloff_exponent) {
            return Err(SynthError::Config(format!(
                "falloff exponent {} outside [2, 4]",
                self.falloff_exponent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SourceKind {
    Human,
    Loudspeaker(DeviceProfile),
}

/// One word (voiced burst) followed by a silent gap, seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WordPlan {
    pub duration: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtterancePlan {
    pub lead_in: f64,
    pub words: Vec<WordPlan>,
    pub tail: f64,
}

impl UtterancePlan {
    pub fn uniform(n_words: usize, duration: f64, gap: f64) -> Self {
        Self {
            lead_in: 0.5,
            words: vec![WordPlan { duration, gap }; n_words],
            tail: 0.4,
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.lead_in
            + self
                .words
                .iter()
                .map(|w| w.duration + w.gap)
                .sum::<f64>()
            + self.tail
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub source: SourceKind,
    /// Source distance to the phone (near microphone), meters.
    pub distance_m: f64,
    pub mic_spacing_m: f64,
    pub utterance: UtterancePlan,
    /// Magnetometer sensor noise sigma, microtesla.
    pub mag_noise_sigma_ut: f64,
    pub audio_snr_db: f64,
    pub earth_field_ut: [f64; 3],
    /// Slow sensor drift magnitude, microtesla per second.
    pub drift_rate_ut_per_s: f64,
    /// Hand-motion signature amplitude, microtesla.
    pub motion_amp_ut: f64,
    pub timestamp_jitter_std: f64,
    pub audio_rate: u32,
    pub mag_rate: f64,
    pub stereo: bool,
    pub seed: u64,
    pub user_id: String,
    pub content_id: String,
    pub command_id: String,
}

impl SceneConfig {
    pub fn new(source: SourceKind, seed: u64) -> Self {
        Self {
            source,
            distance_m: 0.05,
            mic_spacing_m: 0.15,
            utterance: UtterancePlan::uniform(3, 0.45, 0.35),
            mag_noise_sigma_ut: 0.05,
            audio_snr_db: 30.0,
            earth_field_ut: [20.0, 5.0, 44.0],
            drift_rate_ut_per_s: 0.01,
            motion_amp_ut: 0.15,
            timestamp_jitter_std: 0.0003,
            audio_rate: 44_100,
            mag_rate: 100.0,
            stereo: false,
            seed,
            user_id: "u0".into(),
            content_id: "c0".into(),
            command_id: "k0".into(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.distance_m <= 0.0 {
            return Err(SynthError::Config("distance must be positive".into()));
        }
        if self.utterance.words.is_empty()
            || self
                .utterance
                .words
                .iter()
                .any(|w| w.duration <= 0.0 || w.gap < 0.0)
        {
            return Err(SynthError::Config("utterance plan needs positive word durations".into()));
        }
        if let SourceKind::Loudspeaker(p) = &self.source {
            p.validate()?;
        }
        Ok(())
    }

    fn label(&self) -> Label {
        match self.source {
            SourceKind::Human => Label::Human,
            SourceKind::Loudspeaker(_) => Label::Loudspeaker,
        }
    }

    fn device_id(&self) -> String {
        match &self.source {
            SourceKind::Human => "human".into(),
            SourceKind::Loudspeaker(p) => p.name.clone(),
        }
    }
}

/// Everything the generator knows that a detector must infer.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub word_intervals: Vec<(f64, f64)>,
    /// The synthesis envelope sampled on the magnetometer grid.
    pub envelope_mag_rate: Vec<f64>,
    pub geometry: Option<StereoGeometry>,
}

#[derive(Debug, Clone, Copy)]
pub struct StereoGeometry {
    pub d_near: f64,
    pub d_far: f64,
    pub tdoa: f64,
    pub energy_ratio: f64,
}

// ---------------------------------------------------------------------------
// Signal building blocks
// ---------------------------------------------------------------------------

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Unit-RMS noise band-limited to [lo, hi] Hz via FFT masking.
fn bandlimited_noise(n: usize, rate: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(gaussian(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let freq = if k <= n / 2 {
            k as f64 * rate / n as f64
        } else {
            (n - k) as f64 * rate / n as f64
        };
        if freq < lo || freq > hi {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let vals: Vec<f64> = buf.iter().map(|c| c.re / n as f64).collect();
    let rms = (vals.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms < 1e-30 {
        return vals;
    }
    vals.into_iter().map(|v| v / rms).collect()
}

/// Per-word envelope with raised-cosine attack/release plus syllabic
/// amplitude modulation, evaluated on an arbitrary grid.
struct EnvelopePlan {
    words: Vec<(f64, f64, f64, f64)>, // (start, end, syllable_rate, phase)
}

impl EnvelopePlan {
    fn build(plan: &UtterancePlan, rng: &mut ChaCha8Rng) -> Self {
        let mut words = Vec::with_capacity(plan.words.len());
        let mut t = plan.lead_in;
        for w in &plan.words {
            let syllable_rate = 2.5 + rng.gen::<f64>() * 2.5;
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            words.push((t, t + w.duration, syllable_rate, phase));
            t += w.duration + w.gap;
        }
        Self { words }
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        self.words.iter().map(|&(s, e, _, _)| (s, e)).collect()
    }

    fn value(&self, t: f64) -> f64 {
        const EDGE: f64 = 0.030;
        for &(start, end, syl, phase) in &self.words {
            if t < start || t > end {
                continue;
            }
            let ramp_in = ((t - start) / EDGE).min(1.0);
            let ramp_out = ((end - t) / EDGE).min(1.0);
            let taper = |r: f64| 0.5 * (1.0 - (std::f64::consts::PI * r).cos());
            let edges = taper(ramp_in) * taper(ramp_out);
            let syllables =
                0.2 + 0.8 * 0.5 * (1.0 + (std::f64::consts::TAU * syl * t + phase).sin());
            return edges * syllables;
        }
        0.0
    }
}

/// Speech-shaped noise: white noise through a one-pole low-pass with DC
/// removal, so energy sits in the low audio band.
fn speech_source(n: usize, rate: f64, env: &EnvelopePlan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let alpha = (-std::f64::consts::TAU * 1500.0 / rate).exp();
    let hp = (-std::f64::consts::TAU * 100.0 / rate).exp();
    let mut lp_state = 0.0;
    let mut dc_state = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let white = gaussian(rng);
        lp_state = alpha * lp_state + (1.0 - alpha) * white;
        // one-pole high-pass to strip DC
        let hp_out = lp_state - dc_state;
        dc_state = hp * dc_state + (1.0 - hp) * lp_state;
        let t = i as f64 / rate;
        out.push(hp_out * env.value(t));
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn add_noise_at_snr(signal: &mut [f64], snr_db: f64, rng: &mut ChaCha8Rng) {
    let sig_rms = rms(signal);
    if sig_rms == 0.0 {
        return;
    }
    let noise_rms = sig_rms / 10f64.powf(snr_db / 20.0);
    for v in signal.iter_mut() {
        *v += gaussian(rng) * noise_rms;
    }
}

fn normalize_peak(channels: &mut [Vec<f64>], target: f64) {
    let peak = channels
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = target / peak;
        for c in channels.iter_mut() {
            for v in c.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Windowed-sinc fractional delay with 1/d amplitude scaling.
fn delayed_scaled(source: &[f64], delay_samples: f64, scale: f64) -> Vec<f64> {
    const HALF: i64 = 32;
    let n = source.len() as i64;
    let window = |u: f64| -> f64 {
        if u.abs() >= HALF as f64 {
            return 0.0;
        }
        let sinc = if u.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * u).sin() / (std::f64::consts::PI * u)
        };
        sinc * (0.5 + 0.5 * (std::f64::consts::PI * u / HALF as f64).cos())
    };
    (0..n)
        .map(|i| {
            let u0 = i as f64 - delay_samples;
            let base = u0.floor() as i64;
            let mut acc = 0.0;
            for m in (base - HALF + 1)..(base + HALF + 1) {
                if (0..n).contains(&m) {
                    acc += source[m as usize] * window(u0 - m as f64);
                }
            }
            acc * scale
        })
        .collect()
}

/// Unit vector whose alignment with the Earth field stays above a floor so
/// the disturbance survives the net-magnitude projection.
fn disturbance_axis(earth: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let enorm = (earth[0] * earth[0] + earth[1] * earth[1] + earth[2] * earth[2]).sqrt();
    let ehat = [earth[0] / enorm, earth[1] / enorm, earth[2] / enorm];
    loop {
        let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
        let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if vn < 1e-9 {
            continue;
        }
        let a = [v[0] / vn, v[1] / vn, v[2] / vn];
        let cos = a[0] * ehat[0] + a[1] * ehat[1] + a[2] * ehat[2];
        if cos.abs() >= 0.35 {
            return a;
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// Generates one labeled recording with its ground truth.
pub fn gen_pair(cfg: &SceneConfig) -> Result<(RecordingPair, GroundTruth), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let duration = cfg.utterance.total_duration();
    let env = EnvelopePlan::build(&cfg.utterance, &mut rng);

    // --- audio ---
    let n_audio = (duration * cfg.audio_rate as f64).round() as usize;
    let source = speech_source(n_audio, cfg.audio_rate as f64, &env, &mut rng);

    let (mut channels, geometry) = if cfg.stereo {
        let rate = cfg.audio_rate as f64;
        let d_near = cfg.distance_m;
        let d_far = cfg.distance_m + cfg.mic_spacing_m;
        // Channel 1 = far microphone, channel 2 = near: a positive TDOA then
        // means channel 2 received the wave first.
        let ch_far = delayed_scaled(&source, d_far / 340.0 * rate, 1.0 / d_far);
        let ch_near = delayed_scaled(&source, d_near / 340.0 * rate, 1.0 / d_near);
        let geometry = StereoGeometry {
            d_near,
            d_far,
            tdoa: (d_far - d_near) / 340.0,
            energy_ratio: (d_far / d_near) * (d_far / d_near),
        };
        (vec![ch_far, ch_near], Some(geometry))
    } else {
        (vec![source.clone()], None)
    };
    for ch in channels.iter_mut() {
        add_noise_at_snr(ch, cfg.audio_snr_db, &mut rng);
    }
    normalize_peak(&mut channels, 0.9);
    let audio = AudioClip::new(cfg.audio_rate, channels)?;

    // --- magnetometer ---
    let n_mag = (duration * cfg.mag_rate).round() as usize;
    let drift_axis = disturbance_axis(cfg.earth_field_ut, &mut rng);
    let coil_axis = disturbance_axis(cfg.earth_field_ut, &mut rng);

    // Per-user hand-motion signature: band and amplitude shaped by user id,
    // present in every scene (the phone is held in both cases).
    let ucode = fnv1a(&cfg.user_id);
    let motion_lo = 4.0 + (ucode % 3) as f64;
    let motion_hi = 14.0 + 2.0 * ((ucode >> 2) % 4) as f64;
    let motion_amp = cfg.motion_amp_ut * (0.8 + 0.1 * ((ucode >> 4) % 5) as f64);
    let motion = bandlimited_noise(n_mag, cfg.mag_rate, motion_lo, motion_hi, &mut rng);
    let motion_axis = disturbance_axis(cfg.earth_field_ut, &mut rng);

    let coil = match &cfg.source {
        SourceKind::Human => None,
        SourceKind::Loudspeaker(p) => {
            let carrier = bandlimited_noise(
                n_mag,
                cfg.mag_rate,
                p.carrier_band.0,
                p.carrier_band.1,
                &mut rng,
            );
            let amp = p.coil_gain / cfg.distance_m.powf(p.falloff_exponent);
            Some((carrier, amp))
        }
    };

    let mut timestamps = Vec::with_capacity(n_mag);
    let mut samples = Vec::with_capacity(n_mag);
    let mut envelope_mag_rate = Vec::with_capacity(n_mag);
    let max_jitter = 0.4 / cfg.mag_rate;
    for k in 0..n_mag {
        let jitter = (gaussian(&mut rng) * cfg.timestamp_jitter_std).clamp(-max_jitter, max_jitter);
        let t = k as f64 / cfg.mag_rate + if k == 0 { 0.0 } else { jitter };
        let e = env.value(t);
        envelope_mag_rate.push(e);
        let mut v = [0.0f64; 3];
        for (axis, out) in v.iter_mut().enumerate() {
            *out = cfg.earth_field_ut[axis]
                + cfg.mag_noise_sigma_ut * gaussian(&mut rng)
                + cfg.drift_rate_ut_per_s * t * drift_axis[axis]
                + motion_amp * motion[k] * motion_axis[axis];
            if let Some((carrier, amp)) = &coil {
                *out += amp * e * carrier[k] * coil_axis[axis];
            }
        }
        timestamps.push(t);
        samples.push(v);
    }
    let trace = SensorTrace::new(timestamps, samples)?;

    let pair = RecordingPair {
        trace,
        audio,
        label: cfg.label(),
        user_id: cfg.user_id.clone(),
        device_id: cfg.device_id(),
        content_id: cfg.content_id.clone(),
        command_id: cfg.command_id.clone(),
    };
    let truth = GroundTruth {
        word_intervals: env.intervals(),
        envelope_mag_rate,
        geometry,
    };
    Ok((pair, truth))
}

/// Stereo scene for ranging tests: channel 1 is the far microphone, channel 2
/// the near one, with the source colinear with both.
pub fn gen_stereo_audio(cfg: &SceneConfig) -> Result<(AudioClip, GroundTruth), SynthError> {
    let mut stereo_cfg = cfg.clone();
    stereo_cfg.stereo = true;
    let (pair, truth) = gen_pair(&stereo_cfg)?;
    Ok((pair.audio, truth))
}

// ---------------------------------------------------------------------------
// Physics-contract statistic
// ---------------------------------------------------------------------------

/// Pearson correlation between the smoothed rectified net high-passed
/// magnetometer signal and the audio envelope over voiced regions. High for
/// loudspeaker scenes, near zero for human scenes.
pub fn audio_mag_correlation(
    pair: &RecordingPair,
    word_intervals: &[(f64, f64)],
) -> Result<f64, crate::dsp::DspError> {
    let net = crate::dsp::preprocess_net(&pair.trace, crate::dsp::DEFAULT_CUTOFF_HZ, 100.0)?;

    // Audio envelope on the magnetometer grid: 10 ms moving RMS.
    let audio = pair.audio.downmix();
    let arate = pair.audio.sample_rate as f64;
    let half = (0.005 * arate) as usize;
    let env_at = |t: f64| -> f64 {
        let c = (t * arate) as usize;
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(audio.len());
        if hi <= lo {
            return 0.0;
        }
        rms(&audio[lo..hi])
    };

    // Rectified net signal, lightly smoothed (5-sample moving average).
    let rect: Vec<f64> = net.values.iter().map(|v| v.abs()).collect();
    let smooth: Vec<f64> = (0..rect.len())
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(rect.len());
            rect[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &m) in smooth.iter().enumerate() {
        let t = k as f64 / 100.0;
        if word_intervals.iter().any(|&(s, e)| t >= s && t <= e) {
            xs.push(m);
            ys.push(env_at(t));
        }
    }
    if xs.len() < 8 {
        return Ok(0.0);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Corpus layout: counts per user/device/command, the leave-out protocol
/// tags, and the scene parameters shared by every recording.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub users: usize,
    pub devices: usize,
    pub commands_per_label: usize,
    pub words_per_command: usize,
    pub word_duration: f64,
    pub word_gap: f64,
    /// Users whose data is tagged `train`.
    pub train_users: Vec<usize>,
    /// Device profile excluded from training and used alone in the test tag.
    pub holdout_device: usize,
    pub distance_m: f64,
    pub mag_noise_sigma_ut: f64,
    pub audio_snr_db: f64,
    pub stereo: bool,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            users: 8,
            devices: 4,
            commands_per_label: 20,
            words_per_command: 4,
            word_duration: 0.45,
            word_gap: 0.35,
            train_users: vec![0, 1],
            holdout_device: 3,
            distance_m: 0.05,
            mag_noise_sigma_ut: 0.05,
            audio_snr_db: 30.0,
            stereo: false,
            master_seed: 42,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.users == 0 || self.devices == 0 || self.commands_per_label == 0 {
            return Err(SynthError::Config("counts must be positive".into()));
        }
        if self.holdout_device >= self.devices {
            return Err(SynthError::Config(format!(
                "holdout device {} out of range ({} devices)",
                self.holdout_device, self.devices
            )));
        }
        if self.train_users.iter().any(|&u| u >= self.users) {
            return Err(SynthError::Config("train user out of range".into()));
        }
        Ok(())
    }
}

/// Documented per-entry seed: first 8 bytes (LE) of
/// SHA-256("{master_seed}/{user}/{label}/{device}/{command}").
pub fn entry_seed(master_seed: u64, user: &str, label: Label, device: &str, command: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(format!("{master_seed}/{user}/{label}/{device}/{command}").as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub entries: usize,
    pub train_entries: usize,
    pub test_entries: usize,
    pub untagged_entries: usize,
}

/// Writes the corpus (traces, audio, JSONL manifest, spec copy) under
/// `out_dir`. Fully reproducible from (spec, master_seed).
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetSummary, SynthError> {
    spec.validate()?;
    let traces_dir = out_dir.join("traces");
    let audio_dir = out_dir.join("audio");
    for d in [out_dir, &traces_dir, &audio_dir] {
        std::fs::create_dir_all(d).map_err(|e| SynthError::Io(d.display().to_string(), e))?;
    }
    let profiles = DeviceProfile::catalog(spec.devices);

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut summary = DatasetSummary {
        entries: 0,
        train_entries: 0,
        test_entries: 0,
        untagged_entries: 0,
    };

    for user in 0..spec.users {
        let user_id = format!("u{user}");
        for label in [Label::Human, Label::Loudspeaker] {
            for cmd in 0..spec.commands_per_label {
                let (device_idx, device_id) = match label {
                    Label::Human => (None, "human".to_string()),
                    Label::Loudspeaker => {
                        let idx = cmd % spec.devices;
                        (Some(idx), profiles[idx].name.clone())
                    }
                };
                let command_id = format!("{user_id}-{label}-c{cmd}");
                let content_id = format!("c{cmd}");
                let seed = entry_seed(spec.master_seed, &user_id, label, &device_id, &command_id);

                let source = match device_idx {
                    None => SourceKind::Human,
                    Some(i) => SourceKind::Loudspeaker(profiles[i].clone()),
                };
                let mut cfg = SceneConfig::new(source, seed);
                cfg.distance_m = spec.distance_m;
                cfg.mag_noise_sigma_ut = spec.mag_noise_sigma_ut;
                cfg.audio_snr_db = spec.audio_snr_db;
                cfg.stereo = spec.stereo;
                cfg.utterance =
                    UtterancePlan::uniform(spec.words_per_command, spec.word_duration, spec.word_gap);
                cfg.user_id = user_id.clone();
                cfg.content_id = content_id.clone();
                cfg.command_id = command_id.clone();

                let (pair, _truth) = gen_pair(&cfg)?;
                let stem = format!("{user_id}_{label}_{device_id}_c{cmd}");
                let trace_rel = format!("traces/{stem}.csv");
                let audio_rel = format!("audio/{stem}.wav");
                write_trace(&out_dir.join(&trace_rel), &pair.trace)?;
                write_audio(&out_dir.join(&audio_rel), &pair.audio)?;

                let in_train_users = spec.train_users.contains(&user);
                let split = match (label, device_idx) {
                    (Label::Human, _) => {
                        if in_train_users {
                            Some("train")
                        } else {
                            Some("test")
                        }
                    }
                    (Label::Loudspeaker, Some(d)) => {
                        if in_train_users && d != spec.holdout_device {
                            Some("train")
                        } else if !in_train_users && d == spec.holdout_device {
                            Some("test")
                        } else {
                            None
                        }
                    }
                    (Label::Loudspeaker, None) => None,
                };
                match split {
                    Some("train") => summary.train_entries += 1,
                    Some("test") => summary.test_entries += 1,
                    _ => summary.untagged_entries += 1,
                }
                entries.push(ManifestEntry {
                    trace: trace_rel,
                    audio: audio_rel,
                    label,
                    user: user_id.clone(),
                    device: device_id.clone(),
                    content: content_id,
                    command: command_id,
                    split: split.map(str::to_string),
                });
                summary.entries += 1;
            }
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| SynthError::Io(manifest_path.display().to_string(), e))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(|e| SynthError::Io(manifest_path.display().to_string(), e))?;
    }
    let spec_path = out_dir.join("dataset.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )
    .map_err(|e| SynthError::Io(spec_path.display().to_string(), e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_second_trace_has_thousand_samples() {
        let mut cfg = SceneConfig::new(SourceKind::Human, 1);
        // lead 0.5 + 8 x (0.45 + 0.35) + tail 0.4 != 10; build a 10 s plan.
        cfg.utterance = UtterancePlan {
            lead_in: 0.5,
            words: vec![WordPlan { duration: 0.5, gap: 0.5 }; 9],
            tail: 0.5,
        };
        assert_eq!(cfg.utterance.total_duration(), 10.0);
        let (pair, _) = gen_pair(&cfg).unwrap();
        assert_eq!(pair.trace.len(), 1000);
        assert_eq!(pair.trace.nominal_rate, 100.0);
    }

    #[test]
    fn determinism_same_seed_same_bytes() {
        let cfg = SceneConfig::new(
            SourceKind::Loudspeaker(DeviceProfile::catalog(1)[0].clone()),
            99,
        );
        let (a, _) = gen_pair(&cfg).unwrap();
        let (b, _) = gen_pair(&cfg).unwrap();
        assert_eq!(a.trace.timestamps, b.trace.timestamps);
        assert_eq!(a.trace.samples, b.trace.samples);
        assert_eq!(a.audio.channels, b.audio.channels);
    }

    #[test]
    fn loudspeaker_correlates_with_envelope() {
        let profile = DeviceProfile::catalog(4)[0].clone();
        let mut cfg = SceneConfig::new(SourceKind::Loudspeaker(profile), 5);
        cfg.distance_m = 0.04;
        let (pair, truth) = gen_pair(&cfg).unwrap();
        let corr = audio_mag_correlation(&pair, &truth.word_intervals).unwrap();
        assert!(corr >= 0.5, "correlation {corr}");
    }

    #[test]
    fn human_uncorrelated_monte_carlo() {
        // Mean |corr| over seeds stays under 0.1; long utterance keeps the
        // effective sample count high.
        let mut total = 0.0;
        let n_seeds = 25;
        for seed in 0..n_seeds {
            let mut cfg = SceneConfig::new(SourceKind::Human, 1000 + seed);
            cfg.utterance = UtterancePlan::uniform(10, 0.5, 0.3);
            let (pair, truth) = gen_pair(&cfg).unwrap();
            let corr = audio_mag_correlation(&pair, &truth.word_intervals).unwrap();
            total += corr.abs();
        }
        let mean = total / n_seeds as f64;
        assert!(mean <= 0.1, "mean |corr| {mean}");
    }

    #[test]
    fn stereo_geometry_and_energy_ratio() {
        let mut cfg = SceneConfig::new(SourceKind::Human, 3);
        cfg.distance_m = 0.04;
        cfg.mic_spacing_m = 0.15;
        let (audio, truth) = gen_stereo_audio(&cfg).unwrap();
        assert_eq!(audio.num_channels(), 2);
        let geo = truth.geometry.unwrap();
        assert!((geo.d_far - 0.19).abs() < 1e-12);
        assert!((geo.tdoa - 0.15 / 340.0).abs() < 1e-12);
        assert!((geo.energy_ratio - 22.5625).abs() < 1e-9);

        // Measured energies over the voiced region follow the inverse-square
        // law within windowing effects (2%).
        let (s, e) = truth.word_intervals[0];
        let rate = audio.sample_rate as f64;
        let (si, ei) = ((s * rate) as usize, (e * rate) as usize);
        let e_far = rms(&audio.channels[0][si..ei]).powi(2);
        let e_near = rms(&audio.channels[1][si..ei]).powi(2);
        let measured = e_near / e_far;
        assert!(
            (measured - geo.energy_ratio).abs() <= 0.02 * geo.energy_ratio,
            "ratio {measured} vs {}",
            geo.energy_ratio
        );
    }

    #[test]
    fn equal_distances_symmetric() {
        let mut cfg = SceneConfig::new(SourceKind::Human, 8);
        cfg.mic_spacing_m = 0.0;
        let (audio, truth) = gen_stereo_audio(&cfg).unwrap();
        let geo = truth.geometry.unwrap();
        assert_eq!(geo.tdoa, 0.0);
        assert_eq!(geo.energy_ratio, 1.0);
        let d: f64 = audio.channels[0]
            .iter()
            .zip(&audio.channels[1])
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        // Channels share the delay/scale; they differ only by mic noise.
        assert!((d / audio.num_samples() as f64) < 0.02);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SceneConfig::new(SourceKind::Human, 0);
        cfg.distance_m = 0.0;
        assert!(matches!(gen_pair(&cfg), Err(SynthError::Config(_))));

        let mut profile = DeviceProfile::catalog(1)[0].clone();
        profile.falloff_exponent = 5.0;
        let cfg = SceneConfig::new(SourceKind::Loudspeaker(profile), 0);
        assert!(matches!(gen_pair(&cfg), Err(SynthError::Config(_))));
    }

    #[test]
    fn dataset_counts_and_split_tags() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            users: 4,
            devices: 2,
            commands_per_label: 5,
            words_per_command: 2,
            train_users: vec![0],
            holdout_device: 1,
            ..DatasetSpec::default()
        };
        let summary = gen_dataset(&spec, dir.path()).unwrap();
        // 4 users x 2 labels x 5 commands
        assert_eq!(summary.entries, 40);
        let manifest = crate::trace::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.entries.len(), 40);

        // No user overlap between split tags.
        let mut train_users = std::collections::BTreeSet::new();
        let mut test_users = std::collections::BTreeSet::new();
        for e in &manifest.entries {
            match e.split.as_deref() {
                Some("train") => {
                    train_users.insert(e.user.clone());
                }
                Some("test") => {
                    test_users.insert(e.user.clone());
                }
                _ => {}
            }
        }
        assert!(train_users.iter().all(|u| !test_users.contains(u)));
        // Holdout device never appears in train entries.
        for e in &manifest.entries {
            if e.split.as_deref() == Some("train") && e.label == Label::Loudspeaker {
                assert_ne!(e.device, "dev1");
            }
        }
    }

    #[test]
    fn dataset_reproducible_byte_identical() {
        let spec = DatasetSpec {
            users: 1,
            devices: 1,
            commands_per_label: 1,
            words_per_command: 2,
            train_users: vec![0],
            holdout_device: 0,
            ..DatasetSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_dataset(&spec, d1.path()).unwrap();
        gen_dataset(&spec, d2.path()).unwrap();
        for sub in ["manifest.jsonl", "traces/u0_human_human_c0.csv", "audio/u0_human_human_c0.wav"] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs");
        }
    }

    #[test]
    fn entry_seed_is_stable() {
        let s1 = entry_seed(42, "u0", Label::Human, "human", "k0");
        let s2 = entry_seed(42, "u0", Label::Human, "human", "k0");
        assert_eq!(s1, s2);
        assert_ne!(s1, entry_seed(43, "u0", Label::Human, "human", "k0"));
        assert_ne!(s1, entry_seed(42, "u1", Label::Human, "human", "k0"));
    }
}
