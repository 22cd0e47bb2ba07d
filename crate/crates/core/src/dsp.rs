//! Magnetometer preprocessing: uniform resampling, 5 Hz high-pass denoising,
//! net-magnitude aggregation, and the model inputs (segment envelope plus
//! 17x69x2 magnitude/phase spectrograms).
//!
//! Pipeline order: each axis is filtered first, then the filtered axes are
//! aggregated into the net magnitude.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::trace::SensorTrace;

/// Samples in one aligned magnetometer segment.
pub const SEGMENT_LEN: usize = 100;
/// STFT window length (one-sided spectrum: 17 bins).
pub const STFT_WINDOW: usize = 32;
/// STFT hop (69 frames over a 100-sample segment).
pub const STFT_HOP: usize = 1;
pub const SPEC_BINS: usize = STFT_WINDOW / 2 + 1;
pub const SPEC_FRAMES: usize = (SEGMENT_LEN - STFT_WINDOW) / STFT_HOP + 1;
/// High-pass filter order (applied forward and backward).
pub const FILTER_ORDER: usize = 4;
/// Default denoising cutoff in Hz.
pub const DEFAULT_CUTOFF_HZ: f64 = 5.0;
/// Working rate for the magnetometer pipeline.
pub const MAG_RATE_HZ: f64 = 100.0;

const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// A uniformly sampled scalar series.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSeries {
    pub rate: f64,
    pub values: Vec<f64>,
}

impl UniformSeries {
    pub fn new(rate: f64, values: Vec<f64>) -> Result<Self, DspError> {
        if rate <= 0.0 {
            return Err(DspError::Parameter(format!("rate must be positive, got {rate}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspError::Data("series contains non-finite values".into()));
        }
        Ok(Self { rate, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-channel standardization statistics (envelope, magnitude, phase).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    /// Divisor used; 1.0 marks a degenerate (centered-only) channel.
    pub std: [f64; 3],
}

/// Model input for one segment: envelope vector plus magnitude/phase
/// spectrogram stack. `spectrogram` is laid out (bin, frame, channel)
/// row-major with channel 0 = log-magnitude and channel 1 = phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub envelope: Vec<f64>,
    pub spectrogram: Vec<f64>,
    pub stats: Option<NormStats>,
}

impl FeatureTensor {
    pub fn spec_at(&self, bin: usize, frame: usize, channel: usize) -> f64 {
        self.spectrogram[(bin * SPEC_FRAMES + frame) * 2 + channel]
    }
}

/// Linear interpolation of each trace axis onto a uniform grid spanning
/// [t0, t_end].
pub fn resample_uniform(trace: &SensorTrace, rate: f64) -> Result<[UniformSeries; 3], DspError> {
    if rate <= 0.0 {
        return Err(DspError::Parameter(format!("rate must be positive, got {rate}")));
    }
    let duration = trace.duration();
    // Absorb float fuzz so a 10 s trace at 100 Hz yields exactly 1000 points.
    let n = ((duration * rate) + 1e-9).floor() as usize + 1;
    let ts = &trace.timestamps;
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut seg = 0usize;
    for k in 0..n {
        let t = (k as f64 / rate).min(duration);
        while seg + 2 < ts.len() && ts[seg + 1] < t {
            seg += 1;
        }
        let (t0, t1) = (ts[seg], ts[seg + 1]);
        let alpha = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        for axis in 0..3 {
            let (v0, v1) = (trace.samples[seg][axis], trace.samples[seg + 1][axis]);
            out[axis][k] = v0 + alpha * (v1 - v0);
        }
    }
    let [x, y, z] = out;
    Ok([
        UniformSeries::new(rate, x)?,
        UniformSeries::new(rate, y)?,
        UniformSeries::new(rate, z)?,
    ])
}

// ---------------------------------------------------------------------------
// Butterworth high-pass, zero-phase
// ---------------------------------------------------------------------------

/// Digital high-pass Butterworth coefficients (monic denominator).
#[derive(Debug, Clone)]
pub struct HighpassFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    zi: Vec<f64>,
}

impl HighpassFilter {
    /// Designs an order-`FILTER_ORDER` high-pass at `cutoff` Hz for `rate` Hz
    /// sampling via the bilinear transform with frequency prewarping.
    pub fn design(cutoff: f64, rate: f64) -> Result<Self, DspError> {
        if cutoff <= 0.0 || rate <= 0.0 {
            return Err(DspError::Parameter("cutoff and rate must be positive".into()));
        }
        if cutoff >= rate / 2.0 {
            return Err(DspError::Parameter(format!(
                "cutoff {cutoff} Hz not below Nyquist {} Hz",
                rate / 2.0
            )));
        }
        let n = FILTER_ORDER;
        let fs2 = 2.0 * rate;
        let warped = fs2 * (std::f64::consts::PI * cutoff / rate).tan();

        // Analog low-pass prototype poles, transformed to high-pass.
        let mut poles = Vec::with_capacity(n);
        for k in 1..=n {
            let theta = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
            let lp = Complex64::new(theta.cos(), theta.sin());
            poles.push(Complex64::new(warped, 0.0) / lp);
        }

        // Bilinear transform: zeros at z = 1, poles mapped, gain from s-plane.
        let mut digital_poles = Vec::with_capacity(n);
        let mut gain = Complex64::new(1.0, 0.0);
        for &p in &poles {
            digital_poles.push((Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p));
            gain *= Complex64::new(fs2, 0.0) / (Complex64::new(fs2, 0.0) - p);
        }
        let k_d = gain.re;

        let a = poly_from_roots(&digital_poles);
        let ones = vec![Complex64::new(1.0, 0.0); n];
        let mut b = poly_from_roots(&ones);
        for v in b.iter_mut() {
            *v *= k_d;
        }

        let mut filter = Self { b, a, zi: vec![] };
        filter.zi = filter.steady_state_init()?;
        Ok(filter)
    }

    /// Steady-state delay states for a unit step, so transients at the signal
    /// edges are suppressed.
    fn steady_state_init(&self) -> Result<Vec<f64>, DspError> {
        let n = self.a.len() - 1;
        // (I - C^T) zi = b[1:] - a[1:] * b[0], with C the companion matrix.
        let mut m = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            m[i][0] = self.a[i + 1];
            if i + 1 < n {
                m[i][i + 1] -= 1.0;
            }
            m[i][i] += 1.0;
            rhs[i] = self.b[i + 1] - self.a[i + 1] * self.b[0];
        }
        solve_dense(&mut m, &mut rhs)
            .ok_or_else(|| DspError::Parameter("degenerate filter design".into()))?;
        Ok(rhs)
    }

    /// Direct form II transposed with initial states `zi` scaled by `x0`.
    fn lfilter(&self, x: &[f64], x0: f64) -> Vec<f64> {
        let order = self.a.len() - 1;
        let mut d: Vec<f64> = self.zi.iter().map(|&z| z * x0).collect();
        let mut y = Vec::with_capacity(x.len());
        for &xv in x {
            let yv = self.b[0] * xv + d[0];
            for i in 0..order - 1 {
                d[i] = self.b[i + 1] * xv + d[i + 1] - self.a[i + 1] * yv;
            }
            d[order - 1] = self.b[order] * xv - self.a[order] * yv;
            y.push(yv);
        }
        y
    }
}

/// Applies the high-pass forward then backward (zero phase). The input is
/// extended by odd reflection of 3x the filter order at each end.
pub fn highpass(series: &UniformSeries, cutoff: f64) -> Result<UniformSeries, DspError> {
    let filter = HighpassFilter::design(cutoff, series.rate)?;
    filtfilt(&filter, series)
}

pub fn filtfilt(filter: &HighpassFilter, series: &UniformSeries) -> Result<UniformSeries, DspError> {
    let pad = 3 * FILTER_ORDER;
    let x = &series.values;
    if x.len() <= pad {
        return Err(DspError::Length(format!(
            "series of length {} too short for zero-phase filtering (needs > {pad})",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let mut y = filter.lfilter(&ext, ext[0]);
    y.reverse();
    let mut y = filter.lfilter(&y, y[0]);
    y.reverse();
    UniformSeries::new(series.rate, y[pad..pad + n].to_vec())
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

/// In-place Gaussian elimination with partial pivoting; solution left in rhs.
fn solve_dense(m: &mut [Vec<f64>], rhs: &mut [f64]) -> Option<()> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        rhs[col] /= m[col][col];
        for row in 0..col {
            rhs[row] -= m[row][col] * rhs[col];
        }
    }
    Some(())
}

// ---------------------------------------------------------------------------
// Net magnitude, envelope, spectrogram, normalization
// ---------------------------------------------------------------------------

/// Euclidean norm across the three axes, elementwise.
pub fn net_magnitude(
    mx: &UniformSeries,
    my: &UniformSeries,
    mz: &UniformSeries,
) -> Result<UniformSeries, DspError> {
    if mx.len() != my.len() || my.len() != mz.len() {
        return Err(DspError::Shape(format!(
            "axis lengths differ: {} / {} / {}",
            mx.len(),
            my.len(),
            mz.len()
        )));
    }
    if mx.rate != my.rate || my.rate != mz.rate {
        return Err(DspError::Shape("axis rates differ".into()));
    }
    let values = mx
        .values
        .iter()
        .zip(&my.values)
        .zip(&mz.values)
        .map(|((&x, &y), &z)| (x * x + y * y + z * z).sqrt())
        .collect();
    UniformSeries::new(mx.rate, values)
}

/// Resamples each axis, high-pass filters it, then aggregates to the net
/// magnitude: the canonical denoising path for a whole trace.
pub fn preprocess_net(trace: &SensorTrace, cutoff: f64, rate: f64) -> Result<UniformSeries, DspError> {
    let [x, y, z] = resample_uniform(trace, rate)?;
    let fx = highpass(&x, cutoff)?;
    let fy = highpass(&y, cutoff)?;
    let fz = highpass(&z, cutoff)?;
    net_magnitude(&fx, &fy, &fz)
}

/// Magnitude of the FFT-based analytic signal of a 100-sample segment.
pub fn envelope(segment: &[f64]) -> Result<Vec<f64>, DspError> {
    if segment.len() != SEGMENT_LEN {
        return Err(DspError::Shape(format!(
            "envelope expects {SEGMENT_LEN} samples, got {}",
            segment.len()
        )));
    }
    let n = segment.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut buf: Vec<Complex64> = segment.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    // Analytic-signal weights: keep DC and Nyquist, double positive bins,
    // zero negative bins.
    for (i, v) in buf.iter_mut().enumerate() {
        if i == 0 || (n.is_multiple_of(2) && i == n / 2) {
            // unchanged
        } else if i < n.div_ceil(2) {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft.process(&mut buf);
    Ok(buf.iter().map(|v| v.norm() / n as f64).collect())
}

/// STFT of a 100-sample segment: Hann window 32, hop 1, one-sided spectrum.
/// Channel 0 is log(1 + |X|), channel 1 is phase in [-pi, pi]. Output layout
/// is (17 bins, 69 frames, 2 channels) row-major.
pub fn stft_features(segment: &[f64]) -> Result<Vec<f64>, DspError> {
    if segment.len() != SEGMENT_LEN {
        return Err(DspError::Shape(format!(
            "stft expects {SEGMENT_LEN} samples, got {}",
            segment.len()
        )));
    }
    let window: Vec<f64> = (0..STFT_WINDOW)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / STFT_WINDOW as f64).cos()))
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(STFT_WINDOW);

    let mut out = vec![0.0; SPEC_BINS * SPEC_FRAMES * 2];
    let mut buf = vec![Complex64::new(0.0, 0.0); STFT_WINDOW];
    for frame in 0..SPEC_FRAMES {
        let start = frame * STFT_HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(segment[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for bin in 0..SPEC_BINS {
            let v = buf[bin];
            let idx = (bin * SPEC_FRAMES + frame) * 2;
            out[idx] = (1.0 + v.norm()).ln();
            out[idx + 1] = v.im.atan2(v.re);
        }
    }
    Ok(out)
}

/// Builds the raw (un-normalized) feature tensor for one segment.
pub fn segment_features(window: &[f64]) -> Result<FeatureTensor, DspError> {
    Ok(FeatureTensor {
        envelope: envelope(window)?,
        spectrogram: stft_features(window)?,
        stats: None,
    })
}

/// Standardizes the envelope and each spectrogram channel to zero mean and
/// unit variance over the segment. Channels with variance below 1e-12 are
/// centered only.
pub fn normalize(tensor: &FeatureTensor) -> Result<FeatureTensor, DspError> {
    if tensor.envelope.iter().any(|v| !v.is_finite())
        || tensor.spectrogram.iter().any(|v| !v.is_finite())
    {
        return Err(DspError::Data("non-finite values in feature tensor".into()));
    }

    fn stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    let (env_mean, env_var) = stats(tensor.envelope.iter().copied());
    let mag = tensor.spectrogram.iter().step_by(2).copied();
    let phase = tensor.spectrogram.iter().skip(1).step_by(2).copied();
    let (mag_mean, mag_var) = stats(mag);
    let (phase_mean, phase_var) = stats(phase);

    let divisor = |var: f64| if var < DEGENERATE_VAR { 1.0 } else { var.sqrt() };
    let std = [divisor(env_var), divisor(mag_var), divisor(phase_var)];
    let mean = [env_mean, mag_mean, phase_mean];

    let envelope = tensor
        .envelope
        .iter()
        .map(|&v| (v - mean[0]) / std[0])
        .collect();
    let spectrogram = tensor
        .spectrogram
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = 1 + (i % 2); // 1 = magnitude, 2 = phase
            (v - mean[ch]) / std[ch]
        })
        .collect();
    Ok(FeatureTensor {
        envelope,
        spectrogram,
        stats: Some(NormStats { mean, std }),
    })
}

/// Envelope + STFT + normalization for one aligned 100-sample window.
pub fn features_for_window(window: &[f64]) -> Result<FeatureTensor, DspError> {
    normalize(&segment_features(window)?)
}

// ---------------------------------------------------------------------------
// Feature dump (little-endian f32, planar)
// ---------------------------------------------------------------------------

const DUMP_MAGIC: &[u8; 8] = b"MLFTENS1";
const DUMP_VERSION: u32 = 1;

/// Writes envelope[100], magnitude[17x69], phase[17x69] as f32 LE after a
/// 16-byte magic/version header.
pub fn write_feature_dump(path: &Path, tensor: &FeatureTensor) -> Result<(), DspError> {
    let io = |e| DspError::Io(path.display().to_string(), e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(DUMP_MAGIC).map_err(io)?;
    w.write_all(&DUMP_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&0u32.to_le_bytes()).map_err(io)?;
    for &v in &tensor.envelope {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    for ch in 0..2 {
        for bin in 0..SPEC_BINS {
            for frame in 0..SPEC_FRAMES {
                let v = tensor.spec_at(bin, frame, ch) as f32;
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_feature_dump(path: &Path) -> Result<FeatureTensor, DspError> {
    let io = |e| DspError::Io(path.display().to_string(), e);
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(io)?;
    if &header[..8] != DUMP_MAGIC {
        return Err(DspError::Format(format!(
            "{}: not a feature dump (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(DspError::Format(format!(
            "{}: unsupported feature dump version {version}",
            path.display()
        )));
    }
    let read_f32 = |r: &mut dyn Read| -> Result<f64, DspError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        Ok(f32::from_le_bytes(b) as f64)
    };
    let mut envelope = Vec::with_capacity(SEGMENT_LEN);
    for _ in 0..SEGMENT_LEN {
        envelope.push(read_f32(&mut r)?);
    }
    let mut planar = vec![0.0; SPEC_BINS * SPEC_FRAMES * 2];
    for v in planar.iter_mut() {
        *v = read_f32(&mut r)?;
    }
    let mut spectrogram = vec![0.0; SPEC_BINS * SPEC_FRAMES * 2];
    for bin in 0..SPEC_BINS {
        for frame in 0..SPEC_FRAMES {
            let flat = bin * SPEC_FRAMES + frame;
            spectrogram[flat * 2] = planar[flat];
            spectrogram[flat * 2 + 1] = planar[SPEC_BINS * SPEC_FRAMES + flat];
        }
    }
    Ok(FeatureTensor {
        envelope,
        spectrogram,
        stats: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SensorTrace;

    fn sine(freq: f64, rate: f64, secs: f64) -> UniformSeries {
        let n = (rate * secs) as usize;
        let values = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin())
            .collect();
        UniformSeries::new(rate, values).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn resample_identity_on_uniform_trace() {
        let timestamps: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let samples: Vec<[f64; 3]> = (0..200).map(|i| [i as f64, -(i as f64), 0.5]).collect();
        let trace = SensorTrace::new(timestamps, samples).unwrap();
        let [x, y, z] = resample_uniform(&trace, 100.0).unwrap();
        assert_eq!(x.len(), 200);
        for i in 0..200 {
            assert!((x.values[i] - i as f64).abs() < 1e-9);
            assert!((y.values[i] + i as f64).abs() < 1e-9);
            assert!((z.values[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_two_point_interpolation() {
        let trace = SensorTrace::new(vec![0.0, 1.0], vec![[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]])
            .unwrap();
        let [x, _, _] = resample_uniform(&trace, 2.0).unwrap();
        assert_eq!(x.values, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn resample_rejects_bad_rate() {
        let trace = SensorTrace::new(vec![0.0, 1.0], vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(matches!(
            resample_uniform(&trace, 0.0),
            Err(DspError::Parameter(_))
        ));
    }

    #[test]
    fn highpass_attenuates_1hz_by_40db() {
        let x = sine(1.0, 100.0, 10.0);
        let y = highpass(&x, 5.0).unwrap();
        assert_eq!(y.len(), x.len());
        let atten_db = 20.0 * (rms(&y.values) / rms(&x.values)).log10();
        // Analytic two-pass order-4 response at f/fc = 0.2 is about -112 dB;
        // edge effects leave a wide margin over the -40 dB requirement.
        assert!(atten_db <= -40.0, "attenuation only {atten_db:.1} dB");
    }

    #[test]
    fn highpass_passes_20hz_within_1db() {
        let x = sine(20.0, 100.0, 10.0);
        let y = highpass(&x, 5.0).unwrap();
        let gain_db = 20.0 * (rms(&y.values) / rms(&x.values)).log10();
        assert!(gain_db.abs() <= 1.0, "passband gain {gain_db:.3} dB");
    }

    #[test]
    fn highpass_rejects_dc() {
        let x = UniformSeries::new(100.0, vec![7.5; 500]).unwrap();
        let y = highpass(&x, 5.0).unwrap();
        let max = y.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max <= 1e-6, "DC residue {max}");
    }

    #[test]
    fn highpass_analytic_magnitude_oracle() {
        // |H(f)|^2 = 1 / (1 + (fc/f)^(2N)) per pass; two passes square it.
        // Measured on the steady-state interior of a long tone.
        for (freq, _) in [(2.0, ()), (10.0, ()), (35.0, ())] {
            let x = sine(freq, 100.0, 30.0);
            let y = highpass(&x, 5.0).unwrap();
            let interior = 500..x.len() - 500;
            let measured = rms(&y.values[interior.clone()]) / rms(&x.values[interior]);
            let per_pass = 1.0 / (1.0 + (5.0f64 / freq).powi(2 * FILTER_ORDER as i32)).sqrt();
            let expected = per_pass * per_pass;
            assert!(
                (measured - expected).abs() <= 0.02 * expected.max(0.01),
                "freq {freq}: measured {measured:.6} vs analytic {expected:.6}"
            );
        }
    }

    #[test]
    fn zero_phase_no_lag() {
        // Band-passed impulse train: the cross-correlation peak between input
        // and output must sit at lag 0.
        let mut values = vec![0.0; 1000];
        for i in (50..1000).step_by(100) {
            values[i] = 1.0;
        }
        let x = UniformSeries::new(100.0, values).unwrap();
        let y = highpass(&x, 5.0).unwrap();
        let mut best = (0i64, f64::MIN);
        for lag in -20i64..=20 {
            let mut acc = 0.0;
            for i in 0..1000i64 {
                let j = i + lag;
                if (0..1000).contains(&j) {
                    acc += x.values[i as usize] * y.values[j as usize];
                }
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0, "cross-correlation peak at lag {}", best.0);
    }

    #[test]
    fn highpass_too_short_series() {
        let x = UniformSeries::new(100.0, vec![1.0; 12]).unwrap();
        assert!(matches!(highpass(&x, 5.0), Err(DspError::Length(_))));
    }

    #[test]
    fn highpass_cutoff_above_nyquist() {
        let x = sine(1.0, 100.0, 1.0);
        assert!(matches!(highpass(&x, 50.0), Err(DspError::Parameter(_))));
    }

    #[test]
    fn net_magnitude_pythagorean() {
        let mk = |v: f64| UniformSeries::new(100.0, vec![v]).unwrap();
        let out = net_magnitude(&mk(3.0), &mk(4.0), &mk(0.0)).unwrap();
        assert_eq!(out.values, vec![5.0]);
        let zero = net_magnitude(&mk(0.0), &mk(0.0), &mk(0.0)).unwrap();
        assert_eq!(zero.values, vec![0.0]);
    }

    #[test]
    fn net_magnitude_rotation_invariant() {
        // Explicit rotation matrix as the oracle: Rz(a) * Rx(b).
        let (a, b) = (0.7f64, -1.2f64);
        let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
        let rot = |v: [f64; 3]| {
            let w = [
                rx[0][0] * v[0] + rx[0][1] * v[1] + rx[0][2] * v[2],
                rx[1][0] * v[0] + rx[1][1] * v[1] + rx[1][2] * v[2],
                rx[2][0] * v[0] + rx[2][1] * v[1] + rx[2][2] * v[2],
            ];
            [
                rz[0][0] * w[0] + rz[0][1] * w[1] + rz[0][2] * w[2],
                rz[1][0] * w[0] + rz[1][1] * w[1] + rz[1][2] * w[2],
                rz[2][0] * w[0] + rz[2][1] * w[1] + rz[2][2] * w[2],
            ]
        };
        let vecs: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                let t = i as f64;
                [(t * 0.37).sin() * 3.0, (t * 0.71).cos() * 2.0, (t * 0.13).sin() - 0.5]
            })
            .collect();
        let series = |idx: usize, vs: &[[f64; 3]]| {
            UniformSeries::new(100.0, vs.iter().map(|v| v[idx]).collect()).unwrap()
        };
        let plain = net_magnitude(&series(0, &vecs), &series(1, &vecs), &series(2, &vecs)).unwrap();
        let rotated: Vec<[f64; 3]> = vecs.iter().map(|&v| rot(v)).collect();
        let rot_mag =
            net_magnitude(&series(0, &rotated), &series(1, &rotated), &series(2, &rotated)).unwrap();
        for (p, r) in plain.values.iter().zip(&rot_mag.values) {
            assert!((p - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn net_magnitude_length_mismatch() {
        let a = UniformSeries::new(100.0, vec![1.0, 2.0]).unwrap();
        let b = UniformSeries::new(100.0, vec![1.0]).unwrap();
        assert!(matches!(net_magnitude(&a, &b, &a), Err(DspError::Shape(_))));
    }

    #[test]
    fn envelope_zero_signal() {
        let env = envelope(&[0.0; SEGMENT_LEN]).unwrap();
        assert!(env.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn envelope_unit_sinusoid() {
        let seg: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 100.0).sin())
            .collect();
        let env = envelope(&seg).unwrap();
        assert!(env.iter().all(|&v| v >= 0.0));
        let interior = &env[10..90];
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((mean - 1.0).abs() <= 0.05, "interior mean {mean}");
    }

    #[test]
    fn envelope_tracks_amplitude_modulation() {
        // a(t) * sin(2 pi 20 t) with slowly varying nonnegative a(t).
        let amp = |i: usize| 0.6 + 0.4 * (2.0 * std::f64::consts::PI * i as f64 / 100.0).cos();
        let seg: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| amp(i) * (2.0 * std::f64::consts::PI * 20.0 * i as f64 / 100.0).sin())
            .collect();
        let env = envelope(&seg).unwrap();
        let max_err = (10..90)
            .map(|i| (env[i] - amp(i)).abs() / amp(i))
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.10, "interior envelope error {max_err}");
    }

    #[test]
    fn envelope_wrong_length() {
        assert!(matches!(envelope(&[0.0; 99]), Err(DspError::Shape(_))));
    }

    #[test]
    fn stft_shape_and_zero_segment() {
        let spec = stft_features(&[0.0; SEGMENT_LEN]).unwrap();
        assert_eq!(spec.len(), SPEC_BINS * SPEC_FRAMES * 2);
        assert_eq!(SPEC_BINS, 17);
        assert_eq!(SPEC_FRAMES, 69);
        for bin in 0..SPEC_BINS {
            for frame in 0..SPEC_FRAMES {
                assert_eq!(spec[(bin * SPEC_FRAMES + frame) * 2], 0.0);
            }
        }
    }

    #[test]
    fn stft_25hz_peaks_at_bin_8() {
        let seg: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| (2.0 * std::f64::consts::PI * 25.0 * i as f64 / 100.0).sin())
            .collect();
        let tensor = segment_features(&seg).unwrap();
        let mean_mag: Vec<f64> = (0..SPEC_BINS)
            .map(|bin| {
                (0..SPEC_FRAMES).map(|f| tensor.spec_at(bin, f, 0)).sum::<f64>()
                    / SPEC_FRAMES as f64
            })
            .collect();
        let argmax = mean_mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // bin = round(f * n_fft / rate) = 25 * 32 / 100 = 8
        assert_eq!(argmax, 8);
    }

    #[test]
    fn stft_phase_in_range() {
        let seg: Vec<f64> = (0..SEGMENT_LEN).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let tensor = segment_features(&seg).unwrap();
        for bin in 0..SPEC_BINS {
            for frame in 0..SPEC_FRAMES {
                let p = tensor.spec_at(bin, frame, 1);
                assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&p));
            }
        }
    }

    #[test]
    fn normalize_constant_envelope_centers_only() {
        let tensor = FeatureTensor {
            envelope: vec![3.0; SEGMENT_LEN],
            spectrogram: vec![0.0; SPEC_BINS * SPEC_FRAMES * 2],
            stats: None,
        };
        let normed = normalize(&tensor).unwrap();
        assert!(normed.envelope.iter().all(|&v| v == 0.0));
        let stats = normed.stats.unwrap();
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn normalize_zero_mean_unit_variance() {
        let seg: Vec<f64> = (0..SEGMENT_LEN)
            .map(|i| (i as f64 * 0.31).sin() + 0.2 * (i as f64 * 0.05).cos())
            .collect();
        let normed = features_for_window(&seg).unwrap();
        let check = |vals: Vec<f64>| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-9, "std {}", var.sqrt());
        };
        check(normed.envelope.clone());
        check(normed.spectrogram.iter().step_by(2).copied().collect());
        check(normed.spectrogram.iter().skip(1).step_by(2).copied().collect());
    }

    #[test]
    fn normalize_is_idempotent() {
        let seg: Vec<f64> = (0..SEGMENT_LEN).map(|i| (i as f64 * 0.17).sin() * 2.0 + 1.0).collect();
        let once = features_for_window(&seg).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.envelope.iter().zip(&twice.envelope) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in once.spectrogram.iter().zip(&twice.spectrogram) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_nan() {
        let mut tensor = FeatureTensor {
            envelope: vec![0.0; SEGMENT_LEN],
            spectrogram: vec![0.0; SPEC_BINS * SPEC_FRAMES * 2],
            stats: None,
        };
        tensor.envelope[3] = f64::NAN;
        assert!(matches!(normalize(&tensor), Err(DspError::Data(_))));
    }

    #[test]
    fn filter_runs_before_aggregation() {
        // A rotating constant-magnitude field distinguishes the order: the
        // net magnitude of the raw axes is constant (filtered to ~0), while
        // filtering each axis first keeps the 20 Hz rotation energy.
        let n = 600;
        let timestamps: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let samples: Vec<[f64; 3]> = timestamps
            .iter()
            .map(|&t| {
                let phase = std::f64::consts::TAU * 20.0 * t;
                [3.0 * phase.cos(), 3.0 * phase.sin(), 0.0]
            })
            .collect();
        let trace = SensorTrace::new(timestamps, samples).unwrap();
        let net = preprocess_net(&trace, 5.0, 100.0).unwrap();
        let rms_net = rms(&net.values);
        assert!(
            rms_net > 2.0,
            "filter-then-aggregate must keep the rotating field, rms {rms_net}"
        );

        // Aggregate-then-filter collapses the same input to (filtered)
        // constant magnitude.
        let [x, y, z] = resample_uniform(&trace, 100.0).unwrap();
        let magnitude_first = net_magnitude(&x, &y, &z).unwrap();
        let filtered_after = highpass(&magnitude_first, 5.0).unwrap();
        assert!(rms(&filtered_after.values) < 1e-6);
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let seg: Vec<f64> = (0..SEGMENT_LEN).map(|i| (i as f64 * 0.23).sin()).collect();
        let a = features_for_window(&seg).unwrap();
        let b = features_for_window(&seg).unwrap();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn feature_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        let seg: Vec<f64> = (0..SEGMENT_LEN).map(|i| (i as f64 * 0.41).sin()).collect();
        let tensor = features_for_window(&seg).unwrap();
        write_feature_dump(&path, &tensor).unwrap();
        let loaded = load_feature_dump(&path).unwrap();
        for (a, b) in tensor.envelope.iter().zip(&loaded.envelope) {
            assert!((a - b).abs() <= 1e-6); // f32 precision
        }
        for (a, b) in tensor.spectrogram.iter().zip(&loaded.spectrogram) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn feature_dump_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let seg: Vec<f64> = (0..SEGMENT_LEN).map(|i| (i as f64 * 0.11).cos()).collect();
        let tensor = features_for_window(&seg).unwrap();
        write_feature_dump(&p1, &tensor).unwrap();
        write_feature_dump(&p2, &tensor).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
