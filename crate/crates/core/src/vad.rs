//! Energy-based voice activity detection with hysteresis, and alignment of
//! voiced intervals onto 100-sample net-magnetometer windows.

use serde::{Deserialize, Serialize};

use crate::dsp::{UniformSeries, SEGMENT_LEN};
use crate::trace::{AudioClip, RecordingPair};

#[derive(Debug, thiserror::Error)]
pub enum VadError {
    #[error("clip too short: {0:.3} s (minimum 0.1 s)")]
    TooShort(f64),
    #[error("segmentation error: {0}")]
    Segmentation(String),
}

/// Detection parameters. Thresholds are relative to the per-clip noise floor
/// so boundaries are invariant to uniform gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VadConfig {
    pub frame_secs: f64,
    pub hop_secs: f64,
    /// Noise floor percentile of frame energies (0..1).
    pub floor_percentile: f64,
    /// Onset threshold above the floor, dB.
    pub onset_db: f64,
    /// Offset threshold above the floor, dB (hysteresis).
    pub offset_db: f64,
    /// Segments closer than this are merged, seconds.
    pub merge_gap_secs: f64,
    /// Segments shorter than this are dropped, seconds.
    pub min_duration_secs: f64,
    /// Clips with less frame-energy dynamic range than this are silent, dB.
    pub min_dynamic_range_db: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_secs: 0.020,
            hop_secs: 0.010,
            floor_percentile: 0.10,
            onset_db: 12.0,
            offset_db: 6.0,
            merge_gap_secs: 0.100,
            min_duration_secs: 0.080,
            min_dynamic_range_db: 3.0,
        }
    }
}

/// A voiced interval in the audio stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceSegment {
    pub start: f64,
    pub end: f64,
    /// Highest frame energy inside the segment, dB.
    pub peak_energy: f64,
}

impl VoiceSegment {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// One word's aligned magnetometer window plus its provenance.
#[derive(Debug, Clone)]
pub struct AlignedSegment {
    /// Exactly 100 net-magnetometer samples at 100 Hz.
    pub mag_window: Vec<f64>,
    pub voice: VoiceSegment,
    pub window_start_index: usize,
    pub label: crate::trace::Label,
    pub user_id: String,
    pub device_id: String,
    pub content_id: String,
    pub command_id: String,
}

fn frame_energies_db(samples: &[f64], rate: f64, cfg: &VadConfig) -> Vec<f64> {
    let frame = (cfg.frame_secs * rate).round() as usize;
    let hop = (cfg.hop_secs * rate).round() as usize;
    if samples.len() < frame || frame == 0 || hop == 0 {
        return vec![];
    }
    let n_frames = (samples.len() - frame) / hop + 1;
    (0..n_frames)
        .map(|f| {
            let w = &samples[f * hop..f * hop + frame];
            let e = w.iter().map(|v| v * v).sum::<f64>() / frame as f64;
            10.0 * (e + 1e-12).log10()
        })
        .collect()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Short-time log-energy VAD. Returns sorted, non-overlapping segments;
/// a clip with under 3 dB of dynamic range yields an empty list.
pub fn detect_voice_segments(audio: &AudioClip, cfg: &VadConfig) -> Result<Vec<VoiceSegment>, VadError> {
    if audio.duration() < 0.1 {
        return Err(VadError::TooShort(audio.duration()));
    }
    let samples = audio.downmix();
    let rate = audio.sample_rate as f64;
    let energies = frame_energies_db(&samples, rate, cfg);
    if energies.is_empty() {
        return Ok(vec![]);
    }

    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let floor = percentile(&sorted, cfg.floor_percentile);
    let max = *sorted.last().unwrap();
    if max - floor < cfg.min_dynamic_range_db {
        return Ok(vec![]);
    }
    let onset = floor + cfg.onset_db;
    let offset = floor + cfg.offset_db;

    // Hysteresis state machine over frames.
    let mut raw: Vec<(usize, usize)> = Vec::new(); // [start_frame, end_frame)
    let mut active_since: Option<usize> = None;
    for (f, &e) in energies.iter().enumerate() {
        match active_since {
            None if e >= onset => active_since = Some(f),
            Some(s) if e < offset => {
                raw.push((s, f));
                active_since = None;
            }
            _ => {}
        }
    }
    if let Some(s) = active_since {
        raw.push((s, energies.len()));
    }

    // Frame f covers [f*hop, f*hop + frame) seconds.
    let to_secs = |(s, e): (usize, usize)| {
        (
            s as f64 * cfg.hop_secs,
            (e.saturating_sub(1)) as f64 * cfg.hop_secs + cfg.frame_secs,
        )
    };

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for seg in raw {
        match merged.last_mut() {
            Some(prev) => {
                let gap = to_secs(seg).0 - to_secs(*prev).1;
                if gap < cfg.merge_gap_secs {
                    prev.1 = seg.1;
                } else {
                    merged.push(seg);
                }
            }
            None => merged.push(seg),
        }
    }

    let segments = merged
        .into_iter()
        .filter_map(|seg| {
            let (start, end) = to_secs(seg);
            if end - start < cfg.min_duration_secs {
                return None;
            }
            let peak = energies[seg.0..seg.1]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            Some(VoiceSegment {
                start,
                end: end.min(audio.duration()),
                peak_energy: peak,
            })
        })
        .collect();
    Ok(segments)
}

/// Cuts a 100-sample window of `net_mag` centered on each voice segment's
/// midpoint; windows are shifted inward at the trace bounds, never shortened.
pub fn align_segments(
    pair: &RecordingPair,
    voice_segments: &[VoiceSegment],
    net_mag: &UniformSeries,
) -> Result<Vec<AlignedSegment>, VadError> {
    let n = net_mag.len();
    if n < SEGMENT_LEN {
        return Err(VadError::Segmentation(format!(
            "trace provides {n} samples at {} Hz; need at least {SEGMENT_LEN}",
            net_mag.rate
        )));
    }
    let mut out = Vec::with_capacity(voice_segments.len());
    for voice in voice_segments {
        let center = (voice.midpoint() * net_mag.rate).round() as i64;
        let start = (center - (SEGMENT_LEN / 2) as i64)
            .clamp(0, (n - SEGMENT_LEN) as i64) as usize;
        out.push(AlignedSegment {
            mag_window: net_mag.values[start..start + SEGMENT_LEN].to_vec(),
            voice: voice.clone(),
            window_start_index: start,
            label: pair.label,
            user_id: pair.user_id.clone(),
            device_id: pair.device_id.clone(),
            content_id: pair.content_id.clone(),
            command_id: pair.command_id.clone(),
        });
    }
    Ok(out)
}
