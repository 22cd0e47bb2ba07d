//! End-to-end composition: recording -> preprocess -> segments -> features ->
//! scores -> verdict, plus the latency benchmark used by the overhead study.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, DspError, FeatureTensor};
use crate::eval::ScoredSample;
use crate::model::{classify_batch, extract_features_batch, MagLiveModel, ModelError, DECISION_THRESHOLD};
use crate::ranging::{range_gate, RangeGateOutcome, RangingConfig, RangingError};
use crate::trace::{DatasetManifest, Label, RecordingPair, TraceError};
use crate::vad::{align_segments, detect_voice_segments, AlignedSegment, VadConfig, VadError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Vad(#[from] VadError),
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One preprocessed segment ready for the model, with its provenance.
#[derive(Debug, Clone)]
pub struct PreparedSegment {
    pub segment: AlignedSegment,
    pub features: FeatureTensor,
}

/// Segment metadata as written to the segments manifest (JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub tensor: String,
    pub window_start_index: usize,
    pub voice_start: f64,
    pub voice_end: f64,
    pub label: Label,
    pub user: String,
    pub device: String,
    pub content: String,
    pub command: String,
}

impl SegmentRecord {
    pub fn new(prepared: &PreparedSegment, tensor_path: String) -> Self {
        let s = &prepared.segment;
        Self {
            tensor: tensor_path,
            window_start_index: s.window_start_index,
            voice_start: s.voice.start,
            voice_end: s.voice.end,
            label: s.label,
            user: s.user_id.clone(),
            device: s.device_id.clone(),
            content: s.content_id.clone(),
            command: s.command_id.clone(),
        }
    }
}

/// Full preprocessing of one recording: resample + denoise + net magnitude,
/// VAD on the audio, 100-sample alignment, envelope/STFT features.
pub fn preprocess_pair(
    pair: &RecordingPair,
    vad_cfg: &VadConfig,
    cutoff_hz: f64,
) -> Result<Vec<PreparedSegment>, PipelineError> {
    let net = dsp::preprocess_net(&pair.trace, cutoff_hz, dsp::MAG_RATE_HZ)?;
    let voices = detect_voice_segments(&pair.audio, vad_cfg)?;
    let segments = align_segments(pair, &voices, &net)?;
    segments
        .into_iter()
        .map(|segment| {
            let features = dsp::features_for_window(&segment.mag_window)?;
            Ok(PreparedSegment { segment, features })
        })
        .collect()
}

/// Loads and preprocesses every manifest entry with the given split tag
/// (None = all entries). Recordings are processed in parallel; output order
/// follows the manifest.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    split: Option<&str>,
    vad_cfg: &VadConfig,
    cutoff_hz: f64,
) -> Result<Vec<PreparedSegment>, PipelineError> {
    let selected: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none() || e.split.as_deref() == split)
        .collect();
    let per_entry: Result<Vec<Vec<PreparedSegment>>, PipelineError> = selected
        .par_iter()
        .map(|entry| {
            let pair = crate::trace::load_recording(manifest, entry)?;
            preprocess_pair(&pair, vad_cfg, cutoff_hz)
        })
        .collect();
    Ok(per_entry?.into_iter().flatten().collect())
}

/// Scores prepared segments with the frozen extractor + classifier.
pub fn score_segments(
    model: &MagLiveModel,
    prepared: &[PreparedSegment],
) -> Result<Vec<ScoredSample>, PipelineError> {
    if prepared.is_empty() {
        return Ok(vec![]);
    }
    let tensors: Vec<&FeatureTensor> = prepared.iter().map(|p| &p.features).collect();
    let features = extract_features_batch(&model.extractor, &tensors)?;
    let probs = classify_batch(&features, &model.classifier)?;
    Ok(prepared
        .iter()
        .zip(probs)
        .map(|(p, score)| ScoredSample {
            score,
            label: p.segment.label,
            user_id: p.segment.user_id.clone(),
            device_id: p.segment.device_id.clone(),
            content_id: p.segment.content_id.clone(),
            command_id: p.segment.command_id.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Human,
    Spoof,
    RejectedOutOfRange,
    RejectedNoSpeech,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionResult {
    pub range: Option<RangeGateOutcome>,
    pub per_word_scores: Vec<f64>,
    pub verdict: Verdict,
    pub latency_ms: f64,
}

/// Full detection flow for one recording: ranging gate first (on the
/// highest-energy voiced interval), then per-word classification and the
/// all-words command rule. A failed gate rejects without running the model.
pub fn run_detect(
    pair: &RecordingPair,
    model: &MagLiveModel,
    vad_cfg: &VadConfig,
    ranging_cfg: &RangingConfig,
    cutoff_hz: f64,
) -> Result<DetectionResult, PipelineError> {
    let started = Instant::now();
    let voices = detect_voice_segments(&pair.audio, vad_cfg)?;
    if voices.is_empty() {
        return Ok(DetectionResult {
            range: None,
            per_word_scores: vec![],
            verdict: Verdict::RejectedNoSpeech,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let loudest = voices
        .iter()
        .max_by(|a, b| a.peak_energy.total_cmp(&b.peak_energy))
        .expect("nonempty");
    let range = if pair.audio.num_channels() == 2 {
        match range_gate(&pair.audio, loudest, ranging_cfg) {
            Ok(outcome) => Some(outcome),
            // A range that cannot be established is a failed gate, not a pass.
            Err(
                RangingError::Indeterminate(msg)
                | RangingError::Geometry(msg)
                | RangingError::NoSignal(msg),
            ) => {
                return Ok(DetectionResult {
                    range: Some(RangeGateOutcome::Unavailable { reason: msg }),
                    per_word_scores: vec![],
                    verdict: Verdict::RejectedOutOfRange,
                    latency_ms: started.elapsed().as_secs_f64() * 1e3,
                })
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        Some(RangeGateOutcome::Unavailable {
            reason: "ranging unavailable: mono recording".into(),
        })
    };
    if let Some(RangeGateOutcome::Measured(est)) = &range {
        if !est.passed {
            return Ok(DetectionResult {
                range,
                per_word_scores: vec![],
                verdict: Verdict::RejectedOutOfRange,
                latency_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }

    let net = dsp::preprocess_net(&pair.trace, cutoff_hz, dsp::MAG_RATE_HZ)?;
    let segments = align_segments(pair, &voices, &net)?;
    let prepared: Vec<PreparedSegment> = segments
        .into_iter()
        .map(|segment| {
            let features = dsp::features_for_window(&segment.mag_window)?;
            Ok::<_, PipelineError>(PreparedSegment { segment, features })
        })
        .collect::<Result<_, _>>()?;
    let tensors: Vec<&FeatureTensor> = prepared.iter().map(|p| &p.features).collect();
    let feats = extract_features_batch(&model.extractor, &tensors)?;
    let per_word_scores = classify_batch(&feats, &model.classifier)?;
    let accepted = crate::eval::command_verdict(&per_word_scores, DECISION_THRESHOLD)
        .expect("nonempty word scores");

    Ok(DetectionResult {
        range,
        per_word_scores,
        verdict: if accepted { Verdict::Human } else { Verdict::Spoof },
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Times preprocessing + inference of one 100-sample segment. The segment
/// outputs are byte-identical across trials; only the wall clock varies.
pub fn run_benchmark(model: &MagLiveModel, n_trials: usize) -> Result<LatencyStats, PipelineError> {
    let window: Vec<f64> = (0..dsp::SEGMENT_LEN)
        .map(|i| (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 1.7).cos())
        .collect();
    let mut samples_ms = Vec::with_capacity(n_trials);
    let mut reference: Option<Vec<f64>> = None;
    for _ in 0..n_trials {
        let t0 = Instant::now();
        let features = dsp::features_for_window(&window)?;
        let h = extract_features_batch(&model.extractor, &[&features])?;
        let probs = classify_batch(&h, &model.classifier)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        match &reference {
            None => reference = Some(probs),
            Some(r) => debug_assert_eq!(r, &probs),
        }
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ms = sorted[sorted.len() / 2];
    let p95_ms = sorted[((sorted.len() as f64 * 0.95).ceil() as usize - 1).min(sorted.len() - 1)];
    Ok(LatencyStats {
        trials: n_trials,
        mean_ms: samples_ms.iter().sum::<f64>() / n_trials as f64,
        median_ms,
        p95_ms,
        samples_ms,
    })
}
