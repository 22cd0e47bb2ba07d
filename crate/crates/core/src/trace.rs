//! Sensor traces, audio clips, recording metadata, and dataset manifests.
//!
//! Formats: traces are CSV with header `t,mx,my,mz` (seconds / microtesla),
//! audio is 16-bit PCM WAV, manifests are JSON lines with one recording per
//! line. Loaders re-base timestamps to zero so downstream alignment works in
//! relative time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported audio format in {path}: {msg}")]
    AudioFormat { path: String, msg: String },
    #[error("manifest references missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
}

/// Timestamped 3-axis magnetometer samples, nominally 100 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTrace {
    /// Seconds, re-based so the first sample is t = 0. Strictly increasing.
    pub timestamps: Vec<f64>,
    /// Per-sample (mx, my, mz) in microtesla.
    pub samples: Vec<[f64; 3]>,
    /// Rounded whole-Hz rate inferred from the time span.
    pub nominal_rate: f64,
}

impl SensorTrace {
    pub fn new(timestamps: Vec<f64>, samples: Vec<[f64; 3]>) -> Result<Self, TraceError> {
        if timestamps.len() != samples.len() {
            return Err(TraceError::Validation(format!(
                "timestamps ({}) and samples ({}) differ in length",
                timestamps.len(),
                samples.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(TraceError::Validation(
                "trace must contain at least 2 samples".into(),
            ));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(TraceError::Validation(format!(
                    "timestamps not strictly increasing at t = {}",
                    w[1]
                )));
            }
        }
        let t0 = timestamps[0];
        let timestamps: Vec<f64> = timestamps.iter().map(|t| t - t0).collect();
        let span = *timestamps.last().unwrap();
        let nominal_rate = ((timestamps.len() - 1) as f64 / span).round();
        Ok(Self {
            timestamps,
            samples,
            nominal_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        *self.timestamps.last().unwrap()
    }
}

/// PCM audio, amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    /// One Vec per channel; all channels equal length.
    pub channels: Vec<Vec<f64>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self, TraceError> {
        if sample_rate == 0 {
            return Err(TraceError::Validation("sample rate must be positive".into()));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(TraceError::Validation(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(TraceError::Validation("channels differ in length".into()));
        }
        let channels = channels
            .into_iter()
            .map(|c| c.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
            .collect();
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    /// Channel average, used by VAD on stereo clips.
    pub fn downmix(&self) -> Vec<f64> {
        match self.channels.len() {
            1 => self.channels[0].clone(),
            _ => self.channels[0]
                .iter()
                .zip(&self.channels[1])
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Loudspeaker,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Human => write!(f, "human"),
            Label::Loudspeaker => write!(f, "loudspeaker"),
        }
    }
}

/// One synchronized magnetometer + audio recording with its metadata.
#[derive(Debug, Clone)]
pub struct RecordingPair {
    pub trace: SensorTrace,
    pub audio: AudioClip,
    pub label: Label,
    pub user_id: String,
    pub device_id: String,
    pub content_id: String,
    pub command_id: String,
}

impl RecordingPair {
    /// Trace and audio must cover overlapping time spans on the shared
    /// zero-based clock.
    pub fn validate(&self) -> Result<(), TraceError> {
        let overlap = self.trace.duration().min(self.audio.duration());
        if overlap <= 0.0 {
            return Err(TraceError::Validation(
                "trace and audio time spans do not overlap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub trace: String,
    pub audio: String,
    pub label: Label,
    pub user: String,
    pub device: String,
    pub content: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestSummary {
    pub per_label: BTreeMap<String, usize>,
    pub per_user: BTreeMap<String, usize>,
    pub per_device: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory paths in entries are resolved against.
    pub base_dir: PathBuf,
    pub summary: ManifestSummary,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Loads and validates a trace CSV (`t,mx,my,mz`). Timestamps are re-based so
/// the first sample is t = 0.
pub fn load_trace(path: &Path) -> Result<SensorTrace, TraceError> {
    let file = File::open(path).map_err(|e| TraceError::Io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut timestamps = Vec::new();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TraceError::Io(path.display().to_string(), e))?;
        let line_no = idx + 1;
        if idx == 0 {
            let header = line.trim();
            if header != "t,mx,my,mz" {
                return Err(TraceError::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    msg: format!("expected header 't,mx,my,mz', got '{header}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TraceError::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.trim().parse().map_err(|_| TraceError::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("invalid float '{}'", f.trim()),
            })?;
        }
        timestamps.push(vals[0]);
        samples.push([vals[1], vals[2], vals[3]]);
    }
    SensorTrace::new(timestamps, samples)
}

/// Writes a trace in the canonical CSV format with 6 decimal digits.
pub fn write_trace(path: &Path, trace: &SensorTrace) -> Result<(), TraceError> {
    let file = File::create(path).map_err(|e| TraceError::Io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| TraceError::Io(path.display().to_string(), e);
    writeln!(w, "t,mx,my,mz").map_err(io)?;
    for (t, s) in trace.timestamps.iter().zip(&trace.samples) {
        writeln!(w, "{:.6},{:.6},{:.6},{:.6}", t, s[0], s[1], s[2]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a 16-bit PCM WAV file; amplitudes are scaled by 1/32768.
pub fn load_audio(path: &Path) -> Result<AudioClip, TraceError> {
    let reader = hound::WavReader::open(path).map_err(|e| TraceError::AudioFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(TraceError::AudioFormat {
            path: path.display().to_string(),
            msg: format!(
                "expected 16-bit integer PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(TraceError::AudioFormat {
            path: path.display().to_string(),
            msg: format!("expected 1 or 2 channels, got {}", spec.channels),
        });
    }
    let n_ch = spec.channels as usize;
    let mut channels = vec![Vec::new(); n_ch];
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        let s = s.map_err(|e| TraceError::AudioFormat {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        channels[i % n_ch].push(s as f64 / 32768.0);
    }
    AudioClip::new(spec.sample_rate, channels)
}

/// Writes a clip as 16-bit PCM WAV (round-half-away-from-zero quantization).
pub fn write_audio(path: &Path, clip: &AudioClip) -> Result<(), TraceError> {
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| TraceError::AudioFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    for i in 0..clip.num_samples() {
        for ch in &clip.channels {
            let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| TraceError::AudioFormat {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        }
    }
    writer.finalize().map_err(|e| TraceError::AudioFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Loads a JSONL manifest and validates that every referenced file resolves.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, TraceError> {
    let file = File::open(path).map_err(|e| TraceError::Io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TraceError::Io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }

    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert((e.trace.clone(), e.audio.clone())) {
            return Err(TraceError::Validation(format!(
                "duplicate manifest entry for ({}, {})",
                e.trace, e.audio
            )));
        }
    }

    let mut manifest = DatasetManifest {
        entries,
        base_dir,
        summary: ManifestSummary::default(),
    };
    let mut missing = Vec::new();
    for e in &manifest.entries {
        for p in [&e.trace, &e.audio] {
            let resolved = manifest.resolve(p);
            if !resolved.exists() {
                missing.push(resolved.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(TraceError::MissingFiles(missing));
    }
    for e in &manifest.entries {
        *manifest
            .summary
            .per_label
            .entry(e.label.to_string())
            .or_default() += 1;
        *manifest.summary.per_user.entry(e.user.clone()).or_default() += 1;
        *manifest
            .summary
            .per_device
            .entry(e.device.clone())
            .or_default() += 1;
    }
    Ok(manifest)
}

/// Loads the recording a manifest entry points at and attaches its metadata.
pub fn load_recording(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
) -> Result<RecordingPair, TraceError> {
    let trace = load_trace(&manifest.resolve(&entry.trace))?;
    let audio = load_audio(&manifest.resolve(&entry.audio))?;
    let pair = RecordingPair {
        trace,
        audio,
        label: entry.label,
        user_id: entry.user.clone(),
        device_id: entry.device.clone(),
        content_id: entry.content.clone(),
        command_id: entry.command.clone(),
    };
    pair.validate()?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn minimal_trace_loads() {
        let dir = tmp();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "t,mx,my,mz\n0.00,1,2,3\n0.01,1,2,3\n0.02,1,2,3\n").unwrap();
        let trace = load_trace(&p).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.nominal_rate, 100.0);
        assert_eq!(trace.timestamps[0], 0.0);
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let dir = tmp();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "t,mx,my,mz\n0.00,1,2,3\n0.01,1,2,3\n0.01,1,2,3\n").unwrap();
        assert!(matches!(load_trace(&p), Err(TraceError::Validation(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tmp();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "t,mx,my,mz\n0.00,1,2,3\n0.01,oops,2,3\n").unwrap();
        match load_trace(&p) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn timestamps_rebased() {
        let dir = tmp();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "t,mx,my,mz\n5.0,1,2,3\n5.5,1,2,3\n6.0,1,2,3\n").unwrap();
        let trace = load_trace(&p).unwrap();
        assert_eq!(trace.timestamps, vec![0.0, 0.5, 1.0]);
        assert_eq!(trace.nominal_rate, 2.0);
    }

    #[test]
    fn silence_wav_roundtrip() {
        let dir = tmp();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(44100, vec![vec![0.0; 44100]]).unwrap();
        write_audio(&p, &clip).unwrap();
        let loaded = load_audio(&p).unwrap();
        assert_eq!(loaded.num_channels(), 1);
        assert_eq!(loaded.num_samples(), 44100);
        assert!(loaded.channels[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stereo_channels_equal_length() {
        let dir = tmp();
        let p = dir.path().join("s.wav");
        let clip = AudioClip::new(8000, vec![vec![0.25; 100], vec![-0.25; 100]]).unwrap();
        write_audio(&p, &clip).unwrap();
        let loaded = load_audio(&p).unwrap();
        assert_eq!(loaded.num_channels(), 2);
        assert_eq!(loaded.channels[0].len(), loaded.channels[1].len());
    }

    #[test]
    fn int16_min_maps_to_minus_one() {
        let dir = tmp();
        let p = dir.path().join("m.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(i16::MIN).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let clip = load_audio(&p).unwrap();
        assert_eq!(clip.channels[0][0], -1.0);
    }

    #[test]
    fn empty_manifest() {
        let dir = tmp();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.entries.is_empty());
        assert!(m.summary.per_label.is_empty());
    }

    #[test]
    fn manifest_counts_duplicates_and_missing_files() {
        let dir = tmp();
        let trace_p = dir.path().join("x.csv");
        let trace_q = dir.path().join("y.csv");
        let audio_p = dir.path().join("x.wav");
        std::fs::write(&trace_p, "t,mx,my,mz\n0,0,0,0\n0.01,0,0,0\n").unwrap();
        std::fs::write(&trace_q, "t,mx,my,mz\n0,0,0,0\n0.01,0,0,0\n").unwrap();
        write_audio(&audio_p, &AudioClip::new(8000, vec![vec![0.0; 10]]).unwrap()).unwrap();

        let entry = |label: &str, user: &str, tr: &str| {
            format!(
                r#"{{"trace":"{tr}","audio":"x.wav","label":"{label}","user":"{user}","device":"d0","content":"c0","command":"k0"}}"#
            )
        };
        let p = dir.path().join("m.jsonl");

        std::fs::write(
            &p,
            format!(
                "{}\n{}\n",
                entry("human", "u0", "x.csv"),
                entry("loudspeaker", "u1", "y.csv")
            ),
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.summary.per_label["human"], 1);
        assert_eq!(m.summary.per_label["loudspeaker"], 1);
        assert_eq!(m.summary.per_user["u0"], 1);

        std::fs::write(
            &p,
            format!(
                "{}\n{}\n",
                entry("human", "u0", "x.csv"),
                entry("loudspeaker", "u1", "x.csv")
            ),
        )
        .unwrap();
        assert!(
            matches!(load_manifest(&p), Err(TraceError::Validation(_))),
            "duplicate (trace, audio) pair should be rejected"
        );

        std::fs::write(&p, format!("{}\n", entry("human", "u0", "absent.csv"))).unwrap();
        match load_manifest(&p) {
            Err(TraceError::MissingFiles(files)) => assert!(files[0].contains("absent.csv")),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn trace_roundtrip_within_format_precision(
            vals in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 2..40)
        ) {
            let timestamps: Vec<f64> = (0..vals.len()).map(|i| i as f64 * 0.01).collect();
            let samples: Vec<[f64;3]> = vals.iter().map(|&(a,b,c)| [a,b,c]).collect();
            let trace = SensorTrace::new(timestamps, samples).unwrap();
            let dir = tmp();
            let p = dir.path().join("rt.csv");
            write_trace(&p, &trace).unwrap();
            let loaded = load_trace(&p).unwrap();
            prop_assert_eq!(loaded.len(), trace.len());
            for (a, b) in loaded.timestamps.iter().zip(&trace.timestamps) {
                prop_assert!((a - b).abs() <= 5e-7);
            }
            for (a, b) in loaded.samples.iter().zip(&trace.samples) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 5e-7);
                }
            }
        }

        #[test]
        fn audio_roundtrip_within_quantization(
            vals in proptest::collection::vec(-1.0f64..1.0, 8..200)
        ) {
            let clip = AudioClip::new(16000, vec![vals]).unwrap();
            let dir = tmp();
            let p = dir.path().join("rt.wav");
            write_audio(&p, &clip).unwrap();
            let loaded = load_audio(&p).unwrap();
            for (a, b) in loaded.channels[0].iter().zip(&clip.channels[0]) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-12);
            }
        }
    }
}
