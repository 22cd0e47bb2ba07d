//! Cross-module checks: the generator's ground truth serves as the oracle for
//! resampling, ranging, and the physics contract.

use maglive_core::dsp;
use maglive_core::pipeline::{preprocess_pair, run_detect, Verdict};
use maglive_core::ranging::{range_gate, RangeGateOutcome, RangingConfig};
use maglive_core::synth::{gen_pair, gen_stereo_audio, DeviceProfile, SceneConfig, SourceKind};
use maglive_core::trace::SensorTrace;
use maglive_core::train::{train_pipeline, TrainConfig, TrainSample};
use maglive_core::vad::VadConfig;
use maglive_core::MagLiveModel;

#[test]
fn resample_recovers_analytic_signal_from_jittered_timestamps() {
    // Take jittered timestamps from a generated trace, overwrite the values
    // with a known smooth signal, and compare the resampled series against
    // the analytic ground truth. Linear interpolation error is bounded by
    // h^2 max|f''| / 8 plus the jitter-induced shift.
    let cfg = SceneConfig::new(SourceKind::Human, 77);
    let (pair, _) = gen_pair(&cfg).unwrap();
    let f = 3.0; // Hz, well below Nyquist at 100 Hz
    let signal = |t: f64| (std::f64::consts::TAU * f * t).sin();
    let samples: Vec<[f64; 3]> = pair
        .trace
        .timestamps
        .iter()
        .map(|&t| [signal(t), 0.0, 0.0])
        .collect();
    let trace = SensorTrace::new(pair.trace.timestamps.clone(), samples).unwrap();

    let max_spacing = trace
        .timestamps
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0f64, f64::max);
    let max_second_derivative = (std::f64::consts::TAU * f).powi(2);
    let bound = max_spacing * max_spacing * max_second_derivative / 8.0 + 1e-9;

    let [x, _, _] = dsp::resample_uniform(&trace, 100.0).unwrap();
    let mut worst = 0.0f64;
    for (k, &v) in x.values.iter().enumerate() {
        let t = (k as f64 / 100.0).min(trace.duration());
        worst = worst.max((v - signal(t)).abs());
    }
    assert!(worst <= bound, "max deviation {worst} exceeds bound {bound}");
}

#[test]
fn ranging_recovers_generator_geometry_near() {
    let mut cfg = SceneConfig::new(SourceKind::Human, 11);
    cfg.distance_m = 0.04;
    cfg.mic_spacing_m = 0.15;
    let (audio, truth) = gen_stereo_audio(&cfg).unwrap();
    let voices = maglive_core::vad::detect_voice_segments(&audio, &VadConfig::default()).unwrap();
    assert!(!voices.is_empty());
    let loudest = voices
        .iter()
        .max_by(|a, b| a.peak_energy.total_cmp(&b.peak_energy))
        .unwrap();
    match range_gate(&audio, loudest, &RangingConfig::default()).unwrap() {
        RangeGateOutcome::Measured(est) => {
            let geo = truth.geometry.unwrap();
            assert!(est.passed, "estimate {est:?}");
            let d_near = est.d1.min(est.d2);
            assert!(
                (d_near - geo.d_near).abs() <= 0.015,
                "d_near {d_near} vs true {}",
                geo.d_near
            );
        }
        other => panic!("expected measurement, got {other:?}"),
    }
}

#[test]
fn ranging_rejects_distant_source() {
    let mut cfg = SceneConfig::new(SourceKind::Human, 13);
    cfg.distance_m = 0.30;
    let (audio, _) = gen_stereo_audio(&cfg).unwrap();
    let voices = maglive_core::vad::detect_voice_segments(&audio, &VadConfig::default()).unwrap();
    let loudest = voices
        .iter()
        .max_by(|a, b| a.peak_energy.total_cmp(&b.peak_energy))
        .unwrap();
    match range_gate(&audio, loudest, &RangingConfig::default()).unwrap() {
        RangeGateOutcome::Measured(est) => {
            assert!(!est.passed, "0.30 m source must fail the 6 cm gate: {est:?}");
        }
        other => panic!("expected measurement, got {other:?}"),
    }
}

/// Two-sample energy statistic (Szekely) on scalar samples.
fn energy_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    let mean_abs = |a: &[f64], b: &[f64]| {
        let mut acc = 0.0;
        for &x in a {
            for &y in b {
                acc += (x - y).abs();
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    2.0 * mean_abs(xs, ys) - mean_abs(xs, xs) - mean_abs(ys, ys)
}

#[test]
fn zero_gain_loudspeaker_indistinguishable_from_human() {
    // With coil_gain = 0 the loudspeaker scene shares the human generative
    // process; a permutation test on per-window energies of the net
    // high-passed signal must not reject the null at 0.01.
    let mut silent = DeviceProfile::catalog(1)[0].clone();
    silent.coil_gain = 0.0;

    let windows = |kind: SourceKind, seed: u64| -> Vec<f64> {
        let mut cfg = SceneConfig::new(kind, seed);
        cfg.utterance = maglive_core::synth::UtterancePlan::uniform(6, 0.4, 0.3);
        let (pair, _) = gen_pair(&cfg).unwrap();
        let net = dsp::preprocess_net(&pair.trace, 5.0, 100.0).unwrap();
        net.values
            .chunks(25)
            .filter(|c| c.len() == 25)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .collect()
    };
    let mut humans = Vec::new();
    let mut speakers = Vec::new();
    for seed in 0..4 {
        humans.extend(windows(SourceKind::Human, 500 + seed));
        speakers.extend(windows(SourceKind::Loudspeaker(silent.clone()), 600 + seed));
    }

    let observed = energy_statistic(&humans, &speakers);
    let mut pooled: Vec<f64> = humans.iter().chain(speakers.iter()).copied().collect();
    let n_h = humans.len();
    let mut exceed = 0usize;
    let n_perm = 200;
    let mut state = 0x1234_5678_9abc_def0u64;
    for _ in 0..n_perm {
        // Fisher-Yates with an xorshift stream.
        for i in (1..pooled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let j = (state % (i as u64 + 1)) as usize;
            pooled.swap(i, j);
        }
        let stat = energy_statistic(&pooled[..n_h], &pooled[n_h..]);
        if stat >= observed {
            exceed += 1;
        }
    }
    let p = (exceed + 1) as f64 / (n_perm + 1) as f64;
    assert!(p > 0.01, "permutation test rejected the null: p = {p}");
}

#[test]
fn active_loudspeaker_is_distinguishable() {
    // Sanity inverse of the test above: with the default gain the same
    // statistic must reject decisively.
    let profile = DeviceProfile::catalog(1)[0].clone();
    let windows = |kind: SourceKind, seed: u64| -> Vec<f64> {
        let mut cfg = SceneConfig::new(kind, seed);
        cfg.distance_m = 0.05;
        let (pair, _) = gen_pair(&cfg).unwrap();
        let net = dsp::preprocess_net(&pair.trace, 5.0, 100.0).unwrap();
        net.values
            .chunks(25)
            .filter(|c| c.len() == 25)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .collect()
    };
    let humans: Vec<f64> = (0..4).flat_map(|s| windows(SourceKind::Human, 700 + s)).collect();
    let speakers: Vec<f64> = (0..4)
        .flat_map(|s| windows(SourceKind::Loudspeaker(profile.clone()), 800 + s))
        .collect();
    let observed = energy_statistic(&humans, &speakers);
    assert!(observed > 0.1, "energy statistic unexpectedly small: {observed}");
}

#[test]
fn detect_end_to_end_on_trained_model() {
    // Train a small model on a handful of scenes, then check both verdicts
    // and the out-of-range rejection on fresh recordings.
    let profiles = DeviceProfile::catalog(2);
    let mut samples = Vec::new();
    for seed in 0..6u64 {
        for (kind, _label) in [
            (SourceKind::Human, ()),
            (SourceKind::Loudspeaker(profiles[(seed % 2) as usize].clone()), ()),
        ] {
            let mut cfg = SceneConfig::new(kind, 9000 + seed);
            cfg.user_id = format!("u{}", seed % 3);
            let (pair, _) = gen_pair(&cfg).unwrap();
            for prepared in preprocess_pair(&pair, &VadConfig::default(), 5.0).unwrap() {
                samples.push(TrainSample {
                    features: prepared.features,
                    label: prepared.segment.label,
                });
            }
        }
    }
    let cfg = TrainConfig {
        batch_size: 16,
        epochs_stage1: 20,
        epochs_stage2: 30,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut model = MagLiveModel::init(cfg.seed);
    train_pipeline(&mut model, &samples, &cfg, |_, _| {}).unwrap();

    // Fresh human recording within range (stereo, 4 cm).
    let mut human_cfg = SceneConfig::new(SourceKind::Human, 777);
    human_cfg.stereo = true;
    human_cfg.distance_m = 0.04;
    let (human_pair, _) = gen_pair(&human_cfg).unwrap();
    let out = run_detect(
        &human_pair,
        &model,
        &VadConfig::default(),
        &RangingConfig::default(),
        5.0,
    )
    .unwrap();
    assert!(matches!(out.verdict, Verdict::Human), "human verdict: {out:?}");

    // Fresh loudspeaker recording within range.
    let mut spoof_cfg = SceneConfig::new(SourceKind::Loudspeaker(profiles[0].clone()), 778);
    spoof_cfg.stereo = true;
    spoof_cfg.distance_m = 0.04;
    let (spoof_pair, _) = gen_pair(&spoof_cfg).unwrap();
    let out = run_detect(
        &spoof_pair,
        &model,
        &VadConfig::default(),
        &RangingConfig::default(),
        5.0,
    )
    .unwrap();
    assert!(matches!(out.verdict, Verdict::Spoof), "spoof verdict: {out:?}");

    // Out-of-range recording: rejected without scoring.
    let mut far_cfg = SceneConfig::new(SourceKind::Human, 779);
    far_cfg.stereo = true;
    far_cfg.distance_m = 0.30;
    let (far_pair, _) = gen_pair(&far_cfg).unwrap();
    let out = run_detect(
        &far_pair,
        &model,
        &VadConfig::default(),
        &RangingConfig::default(),
        5.0,
    )
    .unwrap();
    assert!(matches!(out.verdict, Verdict::RejectedOutOfRange), "{out:?}");
    assert!(out.per_word_scores.is_empty());
}
