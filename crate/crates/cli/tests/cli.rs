//! End-to-end drive of the `maglive` binary: synth -> preprocess -> train ->
//! eval -> detect/range/bench, including exit-code contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn maglive() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maglive"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// Small corpus spec shared by the pipeline tests.
fn write_spec(dir: &Path) -> PathBuf {
    let spec = serde_json::json!({
        "users": 3,
        "devices": 2,
        "commands_per_label": 4,
        "words_per_command": 3,
        "word_duration": 0.45,
        "word_gap": 0.35,
        "train_users": [0],
        "holdout_device": 1,
        "distance_m": 0.05,
        "mag_noise_sigma_ut": 0.05,
        "audio_snr_db": 30.0,
        "stereo": false,
        "master_seed": 11
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path());
    let corpus = tmp.path().join("corpus");
    let out = run(maglive()
        .args(["synth", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&corpus));
    assert_code(&out, 0);
    let summary = stdout_json(&out);
    assert_eq!(summary["entries"], 24); // 3 users x 2 labels x 4 commands
    assert!(corpus.join("manifest.jsonl").exists());
    assert!(corpus.join("run_manifest.json").exists());

    // Preprocess the train and test splits.
    let train_dir = tmp.path().join("train");
    let out = run(maglive()
        .args(["preprocess", "--manifest"])
        .arg(corpus.join("manifest.jsonl"))
        .arg("--out")
        .arg(&train_dir)
        .args(["--split", "train"]));
    assert_code(&out, 0);
    assert!(train_dir.join("segments.jsonl").exists());

    let test_dir = tmp.path().join("test");
    let out = run(maglive()
        .args(["preprocess", "--manifest"])
        .arg(corpus.join("manifest.jsonl"))
        .arg("--out")
        .arg(&test_dir)
        .args(["--split", "test"]));
    assert_code(&out, 0);

    // Short training run.
    let model_dir = tmp.path().join("model");
    let out = run(maglive()
        .args(["train", "--segments"])
        .arg(train_dir.join("segments.jsonl"))
        .arg("--out")
        .arg(&model_dir)
        .args(["--epochs-stage1", "8", "--epochs-stage2", "20", "--seed", "3"]));
    assert_code(&out, 0);
    let ckpt = model_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(model_dir.join("train_log.jsonl").exists());

    // Evaluation with PCA export.
    let eval_dir = tmp.path().join("eval");
    let out = run(maglive()
        .args(["eval", "--segments"])
        .arg(test_dir.join("segments.jsonl"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&eval_dir)
        .arg("--pca"));
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert!(report["at_threshold"]["bac"].as_f64().unwrap() >= 0.0);
    let roc = std::fs::read_to_string(eval_dir.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,tar,far\n"));
    let pca = std::fs::read_to_string(eval_dir.join("pca.csv")).unwrap();
    assert!(pca.starts_with("x,y,label\n"));

    // Detect on a corpus recording (mono: ranging unavailable, still scored).
    let out = run(maglive()
        .args(["detect", "--trace"])
        .arg(corpus.join("traces/u1_human_human_c0.csv"))
        .arg("--audio")
        .arg(corpus.join("audio/u1_human_human_c0.wav"))
        .arg("--checkpoint")
        .arg(&ckpt));
    let verdict = stdout_json(&out);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 1, "detect exit code {code}");
    assert!(verdict["result"]["per_word_scores"].as_array().is_some());

    // Bench.
    let out = run(maglive()
        .args(["bench", "--checkpoint"])
        .arg(&ckpt)
        .args(["--trials", "5"]));
    assert_code(&out, 0);
    let stats = stdout_json(&out);
    assert_eq!(stats["trials"], 5);
    assert_eq!(stats["samples_ms"].as_array().unwrap().len(), 5);
}

#[test]
fn range_exit_codes_follow_the_gate() {
    use maglive_core::synth::{gen_stereo_audio, SceneConfig, SourceKind};
    use maglive_core::trace::write_audio;

    let tmp = tempfile::tempdir().unwrap();

    // Near source: gate passes, exit 0.
    let mut cfg = SceneConfig::new(SourceKind::Human, 51);
    cfg.distance_m = 0.04;
    let (audio, _) = gen_stereo_audio(&cfg).unwrap();
    let near = tmp.path().join("near.wav");
    write_audio(&near, &audio).unwrap();
    let out = run(maglive().args(["range", "--audio"]).arg(&near));
    assert_code(&out, 0);
    let parsed = stdout_json(&out);
    assert_eq!(parsed["estimate"]["status"], "measured");

    // Distant source: gate fails, exit 1.
    let mut cfg = SceneConfig::new(SourceKind::Human, 52);
    cfg.distance_m = 0.30;
    let (audio, _) = gen_stereo_audio(&cfg).unwrap();
    let far = tmp.path().join("far.wav");
    write_audio(&far, &audio).unwrap();
    let out = run(maglive().args(["range", "--audio"]).arg(&far));
    assert_code(&out, 1);

    // Mono input: ranging unavailable, not a pass.
    let mut cfg = SceneConfig::new(SourceKind::Human, 53);
    cfg.stereo = false;
    let (pair, _) = maglive_core::synth::gen_pair(&cfg).unwrap();
    let mono = tmp.path().join("mono.wav");
    write_audio(&mono, &pair.audio).unwrap();
    let out = run(maglive().args(["range", "--audio"]).arg(&mono));
    assert_code(&out, 1);
    let parsed = stdout_json(&out);
    assert_eq!(parsed["estimate"]["status"], "unavailable");
}

#[test]
fn usage_and_data_error_exit_codes() {
    // Unknown flag: usage error, exit 2 (clap's convention).
    let out = run(maglive().args(["synth", "--nonsense"]));
    assert_code(&out, 2);

    // Missing file: data error, exit 3.
    let out = run(maglive()
        .args(["preprocess", "--manifest", "/nonexistent/manifest.jsonl", "--out", "/tmp/x"]));
    assert_code(&out, 3);

    let out = run(maglive()
        .args(["bench", "--checkpoint", "/nonexistent/model.ckpt"]));
    assert_code(&out, 3);
}

#[test]
fn identical_seeds_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path());
    let mut checkpoints = Vec::new();
    for name in ["a", "b"] {
        let corpus = tmp.path().join(format!("corpus_{name}"));
        assert_code(
            &run(maglive()
                .args(["synth", "--spec"])
                .arg(&spec)
                .arg("--out")
                .arg(&corpus)),
            0,
        );
        let prep = tmp.path().join(format!("prep_{name}"));
        assert_code(
            &run(maglive()
                .args(["preprocess", "--manifest"])
                .arg(corpus.join("manifest.jsonl"))
                .arg("--out")
                .arg(&prep)
                .args(["--split", "train"])),
            0,
        );
        let model = tmp.path().join(format!("model_{name}"));
        assert_code(
            &run(maglive()
                .args(["train", "--segments"])
                .arg(prep.join("segments.jsonl"))
                .arg("--out")
                .arg(&model)
                .args(["--epochs-stage1", "4", "--epochs-stage2", "4", "--seed", "9"])),
            0,
        );
        checkpoints.push(std::fs::read(model.join("model.ckpt")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1], "checkpoints differ across identical runs");
}
