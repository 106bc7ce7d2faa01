use std::path::Path;
use std::process::{Command, Output};

use farfield_core::gradcheck::ProbeConfig;
use farfield_core::matrix_io::TextMatrix;
use farfield_core::pipeline::PipelineConfig;
use farfield_core::simulation::{simulate_to_dir, NoiseConfig, SceneConfig};
use farfield_core::{istft, read_wav, stft, wpe_iterative, write_wav, AudioBuffer, StftConfig, WavFormat, WpeConfig};
use serde_json::Value;
use tempfile::TempDir;

fn farfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_farfield")).args(args).output().expect("spawn farfield")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene_cfg(seed: u64, channels: usize, duration: f64) -> SceneConfig {
    SceneConfig { seed, channels, duration, ..SceneConfig::default() }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn wpe_stage_matches_library() {
    let dir = TempDir::new().unwrap();
    simulate_to_dir(&scene_cfg(11, 2, 1.0), 1, dir.path()).unwrap();
    let wav = dir.path().join("scene_0000/observed.wav");
    let out = dir.path().join("out");
    ok(&farfield(&["enhance", p(&wav), "--out", p(&out), "--stages", "wpe", "--iterations", "2"]));

    let y = stft(&read_wav::<f64>(&wav).unwrap(), &StftConfig::default()).unwrap();
    let cfg = WpeConfig { iterations: 2, ..WpeConfig::default() };
    let expected = istft(&wpe_iterative(&y, &cfg).unwrap()).unwrap();
    let got = read_wav::<f64>(out.join("observed/dereverberated.wav")).unwrap();
    assert_eq!(got.num_channels(), 2);
    for m in 0..2 {
        for (a, b) in got.channel(m).iter().zip(expected.channel(m)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    let report = json(&out.join("report.json"));
    assert_eq!(report["utterances"][0]["wpe"]["iterations"], 2);
    assert!(!out.join("observed/features.txt").exists());
}

#[test]
fn fixed_reference_on_eight_channels() {
    let dir = TempDir::new().unwrap();
    simulate_to_dir(&scene_cfg(5, 8, 1.0), 1, dir.path()).unwrap();
    let wav = dir.path().join("scene_0000/observed.wav");
    let out = dir.path().join("out");
    ok(&farfield(&["enhance", p(&wav), "--out", p(&out), "--stages", "mvdr", "--reference", "2"]));
    let enhanced = read_wav::<f64>(out.join("observed/enhanced.wav")).unwrap();
    assert_eq!(enhanced.num_channels(), 1);
    let report = json(&out.join("report.json"));
    let u: Vec<f64> = serde_json::from_value(report["utterances"][0]["mvdr"]["reference_weights"].clone()).unwrap();
    let mut e2 = vec![0.0; 8];
    e2[2] = 1.0;
    assert_eq!(u, e2);
}

#[test]
fn reference_beyond_channel_count_fails() {
    let dir = TempDir::new().unwrap();
    simulate_to_dir(&scene_cfg(5, 2, 0.5), 1, dir.path()).unwrap();
    let wav = dir.path().join("scene_0000/observed.wav");
    let out = farfield(&["enhance", p(&wav), "--out", p(&dir.path().join("o")), "--reference", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_scene_metrics_improve() {
    let dir = TempDir::new().unwrap();
    simulate_to_dir(&scene_cfg(2, 4, 2.0), 1, dir.path()).unwrap();
    let cfg = dir.path().join("oracle.toml");
    std::fs::write(&cfg, "speech_mask = { provider = \"oracle_irm\" }\n").unwrap();
    let out = dir.path().join("out");
    ok(&farfield(&["enhance", p(&dir.path().join("scene_0000")), "--config", p(&cfg), "--out", p(&out), "--taps"]));
    let report = json(&out.join("report.json"));
    let metrics = &report["utterances"][0]["metrics"];
    let observed = metrics["stft_mse_observed"].as_f64().unwrap();
    let enhanced = metrics["stft_mse_enhanced"].as_f64().unwrap();
    assert!(enhanced < observed, "{enhanced} >= {observed}");
    assert!(report["tool_version"].is_string());
    assert_eq!(report["config"]["speech_mask"]["provider"], "oracle_irm");

    let scene = out.join("scene_0000");
    let features = TextMatrix::read(scene.join("features.txt")).unwrap();
    assert_eq!(features.cols, 80);
    let taps: Vec<TextMatrix> =
        ["tap_input.txt", "tap_wpe.txt", "tap_mvdr.txt"].iter().map(|f| TextMatrix::read(scene.join(f)).unwrap()).collect();
    for t in &taps {
        assert_eq!((t.rows, t.cols), (taps[0].rows, taps[0].cols));
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.wav");
    let b = dir.path().join("b.wav");
    write_wav(&a, &AudioBuffer::new(vec![vec![0.1f64; 4000]; 2], 16000).unwrap(), WavFormat::Float32).unwrap();
    write_wav(&b, &AudioBuffer::new(vec![vec![0.1f64; 4000]; 3], 16000).unwrap(), WavFormat::Float32).unwrap();
    let out = farfield(&["enhance", p(&a), p(&b), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let missing = farfield(&["enhance", p(&dir.path().join("nope.wav")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &AudioBuffer::new(vec![vec![0.0f64; 4000]; 2], 16000).unwrap(), WavFormat::Float32).unwrap();
    let o = dir.path().join("o");
    assert_eq!(farfield(&["enhance", p(&wav), "--out", p(&o), "--stages", "mvdr,wpe"]).status.code(), Some(2));
    assert_eq!(farfield(&["enhance", p(&wav), "--out", p(&o), "--stages", "asr"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "stages = [\"wpe\"]\nunknown = 1\n").unwrap();
    assert_eq!(farfield(&["enhance", p(&wav), "--out", p(&o), "--config", p(&bad)]).status.code(), Some(2));
    assert_eq!(farfield(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(farfield(&["simulate", "--out", p(&o), "--config", p(&bad)]).status.code(), Some(2));
}

#[test]
fn flags_override_file() {
    let dir = TempDir::new().unwrap();
    simulate_to_dir(&scene_cfg(4, 3, 0.5), 1, dir.path()).unwrap();
    let wav = dir.path().join("scene_0000/observed.wav");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "stages = [\"wpe\", \"mvdr\"]\n[wpe]\niterations = 1\n").unwrap();
    let out = dir.path().join("out");
    ok(&farfield(&["enhance", p(&wav), "--config", p(&cfg), "--iterations", "2", "--out", p(&out)]));
    let report = json(&out.join("report.json"));
    assert_eq!(report["config"]["wpe"]["iterations"], 2);
    assert_eq!(report["config"]["stages"], serde_json::json!(["wpe", "mvdr"]));
}

#[test]
fn enhance_accepts_two_to_eight_channels() {
    let dir = TempDir::new().unwrap();
    for m in 2..=8 {
        let scenes = dir.path().join(format!("m{m}"));
        simulate_to_dir(&scene_cfg(m as u64, m, 0.5), 1, &scenes).unwrap();
        let out = dir.path().join(format!("out{m}"));
        ok(&farfield(&["enhance", p(&scenes.join("scene_0000/observed.wav")), "--out", p(&out)]));
        assert_eq!(json(&out.join("report.json"))["utterances"][0]["channels"], m);
    }
}

#[test]
fn simulate_manifests() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&farfield(&["simulate", "--count", "1", "--seed", "9", "--out", p(&a)]));
    ok(&farfield(&["simulate", "--count", "1", "--seed", "9", "--out", p(&b)]));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("scene_0000/observed.wav")).unwrap(),
        std::fs::read(b.join("scene_0000/observed.wav")).unwrap()
    );

    let empty = dir.path().join("empty");
    ok(&farfield(&["simulate", "--count", "0", "--out", p(&empty)]));
    let m = json(&empty.join("manifest.json"));
    assert_eq!(m["count"], 0);
    assert_eq!(m["scenes"].as_array().unwrap().len(), 0);

    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "channels = 2\nduration = 0.5\n[noise]\nsnr_db = \"inf\"\n").unwrap();
    let five = dir.path().join("five");
    ok(&farfield(&["simulate", "--config", p(&cfg), "--count", "5", "--seed", "100", "--out", p(&five)]));
    let m = json(&five.join("manifest.json"));
    let seeds: Vec<u64> = m["scenes"].as_array().unwrap().iter().map(|s| s["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![100, 101, 102, 103, 104]);
    assert_eq!(m["scenes"][0]["config"]["channels"], 2);
}

#[test]
fn gradcheck_wpe_only_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("g.toml");
    std::fs::write(&cfg, "pipeline = \"wpe_only\"\n").unwrap();
    let report = dir.path().join("r.json");
    let out = farfield(&["gradcheck", "--config", p(&cfg), "--report", p(&report)]);
    ok(&out);
    let r = json(&report);
    assert_eq!(r["summary"]["probes"], 10);
    assert_eq!(r["summary"]["unexplained"], 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 10);
}

#[test]
fn gradcheck_clamp_boundary_is_flagged() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("g.toml");
    std::fs::write(&cfg, "pipeline = \"mvdr_only\"\nactivation = \"clipped_relu1\"\npin_logit = 1.0\nn_directions = 2\n")
        .unwrap();
    let out = farfield(&["gradcheck", "--config", p(&cfg)]);
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "{stderr}");
    for line in String::from_utf8_lossy(&out.stdout).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["flags"]["activation_clamp"], true);
    }
}

#[test]
fn gradcheck_malformed_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("g.toml");
    std::fs::write(&cfg, "pipeline = \"everything\"\n").unwrap();
    assert_eq!(farfield(&["gradcheck", "--config", p(&cfg)]).status.code(), Some(2));
    std::fs::write(&cfg, "step_sizes = [0.1, 0.2, 0.05]\n").unwrap();
    assert_eq!(farfield(&["gradcheck", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn spectrogram_zero_and_tone() {
    let dir = TempDir::new().unwrap();
    let zero = dir.path().join("zero.wav");
    write_wav(&zero, &AudioBuffer::mono(vec![0.0f64; 8000], 16000).unwrap(), WavFormat::Float32).unwrap();
    let out = dir.path().join("zero.txt");
    ok(&farfield(&["spectrogram", p(&zero), "--out", p(&out)]));
    let m = TextMatrix::read(&out).unwrap();
    assert_eq!(m.rows, 257);
    assert!(m.values.iter().all(|&v| v == 1e-10f64.ln()));

    // bin 32 of a 512-point frame at 16 kHz
    let tone: Vec<f64> = (0..16000).map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin()).collect();
    let wav = dir.path().join("tone.wav");
    write_wav(&wav, &AudioBuffer::mono(tone, 16000).unwrap(), WavFormat::Float32).unwrap();
    ok(&farfield(&["spectrogram", p(&wav), "--out", p(&out)]));
    let m = TextMatrix::read(&out).unwrap();
    for c in 2..m.cols - 2 {
        let best = (0..m.rows).max_by(|&a, &b| m.get(a, c).total_cmp(&m.get(b, c))).unwrap();
        assert_eq!(best, 32, "frame {c}");
    }

    let lib = stft(&read_wav::<f64>(&wav).unwrap(), &StftConfig::default()).unwrap();
    for (r, c) in [(0, 0), (32, 10), (200, 40)] {
        assert_eq!(m.get(r, c), (lib.get(c, r, 0).norm() + 1e-10).ln());
    }

    assert_eq!(farfield(&["spectrogram", p(&dir.path().join("none.wav")), "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(farfield(&["spectrogram", p(&wav), "--out", p(&out), "--channel", "1"]).status.code(), Some(2));
}

#[test]
fn configs_round_trip() {
    let text = "stages = [\"wpe\", \"features\"]\nskip_wpe_probability = 0.5\n[wpe_mask]\nprovider = \"energy_sad\"\nthreshold_db = -3.0\n";
    let cfg: PipelineConfig = toml::from_str(text).unwrap();
    let once = toml::to_string(&cfg).unwrap();
    let again: PipelineConfig = toml::from_str(&once).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(once, toml::to_string(&again).unwrap());

    let probe = ProbeConfig::default();
    let s = toml::to_string(&probe).unwrap();
    assert_eq!(s, toml::to_string(&toml::from_str::<ProbeConfig>(&s).unwrap()).unwrap());

    let scene = SceneConfig { noise: NoiseConfig { snr_db: f64::INFINITY, ..NoiseConfig::default() }, ..SceneConfig::default() };
    let s = toml::to_string(&scene).unwrap();
    let back: SceneConfig = toml::from_str(&s).unwrap();
    assert_eq!(back.noise.snr_db, f64::INFINITY);
    assert_eq!(s, toml::to_string(&back).unwrap());
}
