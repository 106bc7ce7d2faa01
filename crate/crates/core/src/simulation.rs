//! Reproducible synthetic reverberant, noisy multichannel scenes.
//!
//! Room responses are a unit direct path followed by an exponentially
//! decaying Gaussian tail; the source is amplitude-modulated,
//! formant-filtered noise bursts separated by silent pauses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioBuffer, WavFormat};
use crate::error::{Error, Result};
use crate::mask::OracleSources;
use crate::scalar::Real;
use crate::stft::{stft, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RirConfig {
    /// Time for the tail amplitude to fall by 60 dB, in seconds. Zero
    /// gives an anechoic (direct path only) response.
    pub t60_like_decay: f64,
    /// Direct-path delays are drawn from `0..=direct_delay_spread` samples.
    pub direct_delay_spread: usize,
    /// Probability that a tail sample carries a reflection.
    pub tail_density: f64,
    /// Direct-to-reverberant energy ratio of every response, in dB.
    pub drr_db: f64,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self { t60_like_decay: 0.5, direct_delay_spread: 8, tail_density: 1.0, drr_db: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Independent white Gaussian noise per channel.
    White,
    /// Independent per-channel noise through a one-pole low-pass.
    DiffuseLowpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Speech-to-noise ratio over active frames. `inf` disables noise.
    #[serde(with = "finite_or_inf")]
    pub snr_db: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { kind: NoiseKind::DiffuseLowpass, snr_db: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    SyntheticSpeechlike,
    /// First channel of a WAV file; its sample rate must match.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub channels: usize,
    pub sample_rate: u32,
    /// Seconds; ignored for file sources.
    pub duration: f64,
    pub rir: RirConfig,
    pub noise: NoiseConfig,
    pub source: SourceConfig,
    /// Frame grid for the activity labels.
    pub stft: StftConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 4,
            sample_rate: 16000,
            duration: 4.0,
            rir: RirConfig::default(),
            noise: NoiseConfig::default(),
            source: SourceConfig::SyntheticSpeechlike,
            stft: StftConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("scene: {m}")));
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be > 0".into());
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if !(self.rir.t60_like_decay >= 0.0) || !self.rir.t60_like_decay.is_finite() {
            return bad(format!("t60_like_decay {} must be >= 0", self.rir.t60_like_decay));
        }
        if !(self.rir.tail_density > 0.0 && self.rir.tail_density <= 1.0) {
            return bad(format!("tail_density {} not in (0, 1]", self.rir.tail_density));
        }
        if !self.rir.drr_db.is_finite() {
            return bad("drr_db must be finite".into());
        }
        if self.noise.snr_db.is_nan() || self.noise.snr_db == f64::NEG_INFINITY {
            return bad("snr_db must be finite or +inf".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const STREAM_SOURCE: u64 = 1;
const STREAM_RIR: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// A rendered scene. `observed = reverberant + noise` sample for sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle<T> {
    pub config: SceneConfig,
    pub dry: AudioBuffer<T>,
    pub rirs: Vec<Vec<T>>,
    /// Direct-path delay of each channel's response, in samples.
    pub direct_delays: Vec<usize>,
    pub reverberant: AudioBuffer<T>,
    /// Noise after SNR scaling.
    pub noise: AudioBuffer<T>,
    pub observed: AudioBuffer<T>,
    /// Speech activity per frame of `config.stft`.
    pub activity_labels: Vec<bool>,
}

impl<T: Real> SceneBundle<T> {
    /// Dry source delayed by each channel's direct-path delay.
    pub fn direct_image(&self) -> AudioBuffer<T> {
        let dry = self.dry.channel(0);
        let channels = self
            .direct_delays
            .iter()
            .map(|&d| (0..dry.len()).map(|n| if n >= d { dry[n - d] } else { T::zero() }).collect())
            .collect();
        AudioBuffer::new(channels, self.dry.sample_rate()).expect("same length as dry")
    }

    pub fn oracle_sources(&self, cfg: &StftConfig) -> Result<OracleSources<T>> {
        Ok(OracleSources {
            direct: stft(&self.direct_image(), cfg)?,
            reverberant: stft(&self.reverberant, cfg)?,
            noise: stft(&self.noise, cfg)?,
        })
    }

    /// Activity mask expanded to samples (nearest frame centre).
    pub fn active_samples(&self) -> Vec<bool> {
        active_samples(&self.activity_labels, self.config.stft.hop(), self.dry.len())
    }
}

fn active_samples(labels: &[bool], hop: usize, len: usize) -> Vec<bool> {
    (0..len)
        .map(|n| {
            let t = ((n + hop / 2) / hop).min(labels.len().saturating_sub(1));
            labels.get(t).copied().unwrap_or(false)
        })
        .collect()
}

/// Per-channel responses: unit impulse at the direct delay plus a tail
/// with amplitude envelope `exp(-6.9 t / t60)`, scaled to the configured
/// direct-to-reverberant ratio. Returns the responses and their delays.
pub fn synth_rir(cfg: &SceneConfig) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = cfg.rng(STREAM_RIR);
    let fs = cfg.sample_rate as f64;
    let t60 = cfg.rir.t60_like_decay;
    let spread = cfg.rir.direct_delay_spread;
    let tail_len = if t60 > 0.0 { (t60 * fs).ceil() as usize } else { 0 };
    let len = spread + tail_len + 1;
    let target_tail = 10f64.powf(-cfg.rir.drr_db / 10.0);
    let mut rirs = Vec::with_capacity(cfg.channels);
    let mut delays = Vec::with_capacity(cfg.channels);
    for _ in 0..cfg.channels {
        let d = rng.gen_range(0..=spread);
        let mut h = vec![0.0; len];
        h[d] = 1.0;
        if tail_len > 0 {
            for (k, v) in h[d + 1..].iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                let keep = rng.gen::<f64>() < cfg.rir.tail_density;
                if keep {
                    let t = (k + 1) as f64 / fs;
                    *v = g * (-6.9 * t / t60).exp();
                }
            }
            let e: f64 = h[d + 1..].iter().map(|v| v * v).sum();
            if e > 0.0 {
                let s = (target_tail / e).sqrt();
                h[d + 1..].iter_mut().for_each(|v| *v *= s);
            }
        }
        rirs.push(h);
        delays.push(d);
    }
    (rirs, delays)
}

/// Linear convolution truncated to `x.len()` samples.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a.iter().take(x.len()).map(|v| v.re / n as f64).collect()
}

fn synth_source(cfg: &SceneConfig) -> Vec<f64> {
    let mut rng = cfg.rng(STREAM_SOURCE);
    let fs = cfg.sample_rate as f64;
    let len = (cfg.duration * fs).round() as usize;
    let mut out = vec![0.0; len];
    let mut pos = (rng.gen_range(0.1..0.25) * fs) as usize;
    let tail_pause = (0.15 * fs) as usize;
    while pos + tail_pause < len {
        let burst = ((rng.gen_range(0.25..0.7) * fs) as usize).min(len - tail_pause - pos);
        if burst < (0.05 * fs) as usize {
            break;
        }
        render_burst(&mut rng, &mut out[pos..pos + burst], fs);
        pos += burst + (rng.gen_range(0.1..0.4) * fs) as usize;
    }
    let (e, n) = out.iter().filter(|v| **v != 0.0).fold((0.0, 0usize), |(e, n), v| (e + v * v, n + 1));
    if n > 0 {
        let g = 0.05 / (e / n as f64).sqrt();
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// Formant-filtered noise with a syllabic envelope, written into `buf`.
fn render_burst(rng: &mut ChaCha8Rng, buf: &mut [f64], fs: f64) {
    let n = buf.len();
    let ranges = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3800.0)];
    let gains = [1.0, 0.5, 0.25];
    let formants: Vec<(f64, f64, f64)> = ranges
        .iter()
        .map(|&(lo, hi)| (rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(80.0..250.0)))
        .collect();
    let syllable_rate = rng.gen_range(3.0..6.0);
    let phase = rng.gen_range(0.0..PI);
    let level = 10f64.powf(rng.gen_range(-6.0..6.0) / 20.0);
    let ramp = (0.02 * fs) as usize;
    let mut state = [[0.0f64; 2]; 3];
    for (i, out) in buf.iter_mut().enumerate() {
        let x: f64 = rng.sample(StandardNormal);
        let frac = i as f64 / n as f64;
        let mut y = 0.0;
        for (k, &(f0, f1, bw)) in formants.iter().enumerate() {
            let f = f0 + (f1 - f0) * frac;
            let r = (-PI * bw / fs).exp();
            let c = 2.0 * r * (2.0 * PI * f / fs).cos();
            let v = (1.0 - r) * x + c * state[k][0] - r * r * state[k][1];
            state[k][1] = state[k][0];
            state[k][0] = v;
            y += gains[k] * v;
        }
        let t = i as f64 / fs;
        let syl = 0.25 + 0.75 * (PI * syllable_rate * t + phase).sin().powi(2);
        let edge = if i < ramp {
            0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
        } else if n - i <= ramp {
            0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        *out = y * syl * edge * level;
    }
}

fn synth_noise(cfg: &SceneConfig, len: usize) -> Vec<Vec<f64>> {
    let mut rng = cfg.rng(STREAM_NOISE);
    (0..cfg.channels)
        .map(|_| {
            let mut prev = 0.0;
            (0..len)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    match cfg.noise.kind {
                        NoiseKind::White => g,
                        NoiseKind::DiffuseLowpass => {
                            prev = 0.8 * prev + g;
                            prev
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Frame activity of `dry` on the `cfg` grid: frame energy (rectangular
/// window of `fft_size` samples centred on the frame) within 40 dB of the
/// loudest frame.
pub fn activity_labels(dry: &[f64], cfg: &StftConfig) -> Vec<bool> {
    let frames = cfg.num_frames(dry.len());
    let half = cfg.fft_size() as isize / 2;
    let energies: Vec<f64> = (0..frames)
        .map(|t| {
            let c = (t * cfg.hop()) as isize;
            let lo = (c - half).max(0) as usize;
            let hi = ((c + half) as usize).min(dry.len());
            dry[lo.min(hi)..hi].iter().map(|v| v * v).sum()
        })
        .collect();
    let max = energies.iter().cloned().fold(0.0, f64::max);
    energies.iter().map(|&e| max > 0.0 && e > max * 1e-4).collect()
}

pub fn render_scene<T: Real>(cfg: &SceneConfig) -> Result<SceneBundle<T>> {
    cfg.validate()?;
    let dry: Vec<f64> = match &cfg.source {
        SourceConfig::SyntheticSpeechlike => synth_source(cfg),
        SourceConfig::File { path } => {
            let a: AudioBuffer<f64> = read_wav(path)?;
            if a.sample_rate() != cfg.sample_rate {
                return Err(Error::InvalidConfig(format!(
                    "source {} has sample rate {}, scene expects {}",
                    path.display(),
                    a.sample_rate(),
                    cfg.sample_rate
                )));
            }
            a.channel(0).to_vec()
        }
    };
    if dry.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let len = dry.len();
    let (rirs, delays) = synth_rir(cfg);
    let reverberant: Vec<Vec<f64>> = rirs.iter().map(|h| fft_convolve(&dry, h)).collect();
    let labels = activity_labels(&dry, &cfg.stft);
    let active = active_samples(&labels, cfg.stft.hop(), len);
    let any_active = active.iter().any(|&a| a);
    let in_region = |n: usize| !any_active || active[n];

    let mut noise = synth_noise(cfg, len);
    for (rev, nz) in reverberant.iter().zip(noise.iter_mut()) {
        if cfg.noise.snr_db == f64::INFINITY {
            nz.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let es: f64 = (0..len).filter(|&n| in_region(n)).map(|n| rev[n] * rev[n]).sum();
        let en: f64 = (0..len).filter(|&n| in_region(n)).map(|n| nz[n] * nz[n]).sum();
        let g = if en > 0.0 { (es / (en * 10f64.powf(cfg.noise.snr_db / 10.0))).sqrt() } else { 0.0 };
        nz.iter_mut().for_each(|v| *v *= g);
    }
    let observed: Vec<Vec<f64>> = reverberant
        .iter()
        .zip(&noise)
        .map(|(r, n)| r.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();

    let sr = cfg.sample_rate;
    let cast = |chs: Vec<Vec<f64>>| -> Result<AudioBuffer<T>> {
        AudioBuffer::new(chs.into_iter().map(|c| c.into_iter().map(T::lit).collect()).collect(), sr)
    };
    Ok(SceneBundle {
        config: cfg.clone(),
        dry: cast(vec![dry])?,
        rirs: rirs.iter().map(|h| h.iter().map(|&v| T::lit(v)).collect()).collect(),
        direct_delays: delays,
        reverberant: cast(reverberant)?,
        noise: cast(noise)?,
        observed: cast(observed)?,
        activity_labels: labels,
    })
}

/// Speech-to-noise ratio in dB of channel `m`, over active samples.
pub fn measured_snr_db<T: Real>(bundle: &SceneBundle<T>, m: usize) -> f64 {
    let active = bundle.active_samples();
    let (rev, nz) = (bundle.reverberant.channel(m), bundle.noise.channel(m));
    let (mut es, mut en) = (0.0, 0.0);
    for n in 0..active.len() {
        if active[n] {
            es += rev[n].as_f64().powi(2);
            en += nz[n].as_f64().powi(2);
        }
    }
    10.0 * (es / en).log10()
}

/// Serialises `+inf` as the string `"inf"` so the value survives JSON.
mod finite_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
            },
        }
    }
}

pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Metadata written next to a scene's WAV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    /// Directory name relative to the manifest.
    pub dir: String,
    pub config: SceneConfig,
    pub direct_delays: Vec<usize>,
    pub rir_len: usize,
    pub activity_labels: Vec<bool>,
    /// Achieved active-frame SNR per channel; `None` without noise.
    pub measured_snr_db: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub count: usize,
    pub scenes: Vec<SceneRecord>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> Error {
    Error::Json { path: path.to_path_buf(), source }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Writes `dry.wav`, `rirs.wav` (one channel per response),
/// `reverberant.wav`, `noise.wav`, `observed.wav` and `scene.json` into
/// `dir`, creating it if needed.
pub fn export_scene<T: Real>(bundle: &SceneBundle<T>, dir: &Path) -> Result<SceneRecord> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let sr = bundle.config.sample_rate;
    let f = WavFormat::Float32;
    write_wav(dir.join("dry.wav"), &bundle.dry, f)?;
    write_wav(dir.join("rirs.wav"), &AudioBuffer::new(bundle.rirs.clone(), sr)?, f)?;
    write_wav(dir.join("reverberant.wav"), &bundle.reverberant, f)?;
    write_wav(dir.join("noise.wav"), &bundle.noise, f)?;
    write_wav(dir.join("observed.wav"), &bundle.observed, f)?;
    let noiseless = bundle.config.noise.snr_db == f64::INFINITY;
    let record = SceneRecord {
        seed: bundle.config.seed,
        dir: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        config: bundle.config.clone(),
        direct_delays: bundle.direct_delays.clone(),
        rir_len: bundle.rirs.first().map_or(0, Vec::len),
        activity_labels: bundle.activity_labels.clone(),
        measured_snr_db: (0..bundle.observed.num_channels())
            .map(|m| (!noiseless).then(|| measured_snr_db(bundle, m)))
            .collect(),
    };
    write_json(&dir.join(SCENE_FILE), &record)?;
    Ok(record)
}

/// Reads a directory written by [`export_scene`]. Signals come back at
/// the precision of the stored WAV files.
pub fn load_scene<T: Real>(dir: &Path) -> Result<SceneBundle<T>> {
    let record: SceneRecord = read_json(&dir.join(SCENE_FILE))?;
    let rirs = read_wav::<T>(dir.join("rirs.wav"))?.into_channels();
    Ok(SceneBundle {
        config: record.config,
        dry: read_wav(dir.join("dry.wav"))?,
        rirs,
        direct_delays: record.direct_delays,
        reverberant: read_wav(dir.join("reverberant.wav"))?,
        noise: read_wav(dir.join("noise.wav"))?,
        observed: read_wav(dir.join("observed.wav"))?,
        activity_labels: record.activity_labels,
    })
}

/// Renders `count` scenes with seeds `cfg.seed..cfg.seed + count` into
/// `scene_NNNN` subdirectories of `out` and writes the manifest.
pub fn simulate_to_dir(cfg: &SceneConfig, count: usize, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let scenes = (0..count)
        .map(|i| {
            let c = SceneConfig { seed: cfg.seed + i as u64, ..cfg.clone() };
            let bundle = render_scene::<f64>(&c)?;
            export_scene(&bundle, &out.join(format!("scene_{i:04}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { tool_version: env!("CARGO_PKG_VERSION").into(), count, scenes };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
