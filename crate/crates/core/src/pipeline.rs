//! Configurable dereverberation, beamforming and feature chain with
//! per-utterance diagnostics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::beamform::{mvdr_pipeline, MvdrConfig, MvdrReport, ReferenceMode};
use crate::dereverb::{wpe_run, WpeConfig, WpeReport};
use crate::error::{Error, Result};
use crate::features::{logmel, mel_matrix, mvn, FeatureMatrix, MelConfig};
use crate::mask::{MaskKind, MaskProvider, MaskProviderSpec, MaskTarget, MaskTensor, OracleSources};
use crate::metrics::{metric_drr_gain, metric_stft_mse};
use crate::scalar::Real;
use crate::stft::{istft, stft, StftConfig, StftTensor};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Wpe,
    Mvdr,
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelStageConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// Defaults to half the sample rate.
    pub f_max: Option<f64>,
    /// Apply per-utterance mean and variance normalisation.
    pub mvn: bool,
}

impl Default for MelStageConfig {
    fn default() -> Self {
        Self { n_mels: 80, f_min: 0.0, f_max: None, mvn: true }
    }
}

impl MelStageConfig {
    pub fn resolve(&self, sample_rate: u32, fft_size: usize) -> Result<MelConfig> {
        MelConfig::new(
            self.n_mels,
            self.f_min,
            self.f_max.unwrap_or(sample_rate as f64 / 2.0),
            sample_rate,
            fft_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Subset of `wpe`, `mvdr`, `features`, in that order.
    pub stages: Vec<Stage>,
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    /// Desired-power mask for the first WPE iteration; later iterations
    /// use the previous estimate.
    pub wpe_mask: MaskProvider,
    pub mvdr: MvdrConfig,
    pub speech_mask: MaskProvider,
    /// Defaults to the complement of the speech mask.
    pub noise_mask: Option<MaskProvider>,
    /// Collapse MVDR masks to per-frame activity before PSD estimation.
    pub mask_kind: MaskKind,
    pub mel: MelStageConfig,
    /// Probability of bypassing WPE for an utterance (A/B evaluation).
    pub skip_wpe_probability: f64,
    /// Seeds the bypass draws.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Wpe, Stage::Mvdr, Stage::Features],
            stft: StftConfig::default(),
            wpe: WpeConfig::default(),
            wpe_mask: MaskProvider::Constant { value: 1.0 },
            mvdr: MvdrConfig::default(),
            speech_mask: MaskProvider::EnergySad { threshold_db: 0.0 },
            noise_mask: None,
            mask_kind: MaskKind::Tf,
            mel: MelStageConfig::default(),
            skip_wpe_probability: 0.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("stages must not be empty".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("stages must be ordered wpe, mvdr, features without repeats".into()));
        }
        if !(0.0..=1.0).contains(&self.skip_wpe_probability) {
            return Err(Error::InvalidConfig("skip_wpe_probability must be in [0, 1]".into()));
        }
        self.wpe.validate()?;
        self.mvdr.validate()?;
        self.wpe_spec().validate()?;
        self.speech_spec().validate()?;
        if let Some(n) = self.noise_spec() {
            n.validate()?;
        }
        if self.has(Stage::Features) {
            self.mel.resolve(16000, self.stft.fft_size()).map(|_| ()).or_else(|e| match self.mel.f_max {
                // The range can only be checked against the real rate.
                None => Err(e),
                Some(_) => Ok(()),
            })?;
        }
        Ok(())
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    fn wpe_spec(&self) -> MaskProviderSpec {
        MaskProviderSpec { provider: self.wpe_mask.clone(), target: MaskTarget::Derev }
    }

    fn speech_spec(&self) -> MaskProviderSpec {
        MaskProviderSpec { provider: self.speech_mask.clone(), target: MaskTarget::Speech }
    }

    fn noise_spec(&self) -> Option<MaskProviderSpec> {
        self.noise_mask.clone().map(|provider| MaskProviderSpec { provider, target: MaskTarget::Noise })
    }

    /// Channel the single-channel taps are read from when no beamformer
    /// runs.
    pub fn reference_channel(&self) -> usize {
        match self.mvdr.reference {
            ReferenceMode::Fixed { channel } => channel,
            ReferenceMode::Soft => 0,
        }
    }

    /// The same configuration for inputs whose channels were reordered so
    /// that new channel `i` is old channel `order[i]`.
    pub fn remap_channels(&self, order: &[usize]) -> Self {
        let mut c = self.clone();
        c.mvdr.reference = c.mvdr.reference.remap(order);
        c
    }
}

/// Clean references for one utterance, when it comes from a simulation.
#[derive(Debug, Clone)]
pub struct References<T> {
    pub sources: OracleSources<T>,
    pub dry: AudioBuffer<T>,
    /// Room response length, bounding the alignment search.
    pub max_lag: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    /// Magnitude-spectrogram MSE to the dry source, reference channel of
    /// the observation.
    pub stft_mse_observed: f64,
    pub stft_mse_dereverberated: Option<f64>,
    pub stft_mse_enhanced: Option<f64>,
    /// Dereverberation gain of the final single-channel output.
    pub drr_gain_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stft_ms: f64,
    pub wpe_ms: Option<f64>,
    pub mvdr_ms: Option<f64>,
    pub features_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub name: String,
    pub channels: usize,
    pub frames: usize,
    pub wpe_skipped: bool,
    pub timings: StageTimings,
    pub wpe: Option<WpeReport>,
    pub mvdr: Option<MvdrReport>,
    pub metrics: Option<UtteranceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub utterances: Vec<UtteranceRecord>,
}

impl RunReport {
    pub fn new(config: &PipelineConfig) -> Self {
        Self { tool_version: TOOL_VERSION.to_string(), config: config.clone(), utterances: Vec::new() }
    }
}

/// Intermediate and final signals of one run.
#[derive(Debug, Clone)]
pub struct StageOutputs<T> {
    pub observed: StftTensor<T>,
    /// Multichannel WPE output, when WPE ran.
    pub dereverberated: Option<StftTensor<T>>,
    /// Single-channel beamformer output, when MVDR ran.
    pub enhanced: Option<StftTensor<T>>,
    pub features: Option<FeatureMatrix<T>>,
}

impl<T: Real> StageOutputs<T> {
    /// The last single-channel signal: beamformer output, else the
    /// reference channel of the WPE output or of the observation.
    pub fn final_single_channel(&self, reference: usize) -> StftTensor<T> {
        match (&self.enhanced, &self.dereverberated) {
            (Some(x), _) => x.clone(),
            (None, Some(d)) => d.channel(reference),
            (None, None) => self.observed.channel(reference),
        }
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the configured stages on one utterance. `index` selects the
/// utterance's WPE-bypass draw.
pub fn process_utterance<T: Real>(
    name: &str,
    audio: &AudioBuffer<T>,
    refs: Option<&References<T>>,
    cfg: &PipelineConfig,
    index: usize,
) -> Result<(StageOutputs<T>, UtteranceRecord)> {
    cfg.validate()?;
    let reference = cfg.reference_channel();
    if reference >= audio.num_channels() {
        return Err(Error::ReferenceOutOfRange { index: reference, channels: audio.num_channels() });
    }
    let oracle = refs.map(|r| &r.sources);
    let mut record = UtteranceRecord { name: name.to_string(), channels: audio.num_channels(), ..Default::default() };

    let t = Instant::now();
    let y = stft(audio, &cfg.stft)?;
    record.timings.stft_ms = millis(t);
    record.frames = y.frames();

    let mut out = StageOutputs { observed: y.clone(), dereverberated: None, enhanced: None, features: None };
    let mut current = y.clone();

    if cfg.has(Stage::Wpe) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let skip = cfg.skip_wpe_probability > 0.0 && rng.gen::<f64>() < cfg.skip_wpe_probability;
        if skip {
            record.wpe_skipped = true;
        } else {
            let t = Instant::now();
            let w = cfg.wpe_spec().estimate(&y, oracle)?;
            let (d, report) = wpe_run(&y, Some(&w), &cfg.wpe, cfg.wpe.iterations)?;
            record.timings.wpe_ms = Some(millis(t));
            record.wpe = Some(report);
            current = d.clone();
            out.dereverberated = Some(d);
        }
    }

    if cfg.has(Stage::Mvdr) {
        let t = Instant::now();
        let mut ws = cfg.speech_spec().estimate(&current, oracle)?;
        let mut wn = match cfg.noise_spec() {
            Some(spec) => spec.estimate(&current, oracle)?,
            None => complement(&ws)?,
        };
        if cfg.mask_kind == MaskKind::Sad {
            ws = ws.to_sad();
            wn = wn.to_sad();
        }
        let (x, report) = mvdr_pipeline(&current, &ws, &wn, &cfg.mvdr)?;
        record.timings.mvdr_ms = Some(millis(t));
        record.mvdr = Some(report);
        out.enhanced = Some(x);
    }

    if cfg.has(Stage::Features) {
        let t = Instant::now();
        let fb = mel_matrix::<T>(&cfg.mel.resolve(audio.sample_rate(), cfg.stft.fft_size())?)?;
        let f = logmel(&out.final_single_channel(reference), &fb)?;
        out.features = Some(if cfg.mel.mvn { mvn(&f) } else { f });
        record.timings.features_ms = Some(millis(t));
    }

    if let Some(r) = refs {
        record.metrics = Some(utterance_metrics(&out, r, reference, cfg)?);
    }
    Ok((out, record))
}

fn complement<T: Real>(w: &MaskTensor<T>) -> Result<MaskTensor<T>> {
    let values: Vec<T> = w.values().iter().map(|&v| T::one() - v).collect();
    match w.kind() {
        MaskKind::Tf => MaskTensor::tf(values, w.frames(), w.bins(), w.channels()),
        MaskKind::Sad => MaskTensor::sad(values, w.frames(), w.bins(), w.channels()),
    }
}

fn utterance_metrics<T: Real>(
    out: &StageOutputs<T>,
    refs: &References<T>,
    reference: usize,
    cfg: &PipelineConfig,
) -> Result<UtteranceMetrics> {
    let dry = stft(&refs.dry, &cfg.stft)?;
    let observed = out.observed.channel(reference);
    let mut m = UtteranceMetrics { stft_mse_observed: metric_stft_mse(&observed, &dry)?, ..Default::default() };
    if let Some(d) = &out.dereverberated {
        m.stft_mse_dereverberated = Some(metric_stft_mse(&d.channel(reference), &dry)?);
    }
    if let Some(x) = &out.enhanced {
        m.stft_mse_enhanced = Some(metric_stft_mse(x, &dry)?);
    }
    if out.dereverberated.is_some() || out.enhanced.is_some() {
        let last = istft(&out.final_single_channel(reference))?;
        let obs = istft(&observed)?;
        m.drr_gain_db = metric_drr_gain(&last, &obs, &refs.dry, refs.max_lag).ok();
    }
    Ok(m)
}
