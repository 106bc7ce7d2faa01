//! Finite-difference checks that the enhancement chain is smooth in its
//! masks.
//!
//! A probe perturbs mask logits along a direction, re-runs the selected
//! sub-pipeline and reads the central-difference quotient of a scalar
//! loss. Quotients over a ladder of step sizes give an observed
//! convergence order, which is 2 wherever the chain is smooth. All
//! evaluation happens in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::beamform::{mvdr_pipeline, MvdrConfig};
use crate::dereverb::{wpe_run, WpeConfig};
use crate::error::{Error, Result};
use crate::features::{logmel, mvn, FeatureMatrix, MelFilterbank};
use crate::beamform::ReferenceMode;
use crate::features::{mel_matrix, MelConfig};
use crate::mask::{MaskKind, MaskTensor};
use crate::simulation::{render_scene, SceneConfig};
use crate::stft::{stft, StftConfig, StftTensor};

/// Minimum observed order accepted as second-order convergence.
pub const ORDER_THRESHOLD: f64 = 1.9;
/// Assumed relative rounding error of one loss evaluation, in units of
/// machine epsilon.
pub const ROUNDOFF_FACTOR: f64 = 100.0;
/// Spacing of the noise-estimation evaluations relative to the smallest step.
pub const NOISE_SPACING: f64 = 1e-4;
/// Quotient differences below this many noise standard deviations are
/// treated as converged.
pub const NOISE_MARGIN: f64 = 5.0;
/// Step ladder used when a probe does not specify one. Directions have
/// unit norm over every mask entry, so individual entries move by far
/// less than `h`.
pub const DEFAULT_STEPS: [f64; 8] = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePipeline {
    WpeOnly,
    MvdrOnly,
    Full,
}

impl ProbePipeline {
    fn uses_wpe(self) -> bool {
        matches!(self, Self::WpeOnly | Self::Full)
    }

    fn uses_mvdr(self) -> bool {
        matches!(self, Self::MvdrOnly | Self::Full)
    }
}

/// Map from perturbed logits to mask values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeActivation {
    /// Logits are the masks; perturbations must stay inside `[0, 1]`.
    #[default]
    Identity,
    Sigmoid,
    ClippedRelu1,
}

impl ProbeActivation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Self::ClippedRelu1 => z.clamp(0.0, 1.0),
        }
    }

    /// Logit whose activation is `w` (for `w` strictly inside `(0, 1)`).
    pub fn inverse(self, w: f64) -> f64 {
        match self {
            Self::Sigmoid => (w / (1.0 - w)).ln(),
            _ => w,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ProbeLoss {
    /// `mean |X - target|²`; a one-channel target is broadcast.
    StftMse(StftTensor<f64>),
    /// `mean (F - target)²` on normalised log-mel features of channel 0.
    LogmelMse { target: FeatureMatrix<f64>, filterbank: MelFilterbank<f64> },
    /// `mean |X|²`.
    OutputPower,
}

/// Unconstrained values laid out like a [`MaskTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub kind: MaskKind,
}

impl MaskLogits {
    pub fn tf(values: Vec<f64>, frames: usize, bins: usize, channels: usize) -> Self {
        assert_eq!(values.len(), frames * bins * channels, "logit tensor shape");
        Self { values, frames, bins, channels, kind: MaskKind::Tf }
    }

    pub fn sad(values: Vec<f64>, frames: usize, bins: usize, channels: usize) -> Self {
        assert_eq!(values.len(), frames * channels, "logit tensor shape");
        Self { values, frames, bins, channels, kind: MaskKind::Sad }
    }

    fn to_mask(&self, act: ProbeActivation) -> Result<MaskTensor<f64>> {
        let values = self.values.iter().map(|&z| act.apply(z)).collect();
        match self.kind {
            MaskKind::Tf => MaskTensor::tf(values, self.frames, self.bins, self.channels),
            MaskKind::Sad => MaskTensor::sad(values, self.frames, self.bins, self.channels),
        }
    }
}

/// Logits of every mask a pipeline consumes. Unused slots are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMasks {
    pub wpe: Option<MaskLogits>,
    pub speech: Option<MaskLogits>,
    pub noise: Option<MaskLogits>,
}

impl ProbeMasks {
    fn slots(&self) -> [&Option<MaskLogits>; 3] {
        [&self.wpe, &self.speech, &self.noise]
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.slots().into_iter().flat_map(|m| m.iter().flat_map(|m| m.values.iter().copied()))
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.slots().iter().zip(other.slots()).all(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => a.values.len() == b.values.len() && a.kind == b.kind,
            (None, None) => true,
            _ => false,
        })
    }

    /// New logits with every value replaced by `f(value, index)`, where
    /// `index` runs over the concatenation of all slots.
    pub fn map(&self, mut f: impl FnMut(f64, usize) -> f64) -> Self {
        let mut offset = 0;
        let mut one = |m: &Option<MaskLogits>| {
            m.as_ref().map(|m| {
                let values: Vec<f64> = m.values.iter().enumerate().map(|(i, &v)| f(v, offset + i)).collect();
                offset += values.len();
                MaskLogits { values, ..*m }
            })
        };
        Self { wpe: one(&self.wpe), speech: one(&self.speech), noise: one(&self.noise) }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|v, _| v * alpha)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Everything needed to evaluate the loss as a function of the masks.
#[derive(Debug, Clone)]
pub struct GraphProbe {
    pub pipeline: ProbePipeline,
    pub loss: ProbeLoss,
    pub seed: u64,
    /// Strictly decreasing, at least three, each above 1e-12.
    pub step_sizes: Vec<f64>,
    pub activation: ProbeActivation,
    pub input: StftTensor<f64>,
    pub wpe: WpeConfig,
    pub mvdr: MvdrConfig,
}

/// Non-smooth branches met while evaluating a point.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFlags {
    /// Largest count of pass-through WPE bins over the evaluations.
    pub wpe_degenerate_bins: usize,
    /// Largest count of MVDR bins that fell back to the reference vector.
    pub mvdr_fallback_bins: usize,
    /// Some perturbed logit lies on or crosses an activation clamp.
    pub activation_clamp: bool,
}

impl BranchFlags {
    pub fn any(&self) -> bool {
        self.wpe_degenerate_bins > 0 || self.mvdr_fallback_bins > 0 || self.activation_clamp
    }

    fn merge(&mut self, other: &Self) {
        self.wpe_degenerate_bins = self.wpe_degenerate_bins.max(other.wpe_degenerate_bins);
        self.mvdr_fallback_bins = self.mvdr_fallback_bins.max(other.mvdr_fallback_bins);
        self.activation_clamp |= other.activation_clamp;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Observed order at least [`ORDER_THRESHOLD`].
    Smooth,
    /// Successive quotients agree to rounding error; no order measurable.
    Exact,
    /// Order below threshold or quotients not converging.
    NonSmooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub probe_index: usize,
    pub step_sizes: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Richardson extrapolation of the last two quotients.
    pub extrapolated: f64,
    /// Present only when the quotient differences shrink monotonically.
    pub order: Option<f64>,
    pub verdict: Verdict,
    /// Loss at the unperturbed point.
    pub loss: f64,
    /// Estimated standard deviation of the loss's rounding noise.
    pub noise_level: f64,
    pub flags: BranchFlags,
}

impl DerivativeReport {
    /// Non-smooth without any branch diagnostic to explain it.
    pub fn is_unexplained_failure(&self) -> bool {
        self.verdict == Verdict::NonSmooth && !self.flags.any()
    }
}

/// Loss of a pipeline output.
pub fn scalar_loss(x: &StftTensor<f64>, loss: &ProbeLoss) -> Result<f64> {
    match loss {
        ProbeLoss::OutputPower => Ok(x.power() / x.data().len() as f64),
        ProbeLoss::StftMse(target) => {
            if x.frames() != target.frames()
                || x.bins() != target.bins()
                || !(target.channels() == x.channels() || target.channels() == 1)
            {
                return Err(Error::ShapeMismatch("loss target shape".into()));
            }
            let mut acc = 0.0;
            for t in 0..x.frames() {
                for b in 0..x.bins() {
                    let r = target.cell(t, b);
                    for (m, v) in x.cell(t, b).iter().enumerate() {
                        acc += (v - r[if r.len() == 1 { 0 } else { m }]).norm_sqr();
                    }
                }
            }
            Ok(acc / x.data().len() as f64)
        }
        ProbeLoss::LogmelMse { target, filterbank } => {
            let f = mvn(&logmel(&x.channel(0), filterbank)?);
            feature_mse(&f, target)
        }
    }
}

pub fn feature_mse(f: &FeatureMatrix<f64>, target: &FeatureMatrix<f64>) -> Result<f64> {
    if f.frames() != target.frames() || f.dims() != target.dims() {
        return Err(Error::ShapeMismatch("feature target shape".into()));
    }
    let acc: f64 = f.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(acc / f.values().len() as f64)
}

impl GraphProbe {
    pub fn validate(&self) -> Result<()> {
        let h = &self.step_sizes;
        if h.len() < 3 {
            return Err(Error::InvalidConfig("probe needs at least 3 step sizes".into()));
        }
        if h.iter().any(|&v| !(v > 1e-12) || !v.is_finite()) || h.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("step sizes must be strictly decreasing and > 1e-12".into()));
        }
        self.wpe.validate()?;
        self.mvdr.validate()
    }

    fn check_masks(&self, masks: &ProbeMasks) -> Result<()> {
        let p = self.pipeline;
        let need = [p.uses_wpe(), p.uses_mvdr(), p.uses_mvdr()];
        for (slot, needed) in masks.slots().iter().zip(need) {
            match (slot, needed) {
                (Some(m), true) => {
                    let i = &self.input;
                    if (m.frames, m.bins, m.channels) != (i.frames(), i.bins(), i.channels()) {
                        return Err(Error::ShapeMismatch("probe mask shape differs from input".into()));
                    }
                }
                (None, true) => return Err(Error::InvalidConfig("probe is missing a mask the pipeline needs".into())),
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs the selected pipeline on `logits` and returns the loss plus
    /// the branch diagnostics of this evaluation.
    pub fn evaluate(&self, logits: &ProbeMasks) -> Result<(f64, BranchFlags)> {
        self.check_masks(logits)?;
        let act = self.activation;
        let wpe_mask = logits.wpe.as_ref().map(|m| m.to_mask(act)).transpose()?;
        let mut flags = BranchFlags::default();
        let mut x = self.input.clone();
        if self.pipeline.uses_wpe() {
            let (d, report) = wpe_run(&x, wpe_mask.as_ref(), &self.wpe, 1)?;
            flags.wpe_degenerate_bins = report.degenerate_bins;
            x = d;
        }
        if self.pipeline.uses_mvdr() {
            let speech = logits.speech.as_ref().expect("checked").to_mask(act)?;
            let noise = logits.noise.as_ref().expect("checked").to_mask(act)?;
            let (y, report) = mvdr_pipeline(&x, &speech, &noise, &self.mvdr)?;
            flags.mvdr_fallback_bins = report.fallback_bins;
            x = y;
        }
        Ok((scalar_loss(&x, &self.loss)?, flags))
    }

    /// `(L(w + hΔ) - L(w - hΔ)) / (2h)` together with the merged branch
    /// flags of both evaluations.
    pub fn central_difference(&self, logits: &ProbeMasks, direction: &ProbeMasks, h: f64) -> Result<(f64, BranchFlags)> {
        if !logits.same_layout(direction) {
            return Err(Error::ShapeMismatch("direction layout differs from masks".into()));
        }
        let d: Vec<f64> = direction.values().collect();
        let plus = logits.map(|z, i| z + h * d[i]);
        let minus = logits.map(|z, i| z - h * d[i]);
        if self.activation == ProbeActivation::Identity
            && plus.values().chain(minus.values()).any(|v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::PerturbationOutOfRange);
        }
        let (lp, mut flags) = self.evaluate(&plus)?;
        let (lm, fm) = self.evaluate(&minus)?;
        flags.merge(&fm);
        if self.activation == ProbeActivation::ClippedRelu1 {
            let on_clamp = |z: f64, i: usize| {
                let (a, b) = (z - h * d[i].abs(), z + h * d[i].abs());
                d[i] != 0.0 && ((a <= 1.0 && b >= 1.0) || (a <= 0.0 && b >= 0.0))
            };
            flags.activation_clamp = logits.values().enumerate().any(|(i, z)| on_clamp(z, i));
        }
        Ok(((lp - lm) / (2.0 * h), flags))
    }
}

/// Central-difference directional derivative of the probe's loss.
pub fn directional_derivative(probe: &GraphProbe, logits: &ProbeMasks, direction: &ProbeMasks, h: f64) -> Result<f64> {
    probe.central_difference(logits, direction, h).map(|(q, _)| q)
}

/// Order `p` with `(a^p - b^p) / (b^p - c^p) = ratio` for `a > b > c`.
fn solve_order(a: f64, b: f64, c: f64, ratio: f64) -> f64 {
    let g = |p: f64| (a.powf(p) - b.powf(p)) / (b.powf(p) - c.powf(p));
    let (mut lo, mut hi) = (1e-6, 12.0);
    if ratio <= g(lo) {
        return 0.0;
    }
    if ratio >= g(hi) {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Order and verdict from quotients at decreasing step sizes. `noise[k]`
/// is the rounding error expected in quotient `k`.
///
/// Differences between successive quotients are resolved while they stay
/// above the rounding floor. The resolved differences must end in a
/// strictly shrinking run (large steps may still be pre-asymptotic); the
/// order is read from the last triple of that run.
pub fn assess_convergence(steps: &[f64], quotients: &[f64], noise: &[f64]) -> (Option<f64>, Verdict) {
    let diffs: Vec<f64> = quotients.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
    let resolved = diffs
        .iter()
        .zip(noise.windows(2))
        .take_while(|(d, n)| **d > n[0] + n[1])
        .count();
    if resolved < 2 {
        return (None, Verdict::Exact);
    }
    let k = resolved - 2;
    if diffs[k + 1] >= diffs[k] {
        return (None, Verdict::NonSmooth);
    }
    let p = solve_order(steps[k], steps[k + 1], steps[k + 2], diffs[k] / diffs[k + 1]);
    (Some(p), if p >= ORDER_THRESHOLD { Verdict::Smooth } else { Verdict::NonSmooth })
}

/// Standard deviation of the rounding noise in the loss near `logits`,
/// from the sixth differences of evaluations spaced `spacing` apart
/// along `direction`. Smooth variation is negligible at this spacing, so
/// the differences are dominated by noise.
pub fn estimate_noise(probe: &GraphProbe, logits: &ProbeMasks, direction: &ProbeMasks, spacing: f64) -> Result<f64> {
    const ORDER: usize = 6;
    let d: Vec<f64> = direction.values().collect();
    let mut table = (0..ORDER + 2)
        .map(|j| {
            let s = j as f64 * spacing;
            probe.evaluate(&logits.map(|z, i| z + s * d[i])).map(|(l, _)| l)
        })
        .collect::<Result<Vec<f64>>>()?;
    for _ in 0..ORDER {
        table = table.windows(2).map(|w| w[1] - w[0]).collect();
    }
    // (k!)^2 / (2k)! normalises the k-th difference of white noise.
    let gamma = 518_400.0 / 479_001_600.0;
    let mean_sq = table.iter().map(|v| v * v).sum::<f64>() / table.len() as f64;
    Ok((gamma * mean_sq).sqrt())
}

/// Quotients over the probe's step ladder at one point and direction.
pub fn derivative_report(probe: &GraphProbe, logits: &ProbeMasks, direction: &ProbeMasks, index: usize) -> Result<DerivativeReport> {
    probe.validate()?;
    let (base, _) = probe.evaluate(logits)?;
    let mut quotients = Vec::with_capacity(probe.step_sizes.len());
    let mut flags = BranchFlags::default();
    for &h in &probe.step_sizes {
        let (q, f) = probe.central_difference(logits, direction, h)?;
        quotients.push(q);
        flags.merge(&f);
    }
    let h_min = *probe.step_sizes.last().expect("validated");
    let sigma = estimate_noise(probe, logits, direction, h_min * NOISE_SPACING)?
        .max(ROUNDOFF_FACTOR * f64::EPSILON * base.abs());
    let noise: Vec<f64> = probe.step_sizes.iter().map(|h| NOISE_MARGIN * sigma / (std::f64::consts::SQRT_2 * h)).collect();
    let (order, verdict) = assess_convergence(&probe.step_sizes, &quotients, &noise);
    let n = quotients.len();
    let (h1, h2) = (probe.step_sizes[n - 2], probe.step_sizes[n - 1]);
    let extrapolated = quotients[n - 1] + (quotients[n - 1] - quotients[n - 2]) * h2 * h2 / (h1 * h1 - h2 * h2);
    Ok(DerivativeReport {
        probe_index: index,
        step_sizes: probe.step_sizes.clone(),
        quotients,
        extrapolated,
        order,
        verdict,
        loss: base,
        noise_level: sigma,
        flags,
    })
}

/// Logits whose masks are uniform in `[0.1, 0.9]`, shaped like `input`
/// for every slot the pipeline uses. SAD layout is used for the MVDR
/// masks when `sad` is set.
pub fn random_interior_masks(probe: &GraphProbe, rng: &mut ChaCha8Rng, sad: bool) -> ProbeMasks {
    let (t, b, m) = (probe.input.frames(), probe.input.bins(), probe.input.channels());
    let act = probe.activation;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| act.inverse(rng.gen_range(0.1..0.9))).collect() };
    let wpe = probe.pipeline.uses_wpe().then(|| MaskLogits::tf(draw(t * b * m), t, b, m));
    let mut mv = || if sad { MaskLogits::sad(draw(t * m), t, b, m) } else { MaskLogits::tf(draw(t * b * m), t, b, m) };
    let (speech, noise) = if probe.pipeline.uses_mvdr() { (Some(mv()), Some(mv())) } else { (None, None) };
    ProbeMasks { wpe, speech, noise }
}

/// Gaussian direction with unit Euclidean norm over all slots of `like`.
pub fn random_direction(like: &ProbeMasks, rng: &mut ChaCha8Rng) -> ProbeMasks {
    let d = like.map(|_, _| rng.sample(StandardNormal));
    let n = d.norm();
    d.scaled(1.0 / n)
}

/// Shrinks `direction` so that `logits ± h_max · direction` stays in
/// `[0, 1]` (only meaningful for the identity activation).
pub fn fit_direction(logits: &ProbeMasks, direction: &ProbeMasks, h_max: f64) -> ProbeMasks {
    let z: Vec<f64> = logits.values().collect();
    let scale = direction
        .values()
        .enumerate()
        .filter(|(_, d)| *d != 0.0)
        .map(|(i, d)| z[i].min(1.0 - z[i]) / (h_max * d.abs()))
        .fold(1.0f64, f64::min);
    direction.scaled(scale.max(0.0))
}

/// `n_directions` reports, each at a fresh random interior point and
/// direction drawn from the probe's seed.
pub fn smoothness_sweep(probe: &GraphProbe, n_directions: usize, sad: bool) -> Result<Vec<DerivativeReport>> {
    smoothness_sweep_at(probe, n_directions, sad, ProbePoint::RandomInterior)
}

/// Masks filled with the logit `z` in every slot the pipeline uses.
pub fn constant_logits(probe: &GraphProbe, z: f64, sad: bool) -> ProbeMasks {
    let (t, b, m) = (probe.input.frames(), probe.input.bins(), probe.input.channels());
    let tf = || MaskLogits::tf(vec![z; t * b * m], t, b, m);
    let mv = || if sad { MaskLogits::sad(vec![z; t * m], t, b, m) } else { tf() };
    ProbeMasks {
        wpe: probe.pipeline.uses_wpe().then(tf),
        speech: probe.pipeline.uses_mvdr().then(mv),
        noise: probe.pipeline.uses_mvdr().then(mv),
    }
}

/// Where the sweep places its probe points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbePoint {
    /// Fresh masks uniform in `[0.1, 0.9]` for every direction.
    RandomInterior,
    /// Every logit equal to the given value.
    Pinned(f64),
}

/// [`smoothness_sweep`] with a choice of probe point.
pub fn smoothness_sweep_at(probe: &GraphProbe, n_directions: usize, sad: bool, point: ProbePoint) -> Result<Vec<DerivativeReport>> {
    probe.validate()?;
    (0..n_directions)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
            rng.set_stream(i as u64);
            let logits = match point {
                ProbePoint::RandomInterior => random_interior_masks(probe, &mut rng, sad),
                ProbePoint::Pinned(z) => constant_logits(probe, z, sad),
            };
            let mut direction = random_direction(&logits, &mut rng);
            if probe.activation == ProbeActivation::Identity {
                direction = fit_direction(&logits, &direction, probe.step_sizes[0]);
            }
            derivative_report(probe, &logits, &direction, i)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    StftMse,
    LogmelMse,
    OutputPower,
}

/// File-level description of a probe: a simulated scene, the pipeline
/// settings and the sweep parameters. Loss targets come from the scene's
/// dry source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub pipeline: ProbePipeline,
    pub loss: LossKind,
    pub seed: u64,
    pub step_sizes: Vec<f64>,
    pub activation: ProbeActivation,
    pub n_directions: usize,
    /// Layout of the MVDR masks.
    pub mask_kind: MaskKind,
    /// Probe at constant logits instead of random interior points.
    pub pin_logit: Option<f64>,
    pub scene: SceneConfig,
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub mvdr: MvdrConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pipeline: ProbePipeline::Full,
            loss: LossKind::LogmelMse,
            seed: 0,
            step_sizes: DEFAULT_STEPS.to_vec(),
            activation: ProbeActivation::Identity,
            n_directions: 10,
            mask_kind: MaskKind::Tf,
            pin_logit: None,
            scene: SceneConfig { seed: 7, channels: 2, duration: 1.0, ..Default::default() },
            stft: StftConfig::default(),
            wpe: WpeConfig::default(),
            mvdr: MvdrConfig { reference: ReferenceMode::Soft, ..Default::default() },
        }
    }
}

impl ProbeConfig {
    pub fn build(&self) -> Result<GraphProbe> {
        let scene = render_scene::<f64>(&self.scene)?;
        let input = stft(&scene.observed, &self.stft)?;
        let dry = stft(&scene.dry, &self.stft)?;
        let loss = match self.loss {
            LossKind::OutputPower => ProbeLoss::OutputPower,
            LossKind::StftMse => ProbeLoss::StftMse(dry),
            LossKind::LogmelMse => {
                let filterbank = mel_matrix(&MelConfig::standard(self.scene.sample_rate, self.stft.fft_size()))?;
                ProbeLoss::LogmelMse { target: mvn(&logmel(&dry, &filterbank)?), filterbank }
            }
        };
        let probe = GraphProbe {
            pipeline: self.pipeline,
            loss,
            seed: self.seed,
            step_sizes: self.step_sizes.clone(),
            activation: self.activation,
            input,
            wpe: self.wpe,
            mvdr: self.mvdr,
        };
        probe.validate()?;
        Ok(probe)
    }

    pub fn point(&self) -> ProbePoint {
        self.pin_logit.map_or(ProbePoint::RandomInterior, ProbePoint::Pinned)
    }

    pub fn run(&self) -> Result<Vec<DerivativeReport>> {
        let probe = self.build()?;
        smoothness_sweep_at(&probe, self.n_directions, self.mask_kind == MaskKind::Sad, self.point())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub probes: usize,
    pub smooth: usize,
    pub exact: usize,
    /// Non-smooth with a branch diagnostic attached.
    pub flagged: usize,
    /// Non-smooth without any diagnostic.
    pub unexplained: usize,
}

pub fn summarize(reports: &[DerivativeReport]) -> SweepSummary {
    let mut s = SweepSummary { probes: reports.len(), ..Default::default() };
    for r in reports {
        match r.verdict {
            Verdict::Smooth => s.smooth += 1,
            Verdict::Exact => s.exact += 1,
            Verdict::NonSmooth if r.flags.any() => s.flagged += 1,
            Verdict::NonSmooth => s.unexplained += 1,
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_solver_recovers_power_law() {
        let h = [1e-2, 5e-3, 2e-3, 1e-3];
        for p in [1.0, 2.0, 3.0] {
            let q: Vec<f64> = h.iter().map(|x: &f64| 4.0 + 0.7 * x.powf(p)).collect();
            let (order, verdict) = assess_convergence(&h, &q, &[0.0; 4]);
            assert!((order.unwrap() - p).abs() < 1e-6, "{order:?} vs {p}");
            let _ = verdict;
            let q4: Vec<f64> = h.iter().map(|x: &f64| 4.0 + 0.7 * x.powf(p) + 5.0 * x.powi(4)).collect();
            let (order4, verdict) = assess_convergence(&h, &q4, &[0.0; 4]);
            assert!((order4.unwrap() - p).abs() < 0.1, "{order4:?} vs {p}");
            assert_eq!(verdict, if p >= ORDER_THRESHOLD { Verdict::Smooth } else { Verdict::NonSmooth });
        }
    }

    #[test]
    fn diverging_quotients_are_non_smooth() {
        let (order, verdict) = assess_convergence(&[1e-2, 1e-3, 1e-4], &[1.0, 1.1, 1.5], &[0.0; 3]);
        assert_eq!((order, verdict), (None, Verdict::NonSmooth));
    }

    #[test]
    fn identical_quotients_are_exact() {
        let (order, verdict) = assess_convergence(&[1e-2, 1e-3, 1e-4], &[2.0, 2.0, 2.0], &[1e-14; 3]);
        assert_eq!((order, verdict), (None, Verdict::Exact));
    }

    #[test]
    fn activations_invert() {
        for w in [0.1, 0.5, 0.9] {
            for a in [ProbeActivation::Identity, ProbeActivation::Sigmoid, ProbeActivation::ClippedRelu1] {
                assert!((a.apply(a.inverse(w)) - w).abs() < 1e-12);
            }
        }
    }
}
