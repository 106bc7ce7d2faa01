//! Mask-based MVDR beamforming with reference-channel selection.
//!
//! Speech and noise spatial covariances are accumulated from masked outer
//! products of the (dereverberated) multichannel STFT, and the filter is
//!
//! ```text
//! f(b) = Φ_N(b)^{-1} Φ_S(b) u / tr(Φ_N(b)^{-1} Φ_S(b))
//! ```
//!
//! which estimates the speech image at the reference described by `u`
//! without an explicit steering vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_solve, CMatrix};
use crate::mask::MaskTensor;
use crate::scalar::{czero, creal, Real, C};
use crate::stft::StftTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdRole {
    Speech,
    Noise,
}

/// Per-bin `M x M` spatial covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix<T> {
    bins: Vec<CMatrix<T>>,
    role: PsdRole,
}

impl<T: Real> PsdMatrix<T> {
    pub fn from_bins(bins: Vec<CMatrix<T>>, role: PsdRole) -> Self {
        Self { bins, role }
    }

    pub fn bin(&self, b: usize) -> &CMatrix<T> {
        &self.bins[b]
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn role(&self) -> PsdRole {
        self.role
    }

    pub fn channels(&self) -> usize {
        self.bins.first().map(CMatrix::rows).unwrap_or(0)
    }

    /// `Σ_b Φ(b)[m, m]` for every channel.
    fn diagonal_mass(&self) -> Vec<T> {
        (0..self.channels()).map(|m| self.bins.iter().map(|p| p[(m, m)].re).sum()).collect()
    }
}

/// Per-(t, b) mean of a channel-dependent mask over channels.
pub fn average_masks<T: Real>(w: &MaskTensor<T>) -> MaskTensor<T> {
    w.average_channels()
}

/// `Φ(b) = Σ_t w(t, b) d(t, b) d(t, b)^H`, optionally divided by `Σ_t w`.
pub fn estimate_psd<T: Real>(d: &StftTensor<T>, w: &MaskTensor<T>, role: PsdRole, normalize: bool) -> Result<PsdMatrix<T>> {
    if w.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("PSD mask must be channel-averaged, has {} channels", w.channels())));
    }
    w.check_compatible(d)?;
    let m = d.channels();
    let mut bins = Vec::with_capacity(d.bins());
    for b in 0..d.bins() {
        let mut phi = CMatrix::zeros(m, m);
        let mut mass = T::zero();
        for t in 0..d.frames() {
            let wt = w.at(t, b, 0);
            if wt == T::zero() {
                continue;
            }
            phi.add_outer(d.cell(t, b), wt);
            mass += wt;
        }
        phi.hermitianize();
        if normalize && mass > T::zero() {
            let inv = T::one() / mass;
            phi = CMatrix::from_fn(m, m, |i, j| phi[(i, j)] * inv);
        }
        bins.push(phi);
    }
    Ok(PsdMatrix { bins, role })
}

/// How the reference vector `u` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceMode {
    /// One-hot at the given channel.
    Fixed { channel: usize },
    /// Posterior-SNR weighting over channels from the PSD diagonals.
    Soft,
}

impl Default for ReferenceMode {
    fn default() -> Self {
        ReferenceMode::Fixed { channel: 0 }
    }
}

impl ReferenceMode {
    /// The same reference after reordering channels so that new channel
    /// `i` is old channel `order[i]`.
    pub fn remap(self, order: &[usize]) -> Self {
        match self {
            ReferenceMode::Fixed { channel } => ReferenceMode::Fixed {
                channel: order.iter().position(|&m| m == channel).unwrap_or(channel),
            },
            ReferenceMode::Soft => ReferenceMode::Soft,
        }
    }
}

/// Resolved reference weights: nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec<T> {
    pub mode: ReferenceMode,
    pub weights: Vec<T>,
}

pub fn select_reference<T: Real>(mode: ReferenceMode, phi_s: &PsdMatrix<T>, phi_n: &PsdMatrix<T>) -> Result<ReferenceSpec<T>> {
    let m = phi_s.channels();
    if phi_n.channels() != m {
        return Err(Error::ShapeMismatch("speech vs noise PSD channel count".into()));
    }
    let weights = match mode {
        ReferenceMode::Fixed { channel } => {
            if channel >= m {
                return Err(Error::ReferenceOutOfRange { index: channel, channels: m });
            }
            (0..m).map(|i| if i == channel { T::one() } else { T::zero() }).collect()
        }
        ReferenceMode::Soft => {
            let s = phi_s.diagonal_mass();
            let n = phi_n.diagonal_mass();
            let mean_noise = n.iter().copied().sum::<T>() / T::from_usize_lossy(m);
            let eps = T::lit(1e-10) * mean_noise + T::min_positive_value();
            let snr: Vec<T> = s.iter().zip(&n).map(|(&s, &n)| s.max(T::zero()) / (n.max(T::zero()) + eps)).collect();
            let total: T = snr.iter().copied().sum();
            if total > T::zero() && total.is_finite() {
                snr.into_iter().map(|v| v / total).collect()
            } else {
                vec![T::one() / T::from_usize_lossy(m); m]
            }
        }
    };
    Ok(ReferenceSpec { mode, weights })
}

/// Per-bin beamforming weights `f(b) ∈ C^M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerFilter<T> {
    filters: Vec<Vec<C<T>>>,
    /// Bins where the filter could not be formed; their filter is `u`.
    fallback_bins: Vec<usize>,
}

impl<T: Real> BeamformerFilter<T> {
    pub fn from_filters(filters: Vec<Vec<C<T>>>) -> Result<Self> {
        if filters.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidConfig("non-finite beamformer filter".into()));
        }
        Ok(Self { filters, fallback_bins: Vec::new() })
    }

    pub fn bin(&self, b: usize) -> &[C<T>] {
        &self.filters[b]
    }

    pub fn num_bins(&self) -> usize {
        self.filters.len()
    }

    pub fn fallback_bins(&self) -> &[usize] {
        &self.fallback_bins
    }

    pub fn mean_norm(&self) -> T {
        let s: T = self.filters.iter().map(|f| f.iter().map(|v| v.norm_sqr()).sum::<T>().sqrt()).sum();
        s / T::from_usize_lossy(self.filters.len().max(1))
    }
}

/// Trace magnitude below `TRACE_FLOOR * M` marks an unbeamformable bin.
pub const TRACE_FLOOR: f64 = 1e-10;

/// Computes the reference-selection MVDR filter per bin. `noise_load`
/// adds `noise_load * tr(Φ_N) / M` to the diagonal of `Φ_N`.
pub fn mvdr_filter<T: Real>(
    phi_s: &PsdMatrix<T>,
    phi_n: &PsdMatrix<T>,
    reference: &ReferenceSpec<T>,
    noise_load: T,
) -> Result<BeamformerFilter<T>> {
    let m = phi_s.channels();
    if phi_n.num_bins() != phi_s.num_bins() || phi_n.channels() != m || reference.weights.len() != m {
        return Err(Error::ShapeMismatch("MVDR inputs disagree on bins or channels".into()));
    }
    let u: Vec<C<T>> = reference.weights.iter().map(|&w| creal(w)).collect();
    let floor = T::lit(TRACE_FLOOR) * T::from_usize_lossy(m);
    let mut filters = Vec::with_capacity(phi_s.num_bins());
    let mut fallback = Vec::new();
    for b in 0..phi_s.num_bins() {
        let mut noise = phi_n.bin(b).clone();
        let load = noise_load * noise.trace().re / T::from_usize_lossy(m);
        noise.add_diagonal(load);
        let formed = hermitian_solve(&noise, phi_s.bin(b)).and_then(|num| {
            let tr = num.trace();
            if tr.norm() < floor || !tr.norm().is_finite() {
                return None;
            }
            let f: Vec<C<T>> = num.matvec(&u).into_iter().map(|v| v / tr).collect();
            f.iter().all(|v| v.re.is_finite() && v.im.is_finite()).then_some(f)
        });
        match formed {
            Some(f) => filters.push(f),
            None => {
                fallback.push(b);
                filters.push(u.clone());
            }
        }
    }
    Ok(BeamformerFilter { filters, fallback_bins: fallback })
}

/// `x(t, b) = f(b)^H d(t, b)`.
pub fn apply_beamformer<T: Real>(f: &BeamformerFilter<T>, d: &StftTensor<T>) -> Result<StftTensor<T>> {
    if f.num_bins() != d.bins() || f.filters.iter().any(|v| v.len() != d.channels()) {
        return Err(Error::ShapeMismatch("beamformer filter vs spectrogram".into()));
    }
    let mut x = d.zeros_like(1);
    for t in 0..d.frames() {
        for b in 0..d.bins() {
            let v = f.bin(b).iter().zip(d.cell(t, b)).fold(czero(), |acc, (w, v)| acc + w.conj() * v);
            x.set(t, b, 0, v);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvdrConfig {
    pub reference: ReferenceMode,
    /// Diagonal loading of `Φ_N`, relative to `tr(Φ_N) / M`.
    pub noise_load: f64,
    /// Divide each PSD by its mask mass `Σ_t w`.
    pub normalize_psd: bool,
}

impl Default for MvdrConfig {
    fn default() -> Self {
        Self { reference: ReferenceMode::default(), noise_load: 1e-6, normalize_psd: false }
    }
}

impl MvdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_load >= 0.0) || !self.noise_load.is_finite() {
            return Err(Error::InvalidConfig("mvdr: noise_load must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MvdrReport {
    pub fallback_bins: usize,
    pub reference_weights: Vec<f64>,
    pub filter_norm: f64,
}

/// Full beamforming stage: channel-average the masks, estimate both PSDs,
/// pick the reference, form and apply the filter.
pub fn mvdr_pipeline<T: Real>(
    d: &StftTensor<T>,
    w_speech: &MaskTensor<T>,
    w_noise: &MaskTensor<T>,
    cfg: &MvdrConfig,
) -> Result<(StftTensor<T>, MvdrReport)> {
    cfg.validate()?;
    w_speech.check_compatible(d)?;
    w_noise.check_compatible(d)?;
    let phi_s = estimate_psd(d, &average_masks(w_speech), PsdRole::Speech, cfg.normalize_psd)?;
    let phi_n = estimate_psd(d, &average_masks(w_noise), PsdRole::Noise, cfg.normalize_psd)?;
    let reference = select_reference(cfg.reference, &phi_s, &phi_n)?;
    let f = mvdr_filter(&phi_s, &phi_n, &reference, T::lit(cfg.noise_load))?;
    let x = apply_beamformer(&f, d)?;
    let report = MvdrReport {
        fallback_bins: f.fallback_bins().len(),
        reference_weights: reference.weights.iter().map(|w| w.as_f64()).collect(),
        filter_norm: f.mean_norm().as_f64(),
    };
    Ok((x, report))
}
