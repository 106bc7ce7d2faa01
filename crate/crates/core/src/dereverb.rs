//! Weighted prediction error (WPE) dereverberation.
//!
//! Per frequency bin, the late reverberation of every channel is predicted
//! from a window of `L` past frames of all channels starting `Δ` frames
//! back, and subtracted:
//!
//! ```text
//! d(t, b) = y(t, b) - G(b)^H ỹ(t - Δ, b)
//! ```
//!
//! `G(b)` solves the variance-weighted normal equations `R(b) G(b) = P(b)`
//! with `R = Σ_t ỹ ỹ^H / λ` and `P = Σ_t ỹ y^H / λ`. The time-varying
//! power `λ(t, b)` comes either from the previous estimate of `d`
//! (iterative WPE) or from a mask applied to the observation (one-shot).
//!
//! The stacked vector `ỹ(t - Δ, b)` has length `M * L` with channel-major,
//! tap-minor layout: element `m * L + l` is `y(t - Δ - l, b, m)`, and frames
//! before the start of the utterance are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_solve, CMatrix};
use crate::mask::MaskTensor;
use crate::scalar::{czero, Real, C};
use crate::stft::StftTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpeConfig {
    /// Taps per channel, `L`.
    pub filter_order: usize,
    /// Frames skipped before the prediction window, `Δ`.
    pub prediction_delay: usize,
    pub iterations: usize,
    /// Floor on `λ`, relative to the mean power of the observation.
    pub variance_floor: f64,
    /// Diagonal loading of `R`, relative to `tr(R) / (M L)`.
    pub diag_load: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self { filter_order: 5, prediction_delay: 3, iterations: 3, variance_floor: 1e-10, diag_load: 1e-6 }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("wpe: {msg}")));
        if self.filter_order == 0 {
            return bad("filter_order must be >= 1");
        }
        if self.prediction_delay == 0 {
            return bad("prediction_delay must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.variance_floor > 0.0) || !self.variance_floor.is_finite() {
            return bad("variance_floor must be > 0");
        }
        if !(self.diag_load >= 0.0) || !self.diag_load.is_finite() {
            return bad("diag_load must be >= 0");
        }
        Ok(())
    }

    /// Minimum number of frames an utterance needs.
    pub fn min_frames(&self) -> usize {
        self.prediction_delay + self.filter_order + 1
    }
}

/// Delayed observation stacks `ỹ(t - Δ, b)` for every `(t, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTensor<T> {
    data: Vec<C<T>>,
    frames: usize,
    bins: usize,
    channels: usize,
    taps: usize,
}

impl<T: Real> StackedTensor<T> {
    pub fn stack_len(&self) -> usize {
        self.channels * self.taps
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// The `M * L` stacked vector at `(t, b)`.
    pub fn stack(&self, t: usize, b: usize) -> &[C<T>] {
        let n = self.stack_len();
        let i = (t * self.bins + b) * n;
        &self.data[i..i + n]
    }
}

pub fn stack_delayed<T: Real>(y: &StftTensor<T>, delay: usize, taps: usize) -> Result<StackedTensor<T>> {
    let (frames, bins, channels) = (y.frames(), y.bins(), y.channels());
    if frames <= delay {
        return Err(Error::UtteranceTooShort { frames, required: delay });
    }
    let n = channels * taps;
    let mut data = vec![czero(); frames * bins * n];
    for t in 0..frames {
        for b in 0..bins {
            let base = (t * bins + b) * n;
            for l in 0..taps {
                let Some(src) = t.checked_sub(delay + l) else { break };
                for (m, &v) in y.cell(src, b).iter().enumerate() {
                    data[base + m * taps + l] = v;
                }
            }
        }
    }
    Ok(StackedTensor { data, frames, bins, channels, taps })
}

/// Channel-independent power `λ(t, b)`, floored.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap<T> {
    values: Vec<T>,
    frames: usize,
    bins: usize,
}

impl<T: Real> VarianceMap<T> {
    #[inline]
    pub fn get(&self, t: usize, b: usize) -> T {
        self.values[t * self.bins + b]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }
}

/// `λ(t, b) = max(mean_m |d(t, b, m)|², floor)`.
pub fn variance_from_signal<T: Real>(d: &StftTensor<T>, floor: T) -> VarianceMap<T> {
    let inv = T::one() / T::from_usize_lossy(d.channels());
    let mut values = Vec::with_capacity(d.frames() * d.bins());
    for t in 0..d.frames() {
        for b in 0..d.bins() {
            let p: T = d.cell(t, b).iter().map(|v| v.norm_sqr()).sum();
            values.push((p * inv).max(floor));
        }
    }
    VarianceMap { values, frames: d.frames(), bins: d.bins() }
}

/// `λ(t, b) = max(mean_m w(t, b, m) |y(t, b, m)|², floor)`.
pub fn variance_from_mask<T: Real>(w: &MaskTensor<T>, y: &StftTensor<T>, floor: T) -> Result<VarianceMap<T>> {
    w.check_compatible(y)?;
    let inv = T::one() / T::from_usize_lossy(y.channels());
    let mut values = Vec::with_capacity(y.frames() * y.bins());
    for t in 0..y.frames() {
        for b in 0..y.bins() {
            let p: T = y.cell(t, b).iter().enumerate().map(|(m, v)| w.at(t, b, m) * v.norm_sqr()).sum();
            values.push((p * inv).max(floor));
        }
    }
    Ok(VarianceMap { values, frames: y.frames(), bins: y.bins() })
}

/// Per-bin prediction filters `G(b)` of shape `(M L) x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFilter<T> {
    filters: Vec<CMatrix<T>>,
    channels: usize,
    taps: usize,
    /// Bins whose loaded correlation matrix could not be factored; their
    /// filter is zero.
    degenerate_bins: Vec<usize>,
}

impl<T: Real> PredictionFilter<T> {
    pub fn zeros(bins: usize, channels: usize, taps: usize) -> Self {
        Self {
            filters: vec![CMatrix::zeros(channels * taps, channels); bins],
            channels,
            taps,
            degenerate_bins: Vec::new(),
        }
    }

    pub fn from_filters(filters: Vec<CMatrix<T>>, channels: usize, taps: usize) -> Result<Self> {
        for g in &filters {
            if g.rows() != channels * taps || g.cols() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "prediction filter {}x{} for {channels} channels x {taps} taps",
                    g.rows(),
                    g.cols()
                )));
            }
            if !g.is_finite() {
                return Err(Error::InvalidConfig("non-finite prediction filter".into()));
            }
        }
        Ok(Self { filters, channels, taps, degenerate_bins: Vec::new() })
    }

    pub fn bin(&self, b: usize) -> &CMatrix<T> {
        &self.filters[b]
    }

    pub fn bins(&self) -> usize {
        self.filters.len()
    }

    pub fn degenerate_bins(&self) -> &[usize] {
        &self.degenerate_bins
    }

    /// Mean Frobenius norm over bins.
    pub fn mean_norm(&self) -> T {
        let s: T = self.filters.iter().map(CMatrix::frobenius_norm).sum();
        s / T::from_usize_lossy(self.filters.len().max(1))
    }
}

/// Solves `(R + ε_R tr(R) / (M L) I) G = P` per bin. Bins where the solve
/// fails fall back to `G = 0` and are listed in `degenerate_bins`.
pub fn wpe_normal_equations<T: Real>(
    stacked: &StackedTensor<T>,
    y: &StftTensor<T>,
    lambda: &VarianceMap<T>,
    diag_load: T,
) -> Result<PredictionFilter<T>> {
    if stacked.frames != y.frames() || stacked.bins != y.bins() || stacked.channels != y.channels() {
        return Err(Error::ShapeMismatch("stacked tensor vs observation".into()));
    }
    if lambda.frames != y.frames() || lambda.bins != y.bins() {
        return Err(Error::ShapeMismatch("variance map vs observation".into()));
    }
    let (frames, bins, channels) = (y.frames(), y.bins(), y.channels());
    let n = stacked.stack_len();
    let mut filters = Vec::with_capacity(bins);
    let mut degenerate = Vec::new();
    for b in 0..bins {
        let mut r = CMatrix::zeros(n, n);
        let mut p = CMatrix::zeros(n, channels);
        for t in 0..frames {
            let inv = T::one() / lambda.get(t, b);
            let s = stacked.stack(t, b);
            r.add_outer(s, inv);
            let yt = y.cell(t, b);
            for i in 0..n {
                let si = s[i] * inv;
                for (m, ym) in yt.iter().enumerate() {
                    p[(i, m)] += si * ym.conj();
                }
            }
        }
        r.hermitianize();
        let load = diag_load * r.trace().re / T::from_usize_lossy(n);
        r.add_diagonal(load);
        match hermitian_solve(&r, &p) {
            Some(g) => filters.push(g),
            None => {
                degenerate.push(b);
                filters.push(CMatrix::zeros(n, channels));
            }
        }
    }
    Ok(PredictionFilter { filters, channels, taps: stacked.taps, degenerate_bins: degenerate })
}

/// `d(t, b) = y(t, b) - G(b)^H ỹ(t - Δ, b)` for every channel.
pub fn apply_prediction_filter<T: Real>(y: &StftTensor<T>, g: &PredictionFilter<T>, delay: usize) -> Result<StftTensor<T>> {
    if g.bins() != y.bins() || g.channels != y.channels() {
        return Err(Error::ShapeMismatch(format!(
            "filter for {} bins x {} channels vs observation {} x {}",
            g.bins(),
            g.channels,
            y.bins(),
            y.channels()
        )));
    }
    let taps = g.taps;
    let channels = y.channels();
    let mut d = y.clone();
    for t in 0..y.frames() {
        for b in 0..y.bins() {
            let gb = g.bin(b);
            let mut pred = vec![czero::<T>(); channels];
            for l in 0..taps {
                let Some(src) = t.checked_sub(delay + l) else { break };
                for (m_in, &v) in y.cell(src, b).iter().enumerate() {
                    let row = gb.row(m_in * taps + l);
                    for (acc, gk) in pred.iter_mut().zip(row) {
                        *acc += gk.conj() * v;
                    }
                }
            }
            for (dm, p) in d.cell_mut(t, b).iter_mut().zip(&pred) {
                *dm -= *p;
            }
        }
    }
    Ok(d)
}

/// Diagnostics of one WPE run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WpeReport {
    pub iterations: usize,
    /// Degenerate (pass-through) bins in the final iteration.
    pub degenerate_bins: usize,
    /// Mean Frobenius norm of `G(b)` in the final iteration.
    pub filter_norm: f64,
}

/// WPE whose first-iteration variance comes from `mask` (or from the
/// observation itself when `mask` is `None`); later iterations use the
/// previous estimate.
pub fn wpe_run<T: Real>(
    y: &StftTensor<T>,
    mask: Option<&MaskTensor<T>>,
    cfg: &WpeConfig,
    iterations: usize,
) -> Result<(StftTensor<T>, WpeReport)> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("wpe: iterations must be >= 1".into()));
    }
    if y.frames() < cfg.min_frames() {
        return Err(Error::UtteranceTooShort { frames: y.frames(), required: cfg.min_frames() - 1 });
    }
    let floor = T::lit(cfg.variance_floor) * y.mean_power() + T::min_positive_value();
    let load = T::lit(cfg.diag_load);
    let stacked = stack_delayed(y, cfg.prediction_delay, cfg.filter_order)?;
    let mut lambda = match mask {
        Some(w) => variance_from_mask(w, y, floor)?,
        None => variance_from_signal(y, floor),
    };
    let mut report = WpeReport { iterations, ..Default::default() };
    let mut d = y.clone();
    for it in 0..iterations {
        if it > 0 {
            lambda = variance_from_signal(&d, floor);
        }
        let g = wpe_normal_equations(&stacked, y, &lambda, load)?;
        d = apply_prediction_filter(y, &g, cfg.prediction_delay)?;
        report.degenerate_bins = g.degenerate_bins().len();
        report.filter_norm = g.mean_norm().as_f64();
    }
    Ok((d, report))
}

/// Conventional WPE: `cfg.iterations` rounds, the first using the
/// observation's own power.
pub fn wpe_iterative<T: Real>(y: &StftTensor<T>, cfg: &WpeConfig) -> Result<StftTensor<T>> {
    wpe_run(y, None, cfg, cfg.iterations).map(|(d, _)| d)
}

/// Single pass with the desired power taken from `mask * |y|²`.
pub fn wpe_oneshot<T: Real>(y: &StftTensor<T>, mask: &MaskTensor<T>, cfg: &WpeConfig) -> Result<StftTensor<T>> {
    wpe_run(y, Some(mask), cfg, 1).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::{StftConfig, Window};

    fn small_cfg() -> StftConfig {
        StftConfig::new(16, 4, Window::SqrtHann, true).unwrap()
    }

    fn tensor(frames: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> C<f64>) -> StftTensor<f64> {
        let mut s = StftTensor::zeros(frames, channels, small_cfg(), 8000).unwrap();
        for t in 0..frames {
            for b in 0..s.bins() {
                for m in 0..channels {
                    s.set(t, b, m, f(t, b, m));
                }
            }
        }
        s
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn stack_single_tap_is_previous_frame() {
        let y = tensor(6, 2, |t, b, m| C::new(t as f64, (b * 10 + m) as f64));
        let s = stack_delayed(&y, 1, 1).unwrap();
        for t in 1..6 {
            for b in 0..y.bins() {
                assert_eq!(s.stack(t, b), y.cell(t - 1, b));
            }
        }
        assert!(s.stack(0, 0).iter().all(|v| *v == C::new(0.0, 0.0)));
    }

    #[test]
    fn stack_boundary_fill() {
        let y = tensor(10, 1, |t, _, _| C::new(t as f64 + 1.0, 0.0));
        let s = stack_delayed(&y, 3, 2).unwrap();
        assert_eq!(s.stack(4, 0), &[C::new(2.0, 0.0), C::new(1.0, 0.0)]);
        assert_eq!(s.stack(3, 0), &[C::new(1.0, 0.0), C::new(0.0, 0.0)]);
        assert!(matches!(stack_delayed(&y, 10, 2), Err(Error::UtteranceTooShort { .. })));
    }

    #[test]
    fn variance_cases() {
        let d = tensor(3, 1, |_, _, _| C::new(0.0, 2.0));
        let v = variance_from_signal(&d, 1e-10);
        assert!(v.values().iter().all(|&x| x == 4.0));
        let z = tensor(3, 2, |_, _, _| C::new(0.0, 0.0));
        assert!(variance_from_signal(&z, 0.5).values().iter().all(|&x| x == 0.5));
        let two = tensor(1, 2, |_, _, m| C::new(if m == 0 { 1.0 } else { 3f64.sqrt() }, 0.0));
        assert!((variance_from_signal(&two, 1e-10).get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn variance_mask_identities() {
        let mut r = lcg(3);
        let y = tensor(5, 2, |_, _, _| C::new(r(), r()));
        let ones = MaskTensor::constant_like(1.0, &y).unwrap();
        assert_eq!(variance_from_mask(&ones, &y, 1e-9).unwrap(), variance_from_signal(&y, 1e-9));
        let zeros = MaskTensor::constant_like(0.0, &y).unwrap();
        assert!(variance_from_mask(&zeros, &y, 0.25).unwrap().values().iter().all(|&x| x == 0.25));
        let short = MaskTensor::constant(1.0, 4, 9, 2).unwrap();
        assert!(variance_from_mask(&short, &y, 0.1).is_err());
    }

    #[test]
    fn zero_filter_is_identity_bit_exact() {
        let mut r = lcg(11);
        let y = tensor(12, 3, |_, _, _| C::new(r(), -r()));
        let g = PredictionFilter::zeros(y.bins(), 3, 4);
        let d = apply_prediction_filter(&y, &g, 2).unwrap();
        for (a, b) in d.data().iter().zip(y.data()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn identity_correlation_gives_g_equal_p() {
        // Single channel, L = 1, Δ = 1: the stacks are y(t-1). Choose y so
        // that Σ_t |y(t-1)|² = 1 per bin with λ ≡ 1, making R = 1.
        let frames = 4;
        let y = tensor(frames, 1, |t, b, _| {
            if t == 2 {
                C::new(0.6, 0.8)
            } else if t == 3 {
                C::new(b as f64 + 0.5, -1.0)
            } else {
                C::new(0.0, 0.0)
            }
        });
        let s = stack_delayed(&y, 1, 1).unwrap();
        let lambda = VarianceMap { values: vec![1.0; frames * y.bins()], frames, bins: y.bins() };
        let g = wpe_normal_equations(&s, &y, &lambda, 0.0).unwrap();
        for b in 0..y.bins() {
            // P = Σ_t ỹ(t) y(t)^* = y(2) y(3)^*
            let p = y.get(2, b, 0) * y.get(3, b, 0).conj();
            assert!((g.bin(b)[(0, 0)] - p).norm() < 1e-14);
        }
    }

    #[test]
    fn recovers_generating_coefficient_and_cancels() {
        // y(t) = c y(t - Δ) beyond the seed frames.
        let (delay, frames) = (3, 30);
        let c = C::new(0.7, -0.4);
        let mut r = lcg(5);
        let seed: Vec<C<f64>> = (0..delay * 9).map(|_| C::new(r(), r())).collect();
        let mut y = tensor(frames, 1, |_, _, _| C::new(0.0, 0.0));
        for b in 0..9 {
            for t in 0..frames {
                let v = if t < delay { seed[t * 9 + b] } else { c * y.get(t - delay, b, 0) };
                y.set(t, b, 0, v);
            }
        }
        let s = stack_delayed(&y, delay, 1).unwrap();
        let lambda = VarianceMap { values: vec![1.0; frames * 9], frames, bins: 9 };
        let g = wpe_normal_equations(&s, &y, &lambda, 0.0).unwrap();
        for b in 0..9 {
            // d = y - G^H ỹ, so G^H = c means G = c*
            assert!((g.bin(b)[(0, 0)] - c.conj()).norm() < 1e-10);
        }
        let d = apply_prediction_filter(&y, &g, delay).unwrap();
        for t in (delay + 1)..frames {
            for b in 0..9 {
                assert!(d.get(t, b, 0).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn degenerate_bins_fall_back_to_zero() {
        let y = tensor(12, 2, |t, b, _| if b == 0 { C::new(0.0, 0.0) } else { C::new((t * b) as f64 % 3.0, 1.0) });
        let s = stack_delayed(&y, 1, 2).unwrap();
        let lambda = variance_from_signal(&y, 1e-10);
        let g = wpe_normal_equations(&s, &y, &lambda, 1e-6).unwrap();
        assert_eq!(g.degenerate_bins(), &[0]);
        assert_eq!(g.bin(0).frobenius_norm(), 0.0);
    }

    #[test]
    fn oneshot_with_unit_mask_equals_single_iteration() {
        let mut r = lcg(17);
        let y = tensor(40, 2, |_, _, _| C::new(r(), r()));
        let cfg = WpeConfig { iterations: 1, ..Default::default() };
        let a = wpe_iterative(&y, &cfg).unwrap();
        let b = wpe_oneshot(&y, &MaskTensor::constant_like(1.0, &y).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sad_mask_matches_expanded_tf_mask() {
        let mut r = lcg(23);
        let y = tensor(30, 2, |_, _, _| C::new(r(), r()));
        let vals: Vec<f64> = (0..60).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let sad = MaskTensor::sad(vals, 30, y.bins(), 2).unwrap();
        let cfg = WpeConfig::default();
        assert_eq!(wpe_oneshot(&y, &sad, &cfg).unwrap(), wpe_oneshot(&y, &sad.to_tf(), &cfg).unwrap());
    }

    #[test]
    fn short_utterance_and_bad_config() {
        let y = tensor(8, 1, |_, _, _| C::new(1.0, 0.0));
        assert!(matches!(wpe_iterative(&y, &WpeConfig::default()), Err(Error::UtteranceTooShort { .. })));
        let bad = WpeConfig { filter_order: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = WpeConfig { variance_floor: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
