//! Multichannel STFT analysis and weighted overlap-add synthesis.
//!
//! Spectra are onesided (`fft_size / 2 + 1` bins). Every window choice is
//! described by an analysis/synthesis pair whose product must overlap-add to
//! a constant at the configured hop:
//!
//! | window      | analysis  | synthesis   |
//! |-------------|-----------|-------------|
//! | `SqrtHann`  | sqrt-hann | sqrt-hann   |
//! | `Hann`      | hann      | rectangular |
//!
//! Synthesis divides by the accumulated analysis*synthesis window sum per
//! sample, so reconstruction is exact wherever that sum is nonzero.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::scalar::{czero, Real, C};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    SqrtHann,
    Hann,
}

impl Window {
    /// Periodic analysis window of length `n`.
    pub fn analysis(self, n: usize) -> Vec<f64> {
        let hann = periodic_hann(n);
        match self {
            Window::SqrtHann => hann.iter().map(|w| w.sqrt()).collect(),
            Window::Hann => hann,
        }
    }

    pub fn synthesis(self, n: usize) -> Vec<f64> {
        match self {
            Window::SqrtHann => periodic_hann(n).iter().map(|w| w.sqrt()).collect(),
            Window::Hann => vec![1.0; n],
        }
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// STFT analysis parameters. Construction rejects configurations that do
/// not satisfy the constant-overlap-add condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawStftConfig", into = "RawStftConfig")]
pub struct StftConfig {
    fft_size: usize,
    hop: usize,
    window: Window,
    center_pad: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStftConfig {
    fft_size: usize,
    hop: usize,
    window: Window,
    #[serde(default = "default_true")]
    center_pad: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<RawStftConfig> for StftConfig {
    type Error = Error;

    fn try_from(raw: RawStftConfig) -> Result<Self> {
        StftConfig::new(raw.fft_size, raw.hop, raw.window, raw.center_pad)
    }
}

impl From<StftConfig> for RawStftConfig {
    fn from(c: StftConfig) -> Self {
        RawStftConfig { fft_size: c.fft_size, hop: c.hop, window: c.window, center_pad: c.center_pad }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 512, hop: 128, window: Window::SqrtHann, center_pad: true }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, window: Window, center_pad: bool) -> Result<Self> {
        let unchecked = Self::unchecked(fft_size, hop, window, center_pad)?;
        if !validate_cola(&unchecked) {
            return Err(Error::InvalidStftConfig(format!(
                "{window:?} window with fft_size {fft_size} and hop {hop} violates COLA"
            )));
        }
        Ok(unchecked)
    }

    /// Checks only the structural invariants; COLA is left unchecked so the
    /// result can be handed to [`validate_cola`].
    pub fn unchecked(fft_size: usize, hop: usize, window: Window, center_pad: bool) -> Result<Self> {
        if fft_size < 2 || !fft_size.is_power_of_two() {
            return Err(Error::InvalidStftConfig(format!("fft_size {fft_size} is not a power of two ≥ 2")));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::InvalidStftConfig(format!("hop {hop} not in 1..={fft_size}")));
        }
        Ok(Self { fft_size, hop, window, center_pad })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn center_pad(&self) -> bool {
        self.center_pad
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len / self.hop
        } else if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }

    /// Centre frequency in Hz of bin `b`.
    pub fn bin_frequency(&self, b: usize, sample_rate: u32) -> f64 {
        b as f64 * sample_rate as f64 / self.fft_size as f64
    }
}

/// True iff the analysis*synthesis window product overlap-adds to a
/// constant (within 1e-10) at the configured hop.
pub fn validate_cola(cfg: &StftConfig) -> bool {
    let n = cfg.fft_size;
    let a = cfg.window.analysis(n);
    let s = cfg.window.synthesis(n);
    let prod: Vec<f64> = a.iter().zip(&s).map(|(x, y)| x * y).collect();
    let sums: Vec<f64> = (0..cfg.hop)
        .map(|i| (i..n).step_by(cfg.hop).map(|j| prod[j]).sum())
        .collect();
    let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lo > 0.0 && hi - lo <= 1e-10
}

/// Complex spectrogram indexed by (frame, bin, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct StftTensor<T> {
    data: Vec<C<T>>,
    frames: usize,
    bins: usize,
    channels: usize,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl<T: Real> StftTensor<T> {
    /// Wraps raw `(t, b, m)`-ordered data. `signal_len` defaults to the
    /// span covered by the frames.
    pub fn from_raw(
        data: Vec<C<T>>,
        frames: usize,
        channels: usize,
        config: StftConfig,
        sample_rate: u32,
        signal_len: Option<usize>,
    ) -> Result<Self> {
        let bins = config.num_bins();
        if frames == 0 {
            return Err(Error::NoFrames);
        }
        if channels == 0 || data.len() != frames * bins * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {frames} frames x {bins} bins x {channels} channels",
                data.len()
            )));
        }
        let span = (frames - 1) * config.hop
            + if config.center_pad { config.fft_size / 2 } else { config.fft_size };
        Ok(Self {
            data,
            frames,
            bins,
            channels,
            config,
            sample_rate,
            signal_len: signal_len.unwrap_or(span),
        })
    }

    pub fn zeros(frames: usize, channels: usize, config: StftConfig, sample_rate: u32) -> Result<Self> {
        let n = frames * config.num_bins() * channels;
        Self::from_raw(vec![czero(); n], frames, channels, config, sample_rate, None)
    }

    /// Same geometry as `self`, different channel count, zero data.
    pub fn zeros_like(&self, channels: usize) -> Self {
        Self {
            data: vec![czero(); self.frames * self.bins * channels],
            channels,
            ..self.clone()
        }
    }

    #[inline]
    fn idx(&self, t: usize, b: usize, m: usize) -> usize {
        (t * self.bins + b) * self.channels + m
    }

    #[inline]
    pub fn get(&self, t: usize, b: usize, m: usize) -> C<T> {
        self.data[self.idx(t, b, m)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, b: usize, m: usize, v: C<T>) {
        let i = self.idx(t, b, m);
        self.data[i] = v;
    }

    /// The `M` channel values at `(t, b)`.
    #[inline]
    pub fn cell(&self, t: usize, b: usize) -> &[C<T>] {
        let i = self.idx(t, b, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, t: usize, b: usize) -> &mut [C<T>] {
        let i = self.idx(t, b, 0);
        let m = self.channels;
        &mut self.data[i..i + m]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn data(&self) -> &[C<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C<T>] {
        &mut self.data
    }

    pub fn channel(&self, m: usize) -> Self {
        self.select_channels(&[m])
    }

    /// New tensor holding the listed channels in order. Panics on an
    /// out-of-range index.
    pub fn select_channels(&self, order: &[usize]) -> Self {
        let mut out = self.zeros_like(order.len());
        for t in 0..self.frames {
            for b in 0..self.bins {
                let src = self.cell(t, b);
                for (dst, &m) in out.cell_mut(t, b).iter_mut().zip(order) {
                    *dst = src[m];
                }
            }
        }
        out
    }

    pub fn scale(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = *v * alpha);
        out
    }

    pub fn power(&self) -> T {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> T {
        self.power() / T::from_usize_lossy(self.data.len())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.bins == other.bins && self.channels == other.channels
    }
}

struct Plans<T: Real> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

fn plans<T: Real>(n: usize) -> Plans<T> {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Forward STFT of every channel.
pub fn stft<T: Real>(audio: &AudioBuffer<T>, cfg: &StftConfig) -> Result<StftTensor<T>> {
    let len = audio.len();
    if len == 0 {
        return Err(Error::EmptyAudio);
    }
    if !cfg.center_pad && len < cfg.fft_size {
        return Err(Error::SignalTooShort { len, fft_size: cfg.fft_size });
    }
    let n = cfg.fft_size;
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let channels = audio.num_channels();
    let window: Vec<T> = cfg.window.analysis(n).into_iter().map(T::lit).collect();
    let fft = plans::<T>(n).forward;
    let pad = if cfg.center_pad { n / 2 } else { 0 };

    let mut out = StftTensor {
        data: vec![czero(); frames * bins * channels],
        frames,
        bins,
        channels,
        config: *cfg,
        sample_rate: audio.sample_rate(),
        signal_len: len,
    };
    let mut buf = vec![czero::<T>(); n];
    for m in 0..channels {
        let x = audio.channel(m);
        for t in 0..frames {
            let start = (t * cfg.hop) as isize - pad as isize;
            for (k, slot) in buf.iter_mut().enumerate() {
                let i = start + k as isize;
                let v = if cfg.center_pad {
                    x[reflect_index(i, len)]
                } else {
                    x[i as usize]
                };
                *slot = C::new(v * window[k], T::zero());
            }
            fft.process(&mut buf);
            for b in 0..bins {
                out.set(t, b, m, buf[b]);
            }
        }
    }
    Ok(out)
}

/// Inverse STFT by weighted overlap-add.
pub fn istft<T: Real>(spec: &StftTensor<T>) -> Result<AudioBuffer<T>> {
    if spec.frames == 0 {
        return Err(Error::NoFrames);
    }
    let cfg = spec.config;
    let n = cfg.fft_size;
    let hop = cfg.hop;
    let analysis = cfg.window.analysis(n);
    let synthesis_f64 = cfg.window.synthesis(n);
    let synthesis: Vec<T> = synthesis_f64.iter().map(|&w| T::lit(w)).collect();
    let total = (spec.frames - 1) * hop + n;
    let mut norm = vec![0.0f64; total];
    for t in 0..spec.frames {
        for k in 0..n {
            norm[t * hop + k] += analysis[k] * synthesis_f64[k];
        }
    }
    let ifft = plans::<T>(n).inverse;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let pad = if cfg.center_pad { n / 2 } else { 0 };

    let mut channels = Vec::with_capacity(spec.channels);
    let mut buf = vec![czero::<T>(); n];
    for m in 0..spec.channels {
        let mut acc = vec![T::zero(); total];
        for t in 0..spec.frames {
            for b in 0..spec.bins {
                buf[b] = spec.get(t, b, m);
            }
            for k in spec.bins..n {
                buf[k] = buf[n - k].conj();
            }
            // DC and Nyquist must be real for a real signal.
            buf[0].im = T::zero();
            buf[n / 2].im = T::zero();
            ifft.process(&mut buf);
            for k in 0..n {
                acc[t * hop + k] += buf[k].re * inv_n * synthesis[k];
            }
        }
        let mut out = vec![T::zero(); spec.signal_len];
        for (i, o) in out.iter_mut().enumerate() {
            let j = i + pad;
            if j < total && norm[j] > 1e-10 {
                *o = acc[j] / T::lit(norm[j]);
            }
        }
        channels.push(out);
    }
    AudioBuffer::new(channels, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cola_known_pairs() {
        let c = StftConfig::unchecked(512, 128, Window::SqrtHann, true).unwrap();
        assert!(validate_cola(&c));
        let c = StftConfig::unchecked(512, 512, Window::SqrtHann, true).unwrap();
        assert!(!validate_cola(&c));
        let c = StftConfig::unchecked(256, 128, Window::Hann, true).unwrap();
        assert!(validate_cola(&c));
        assert!(StftConfig::new(512, 512, Window::SqrtHann, true).is_err());
        assert!(StftConfig::unchecked(500, 100, Window::Hann, true).is_err());
        assert!(StftConfig::unchecked(512, 0, Window::Hann, true).is_err());
    }

    #[test]
    fn cola_sum_for_hann_half_overlap_is_one() {
        // hann(n) + hann(n + N/2) = 1 for the periodic window
        let w = Window::Hann.analysis(64);
        for i in 0..32 {
            assert!((w[i] + w[i + 32] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn impulse_frame_is_window_dft() {
        let cfg = StftConfig::new(16, 4, Window::Hann, false).unwrap();
        let mut x = vec![0.0f64; 16];
        x[0] = 1.0;
        let spec = stft(&AudioBuffer::mono(x, 8000).unwrap(), &cfg).unwrap();
        let w = Window::Hann.analysis(16);
        for b in 0..cfg.num_bins() {
            // only sample 0 is nonzero so the DFT is w[0] at every bin
            let v = spec.get(0, b, 0);
            assert!((v.re - w[0]).abs() < 1e-15 && v.im.abs() < 1e-15);
        }
        // shifted impulse at n0: X_b = w[n0] e^{-2πi b n0 / N}
        let mut x = vec![0.0f64; 16];
        x[5] = 1.0;
        let spec = stft(&AudioBuffer::mono(x, 8000).unwrap(), &cfg).unwrap();
        for b in 0..cfg.num_bins() {
            let ang = -2.0 * std::f64::consts::PI * (b * 5) as f64 / 16.0;
            let e = C::new(w[5] * ang.cos(), w[5] * ang.sin());
            assert!((spec.get(0, b, 0) - e).norm() < 1e-14);
        }
    }

    #[test]
    fn duplicate_channels_stay_identical() {
        let x: Vec<f64> = (0..1000).map(|i| (i * 37 % 101) as f64 / 50.0 - 1.0).collect();
        let a = AudioBuffer::new(vec![x.clone(), x], 16000).unwrap();
        let s = stft(&a, &StftConfig::default()).unwrap();
        for t in 0..s.frames() {
            for b in 0..s.bins() {
                assert_eq!(s.get(t, b, 0), s.get(t, b, 1));
            }
        }
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        let x: Vec<f64> = (0..700).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let s = stft(&AudioBuffer::mono(x, 16000).unwrap(), &StftConfig::default()).unwrap();
        for t in 0..s.frames() {
            assert!(s.get(t, 0, 0).im.abs() < 1e-12);
            assert!(s.get(t, 256, 0).im.abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let cfg = StftConfig::new(64, 16, Window::SqrtHann, false).unwrap();
        let short = AudioBuffer::mono(vec![0.0f64; 10], 8000).unwrap();
        assert!(matches!(stft(&short, &cfg), Err(Error::SignalTooShort { .. })));
        let empty = AudioBuffer::<f64>::mono(vec![], 8000).unwrap();
        assert!(matches!(stft(&empty, &StftConfig::default()), Err(Error::EmptyAudio)));
    }

    #[test]
    fn zero_tensor_gives_zero_audio() {
        let s = StftTensor::<f64>::zeros(10, 2, StftConfig::default(), 16000).unwrap();
        let a = istft(&s).unwrap();
        assert!(a.channels().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_index_bounces() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }
}
