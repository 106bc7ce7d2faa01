//! Log-mel filterbank features with utterance-level mean/variance
//! normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::StftTensor;

pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl MelConfig {
    pub fn new(n_mels: usize, f_min: f64, f_max: f64, sample_rate: u32, fft_size: usize) -> Result<Self> {
        let cfg = Self { n_mels, f_min, f_max, sample_rate, fft_size };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 80 bands over the full band.
    pub fn standard(sample_rate: u32, fft_size: usize) -> Self {
        Self { n_mels: 80, f_min: 0.0, f_max: sample_rate as f64 / 2.0, sample_rate, fft_size }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be >= 1".into()));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "mel range [{}, {}] not within [0, {nyquist}]",
                self.f_min, self.f_max
            )));
        }
        if self.fft_size < 2 {
            return Err(Error::InvalidConfig("fft_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Triangular filters on the mel scale, `n_mels x (fft_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    weights: Vec<Vec<T>>,
    /// `n_mels + 2` edge frequencies in Hz; filter `k` rises from
    /// `edges[k]`, peaks at `edges[k + 1]` and falls to `edges[k + 2]`.
    edges: Vec<f64>,
}

impl<T: Real> MelFilterbank<T> {
    pub fn weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges[1..self.edges.len() - 1]
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }
}

pub fn mel_matrix<T: Real>(cfg: &MelConfig) -> Result<MelFilterbank<T>> {
    cfg.validate()?;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let mut edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    edges[0] = cfg.f_min;
    edges[cfg.n_mels + 1] = cfg.f_max;
    let bins = cfg.fft_size / 2 + 1;
    let weights = (0..cfg.n_mels)
        .map(|k| {
            let (l, c, r) = (edges[k], edges[k + 1], edges[k + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    T::lit(w)
                })
                .collect()
        })
        .collect();
    Ok(MelFilterbank { weights, edges })
}

/// Frame-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    values: Vec<T>,
    frames: usize,
    dims: usize,
    /// Per-dimension mean and standard deviation removed by [`mvn`].
    stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn new(values: Vec<T>, frames: usize, dims: usize) -> Result<Self> {
        if values.len() != frames * dims {
            return Err(Error::ShapeMismatch(format!("{} values for {frames}x{dims} features", values.len())));
        }
        Ok(Self { values, frames, dims, stats: None })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> T {
        self.values[t * self.dims + k]
    }

    pub fn stats(&self) -> Option<&(Vec<T>, Vec<T>)> {
        self.stats.as_ref()
    }

    /// Per-dimension mean and population variance over frames.
    pub fn moments(&self) -> (Vec<T>, Vec<T>) {
        let n = T::from_usize_lossy(self.frames);
        let mut mean = vec![T::zero(); self.dims];
        for t in 0..self.frames {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += self.get(t, k);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); self.dims];
        for t in 0..self.frames {
            for (k, v) in var.iter_mut().enumerate() {
                let d = self.get(t, k) - mean[k];
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }
}

/// `log(fb · |X(t, :)| + 1e-10)` for each frame of a single-channel STFT.
pub fn logmel<T: Real>(x: &StftTensor<T>, fb: &MelFilterbank<T>) -> Result<FeatureMatrix<T>> {
    if x.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("log-mel needs one channel, got {}", x.channels())));
    }
    if fb.weights.first().map(Vec::len) != Some(x.bins()) {
        return Err(Error::ShapeMismatch("filterbank bins vs spectrogram bins".into()));
    }
    let floor = T::lit(LOG_FLOOR);
    let mut values = Vec::with_capacity(x.frames() * fb.n_mels());
    let mut mag = vec![T::zero(); x.bins()];
    for t in 0..x.frames() {
        for (b, v) in mag.iter_mut().enumerate() {
            *v = x.get(t, b, 0).norm();
        }
        for row in &fb.weights {
            let e: T = row.iter().zip(&mag).map(|(&w, &a)| w * a).sum();
            values.push((e + floor).ln());
        }
    }
    FeatureMatrix::new(values, x.frames(), fb.n_mels())
}

/// Subtracts each dimension's mean and divides by its standard deviation
/// (floored at 1e-8).
pub fn mvn<T: Real>(f: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let (mean, var) = f.moments();
    let floor = T::lit(STD_FLOOR);
    let std: Vec<T> = var.iter().map(|v| v.sqrt().max(floor)).collect();
    let mut values = f.values.clone();
    for row in values.chunks_mut(f.dims) {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[k]) / std[k];
        }
    }
    FeatureMatrix { values, frames: f.frames, dims: f.dims, stats: Some((mean, std)) }
}
