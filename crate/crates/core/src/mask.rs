//! Time-frequency and speech-activity masks, and the providers that
//! produce them: oracle ideal ratio masks, an energy-based activity
//! detector, constants, and a loadable per-frame feed-forward network.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stft::StftTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// One value per (frame, bin, channel).
    Tf,
    /// One value per (frame, channel), broadcast over bins.
    Sad,
}

/// Mask values in `[0, 1]`. Storage is `(t, b, m)` for TF masks and
/// `(t, m)` for SAD masks. A single-channel mask broadcasts over channels
/// when applied to multichannel data.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor<T> {
    values: Vec<T>,
    frames: usize,
    bins: usize,
    channels: usize,
    kind: MaskKind,
}

fn check_range<T: Real>(values: &[T]) -> Result<()> {
    match values.iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
        Some(index) => Err(Error::MaskOutOfRange { index, value: values[index].as_f64() }),
        None => Ok(()),
    }
}

impl<T: Real> MaskTensor<T> {
    pub fn tf(values: Vec<T>, frames: usize, bins: usize, channels: usize) -> Result<Self> {
        if values.len() != frames * bins * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} mask values for {frames}x{bins}x{channels}",
                values.len()
            )));
        }
        check_range(&values)?;
        Ok(Self { values, frames, bins, channels, kind: MaskKind::Tf })
    }

    /// Time-only mask; `bins` is the bin count it stands for when expanded.
    pub fn sad(values: Vec<T>, frames: usize, bins: usize, channels: usize) -> Result<Self> {
        if values.len() != frames * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} SAD values for {frames} frames x {channels} channels",
                values.len()
            )));
        }
        check_range(&values)?;
        Ok(Self { values, frames, bins, channels, kind: MaskKind::Sad })
    }

    pub fn constant(value: T, frames: usize, bins: usize, channels: usize) -> Result<Self> {
        Self::tf(vec![value; frames * bins * channels], frames, bins, channels)
    }

    /// Constant mask matching the geometry of `spec`.
    pub fn constant_like(value: T, spec: &StftTensor<T>) -> Result<Self> {
        Self::constant(value, spec.frames(), spec.bins(), spec.channels())
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

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Value at `(t, b, m)` with bin broadcast for SAD masks and channel
    /// broadcast for single-channel masks.
    #[inline]
    pub fn at(&self, t: usize, b: usize, m: usize) -> T {
        let m = if self.channels == 1 { 0 } else { m };
        match self.kind {
            MaskKind::Tf => self.values[(t * self.bins + b) * self.channels + m],
            MaskKind::Sad => self.values[t * self.channels + m],
        }
    }

    /// Materialises a SAD mask as an explicit TF mask.
    pub fn to_tf(&self) -> Self {
        if self.kind == MaskKind::Tf {
            return self.clone();
        }
        let mut values = Vec::with_capacity(self.frames * self.bins * self.channels);
        for t in 0..self.frames {
            for b in 0..self.bins {
                for m in 0..self.channels {
                    values.push(self.at(t, b, m));
                }
            }
        }
        Self { values, kind: MaskKind::Tf, ..*self }
    }

    /// Collapses a TF mask to a SAD mask by averaging over bins.
    pub fn to_sad(&self) -> Self {
        if self.kind == MaskKind::Sad {
            return self.clone();
        }
        let n = T::from_usize_lossy(self.bins);
        let mut values = Vec::with_capacity(self.frames * self.channels);
        for t in 0..self.frames {
            for m in 0..self.channels {
                let s: T = (0..self.bins).map(|b| self.at(t, b, m)).sum();
                values.push((s / n).min(T::one()));
            }
        }
        Self { values, kind: MaskKind::Sad, ..*self }
    }

    /// Per-(t, b) arithmetic mean over channels.
    pub fn average_channels(&self) -> Self {
        let n = T::from_usize_lossy(self.channels);
        let cells = self.values.len() / self.channels;
        let values = (0..cells)
            .map(|i| {
                let s: T = self.values[i * self.channels..(i + 1) * self.channels].iter().copied().sum();
                (s / n).min(T::one())
            })
            .collect();
        Self { values, channels: 1, ..*self }
    }

    pub fn select_channels(&self, order: &[usize]) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let cells = self.values.len() / self.channels;
        let mut values = Vec::with_capacity(cells * order.len());
        for i in 0..cells {
            for &m in order {
                values.push(self.values[i * self.channels + m]);
            }
        }
        Self { values, channels: order.len(), ..*self }
    }

    /// Checks that the mask can be applied to `spec`.
    pub fn check_compatible(&self, spec: &StftTensor<T>) -> Result<()> {
        let channels_ok = self.channels == spec.channels() || self.channels == 1;
        if self.frames != spec.frames() || self.bins != spec.bins() || !channels_ok {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{}x{} vs spectrogram {}x{}x{}",
                self.frames,
                self.bins,
                self.channels,
                spec.frames(),
                spec.bins(),
                spec.channels()
            )));
        }
        Ok(())
    }
}

/// Output nonlinearity of a mask network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `min(max(x, 0), 1)`
    ClippedRelu1,
    Sigmoid,
}

pub fn clamp_activation<T: Real>(x: T, kind: Activation) -> T {
    match kind {
        Activation::ClippedRelu1 => x.max(T::zero()).min(T::one()),
        Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
    }
}

/// Ideal ratio mask `|r|^2 / (|r|^2 + |i|^2 + eps)` with `eps` equal to
/// 1e-10 times the mean power of reference plus interference.
pub fn oracle_irm<T: Real>(reference: &StftTensor<T>, interference: &StftTensor<T>) -> Result<MaskTensor<T>> {
    if !reference.same_shape(interference) {
        return Err(Error::ShapeMismatch("oracle reference vs interference".into()));
    }
    let n = reference.data().len();
    let mean = (reference.power() + interference.power()) / T::from_usize_lossy(n);
    let eps = T::lit(1e-10) * mean + T::min_positive_value();
    let values = reference
        .data()
        .iter()
        .zip(interference.data())
        .map(|(r, i)| {
            let pr = r.norm_sqr();
            (pr / (pr + i.norm_sqr() + eps)).min(T::one())
        })
        .collect();
    MaskTensor::tf(values, reference.frames(), reference.bins(), reference.channels())
}

const SAD_SLOPE_DB: f64 = 3.0;

/// Time-only activity mask from per-frame log-energy relative to the
/// channel's median. Frames at or above `median + threshold_db` get 1;
/// below, the mask falls off as `2 * sigmoid((E - threshold) / 3 dB)`.
pub fn energy_sad<T: Real>(y: &StftTensor<T>, threshold_db: f64) -> Result<MaskTensor<T>> {
    let (frames, channels) = (y.frames(), y.channels());
    let mut energy_db = vec![0.0f64; frames * channels];
    for t in 0..frames {
        for m in 0..channels {
            let e: f64 = (0..y.bins()).map(|b| y.get(t, b, m).norm_sqr().as_f64()).sum();
            energy_db[t * channels + m] = 10.0 * (e + 1e-300).log10();
        }
    }
    let mut values = vec![T::zero(); frames * channels];
    for m in 0..channels {
        let mut col: Vec<f64> = (0..frames).map(|t| energy_db[t * channels + m]).collect();
        col.sort_by(f64::total_cmp);
        let median = if frames % 2 == 1 {
            col[frames / 2]
        } else {
            0.5 * (col[frames / 2 - 1] + col[frames / 2])
        };
        let threshold = median + threshold_db;
        for t in 0..frames {
            let e = energy_db[t * channels + m];
            let v = if e >= threshold {
                1.0
            } else {
                2.0 / (1.0 + (-(e - threshold) / SAD_SLOPE_DB).exp())
            };
            values[t * channels + m] = T::lit(v.clamp(0.0, 1.0));
        }
    }
    MaskTensor::sad(values, frames, y.bins(), channels)
}

/// Weights of a per-frame feed-forward mask network. Hidden layers use
/// `tanh`; the last layer uses `activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    layers: Vec<DenseLayer<T>>,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::InvalidWeights(format!(
                "layer {inputs}->{outputs} has {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights("non-finite parameter".into()));
        }
        Ok(Self { inputs, outputs, weights, bias })
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).fold(self.bias[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }
}

pub const MLP_SCHEMA: &str = "farfield-mlp";
pub const MLP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    schema: String,
    version: u32,
    activation: Activation,
    layers: Vec<MlpFileLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFileLayer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl<T: Real> MlpWeights<T> {
    pub fn new(layers: Vec<DenseLayer<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidWeights("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::InvalidWeights(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h.into_iter().map(|v| clamp_activation(v, self.activation)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text).map_err(|e| Error::InvalidWeights(e.to_string()))?;
        if file.schema != MLP_SCHEMA || file.version != MLP_SCHEMA_VERSION {
            return Err(Error::InvalidWeights(format!(
                "unsupported schema {} v{}",
                file.schema, file.version
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                DenseLayer::new(
                    l.inputs,
                    l.outputs,
                    l.weights.into_iter().map(T::lit).collect(),
                    l.bias.into_iter().map(T::lit).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, file.activation)
    }

    pub fn to_json(&self) -> String {
        let file = MlpFile {
            schema: MLP_SCHEMA.into(),
            version: MLP_SCHEMA_VERSION,
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| MlpFileLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|v| v.as_f64()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }
}

/// Runs the network on each channel's per-frame magnitude spectrum. An
/// output of `B` values gives a TF mask, a single output a SAD mask.
pub fn mlp_infer<T: Real>(weights: &MlpWeights<T>, y: &StftTensor<T>) -> Result<MaskTensor<T>> {
    let bins = y.bins();
    if weights.input_size() != bins {
        return Err(Error::InvalidWeights(format!(
            "network takes {} inputs, spectrogram has {bins} bins",
            weights.input_size()
        )));
    }
    let (frames, channels) = (y.frames(), y.channels());
    let out = weights.output_size();
    if out != bins && out != 1 {
        return Err(Error::InvalidWeights(format!("network emits {out} values, need {bins} or 1")));
    }
    let mut values = vec![T::zero(); frames * out * channels];
    let mut input = vec![T::zero(); bins];
    for t in 0..frames {
        for m in 0..channels {
            for (b, x) in input.iter_mut().enumerate() {
                *x = y.get(t, b, m).norm();
            }
            for (k, v) in weights.forward(&input).into_iter().enumerate() {
                values[(t * out + k) * channels + m] = v;
            }
        }
    }
    if out == 1 {
        MaskTensor::sad(values, frames, bins, channels)
    } else {
        MaskTensor::tf(values, frames, bins, channels)
    }
}

/// Mask source, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskProvider {
    OracleIrm,
    Constant { value: f64 },
    EnergySad { threshold_db: f64 },
    Mlp { weights_path: PathBuf },
}

/// Which quantity a mask stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Desired (dereverberated) power fraction.
    Derev,
    Speech,
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProviderSpec {
    pub provider: MaskProvider,
    pub target: MaskTarget,
}

/// Clean component images for oracle masks, all with the observation's
/// geometry.
#[derive(Debug, Clone)]
pub struct OracleSources<T> {
    /// Direct-path speech image per channel.
    pub direct: StftTensor<T>,
    /// Reverberant speech image per channel.
    pub reverberant: StftTensor<T>,
    pub noise: StftTensor<T>,
}

impl<T: Real> OracleSources<T> {
    pub fn select_channels(&self, order: &[usize]) -> Self {
        Self {
            direct: self.direct.select_channels(order),
            reverberant: self.reverberant.select_channels(order),
            noise: self.noise.select_channels(order),
        }
    }
}

impl MaskProviderSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.provider {
            MaskProvider::Constant { value } if !(0.0..=1.0).contains(value) => {
                Err(Error::InvalidConfig(format!("constant mask value {value} outside [0, 1]")))
            }
            MaskProvider::EnergySad { threshold_db } if !threshold_db.is_finite() => {
                Err(Error::InvalidConfig("SAD threshold must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Produces the mask for `input` (the signal the mask network would
    /// see).
    pub fn estimate<T: Real>(&self, input: &StftTensor<T>, oracle: Option<&OracleSources<T>>) -> Result<MaskTensor<T>> {
        self.validate()?;
        match &self.provider {
            MaskProvider::Constant { value } => MaskTensor::constant_like(T::lit(*value), input),
            MaskProvider::EnergySad { threshold_db } => energy_sad(input, *threshold_db),
            MaskProvider::Mlp { weights_path } => mlp_infer(&MlpWeights::load(weights_path)?, input),
            MaskProvider::OracleIrm => {
                let o = oracle.ok_or(Error::MissingOracle)?;
                match self.target {
                    MaskTarget::Derev => {
                        let mut rest = o.reverberant.clone();
                        for ((r, d), n) in rest.data_mut().iter_mut().zip(o.direct.data()).zip(o.noise.data()) {
                            *r = *r - *d + *n;
                        }
                        oracle_irm(&o.direct, &rest)
                    }
                    MaskTarget::Speech => oracle_irm(&o.reverberant, &o.noise),
                    MaskTarget::Noise => oracle_irm(&o.noise, &o.reverberant),
                }
            }
        }
    }
}
