use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty audio buffer")]
    EmptyAudio,
    #[error("channel {index} has {len} samples, expected {expected}")]
    RaggedChannels { index: usize, len: usize, expected: usize },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("invalid STFT config: {0}")]
    InvalidStftConfig(String),
    #[error("signal of {len} samples is shorter than the FFT size {fft_size}")]
    SignalTooShort { len: usize, fft_size: usize },
    #[error("STFT tensor has no frames")]
    NoFrames,
    #[error("utterance too short: {frames} frames, need more than {required}")]
    UtteranceTooShort { frames: usize, required: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask value {value} at index {index} outside [0, 1]")]
    MaskOutOfRange { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("reference channel {index} out of range for {channels} channels")]
    ReferenceOutOfRange { index: usize, channels: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("alignment failed: normalized correlation peak {peak:.3} below {threshold}")]
    AlignmentFailed { peak: f64, threshold: f64 },
    #[error("perturbation leaves the mask range [0, 1]")]
    PerturbationOutOfRange,
    #[error("oracle masks need reference signals, none available")]
    MissingOracle,
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
