//! Multichannel far-field speech enhancement front-end.
//!
//! The processing chain is weighted prediction error (WPE)
//! dereverberation, mask-based MVDR beamforming and log-mel features
//! with per-utterance mean/variance normalisation. Every numeric type is
//! generic over the scalar (`f32` or `f64`); the aliases below fix it.

pub mod audio;
pub mod beamform;
pub mod dereverb;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod linalg;
pub mod mask;
pub mod matrix_io;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod simulation;
pub mod stft;

pub use audio::{read_wav, write_wav, AudioBuffer, WavFormat};
pub use beamform::{
    apply_beamformer, estimate_psd, mvdr_filter, mvdr_pipeline, select_reference, BeamformerFilter, MvdrConfig,
    MvdrReport, PsdMatrix, PsdRole, ReferenceMode, ReferenceSpec,
};
pub use dereverb::{
    stack_delayed, wpe_iterative, wpe_oneshot, wpe_run, PredictionFilter, VarianceMap, WpeConfig, WpeReport,
};
pub use error::{Error, Result};
pub use features::{logmel, mel_matrix, mvn, FeatureMatrix, MelConfig, MelFilterbank};
pub use linalg::CMatrix;
pub use mask::{
    energy_sad, mlp_infer, oracle_irm, Activation, MaskKind, MaskProvider, MaskProviderSpec, MaskTarget,
    MaskTensor, MlpWeights, OracleSources,
};
pub use metrics::{metric_drr_gain, metric_segsnr, metric_stft_mse};
pub use scalar::{Real, C};
pub use simulation::{render_scene, synth_rir, SceneBundle, SceneConfig};
pub use stft::{istft, stft, validate_cola, StftConfig, StftTensor, Window};

pub type AudioBufferF64 = AudioBuffer<f64>;
pub type AudioBufferF32 = AudioBuffer<f32>;
pub type StftTensorF64 = StftTensor<f64>;
pub type StftTensorF32 = StftTensor<f32>;
pub type MaskTensorF64 = MaskTensor<f64>;
pub type MaskTensorF32 = MaskTensor<f32>;
pub type FeatureMatrixF64 = FeatureMatrix<f64>;
pub type FeatureMatrixF32 = FeatureMatrix<f32>;
pub type SceneBundleF64 = SceneBundle<f64>;
