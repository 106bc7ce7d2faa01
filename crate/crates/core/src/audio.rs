//! Time-domain multichannel audio and WAV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Multichannel audio, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    channels: Vec<Vec<T>>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(channels: Vec<Vec<T>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidSampleRate(sample_rate));
        }
        let expected = channels.first().map(Vec::len).ok_or(Error::EmptyAudio)?;
        for (index, ch) in channels.iter().enumerate() {
            if ch.len() != expected {
                return Err(Error::RaggedChannels { index, len: ch.len(), expected });
            }
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(num_channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![T::zero(); len]; num_channels.max(1)], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[T] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<T>> {
        self.channels
    }

    /// Keeps the listed channels, in the given order.
    pub fn select_channels(&self, order: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(order.len());
        for &m in order {
            let ch = self.channels.get(m).ok_or(Error::ReferenceOutOfRange {
                index: m,
                channels: self.num_channels(),
            })?;
            out.push(ch.clone());
        }
        Self::new(out, self.sample_rate)
    }

    pub fn cast<U: Real>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|ch| ch.iter().map(|&x| U::lit(x.as_f64())).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> T {
        self.channels.iter().flatten().map(|&x| x * x).sum()
    }
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Reads an interleaved PCM16/24/32 or float32 WAV file.
pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let m = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    if interleaved.is_empty() || m == 0 {
        return Err(Error::EmptyAudio);
    }
    let frames = interleaved.len() / m;
    let mut channels = vec![Vec::with_capacity(frames); m];
    for frame in interleaved.chunks_exact(m) {
        for (ch, &v) in channels.iter_mut().zip(frame) {
            ch.push(T::lit(v));
        }
    }
    AudioBuffer::new(channels, spec.sample_rate)
}

pub fn write_wav<T: Real>(
    path: impl AsRef<Path>,
    audio: &AudioBuffer<T>,
    format: WavFormat,
) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for n in 0..audio.len() {
        for ch in audio.channels() {
            let v = ch[n].as_f64();
            match format {
                WavFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err)?;
                }
                WavFormat::Float32 => writer.write_sample(v as f32).map_err(wav_err)?,
            }
        }
    }
    writer.finalize().map_err(wav_err)
}
