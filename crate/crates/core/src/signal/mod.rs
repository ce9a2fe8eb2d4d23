//! Audio DSP primitives and the synthetic audiovisual scene generator.

pub mod metrics;
pub mod scene;
pub mod stft;
pub mod wav;

use thiserror::Error;

pub use metrics::{mix_at_snr, si_sdr, si_sdr_slices, snr_db};
pub use scene::{generate_scene, SceneConfig, SceneSample};
pub use stft::{istft, stft, ComplexSpectrogram, IstftOperator, Stft, StftConfig};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal of {len} samples is shorter than the required {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0} signal has zero norm")]
    ZeroNorm(&'static str),
    #[error("{0} signal is silent")]
    Silent(&'static str),
    #[error("between 1 and 5 noise sources are mixed, got {0}")]
    NoiseCount(usize),
    #[error("waveform must be non-empty with finite samples")]
    InvalidWaveform,
    #[error("inconsistent spectrogram: {0}")]
    Inconsistent(String),
    #[error("bad STFT configuration: {0}")]
    Config(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<hound::Error> for SignalError {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => SignalError::Io(io),
            other => SignalError::Wav(other.to_string()),
        }
    }
}

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::InvalidWaveform);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * gain).collect(), sample_rate: self.sample_rate }
    }
}
