//! Hann-windowed short-time Fourier analysis and weighted overlap-add
//! synthesis.
//!
//! Frames are taken without padding, so `T = 1 + floor((len − win) / hop)`.
//! Synthesis windows each inverse frame with the analysis window and divides
//! by the summed squared window, which makes `istft(stft(x)) == x` wherever
//! that sum is non-negligible.

use std::fmt;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::{SignalError, Waveform};
use crate::numerics::{LinearOperator, NumericsError, Tensor};

/// Squared-window sums below this are treated as uncovered samples.
const WINDOW_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, window_ms: 20.0, hop_ms: 10.0 }
    }
}

impl StftConfig {
    pub fn win_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.win_len()
    }

    pub fn bins(&self) -> usize {
        self.fft_size() / 2 + 1
    }

    /// Frame count for a signal of `len` samples, if it fits at least one window.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        let win = self.win_len();
        (len >= win).then(|| 1 + (len - win) / self.hop_len())
    }

    /// Length of the waveform synthesized from `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_len() + self.win_len()
        }
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_len() as f64
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let (win, hop) = (self.win_len(), self.hop_len());
        if hop == 0 || win < hop || win % 2 != 0 {
            return Err(SignalError::Config(format!(
                "window {win} / hop {hop} samples: need an even window no shorter than a non-zero hop"
            )));
        }
        if win % hop != 0 {
            return Err(SignalError::Config(format!("hop {hop} must divide window {win}")));
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Onesided complex spectrogram, real and imaginary planes stored `T×F`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    re: Vec<f64>,
    im: Vec<f64>,
    frames: usize,
    bins: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(
        re: Vec<f64>,
        im: Vec<f64>,
        frames: usize,
        config: StftConfig,
    ) -> Result<Self, SignalError> {
        let bins = config.bins();
        if re.len() != frames * bins || im.len() != re.len() {
            return Err(SignalError::Inconsistent(format!(
                "planes of {} and {} values for {frames} frames × {bins} bins",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { re, im, frames, bins, config })
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        let n = frames * config.bins();
        Self { re: vec![0.0; n], im: vec![0.0; n], frames, bins: config.bins(), config }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// Keep only the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        let n = frames * self.bins;
        Self {
            re: self.re[..n].to_vec(),
            im: self.im[..n].to_vec(),
            frames,
            bins: self.bins,
            config: self.config,
        }
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let shape = [self.frames, self.bins];
        (
            Tensor::new(shape, self.re.clone()).expect("consistent planes"),
            Tensor::new(shape, self.im.clone()).expect("consistent planes"),
        )
    }

    pub fn from_tensors(re: &Tensor, im: &Tensor, config: StftConfig) -> Result<Self, SignalError> {
        let frames = re.shape().first().copied().unwrap_or(0);
        Self::new(re.data().to_vec(), im.data().to_vec(), frames, config)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }
}

/// Reusable FFT plans and window for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self, SignalError> {
        config.validate()?;
        let n = config.fft_size();
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            config,
            window: hann(config.win_len()),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram, SignalError> {
        let (win, hop, bins) = (self.config.win_len(), self.config.hop_len(), self.config.bins());
        let frames = self.config.frames_for(w.len()).ok_or(SignalError::TooShort {
            len: w.len(),
            needed: win,
        })?;
        let mut re = Vec::with_capacity(frames * bins);
        let mut im = Vec::with_capacity(frames * bins);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        for t in 0..frames {
            let frame = &w.samples()[t * hop..t * hop + win];
            for ((b, x), wi) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = x * wi;
            }
            self.forward.process(&mut buf, &mut spec).expect("fft sizes fixed at plan time");
            re.extend(spec.iter().map(|c| c.re));
            im.extend(spec.iter().map(|c| c.im));
        }
        ComplexSpectrogram::new(re, im, frames, self.config)
    }

    /// Summed squared window over the frames covering sample `j`.
    fn sample_norm(&self, j: usize, frames: usize) -> f64 {
        let (win, hop) = (self.config.win_len(), self.config.hop_len());
        let first = j.saturating_sub(win - 1).div_ceil(hop);
        let last = (j / hop).min(frames - 1);
        (first..=last).map(|t| self.window[j - t * hop].powi(2)).sum()
    }

    fn check(&self, spec: &ComplexSpectrogram) -> Result<(), SignalError> {
        if spec.config != self.config || spec.bins != self.config.bins() {
            return Err(SignalError::Inconsistent(format!(
                "spectrogram config {:?} does not match synthesis config {:?}",
                spec.config, self.config
            )));
        }
        Ok(())
    }

    /// Samples covered by at least two frames. Outside it the overlap-add
    /// normaliser falls towards zero, so any edit to the spectrogram is
    /// amplified there; time-domain scores use only this range. Signals too
    /// short to have an interior are returned whole.
    pub fn interior(&self, len: usize) -> std::ops::Range<usize> {
        let edge = self.config.win_len() - self.config.hop_len();
        if len > 2 * edge {
            edge..len - edge
        } else {
            0..len
        }
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform, SignalError> {
        self.check(spec)?;
        let samples = self.synthesize_planes(&spec.re, &spec.im, spec.frames);
        Waveform::new(samples, self.config.sample_rate)
    }

    fn synthesize_planes(&self, re: &[f64], im: &[f64], frames: usize) -> Vec<f64> {
        let (win, hop, bins) = (self.config.win_len(), self.config.hop_len(), self.config.bins());
        let len = self.config.samples_for(frames);
        let mut out = vec![0.0; len];
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let scale = 1.0 / self.config.fft_size() as f64;
        for t in 0..frames {
            for (k, c) in spec.iter_mut().enumerate() {
                *c = Complex::new(re[t * bins + k], im[t * bins + k]);
            }
            // A real signal has no imaginary DC or Nyquist component.
            spec[0].im = 0.0;
            spec[bins - 1].im = 0.0;
            self.inverse.process(&mut spec, &mut buf).expect("fft sizes fixed at plan time");
            for i in 0..win {
                out[t * hop + i] += self.window[i] * buf[i] * scale;
            }
        }
        for (j, v) in out.iter_mut().enumerate() {
            let n = self.sample_norm(j, frames);
            *v = if n > WINDOW_FLOOR { *v / n } else { 0.0 };
        }
        out
    }

    /// Adjoint of the synthesis map: pulls a waveform gradient back onto the
    /// real and imaginary planes.
    pub fn synthesis_adjoint(&self, grad: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let (win, hop, bins) = (self.config.win_len(), self.config.hop_len(), self.config.bins());
        let n = self.config.fft_size();
        let scaled: Vec<f64> = grad
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let nj = self.sample_norm(j, frames);
                if nj > WINDOW_FLOOR {
                    g / nj
                } else {
                    0.0
                }
            })
            .collect();
        let mut re = Vec::with_capacity(frames * bins);
        let mut im = Vec::with_capacity(frames * bins);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        for t in 0..frames {
            for i in 0..win {
                buf[i] = self.window[i] * scaled[t * hop + i];
            }
            self.forward.process(&mut buf, &mut spec).expect("fft sizes fixed at plan time");
            for (k, c) in spec.iter().enumerate() {
                let edge = k == 0 || k == bins - 1;
                let weight = if edge { 1.0 } else { 2.0 } / n as f64;
                re.push(weight * c.re);
                im.push(if edge { 0.0 } else { weight * c.im });
            }
        }
        (re, im)
    }
}

/// STFT with the stated window and hop.
pub fn stft(w: &Waveform, window_ms: f64, hop_ms: f64) -> Result<ComplexSpectrogram, SignalError> {
    let config = StftConfig { sample_rate: w.sample_rate(), window_ms, hop_ms };
    Stft::new(config)?.analyze(w)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform, SignalError> {
    Stft::new(spec.config)?.synthesize(spec)
}

/// Inverse STFT as a tape operator: inputs are the `[T, F]` real and
/// imaginary planes, output the 1-D waveform.
#[derive(Debug, Clone)]
pub struct IstftOperator {
    stft: Stft,
}

impl IstftOperator {
    pub fn new(stft: Stft) -> Self {
        Self { stft }
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }
}

impl LinearOperator for IstftOperator {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn apply(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let [re, im] = inputs else {
            return Err(NumericsError::Invalid { op: "istft", msg: "expects two planes".into() });
        };
        let bins = self.stft.config.bins();
        if re.shape() != im.shape() || re.ndim() != 2 || re.shape()[1] != bins {
            return Err(NumericsError::ShapeMismatch {
                op: "istft",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        let frames = re.shape()[0];
        Ok(Tensor::vector(self.stft.synthesize_planes(re.data(), im.data(), frames)))
    }

    fn adjoint(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let shape = inputs[0].shape().to_vec();
        let (re, im) = self.stft.synthesis_adjoint(grad_out.data(), shape[0]);
        vec![Tensor::new(shape.clone(), re).unwrap(), Tensor::new(shape, im).unwrap()]
    }
}
