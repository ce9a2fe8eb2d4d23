//! Synthetic audiovisual scenes.
//!
//! A slow latent process drives both a harmonic "voice" and a low-dimensional
//! video feature track, so the video carries clean-speech information that
//! the noisy mixture partly hides. Everything is a pure function of
//! `(seed, SceneConfig)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::metrics::{mix_at_snr, MAX_NOISE_SOURCES};
use super::stft::StftConfig;
use super::{SignalError, Waveform};
use crate::numerics::Tensor;
use crate::tame::{FeatureSequence, FrameRate};

/// Number of slow oscillators in the latent process.
pub const LATENT_OSCILLATORS: usize = 4;
/// Latent descriptor per video frame: voicing gate plus the oscillators.
pub const LATENT_DIM: usize = LATENT_OSCILLATORS + 1;

const CLEAN_RMS: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub duration_s: f64,
    pub snr_db: f64,
    pub k_factor: usize,
    pub d_v: usize,
    pub stft: StftConfig,
    /// Seeds the latent→video map shared by every scene.
    pub world_seed: u64,
    /// Standard deviation of per-frame video feature noise.
    pub video_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration_s: 2.0,
            snr_db: 0.0,
            k_factor: 4,
            d_v: 16,
            stft: StftConfig::default(),
            world_seed: 0x5eed,
            video_noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.stft.sample_rate as f64).round() as usize
    }

    /// `(T_a, T_v)` before trimming audio frames to a multiple of K.
    pub fn frame_counts(&self) -> Result<(usize, usize), SignalError> {
        let len = self.samples();
        let ta = self.stft.frames_for(len).ok_or(SignalError::TooShort {
            len,
            needed: self.stft.win_len(),
        })?;
        let tv = ta / self.k_factor.max(1);
        if tv == 0 || self.k_factor == 0 {
            return Err(SignalError::TooShort { len, needed: self.stft.samples_for(self.k_factor.max(1)) });
        }
        Ok((ta, tv))
    }
}

/// One synthetic example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub video_track: FeatureSequence,
    pub snr_db: f64,
    pub latent_seed: u64,
    pub k_factor: usize,
}

impl SceneSample {
    pub fn video_frames(&self) -> usize {
        self.video_track.len()
    }

    /// Audio frames kept after trimming to `K · T_v`.
    pub fn audio_frames(&self) -> usize {
        self.k_factor * self.video_frames()
    }

    pub fn with_video_track(&self, video_track: FeatureSequence) -> Self {
        Self { video_track, ..self.clone() }
    }
}

/// Sum of three seeded low-frequency sinusoids, normalised into `[-1, 1]`.
#[derive(Clone, Debug)]
struct Oscillator {
    parts: [(f64, f64, f64); 3],
}

impl Oscillator {
    fn sample(rng: &mut ChaCha8Rng, lo_hz: f64, hi_hz: f64) -> Self {
        let mut parts = [(0.0, 0.0, 0.0); 3];
        for p in &mut parts {
            *p = (rng.gen_range(0.3..1.0), rng.gen_range(lo_hz..hi_hz), rng.gen_range(0.0..2.0 * PI));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        for p in &mut parts {
            p.0 /= total;
        }
        Self { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts.iter().map(|(a, f, ph)| a * (2.0 * PI * f * t + ph).sin()).sum()
    }
}

#[derive(Clone, Debug)]
struct Latent {
    osc: [Oscillator; LATENT_OSCILLATORS],
}

impl Latent {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            osc: [
                Oscillator::sample(rng, 1.0, 4.0),
                Oscillator::sample(rng, 0.3, 2.0),
                Oscillator::sample(rng, 0.3, 2.0),
                Oscillator::sample(rng, 0.3, 2.0),
            ],
        }
    }

    fn gate(&self, t: f64) -> f64 {
        1.0 / (1.0 + (-5.0 * (self.osc[0].at(t) + 0.2)).exp())
    }

    fn descriptor(&self, t: f64) -> [f64; LATENT_DIM] {
        let mut d = [0.0; LATENT_DIM];
        d[0] = self.gate(t);
        for (i, o) in self.osc.iter().enumerate() {
            d[i + 1] = o.at(t);
        }
        d
    }

    fn f0(&self, t: f64) -> f64 {
        140.0 * 2f64.powf(0.5 * self.osc[1].at(t))
    }

    fn harmonic_amplitude(&self, h: usize, f0: f64, t: f64) -> f64 {
        let freq = h as f64 * f0;
        if freq > 5000.0 {
            return 0.0;
        }
        let formant = 700.0 + 400.0 * self.osc[2].at(t);
        let tilt = 0.12 + 0.06 * self.osc[3].at(t);
        (-tilt * (h - 1) as f64).exp() * (0.25 + (-((freq - formant) / 250.0).powi(2)).exp())
    }
}

const MAX_HARMONICS: usize = 30;

fn synthesize_voice(latent: &Latent, rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let offsets: Vec<f64> = (0..MAX_HARMONICS).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let f0 = latent.f0(t);
        let gate = latent.gate(t);
        let mut s = 0.0;
        for (h, off) in offsets.iter().enumerate() {
            let a = latent.harmonic_amplitude(h + 1, f0, t);
            if a == 0.0 {
                break;
            }
            s += a * ((h + 1) as f64 * phase + off).sin();
        }
        out.push(gate * s);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI * 1e6);
    }
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    let gain = if rms > 0.0 { CLEAN_RMS / rms } else { 0.0 };
    out.iter().map(|x| x * gain).collect()
}

/// White noise restricted to a random band, shaped by a stationary or bursty
/// envelope and normalised to unit power times a random gain.
fn noise_source(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut buf: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    let lo: f64 = rng.gen_range(80.0..1500.0);
    let hi = (lo + rng.gen_range(300.0..2500.0)).min(sr / 2.0);
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut buf, &mut spec).expect("planned length");
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k as f64 * sr / len as f64;
        if f < lo || f > hi {
            *c = Default::default();
        }
    }
    spec[0].im = 0.0;
    if len % 2 == 0 {
        let last = spec.len() - 1;
        spec[last].im = 0.0;
    }
    let mut x = inv.make_output_vec();
    inv.process(&mut spec, &mut x).expect("planned length");

    if rng.gen_bool(0.6) {
        let mut env = vec![0.0; len];
        let ramp = (0.02 * sr) as usize;
        for _ in 0..rng.gen_range(1..=4) {
            let start = rng.gen_range(0..len);
            let dur = (rng.gen_range(0.15..0.8) * sr) as usize;
            for (j, e) in env.iter_mut().enumerate().skip(start).take(dur) {
                let k = j - start;
                let edge = k.min(dur - 1 - k);
                let w = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
                *e = f64::max(*e, w);
            }
        }
        for (v, e) in x.iter_mut().zip(&env) {
            *v *= e;
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let gain = if rms > 0.0 { rng.gen_range(0.3..1.0) / rms } else { 0.0 };
    x.iter().map(|v| v * gain).collect()
}

/// Fixed affine map from latent descriptors to video features.
fn video_map(world_seed: u64, d_v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let weights = (0..d_v * LATENT_DIM).map(|_| normal.sample(&mut rng)).collect();
    let bias = (0..d_v).map(|_| 0.5 * normal.sample(&mut rng)).collect();
    (weights, bias)
}

/// Generate the scene for `seed` under `cfg`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample, SignalError> {
    let (_, tv) = cfg.frame_counts()?;
    let len = cfg.samples();
    let sr = cfg.stft.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let latent = Latent::sample(&mut rng);
    let voice = synthesize_voice(&latent, &mut rng, len, sr);
    let clean = Waveform::new(voice, cfg.stft.sample_rate)?;

    // Video frame t pairs with audio frames K·t .. K·t+K−1; sample the latent
    // at the centre of that block.
    let (hop, win, k) = (cfg.stft.hop_len() as f64, cfg.stft.win_len() as f64, cfg.k_factor as f64);
    let (w, b) = video_map(cfg.world_seed, cfg.d_v);
    let jitter = Normal::new(0.0, cfg.video_noise.max(0.0)).map_err(|e| SignalError::Config(e.to_string()))?;
    let mut video = Vec::with_capacity(tv * cfg.d_v);
    for t in 0..tv {
        let centre = ((k * t as f64 + (k - 1.0) / 2.0) * hop + win / 2.0) / sr;
        let z = latent.descriptor(centre);
        for d in 0..cfg.d_v {
            let row = &w[d * LATENT_DIM..(d + 1) * LATENT_DIM];
            let v: f64 = row.iter().zip(&z).map(|(a, x)| a * x).sum::<f64>() + b[d];
            video.push(v + jitter.sample(&mut rng));
        }
    }
    let video_track = FeatureSequence::new(Tensor::new([tv, cfg.d_v], video).expect("sized"), FrameRate::Video);

    let count = rng.gen_range(1..=MAX_NOISE_SOURCES);
    let noises = (0..count)
        .map(|_| Waveform::new(noise_source(&mut rng, len, sr), cfg.stft.sample_rate))
        .collect::<Result<Vec<_>, _>>()?;
    let noisy = mix_at_snr(&clean, &noises, cfg.snr_db)?;

    let peak = noisy.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (clean, noisy) = if peak > PEAK_LIMIT {
        let g = PEAK_LIMIT / peak;
        (clean.scaled(g), noisy.scaled(g))
    } else {
        (clean, noisy)
    };

    Ok(SceneSample { clean, noisy, video_track, snr_db: cfg.snr_db, latent_seed: seed, k_factor: cfg.k_factor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::metrics::snr_db;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig { duration_s: 0.5, ..Default::default() };
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap().clean, generate_scene(8, &cfg).unwrap().clean);
    }

    #[test]
    fn one_second_frame_arithmetic() {
        let cfg = SceneConfig { duration_s: 1.0, ..Default::default() };
        assert_eq!(cfg.frame_counts().unwrap(), (99, 24));
        let s = generate_scene(1, &cfg).unwrap();
        assert_eq!(s.video_frames(), 24);
        assert_eq!(s.audio_frames(), 96);
        assert_eq!(s.video_track.frames().shape(), &[24, 16]);
        assert_eq!(s.clean.len(), s.noisy.len());
    }

    #[test]
    fn realised_snr_matches_request() {
        for snr in [10.0, 5.0, 0.0, -5.0, -10.0, -15.0] {
            let cfg = SceneConfig { duration_s: 1.0, snr_db: snr, ..Default::default() };
            let s = generate_scene(42, &cfg).unwrap();
            let noise: Vec<f64> = s.noisy.samples().iter().zip(s.clean.samples()).map(|(a, b)| a - b).collect();
            assert!((snr_db(s.clean.samples(), &noise) - snr).abs() < 0.1, "snr {snr}");
            assert!(s.noisy.samples().iter().all(|v| v.abs() <= PEAK_LIMIT + 1e-12));
        }
    }

    #[test]
    fn too_short_duration_rejected() {
        let cfg = SceneConfig { duration_s: 0.03, ..Default::default() };
        assert!(generate_scene(1, &cfg).is_err());
    }

    #[test]
    fn video_tracks_latent_across_scenes() {
        // The latent→video map is shared, so two scenes' tracks live in the
        // same low-rank affine subspace: their centred features are not
        // independent noise.
        let cfg = SceneConfig { duration_s: 1.0, video_noise: 0.0, ..Default::default() };
        let s = generate_scene(3, &cfg).unwrap();
        let v = s.video_track.frames();
        let var: f64 = v.data().iter().map(|x| x * x).sum::<f64>() / v.numel() as f64;
        assert!(var > 0.01);
    }
}
