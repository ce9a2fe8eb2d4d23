//! PCM16 WAV import/export and scene persistence (WAV pair + JSON sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::SceneSample;
use super::{SignalError, Waveform};
use crate::numerics::Tensor;
use crate::tame::{FeatureSequence, FrameRate};

pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), SignalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, SignalError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SignalError::Wav(format!("{}: expected mono PCM16, got {spec:?}", path.display())));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// JSON metadata stored beside a scene's WAV pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub snr_db: f64,
    pub seed: u64,
    pub k_factor: usize,
    pub sample_rate: u32,
    pub video_track: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenePaths {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub sidecar: PathBuf,
}

impl ScenePaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            clean: dir.join(format!("{stem}_clean.wav")),
            noisy: dir.join(format!("{stem}_noisy.wav")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }
}

pub fn save_scene(dir: &Path, stem: &str, scene: &SceneSample) -> Result<ScenePaths, SignalError> {
    let paths = ScenePaths::new(dir, stem);
    write_wav(&paths.clean, &scene.clean)?;
    write_wav(&paths.noisy, &scene.noisy)?;
    let v = scene.video_track.frames();
    let sidecar = SceneSidecar {
        snr_db: scene.snr_db,
        seed: scene.latent_seed,
        k_factor: scene.k_factor,
        sample_rate: scene.clean.sample_rate(),
        video_track: (0..v.shape()[0]).map(|t| v.row(t).to_vec()).collect(),
    };
    fs::write(&paths.sidecar, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(paths)
}

pub fn load_scene(dir: &Path, stem: &str) -> Result<SceneSample, SignalError> {
    let paths = ScenePaths::new(dir, stem);
    let sidecar: SceneSidecar = serde_json::from_str(&fs::read_to_string(&paths.sidecar)?)?;
    let clean = read_wav(&paths.clean)?;
    let noisy = read_wav(&paths.noisy)?;
    if clean.len() != noisy.len() || clean.sample_rate() != sidecar.sample_rate {
        return Err(SignalError::Inconsistent(format!("scene {stem}: WAV pair disagrees with sidecar")));
    }
    let tv = sidecar.video_track.len();
    let dv = sidecar.video_track.first().map_or(0, Vec::len);
    if sidecar.video_track.iter().any(|r| r.len() != dv) {
        return Err(SignalError::Inconsistent(format!("scene {stem}: ragged video track")));
    }
    let track = Tensor::new([tv, dv], sidecar.video_track.concat())
        .map_err(|e| SignalError::Inconsistent(e.to_string()))?;
    Ok(SceneSample {
        clean,
        noisy,
        video_track: FeatureSequence::new(track, FrameRate::Video),
        snr_db: sidecar.snr_db,
        latent_seed: sidecar.seed,
        k_factor: sidecar.k_factor,
    })
}
