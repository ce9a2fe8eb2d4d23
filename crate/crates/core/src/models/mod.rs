//! Frame-wise encoder/decoder networks and the system variants built from
//! them: audio-only, a parameter-matched audio-only control, audiovisual and
//! MUTUD (audio encoder plus TAME estimating the missing video features).

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::functional::{repeat_rows, sigmoid};
use crate::numerics::params::{Forward, ParamId, ParamStore};
use crate::numerics::{NumericsError, Tensor, Var};
use crate::signal::{ComplexSpectrogram, SceneSample, SignalError, Stft, StftConfig};
use crate::tame::{AudioToVideo, TameConfig, TameError, TameModule, VideoRecall};
use layers::Mlp;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("variant {0:?} does not support this operation: {1}")]
    Variant(VariantKind, &'static str),
    #[error("shape: {0}")]
    Shape(String),
    #[error("parameter matching failed: {0}")]
    Match(String),
    #[error(transparent)]
    Tame(#[from] TameError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    AudioOnly,
    AudioOnlyMatched,
    Audiovisual,
    Mutud,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] =
        [VariantKind::AudioOnly, VariantKind::AudioOnlyMatched, VariantKind::Audiovisual, VariantKind::Mutud];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::AudioOnly => "audio_only",
            VariantKind::AudioOnlyMatched => "audio_only_matched",
            VariantKind::Audiovisual => "audiovisual",
            VariantKind::Mutud => "mutud",
        }
    }

    pub fn is_audio_only(self) -> bool {
        matches!(self, VariantKind::AudioOnly | VariantKind::AudioOnlyMatched)
    }

    /// Whether the decoder sees a video-feature half alongside `F_a`.
    pub fn has_visual_half(self) -> bool {
        !self.is_audio_only()
    }
}

/// What the audio encoder sees of each noisy frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeatures {
    /// Real and imaginary parts, `2F` values.
    Complex,
    /// `ln(|Y| + 1e-3)`, `F` values.
    LogMagnitude,
}

/// How the decoder output becomes the enhanced spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `2F` values read as the real and imaginary planes of `E`.
    Direct,
    /// `F` logits; `E = sigmoid(logits) ⊙ Y` on both planes.
    Mask,
}

pub const LOG_MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widths {
    pub audio_hidden: usize,
    pub video_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self { audio_hidden: 64, video_hidden: 256, decoder_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantKind,
    /// Shared feature width of both encoders and TAME.
    pub d: usize,
    /// Raw video feature width.
    pub d_v: usize,
    /// Spectrogram bins `F`.
    pub bins: usize,
    pub widths: Widths,
    pub input: InputFeatures,
    pub output: OutputMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Mutud,
            d: 32,
            d_v: 16,
            bins: StftConfig::default().bins(),
            widths: Widths::default(),
            input: InputFeatures::Complex,
            output: OutputMode::Direct,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        match self.input {
            InputFeatures::Complex => 2 * self.bins,
            InputFeatures::LogMagnitude => self.bins,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.output {
            OutputMode::Direct => 2 * self.bins,
            OutputMode::Mask => self.bins,
        }
    }

    pub fn decoder_in(&self) -> usize {
        if self.variant.has_visual_half() {
            2 * self.d
        } else {
            self.d
        }
    }
}

fn mlp_params(i: usize, h: usize, o: usize) -> usize {
    i * h + h + h * o + o
}

fn mlp_macs(i: usize, h: usize, o: usize) -> usize {
    i * h + h * o
}

/// Closed-form parameter counts of one variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub audio_encoder: usize,
    pub video_encoder: usize,
    pub decoder: usize,
    pub tame_inference: usize,
    pub tame_train: usize,
}

impl ParamCounts {
    pub fn of(cfg: &ModelConfig, tame: &TameConfig) -> Self {
        let w = &cfg.widths;
        let audio_encoder = mlp_params(cfg.input_dim(), w.audio_hidden, cfg.d);
        let decoder = mlp_params(cfg.decoder_in(), w.decoder_hidden, cfg.output_dim());
        let (video_encoder, tame_inference, tame_train) = match cfg.variant {
            VariantKind::AudioOnly | VariantKind::AudioOnlyMatched => (0, 0, 0),
            VariantKind::Audiovisual => (mlp_params(cfg.d_v, w.video_hidden, cfg.d), 0, 0),
            VariantKind::Mutud => {
                let codebooks = 2 * tame.k * tame.n * tame.d;
                let norms = if tame.per_block_bn { tame.k } else { 1 };
                let projection = tame.d * tame.d + tame.d + norms * 2 * tame.d;
                let recall = if tame.shared_projection { 0 } else { projection };
                (mlp_params(cfg.d_v, w.video_hidden, cfg.d), codebooks + projection, codebooks + projection + recall)
            }
        };
        Self { audio_encoder, video_encoder, decoder, tame_inference, tame_train }
    }

    /// Parameters evaluated at inference (MUTUD drops the video encoder).
    pub fn inference(&self, variant: VariantKind) -> usize {
        match variant {
            VariantKind::Mutud => self.audio_encoder + self.decoder + self.tame_inference,
            _ => self.audio_encoder + self.video_encoder + self.decoder,
        }
    }

    pub fn train(&self) -> usize {
        self.audio_encoder + self.video_encoder + self.decoder + self.tame_train
    }
}

/// Multiply-accumulates per audio frame of one inference pass.
pub fn inference_macs_per_frame(cfg: &ModelConfig, tame: &TameConfig) -> f64 {
    let w = &cfg.widths;
    let audio = mlp_macs(cfg.input_dim(), w.audio_hidden, cfg.d) as f64;
    let decoder = mlp_macs(cfg.decoder_in(), w.decoder_hidden, cfg.output_dim()) as f64;
    match cfg.variant {
        VariantKind::AudioOnly | VariantKind::AudioOnlyMatched => audio + decoder,
        VariantKind::Audiovisual => {
            // The video encoder runs once per video frame, i.e. every K audio frames.
            audio + decoder + mlp_macs(cfg.d_v, w.video_hidden, cfg.d) as f64 / tame.k as f64
        }
        VariantKind::Mutud => {
            let (n, d) = (tame.n, tame.d);
            let relate = n * d + n * d;
            let retrieve = n * d + d * d + d;
            let norm = 2 * d;
            audio + decoder + (relate + retrieve + norm) as f64
        }
    }
}

/// Widen the audio-only hidden layers (encoder and decoder together) until
/// the parameter count is within 2% of the MUTUD inference count.
pub fn match_parameters(reference: &ModelConfig, tame: &TameConfig) -> Result<ModelConfig, ModelError> {
    if reference.variant != VariantKind::Mutud {
        return Err(ModelError::Variant(reference.variant, "parameter matching needs a mutud reference"));
    }
    let target = ParamCounts::of(reference, tame).inference(VariantKind::Mutud);
    if target == 0 {
        return Err(ModelError::Match("reference has no parameters".into()));
    }
    let candidate = |h: usize| {
        let mut cfg = reference.clone();
        cfg.variant = VariantKind::AudioOnlyMatched;
        cfg.widths.audio_hidden = h;
        cfg.widths.decoder_hidden = h;
        cfg
    };
    let count = |h: usize| ParamCounts::of(&candidate(h), tame).inference(VariantKind::AudioOnlyMatched);
    let (mut lo, mut hi) = (1usize, 1usize << 20);
    if count(hi) < target {
        return Err(ModelError::Match(format!("{target} parameters exceed the search range")));
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if count(mid) < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let best = [lo.saturating_sub(1).max(1), lo]
        .into_iter()
        .min_by_key(|&h| count(h).abs_diff(target))
        .expect("two candidates");
    let rel = count(best).abs_diff(target) as f64 / target as f64;
    if rel > 0.02 {
        return Err(ModelError::Match(format!("closest width {best} is {:.2}% away", 100.0 * rel)));
    }
    Ok(candidate(best))
}

/// A scene reduced to what training and evaluation consume: spectrograms
/// trimmed to `K·T_v` frames and the matching time-domain references.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub noisy: ComplexSpectrogram,
    pub clean: ComplexSpectrogram,
    /// `istft` of the trimmed clean spectrogram: the SI-SDR reference.
    pub clean_ref: Vec<f64>,
    /// `istft` of the trimmed noisy spectrogram: the no-op baseline.
    pub noisy_ref: Vec<f64>,
    pub video: Tensor,
    pub snr_db: f64,
    pub seed: u64,
}

impl PreparedScene {
    pub fn new(scene: &SceneSample, stft: &Stft) -> Result<Self, ModelError> {
        let frames = scene.audio_frames();
        let noisy = stft.analyze(&scene.noisy)?;
        let clean = stft.analyze(&scene.clean)?;
        if noisy.frames() < frames {
            return Err(ModelError::Shape(format!("{} STFT frames for K·T_v = {frames}", noisy.frames())));
        }
        let (noisy, clean) = (noisy.truncated(frames), clean.truncated(frames));
        let clean_ref = stft.synthesize(&clean)?.samples().to_vec();
        let noisy_ref = stft.synthesize(&noisy)?.samples().to_vec();
        Ok(Self {
            noisy,
            clean,
            clean_ref,
            noisy_ref,
            video: scene.video_track.frames().clone(),
            snr_db: scene.snr_db,
            seed: scene.latent_seed,
        })
    }

    pub fn frames(&self) -> usize {
        self.noisy.frames()
    }
}

/// Scenes stacked row-wise: every per-frame tensor has `B·T_a` (or `B·T_v`)
/// rows, scene-major.
#[derive(Clone, Debug)]
pub struct Batch {
    pub scenes: usize,
    pub frames: usize,
    pub noisy_re: Tensor,
    pub noisy_im: Tensor,
    pub clean_re: Tensor,
    pub clean_im: Tensor,
    pub video: Tensor,
    pub clean_refs: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(scenes: &[&PreparedScene]) -> Result<Self, ModelError> {
        let first = scenes.first().ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let (frames, bins, dv) = (first.frames(), first.noisy.bins(), first.video.shape()[1]);
        let tv = first.video.shape()[0];
        let mut planes = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let mut video = Vec::new();
        for s in scenes {
            if s.frames() != frames || s.video.shape() != first.video.shape() {
                return Err(ModelError::Shape("scenes in a batch must share frame counts".into()));
            }
            planes[0].extend_from_slice(s.noisy.re());
            planes[1].extend_from_slice(s.noisy.im());
            planes[2].extend_from_slice(s.clean.re());
            planes[3].extend_from_slice(s.clean.im());
            video.extend_from_slice(s.video.data());
        }
        let rows = scenes.len() * frames;
        let [nr, ni, cr, ci] = planes.map(|p| Tensor::new([rows, bins], p).expect("stacked planes"));
        Ok(Self {
            scenes: scenes.len(),
            frames,
            noisy_re: nr,
            noisy_im: ni,
            clean_re: cr,
            clean_im: ci,
            video: Tensor::new([scenes.len() * tv, dv], video)?,
            clean_refs: scenes.iter().map(|s| s.clean_ref.clone()).collect(),
        })
    }
}

/// Estimated spectrogram planes on the tape, `[B·T_a, F]` each.
#[derive(Clone, Copy, Debug)]
pub struct SpecVars {
    pub re: Var,
    pub im: Var,
}

/// TAME intermediates for the auxiliary losses.
#[derive(Clone, Debug)]
pub struct TameOutputs {
    pub estimate: AudioToVideo,
    pub recall: VideoRecall,
    /// Encoded video features `[B·T_v, D]`.
    pub video_features: Var,
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    /// One estimate, or for MUTUD two: decoder fed with `F_v` then with `F̂_v`.
    pub estimates: Vec<SpecVars>,
    pub tame: Option<TameOutputs>,
    pub audio_features: Var,
}

/// One variant's networks. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub config: ModelConfig,
    pub audio: Mlp,
    pub video: Option<Mlp>,
    pub decoder: Mlp,
    pub tame: Option<TameModule>,
    /// Audio frames per video frame.
    pub k: usize,
}

impl System {
    pub fn new(store: &mut ParamStore, config: ModelConfig, tame: &TameConfig, seed: u64) -> Result<Self, ModelError> {
        if tame.d != config.d {
            return Err(ModelError::Shape(format!("TAME width {} vs encoder width {}", tame.d, config.d)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths.clone();
        let audio = Mlp::new(store, "audio_encoder", config.input_dim(), w.audio_hidden, config.d, &mut rng);
        let video = config
            .variant
            .has_visual_half()
            .then(|| Mlp::new(store, "video_encoder", config.d_v, w.video_hidden, config.d, &mut rng));
        let decoder = Mlp::new(store, "decoder", config.decoder_in(), w.decoder_hidden, config.output_dim(), &mut rng);
        let tame_cfg = tame;
        let tame = (config.variant == VariantKind::Mutud)
            .then(|| TameModule::new(store, "tame", tame_cfg.clone(), seed.wrapping_add(0x7a3e)));
        Ok(Self { config, audio, video, decoder, tame, k: tame_cfg.k })
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    pub fn inference_params(&self) -> Vec<ParamId> {
        let mut ids = [self.audio.params(), self.decoder.params()].concat();
        match (&self.tame, &self.video) {
            (Some(t), _) => {
                ids.extend([t.codebook_audio.codes, t.codebook_video.codes]);
                ids.extend(t.projection.params());
            }
            (None, Some(v)) => ids.extend(v.params()),
            (None, None) => {}
        }
        ids
    }

    pub fn train_params(&self) -> Vec<ParamId> {
        let mut ids = [self.audio.params(), self.decoder.params()].concat();
        if let Some(v) = &self.video {
            ids.extend(v.params());
        }
        if let Some(t) = &self.tame {
            ids.extend(t.params());
        }
        ids
    }

    fn input_features(&self, re: &Tensor, im: &Tensor) -> Tensor {
        let (rows, bins) = (re.shape()[0], re.shape()[1]);
        match self.config.input {
            InputFeatures::Complex => {
                let mut data = Vec::with_capacity(rows * 2 * bins);
                for r in 0..rows {
                    data.extend_from_slice(re.row(r));
                    data.extend_from_slice(im.row(r));
                }
                Tensor::new([rows, 2 * bins], data).expect("sized")
            }
            InputFeatures::LogMagnitude => {
                let data = re.data().iter().zip(im.data()).map(|(a, b)| (a.hypot(*b) + LOG_MAGNITUDE_FLOOR).ln()).collect();
                Tensor::new([rows, bins], data).expect("sized")
            }
        }
    }

    fn encode_audio(&self, f: &mut Forward, re: &Tensor, im: &Tensor) -> Result<Var, ModelError> {
        let x = f.tape.constant(self.input_features(re, im));
        Ok(self.audio.forward(f, x)?)
    }

    fn decode(
        &self,
        f: &mut Forward,
        audio: Var,
        visual: Option<Var>,
        noisy: (Var, Var),
    ) -> Result<SpecVars, ModelError> {
        let x = match visual {
            Some(v) => f.tape.concat(&[audio, v], 1)?,
            None => audio,
        };
        let out = self.decoder.forward(f, x)?;
        let bins = self.config.bins;
        Ok(match self.config.output {
            OutputMode::Direct => {
                SpecVars { re: f.tape.slice(out, 1, 0, bins)?, im: f.tape.slice(out, 1, bins, 2 * bins)? }
            }
            OutputMode::Mask => {
                let gain = sigmoid(f.tape, out)?;
                SpecVars { re: f.tape.mul(gain, noisy.0)?, im: f.tape.mul(gain, noisy.1)? }
            }
        })
    }

    /// Training pass over a batch. MUTUD decodes twice (true video features,
    /// then TAME estimates) and returns the TAME intermediates.
    pub fn forward_train(&self, f: &mut Forward, batch: &Batch) -> Result<TrainOutputs, ModelError> {
        let fa = self.encode_audio(f, &batch.noisy_re, &batch.noisy_im)?;
        let noisy = (f.tape.constant(batch.noisy_re.clone()), f.tape.constant(batch.noisy_im.clone()));
        let k = self.k;
        if self.variant().has_visual_half() && batch.video.shape()[0] * k != batch.noisy_re.shape()[0] {
            return Err(ModelError::Shape(format!(
                "{} video rows × K={k} vs {} audio rows",
                batch.video.shape()[0],
                batch.noisy_re.shape()[0]
            )));
        }
        match self.variant() {
            VariantKind::AudioOnly | VariantKind::AudioOnlyMatched => Ok(TrainOutputs {
                estimates: vec![self.decode(f, fa, None, noisy)?],
                tame: None,
                audio_features: fa,
            }),
            VariantKind::Audiovisual => {
                let fv = self.encode_video(f, &batch.video)?;
                let up = repeat_rows(f.tape, fv, k)?;
                Ok(TrainOutputs {
                    estimates: vec![self.decode(f, fa, Some(up), noisy)?],
                    tame: None,
                    audio_features: fa,
                })
            }
            VariantKind::Mutud => {
                let tame = self.tame.as_ref().expect("mutud owns TAME");
                let fv = self.encode_video(f, &batch.video)?;
                let up = repeat_rows(f.tape, fv, k)?;
                let with_video = self.decode(f, fa, Some(up), noisy)?;
                let estimate = tame.estimate_video_from_audio(f, fa)?;
                let with_estimate = self.decode(f, fa, Some(estimate.estimate), noisy)?;
                let recall = tame.self_recall_video(f, fv)?;
                Ok(TrainOutputs {
                    estimates: vec![with_video, with_estimate],
                    tame: Some(TameOutputs { estimate, recall, video_features: fv }),
                    audio_features: fa,
                })
            }
        }
    }

    fn encode_video(&self, f: &mut Forward, video: &Tensor) -> Result<Var, ModelError> {
        let enc = self.video.as_ref().ok_or(ModelError::Variant(self.variant(), "no video encoder"))?;
        let x = f.tape.constant(video.clone());
        Ok(enc.forward(f, x)?)
    }

    /// Enhance one noisy spectrogram. Only the audiovisual variant takes a
    /// video track; MUTUD estimates it with TAME and never evaluates the video
    /// encoder.
    pub fn forward_infer(
        &self,
        f: &mut Forward,
        noisy: &ComplexSpectrogram,
        video: Option<&Tensor>,
    ) -> Result<ComplexSpectrogram, ModelError> {
        let (re, im) = noisy.to_tensors();
        let planes = (f.tape.constant(re.clone()), f.tape.constant(im.clone()));
        let out = match (self.variant(), video) {
            (VariantKind::Audiovisual, None) => {
                return Err(ModelError::Variant(self.variant(), "audiovisual inference needs a video track"))
            }
            (VariantKind::Audiovisual, Some(v)) => {
                let fa = self.encode_audio(f, &re, &im)?;
                let fv = self.encode_video(f, v)?;
                if noisy.frames() != self.k * v.shape()[0] {
                    return Err(ModelError::Shape(format!(
                        "{} audio frames vs {} video frames",
                        noisy.frames(),
                        v.shape()[0]
                    )));
                }
                let up = repeat_rows(f.tape, fv, self.k)?;
                self.decode(f, fa, Some(up), planes)?
            }
            (_, Some(_)) => return Err(ModelError::Variant(self.variant(), "inference takes no video input")),
            (VariantKind::Mutud, None) => {
                let fa = self.encode_audio(f, &re, &im)?;
                let tame = self.tame.as_ref().expect("mutud owns TAME");
                let est = tame.estimate_video_from_audio(f, fa)?;
                self.decode(f, fa, Some(est.estimate), planes)?
            }
            (_, None) => {
                let fa = self.encode_audio(f, &re, &im)?;
                self.decode(f, fa, None, planes)?
            }
        };
        Ok(ComplexSpectrogram::new(
            f.tape.value(out.re).data().to_vec(),
            f.tape.value(out.im).data().to_vec(),
            noisy.frames(),
            noisy.config(),
        )?)
    }

    /// Audio features `F_a` and, for MUTUD, TAME estimates `F̂_v` of one
    /// noisy spectrogram (inference graph only).
    pub fn features(
        &self,
        f: &mut Forward,
        noisy: &ComplexSpectrogram,
    ) -> Result<(Tensor, Option<AudioToVideo>), ModelError> {
        let (re, im) = noisy.to_tensors();
        let fa = self.encode_audio(f, &re, &im)?;
        let est = match &self.tame {
            Some(t) => Some(t.estimate_video_from_audio(f, fa)?),
            None => None,
        };
        Ok((f.tape.value(fa).clone(), est))
    }

    /// Encoded video features `F_v` of a raw track (training graph).
    pub fn video_features(&self, f: &mut Forward, video: &Tensor) -> Result<Tensor, ModelError> {
        let v = self.encode_video(f, video)?;
        Ok(f.tape.value(v).clone())
    }
}

#[cfg(test)]
mod tests;
