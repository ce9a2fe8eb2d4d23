//! Run configuration: TOML sections with defaults and dotted-path overrides
//! such as `train.seed=7`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{LossConfig, LossWeights};
use crate::models::{match_parameters, InputFeatures, ModelConfig, OutputMode, VariantKind, Widths};
use crate::signal::{SceneConfig, StftConfig};
use crate::tame::TameConfig;

/// Codebook sizes of the reference ablation grid.
pub const CODEBOOK_GRID: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub duration_s: f64,
    /// Evaluation SNR grid in dB.
    pub snr_list: Vec<f64>,
    /// Training scenes draw their SNR uniformly from this range.
    pub train_snr_range: [f64; 2],
    pub k_factor: usize,
    pub d_v: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_seed_base: u64,
    pub test_seed_base: u64,
    pub world_seed: u64,
    pub video_noise: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            duration_s: 2.0,
            snr_list: vec![5.0, 0.0, -5.0, -10.0, -15.0],
            train_snr_range: [-15.0, 10.0],
            k_factor: 4,
            d_v: 16,
            n_train: 64,
            n_test: 250,
            train_seed_base: 0,
            test_seed_base: 1_000_000,
            world_seed: SceneConfig::default().world_seed,
            video_noise: SceneConfig::default().video_noise,
        }
    }
}

impl SceneSection {
    pub fn scene_config(&self, snr_db: f64) -> SceneConfig {
        SceneConfig {
            duration_s: self.duration_s,
            snr_db,
            k_factor: self.k_factor,
            d_v: self.d_v,
            stft: StftConfig::default(),
            world_seed: self.world_seed,
            video_noise: self.video_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantKind,
    pub d: usize,
    pub widths: Widths,
    pub input: InputFeatures,
    pub output: OutputMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { variant: m.variant, d: m.d, widths: m.widths, input: m.input, output: m.output }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TameSection {
    pub k: usize,
    pub n: usize,
    pub tau: f64,
    pub shared_projection: bool,
    pub per_block_bn: bool,
}

impl Default for TameSection {
    fn default() -> Self {
        let t = TameConfig::default();
        Self { k: t.k, n: t.n, tau: t.tau, shared_projection: t.shared_projection, per_block_bn: t.per_block_bn }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub dual_pass: bool,
    pub time_mean: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::default();
        let w = c.weights;
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda: w.lambda,
            dual_pass: c.dual_pass,
            time_mean: c.time_mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasePlan {
    /// One phase with the full objective throughout.
    FromScratch,
    /// Encoders and TAME first learn the auxiliary losses on clean scenes,
    /// then everything is fine-tuned with the full objective on noisy scenes.
    /// Variants without TAME train from scratch for both phases' epochs.
    PretrainedTame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub plan: PhasePlan,
    pub lr: f64,
    pub floor_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs of the clean pre-training phase (pretrained_tame plan only).
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            plan: PhasePlan::FromScratch,
            lr: 1e-4,
            floor_lr: 0.0,
            epochs: 100,
            warmup_epochs: 20,
            pretrain_epochs: 20,
            batch: 8,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        Self { out_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub model: ModelSection,
    pub tame: TameSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub io: IoSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `section.key=value` overrides. Values are read as TOML literals
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.to_string()))?;
            let keys: Vec<&str> = path.split('.').collect();
            if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
                return Err(ConfigError::Override(o.to_string()));
            }
            let value = parse_literal(raw);
            let mut node = &mut root;
            for key in &keys[..keys.len() - 1] {
                node = node
                    .get_mut(*key)
                    .filter(|n| n.is_table())
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown config section `{path}`")))?;
            }
            let table = node.as_table_mut().expect("checked table");
            let last = keys[keys.len() - 1];
            if !table.contains_key(last) {
                return Err(ConfigError::Invalid(format!("unknown config key `{path}`")));
            }
            table.insert(last.to_string(), value);
        }
        root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.scene;
        if s.k_factor == 0 || s.k_factor != self.tame.k {
            return bad(format!("scene.k_factor {} must equal tame.k {} and be positive", s.k_factor, self.tame.k));
        }
        if self.tame.n == 0 || self.model.d == 0 || s.d_v == 0 {
            return bad("tame.n, model.d and scene.d_v must be positive".into());
        }
        if !CODEBOOK_GRID.contains(&self.tame.n) {
            log::warn!("tame.n = {} is outside the reference grid {CODEBOOK_GRID:?}", self.tame.n);
        }
        if !(self.tame.tau.is_finite() && self.tame.tau > 0.0) {
            return bad(format!("tame.tau must be positive, got {}", self.tame.tau));
        }
        if s.snr_list.is_empty() || s.n_test % s.snr_list.len() != 0 {
            return bad(format!("scene.n_test {} must be a multiple of the {} SNRs", s.n_test, s.snr_list.len()));
        }
        if s.train_snr_range[0] > s.train_snr_range[1] {
            return bad("scene.train_snr_range must be ordered".into());
        }
        let (train_end, test_end) = (s.train_seed_base + s.n_train as u64, s.test_seed_base + s.n_test as u64);
        if s.train_seed_base < test_end && s.test_seed_base < train_end {
            return bad("train and test seed ranges overlap".into());
        }
        s.scene_config(0.0).frame_counts().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.batch == 0 || t.batch > s.n_train {
            return bad(format!("train.batch {} must be in 1..={}", t.batch, s.n_train));
        }
        if t.epochs == 0 || t.warmup_epochs > t.epochs {
            return bad("train.warmup_epochs must not exceed train.epochs (> 0)".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite() && t.floor_lr >= 0.0 && t.floor_lr <= t.lr) {
            return bad("train.lr must be positive and at least train.floor_lr".into());
        }
        self.loss_config().weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_config().map(|_| ())
    }

    pub fn tame_config(&self) -> TameConfig {
        TameConfig {
            k: self.tame.k,
            n: self.tame.n,
            d: self.model.d,
            tau: self.tame.tau,
            shared_projection: self.tame.shared_projection,
            per_block_bn: self.tame.per_block_bn,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            weights: LossWeights { alpha: l.alpha, beta: l.beta, gamma: l.gamma, lambda: l.lambda },
            dual_pass: l.dual_pass,
            time_mean: l.time_mean,
        }
    }

    /// Model architecture for `model.variant`; the matched audio-only control
    /// takes its widths from the MUTUD configuration it is matched against.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let base = ModelConfig {
            variant: self.model.variant,
            d: self.model.d,
            d_v: self.scene.d_v,
            bins: StftConfig::default().bins(),
            widths: self.model.widths.clone(),
            input: self.model.input,
            output: self.model.output,
        };
        if base.variant != VariantKind::AudioOnlyMatched {
            return Ok(base);
        }
        let reference = ModelConfig { variant: VariantKind::Mutud, ..base };
        match_parameters(&reference, &self.tame_config()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn with_variant(&self, variant: VariantKind) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
