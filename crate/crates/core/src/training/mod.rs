//! Optimisation loop, phase plans, evaluation and metrics logging.

pub mod checkpoint;
pub mod optim;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PhasePlan, RunConfig};
use crate::losses::{batch_objective, LossBreakdown, LossConfig, LossError};
use crate::models::{Batch, ModelError, PreparedScene, System, VariantKind};
use crate::numerics::params::{apply_updates, Forward, Mode, ParamStore};
use crate::numerics::{NumericsError, Tape};
use crate::signal::metrics::si_sdr_slices;
use crate::signal::{generate_scene, IstftOperator, SceneSample, SignalError, Stft, StftConfig};
use optim::{AdamWConfig, OptimizerState, Schedule};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("numeric guard tripped: {0}")]
    NumericGuard(String),
    #[error("train/test seed overlap: {0} seeds shared")]
    SeedOverlap(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

/// Seed and SNR of one scene in a dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub snr_db: f64,
}

/// Training scenes: consecutive seeds, SNR drawn uniformly from the training
/// range by a generator keyed on the seed.
pub fn train_specs(cfg: &RunConfig) -> Vec<SceneSpec> {
    let s = &cfg.scene;
    let [lo, hi] = s.train_snr_range;
    (0..s.n_train as u64)
        .map(|i| {
            let seed = s.train_seed_base + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_0000_0000_0000);
            let snr_db = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            SceneSpec { seed, snr_db }
        })
        .collect()
}

/// Test scenes: `n_test / |snr_list|` distinct seeds per SNR, grouped by SNR.
pub fn test_specs(cfg: &RunConfig) -> Vec<SceneSpec> {
    let s = &cfg.scene;
    let per = s.n_test / s.snr_list.len().max(1);
    s.snr_list
        .iter()
        .enumerate()
        .flat_map(|(j, &snr_db)| (0..per).map(move |i| SceneSpec { seed: s.test_seed_base + (j * per + i) as u64, snr_db }))
        .collect()
}

pub fn generate(cfg: &RunConfig, spec: SceneSpec) -> Result<SceneSample, SignalError> {
    generate_scene(spec.seed, &cfg.scene.scene_config(spec.snr_db))
}

pub fn prepare_all(scenes: &[SceneSample]) -> Result<Vec<PreparedScene>, TrainingError> {
    let stft = Stft::new(StftConfig::default())?;
    Ok(scenes.iter().map(|s| PreparedScene::new(s, &stft)).collect::<Result<_, _>>()?)
}

/// Generate and prepare every scene of a split in memory.
pub fn build_split(cfg: &RunConfig, specs: &[SceneSpec]) -> Result<Vec<PreparedScene>, TrainingError> {
    let scenes = specs.iter().map(|s| generate(cfg, *s)).collect::<Result<Vec<_>, _>>()?;
    prepare_all(&scenes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Pretrain,
    Finetune,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Eval => "eval",
        }
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub losses: Option<LossBreakdown>,
    /// Mean SI-SDR improvement per grid SNR (eval rows only).
    pub eval: Vec<f64>,
}

/// Render rows as CSV with `si_sdr_improvement@{snr}` columns for `snrs`.
pub fn metrics_csv(rows: &[MetricsRow], snrs: &[f64]) -> String {
    let mut out = String::from("step,epoch,phase,lr,l_v_to_v,l_a_to_v,l_kl,l_task,total");
    for s in snrs {
        let _ = write!(out, ",si_sdr_improvement@{s}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.step, r.epoch, r.phase.name(), r.lr);
        match &r.losses {
            Some(l) => {
                let _ = write!(out, ",{},{},{},{},{}", l.l_v_to_v, l.l_a_to_v, l.l_kl, l.l_task, l.total);
            }
            None => out.push_str(",,,,,"),
        }
        for i in 0..snrs.len() {
            match r.eval.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// A variant with its parameters, optimizer state and data-order generator.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub system: System,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl TrainedModel {
    /// Fresh initialisation for `config` (the seed comes from `train.seed`).
    pub fn init(config: &RunConfig) -> Result<Self, TrainingError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let system = System::new(&mut store, config.model_config()?, &config.tame_config(), config.train.seed)?;
        let clip = (config.train.clip_norm > 0.0).then_some(config.train.clip_norm);
        let optimizer = OptimizerState::new(
            &store,
            AdamWConfig { weight_decay: config.train.weight_decay, clip_norm: clip, ..Default::default() },
        );
        let rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xd1b5);
        Ok(Self { config: config.clone(), system, store, optimizer, rng })
    }

    pub fn enhance(&self, scene: &PreparedScene) -> Result<crate::signal::ComplexSpectrogram, TrainingError> {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &self.store, Mode::Eval);
        let video = (self.system.variant() == VariantKind::Audiovisual).then_some(&scene.video);
        Ok(self.system.forward_infer(&mut f, &scene.noisy, video)?)
    }
}

/// Train `model` on `scenes` following its configured phase plan, returning
/// one metrics row per optimizer step.
pub fn train(model: &mut TrainedModel, scenes: &[PreparedScene]) -> Result<Vec<MetricsRow>, TrainingError> {
    let cfg = model.config.clone();
    let t = &cfg.train;
    let loss = cfg.loss_config();
    let mut rows = Vec::new();
    match t.plan {
        PhasePlan::FromScratch => {
            run_phase(model, scenes, Phase::Train, t.epochs, t.warmup_epochs, &loss, false, &mut rows)?;
        }
        // Without TAME there is nothing to pre-train: the whole budget goes
        // to the task.
        PhasePlan::PretrainedTame if model.system.tame.is_none() => {
            let (epochs, warmup) = (t.pretrain_epochs + t.epochs, t.warmup_epochs);
            run_phase(model, scenes, Phase::Train, epochs, warmup, &loss, false, &mut rows)?;
        }
        PhasePlan::PretrainedTame => {
            let mut aux = loss.clone();
            aux.weights.lambda = 0.0;
            let warm = t.warmup_epochs.min(t.pretrain_epochs);
            run_phase(model, scenes, Phase::Pretrain, t.pretrain_epochs, warm, &aux, true, &mut rows)?;
            run_phase(model, scenes, Phase::Finetune, t.epochs, t.warmup_epochs, &loss, false, &mut rows)?;
        }
    }
    if model.optimizer.step == 0 {
        return Err(TrainingError::NumericGuard("every update was skipped".into()));
    }
    Ok(rows)
}

fn clean_input(scene: &PreparedScene) -> PreparedScene {
    PreparedScene { noisy: scene.clean.clone(), noisy_ref: scene.clean_ref.clone(), ..scene.clone() }
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut TrainedModel,
    scenes: &[PreparedScene],
    phase: Phase,
    epochs: usize,
    warmup: usize,
    loss: &LossConfig,
    clean: bool,
    rows: &mut Vec<MetricsRow>,
) -> Result<(), TrainingError> {
    if epochs == 0 {
        return Ok(());
    }
    let batch_size = model.config.train.batch;
    let steps_per_epoch = scenes.len() / batch_size;
    if steps_per_epoch == 0 {
        return Err(TrainingError::Config(format!("{} scenes for batch {batch_size}", scenes.len())));
    }
    let schedule = Schedule {
        warmup_epochs: warmup,
        total_epochs: epochs,
        base_lr: model.config.train.lr,
        floor_lr: model.config.train.floor_lr,
        steps_per_epoch,
    };
    schedule.validate()?;
    let converted: Vec<PreparedScene>;
    let pool: &[PreparedScene] = if clean {
        converted = scenes.iter().map(clean_input).collect();
        &converted
    } else {
        scenes
    };
    let istft = Arc::new(IstftOperator::new(Stft::new(StftConfig::default())?));
    let k = model.system.k;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut model.rng);
        for b in 0..steps_per_epoch {
            let members: Vec<&PreparedScene> = order[b * batch_size..(b + 1) * batch_size].iter().map(|&i| &pool[i]).collect();
            let batch = Batch::new(&members)?;
            let lr = schedule.lr_at(epoch, b)?;
            let (breakdown, grads, updates) = {
                let mut tape = Tape::new();
                let mut f = Forward::new(&mut tape, &model.store, Mode::Train);
                let out = model.system.forward_train(&mut f, &batch)?;
                let obj = batch_objective(f.tape, &out, &batch, k, loss, &istft)?;
                let breakdown = obj.breakdown(f.tape);
                let g = f.tape.backward(obj.total)?;
                (breakdown, f.param_grads(&g), f.take_updates())
            };
            let report = if breakdown.total.is_finite() {
                model.optimizer.step(&mut model.store, &grads, lr)?
            } else {
                model.optimizer.skipped += 1;
                log::warn!("non-finite loss at epoch {epoch} step {b}; update skipped");
                optim::StepReport { applied: false, grad_norm: f64::NAN, clipped: false }
            };
            if report.applied {
                apply_updates(&mut model.store, updates);
            }
            rows.push(MetricsRow {
                step: rows.len() as u64 + 1,
                epoch,
                phase,
                lr,
                losses: Some(breakdown),
                eval: Vec::new(),
            });
        }
        log::debug!("{} epoch {epoch}: total {:?}", phase.name(), rows.last().and_then(|r| r.losses.map(|l| l.total)));
    }
    Ok(())
}

/// Mean and spread of the SI-SDR improvement at one SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub snr_db: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// SI-SDR improvement of `enhanced` over the noisy input, both scored against
/// the clean reference over the synthesis interior.
pub fn improvement_of(enhanced: &crate::signal::ComplexSpectrogram, scene: &PreparedScene) -> Result<f64, TrainingError> {
    let stft = Stft::new(enhanced.config())?;
    let e = stft.synthesize(enhanced)?;
    let r = stft.interior(scene.clean_ref.len());
    if e.len() != scene.clean_ref.len() {
        return Err(TrainingError::Config(format!("{} enhanced samples vs {} reference", e.len(), scene.clean_ref.len())));
    }
    let enhanced_db = si_sdr_slices(&e.samples()[r.clone()], &scene.clean_ref[r.clone()])?;
    let noisy_db = si_sdr_slices(&scene.noisy_ref[r.clone()], &scene.clean_ref[r])?;
    Ok(enhanced_db - noisy_db)
}

/// SI-SDR improvement of the model's output for one scene.
pub fn si_sdr_improvement(model: &TrainedModel, scene: &PreparedScene) -> Result<f64, TrainingError> {
    improvement_of(&model.enhance(scene)?, scene)
}

/// Per-SNR statistics over `scenes` (in `snrs` order). Refuses scenes whose
/// seed appears in `train_seeds`.
pub fn evaluate(
    model: &TrainedModel,
    scenes: &[PreparedScene],
    snrs: &[f64],
    train_seeds: &HashSet<u64>,
) -> Result<Vec<EvalRow>, TrainingError> {
    let overlap = scenes.iter().filter(|s| train_seeds.contains(&s.seed)).count();
    if overlap > 0 {
        return Err(TrainingError::SeedOverlap(overlap));
    }
    let values = scenes.iter().map(|s| si_sdr_improvement(model, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(snrs
        .iter()
        .map(|&snr| {
            let v: Vec<f64> = scenes.iter().zip(&values).filter(|(s, _)| s.snr_db == snr).map(|(_, v)| *v).collect();
            let (mean, std) = mean_std(&v);
            EvalRow { snr_db: snr, mean, std, count: v.len() }
        })
        .collect())
}

/// Mean and sample standard deviation; NaN mean for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn eval_row(step: u64, epoch: usize, table: &[EvalRow]) -> MetricsRow {
    MetricsRow { step, epoch, phase: Phase::Eval, lr: 0.0, losses: None, eval: table.iter().map(|r| r.mean).collect() }
}
