//! Efficiency accounting and analysis of trained TAME modules: feature
//! similarity, codebook usage and cluster separation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::models::{inference_macs_per_frame, ModelError, ParamCounts, PreparedScene, VariantKind};
use crate::numerics::params::{Forward, Mode};
use crate::numerics::{Tape, Tensor};
use crate::signal::StftConfig;
use crate::training::TrainedModel;

/// Entropy ratio below which a codebook block counts as collapsed.
pub const COLLAPSE_RATIO: f64 = 0.5;
/// Added to the centroid distance in the separation ratio's denominator.
pub const SEPARATION_EPS: f64 = 1e-8;
/// Minimum frames per group for cluster statistics.
pub const MIN_CLUSTER_FRAMES: usize = 10;
/// Frames sampled per group for mean pairwise distances.
const PAIRWISE_SAMPLE: usize = 400;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("{0} needs a mutud model")]
    NotMutud(&'static str),
    #[error("empty scene set")]
    Empty,
    #[error("{got} frames, at least {needed} required")]
    TooFewFrames { got: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Tame(#[from] crate::tame::TameError),
}

/// Parameters and MACs per frame of an affine layer `i → o` with bias.
pub fn affine_counts(i: usize, o: usize) -> (usize, usize) {
    (i * o + o, i * o)
}

/// Parameters and MACs per frame of a batch norm over `d` features.
pub fn batch_norm_counts(d: usize) -> (usize, usize) {
    (2 * d, 2 * d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEfficiency {
    pub variant: VariantKind,
    pub parameter_count: usize,
    pub macs_per_second_of_audio: u64,
    pub params_vs_audiovisual: f64,
    pub params_vs_audio_only: f64,
    pub macs_vs_audiovisual: f64,
    pub macs_vs_audio_only: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Normalisation of the MAC column.
    pub normalization: String,
    pub frames_per_second: f64,
    /// MUTUD training-graph parameters (inference plus video encoder and any
    /// training-only projection).
    pub mutud_train_parameters: usize,
    pub variants: Vec<VariantEfficiency>,
}

impl EfficiencyReport {
    pub fn get(&self, v: VariantKind) -> Option<&VariantEfficiency> {
        self.variants.iter().find(|e| e.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("efficiency ({})\n", self.normalization);
        let _ = writeln!(
            out,
            "{:<20} {:>12} {:>14} {:>10} {:>10} {:>10} {:>10}",
            "variant", "params", "MACs/s", "p/av", "p/ao", "m/av", "m/ao"
        );
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{:<20} {:>12} {:>14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                v.variant.name(),
                v.parameter_count,
                v.macs_per_second_of_audio,
                v.params_vs_audiovisual,
                v.params_vs_audio_only,
                v.macs_vs_audiovisual,
                v.macs_vs_audio_only
            );
        }
        let _ = writeln!(out, "mutud training graph: {} params", self.mutud_train_parameters);
        out
    }
}

/// Closed-form inference counts for every variant under `cfg`.
pub fn efficiency_report(cfg: &RunConfig) -> Result<EfficiencyReport, DiagnosticsError> {
    let tame = cfg.tame_config();
    let fps = StftConfig::default().frames_per_second();
    let mut rows = Vec::new();
    let mut mutud_train = 0;
    for v in VariantKind::ALL {
        let model = cfg.with_variant(v).model_config()?;
        let counts = ParamCounts::of(&model, &tame);
        if v == VariantKind::Mutud {
            mutud_train = counts.train();
        }
        let macs = (inference_macs_per_frame(&model, &tame) * fps).round() as u64;
        rows.push((v, counts.inference(v), macs));
    }
    let find = |k: VariantKind| rows.iter().find(|r| r.0 == k).copied().expect("every variant counted");
    let (av, ao) = (find(VariantKind::Audiovisual), find(VariantKind::AudioOnly));
    let variants = rows
        .iter()
        .map(|&(variant, p, m)| VariantEfficiency {
            variant,
            parameter_count: p,
            macs_per_second_of_audio: m,
            params_vs_audiovisual: p as f64 / av.1 as f64,
            params_vs_audio_only: p as f64 / ao.1 as f64,
            macs_vs_audiovisual: m as f64 / av.2 as f64,
            macs_vs_audio_only: m as f64 / ao.2 as f64,
        })
        .collect();
    Ok(EfficiencyReport {
        normalization: "multiply-accumulates per second of 16 kHz audio, inference pass only".into(),
        frames_per_second: fps,
        mutud_train_parameters: mutud_train,
        variants,
    })
}

/// Eval-mode features of one scene.
#[derive(Clone, Debug)]
pub struct SceneFeatures {
    pub snr_db: f64,
    /// `F_a`, `[T_a, D]`.
    pub audio: Tensor,
    /// `F̂_v`, `[T_a, D]`.
    pub estimate: Tensor,
    /// `F_v` repeated K times, `[T_a, D]`.
    pub video: Tensor,
    /// Audio code distributions per block, each `[T_v, N]`.
    pub q: Vec<Tensor>,
    /// Video code distributions per block, each `[T_v, N]`.
    pub p: Vec<Tensor>,
}

/// Run the inference graph and the video branch of a MUTUD model.
pub fn scene_features(model: &TrainedModel, scene: &PreparedScene) -> Result<SceneFeatures, DiagnosticsError> {
    let tame = model.system.tame.as_ref().ok_or(DiagnosticsError::NotMutud("feature extraction"))?;
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store, Mode::Eval);
    let (audio, est) = model.system.features(&mut f, &scene.noisy)?;
    let est = est.expect("mutud estimates video");
    let fv = model.system.video_features(&mut f, &scene.video)?;
    let fv_var = f.tape.constant(fv.clone());
    let recall = tame.self_recall_video(&mut f, fv_var)?;
    let k = model.system.k;
    let d = fv.shape()[1];
    let video: Vec<f64> = (0..fv.rows()).flat_map(|t| std::iter::repeat(fv.row(t)).take(k).flatten().copied()).collect();
    Ok(SceneFeatures {
        snr_db: scene.snr_db,
        estimate: f.tape.value(est.estimate).clone(),
        q: est.q.iter().map(|v| f.tape.value(*v).clone()).collect(),
        p: recall.p.iter().map(|v| f.tape.value(*v).clone()).collect(),
        video: Tensor::new([fv.rows() * k, d], video)?,
        audio,
    })
}

pub fn collect_features(model: &TrainedModel, scenes: &[PreparedScene]) -> Result<Vec<SceneFeatures>, DiagnosticsError> {
    if scenes.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if model.optimizer.step == 0 {
        log::warn!("analysing an untrained model");
    }
    scenes.iter().map(|s| scene_features(model, s)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(crate::numerics::COSINE_EPS)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Frame-mean cosine and ℓ2 distance for one pair of sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub cosine: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub snr_db: f64,
    pub frames: usize,
    /// `(F_v, F̂_v)`.
    pub video_estimate: PairStats,
    /// `(F_v, F_a)`.
    pub video_audio: PairStats,
    /// `(F̂_v, F_a)`.
    pub estimate_audio: PairStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
    /// `(F_v, F̂_v)` over every frame of every scene.
    pub overall: PairStats,
}

fn pair_sums(a: &Tensor, b: &Tensor) -> (f64, f64) {
    (0..a.rows()).fold((0.0, 0.0), |(c, d), t| (c + cosine(a.row(t), b.row(t)), d + l2(a.row(t), b.row(t))))
}

/// Per-SNR frame means over `features` (scenes at SNRs outside `snrs` are
/// ignored).
pub fn similarity_study(features: &[SceneFeatures], snrs: &[f64]) -> Result<SimilarityReport, DiagnosticsError> {
    if features.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let stats = |sel: &[&SceneFeatures]| {
        let frames: usize = sel.iter().map(|s| s.audio.rows()).sum();
        let mut sums = [(0.0, 0.0); 3];
        for s in sel {
            for (acc, (a, b)) in sums.iter_mut().zip([(&s.video, &s.estimate), (&s.video, &s.audio), (&s.estimate, &s.audio)]) {
                let (c, d) = pair_sums(a, b);
                acc.0 += c;
                acc.1 += d;
            }
        }
        let n = frames.max(1) as f64;
        let p = |i: usize| PairStats { cosine: sums[i].0 / n, l2: sums[i].1 / n };
        (frames, p(0), p(1), p(2))
    };
    let rows = snrs
        .iter()
        .map(|&snr| {
            let sel: Vec<&SceneFeatures> = features.iter().filter(|s| s.snr_db == snr).collect();
            let (frames, video_estimate, video_audio, estimate_audio) = stats(&sel);
            SimilarityRow { snr_db: snr, frames, video_estimate, video_audio, estimate_audio }
        })
        .collect();
    let all: Vec<&SceneFeatures> = features.iter().collect();
    Ok(SimilarityReport { rows, overall: stats(&all).1 })
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "snr_db,frames,cos_v_vhat,l2_v_vhat,cos_v_a,l2_v_a,cos_vhat_a,l2_vhat_a\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.snr_db,
                r.frames,
                r.video_estimate.cosine,
                r.video_estimate.l2,
                r.video_audio.cosine,
                r.video_audio.l2,
                r.estimate_audio.cosine,
                r.estimate_audio.l2
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("feature similarity (frame means)\n");
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "snr", "frames", "cos(v,v^)", "l2(v,v^)", "cos(v,a)", "l2(v,a)", "cos(v^,a)", "l2(v^,a)"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                r.snr_db,
                r.frames,
                r.video_estimate.cosine,
                r.video_estimate.l2,
                r.video_audio.cosine,
                r.video_audio.l2,
                r.estimate_audio.cosine,
                r.estimate_audio.l2
            );
        }
        let _ = writeln!(out, "overall cos(v,v^) {:.4}", self.overall.cosine);
        out
    }
}

/// Shannon entropy in bits; zero entries contribute nothing.
pub fn entropy_bits(dist: &[f64]) -> f64 {
    dist.iter().filter(|&&p| p > 0.0).map(|p| -p * p.log2()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageModality {
    Audio,
    Video,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockUsage {
    pub modality: UsageModality,
    pub block: usize,
    /// Mean entry of every code vector.
    pub code_means: Vec<f64>,
    /// Code distribution averaged over all frames.
    pub mean_distribution: Vec<f64>,
    pub entropy_bits: f64,
    /// `entropy_bits / log2(N)`.
    pub entropy_ratio: f64,
    pub collapsed: bool,
}

/// Usage statistics of one block from its per-frame distributions.
pub fn block_usage(
    modality: UsageModality,
    block: usize,
    distributions: &[&Tensor],
    codes: &Tensor,
) -> Result<BlockUsage, DiagnosticsError> {
    let n = codes.rows();
    let rows: usize = distributions.iter().map(|t| t.rows()).sum();
    if rows == 0 {
        return Err(DiagnosticsError::Empty);
    }
    let mut mean = vec![0.0; n];
    for t in distributions {
        for r in 0..t.rows() {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let entropy = entropy_bits(&mean);
    let ratio = if n > 1 { entropy / (n as f64).log2() } else { 1.0 };
    let code_means = (0..n).map(|i| codes.row(i).iter().sum::<f64>() / codes.row(i).len() as f64).collect();
    Ok(BlockUsage {
        modality,
        block,
        code_means,
        mean_distribution: mean,
        entropy_bits: entropy,
        entropy_ratio: ratio,
        collapsed: ratio < COLLAPSE_RATIO,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsageReport {
    pub codes_per_block: usize,
    pub blocks: Vec<BlockUsage>,
    pub collapse_alarm: bool,
}

/// Aggregate `q` (audio) and `p` (video) over every frame of `features`.
pub fn codebook_usage(model: &TrainedModel, features: &[SceneFeatures]) -> Result<CodebookUsageReport, DiagnosticsError> {
    let tame = model.system.tame.as_ref().ok_or(DiagnosticsError::NotMutud("codebook usage"))?;
    if features.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let (k, n, d) = (tame.config.k, tame.config.n, tame.config.d);
    let mut blocks = Vec::with_capacity(2 * k);
    for (modality, id) in [(UsageModality::Audio, tame.codebook_audio.codes), (UsageModality::Video, tame.codebook_video.codes)] {
        let all = model.store.get(id);
        for block in 0..k {
            let codes = Tensor::new([n, d], all.data()[block * n * d..(block + 1) * n * d].to_vec())?;
            let dists: Vec<&Tensor> = features
                .iter()
                .map(|s| match modality {
                    UsageModality::Audio => &s.q[block],
                    UsageModality::Video => &s.p[block],
                })
                .collect();
            blocks.push(block_usage(modality, block, &dists, &codes)?);
        }
    }
    let collapse_alarm = blocks.iter().any(|b| b.collapsed);
    if collapse_alarm {
        log::warn!("codebook collapse: some block has entropy ratio below {COLLAPSE_RATIO}");
    }
    Ok(CodebookUsageReport { codes_per_block: n, blocks, collapse_alarm })
}

impl CodebookUsageReport {
    pub fn min_entropy_ratio(&self) -> f64 {
        self.blocks.iter().map(|b| b.entropy_ratio).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,block,code,mean_probability,code_mean,entropy_bits,entropy_ratio\n");
        for b in &self.blocks {
            for (i, (p, m)) in b.mean_distribution.iter().zip(&b.code_means).enumerate() {
                let name = match b.modality {
                    UsageModality::Audio => "audio",
                    UsageModality::Video => "video",
                };
                let _ = writeln!(out, "{name},{},{i},{p},{m},{},{}", b.block, b.entropy_bits, b.entropy_ratio);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("codebook usage (N = {}, collapse below ratio {COLLAPSE_RATIO})\n", self.codes_per_block);
        let _ = writeln!(out, "{:<8} {:>5} {:>10} {:>8} {:>9}", "modality", "block", "entropy", "ratio", "collapsed");
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{:<8} {:>5} {:>10.4} {:>8.4} {:>9}",
                format!("{:?}", b.modality).to_lowercase(),
                b.block,
                b.entropy_bits,
                b.entropy_ratio,
                b.collapsed
            );
        }
        let _ = writeln!(out, "collapse alarm: {}", self.collapse_alarm);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub centroid_audio_video: f64,
    pub centroid_estimate_video: f64,
    /// `d(c_a, c_v) / (d(c_v̂, c_v) + eps)`.
    pub ratio: f64,
    /// Set when the denominator is at the guard (estimate and video centroids
    /// coincide).
    pub degenerate: bool,
    pub within_audio: f64,
    pub within_video: f64,
    pub within_estimate: f64,
    pub cross_audio_video: f64,
    pub cross_estimate_video: f64,
}

fn centroid(x: &Tensor) -> Vec<f64> {
    let d = x.shape()[1];
    let mut c = vec![0.0; d];
    for r in 0..x.rows() {
        for (a, v) in c.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= x.rows() as f64);
    c
}

fn sample_rows(x: &Tensor) -> Vec<&[f64]> {
    let stride = x.rows().div_ceil(PAIRWISE_SAMPLE).max(1);
    (0..x.rows()).step_by(stride).map(|r| x.row(r)).collect()
}

fn mean_pairwise(a: &[&[f64]], b: &[&[f64]], same: bool) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && j <= i {
                continue;
            }
            sum += l2(x, y);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Centroid and pairwise-distance statistics of `F_a`, `F_v` and `F̂_v`
/// (rows are frames; pairwise means use an evenly strided subsample).
pub fn cluster_separation(audio: &Tensor, video: &Tensor, estimate: &Tensor) -> Result<SeparationReport, DiagnosticsError> {
    let got = audio.rows().min(video.rows()).min(estimate.rows());
    if got < MIN_CLUSTER_FRAMES {
        return Err(DiagnosticsError::TooFewFrames { got, needed: MIN_CLUSTER_FRAMES });
    }
    let (ca, cv, ce) = (centroid(audio), centroid(video), centroid(estimate));
    let av = l2(&ca, &cv);
    let ev = l2(&ce, &cv);
    let (sa, sv, se) = (sample_rows(audio), sample_rows(video), sample_rows(estimate));
    Ok(SeparationReport {
        centroid_audio_video: av,
        centroid_estimate_video: ev,
        ratio: av / (ev + SEPARATION_EPS),
        degenerate: ev < 1e-6,
        within_audio: mean_pairwise(&sa, &sa, true),
        within_video: mean_pairwise(&sv, &sv, true),
        within_estimate: mean_pairwise(&se, &se, true),
        cross_audio_video: mean_pairwise(&sa, &sv, false),
        cross_estimate_video: mean_pairwise(&se, &sv, false),
    })
}

/// Separation statistics over all frames of `features`.
pub fn separation_of(features: &[SceneFeatures]) -> Result<SeparationReport, DiagnosticsError> {
    let stack = |pick: fn(&SceneFeatures) -> &Tensor| -> Result<Tensor, DiagnosticsError> {
        let d = pick(features.first().ok_or(DiagnosticsError::Empty)?).shape()[1];
        let data: Vec<f64> = features.iter().flat_map(|s| pick(s).data().iter().copied()).collect();
        Ok(Tensor::new([data.len() / d, d], data)?)
    };
    cluster_separation(&stack(|s| &s.audio)?, &stack(|s| &s.video)?, &stack(|s| &s.estimate)?)
}

impl SeparationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("cluster separation\n");
        let _ = writeln!(out, "centroid d(a, v)     {:.6}", self.centroid_audio_video);
        let _ = writeln!(out, "centroid d(v^, v)    {:.6}", self.centroid_estimate_video);
        let _ = writeln!(out, "ratio                {:.6}{}", self.ratio, if self.degenerate { " (degenerate)" } else { "" });
        let _ = writeln!(out, "within a / v / v^    {:.6} {:.6} {:.6}", self.within_audio, self.within_video, self.within_estimate);
        let _ = writeln!(out, "cross a-v / v^-v     {:.6} {:.6}", self.cross_audio_video, self.cross_estimate_video);
        out
    }
}
