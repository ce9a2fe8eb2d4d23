//! Temporally aligned modality feature estimation.
//!
//! Two modality-specific codebooks of shape `K×N×D` hold `K` blocks of `N`
//! codes each. A feature is *related* to a block by cosine similarity with
//! every code, the similarities become a code *distribution* through a
//! tempered softmax, and a feature is *retrieved* as the distribution-weighted
//! sum of codes passed through a linear + batch-norm projection.
//!
//! Video frame `t` pairs with audio frames `K·t .. K·t+K−1`; audio frame
//! `K·t+k` is related to block `k` of the audio codebook and its distribution
//! probes block `k` of the video codebook. The result is one estimated video
//! feature per audio frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::layers::{BatchNorm, Linear};
use crate::numerics::functional::{cosine_similarity_rows, softmax_rows};
use crate::numerics::params::{Forward, Mode, ParamId, ParamStore};
use crate::numerics::{cosine_similarity, softmax_tempered, NumericsError, Tape, Tensor, Var, COSINE_EPS};

/// Simplex tolerance accepted by retrieval.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TameError {
    #[error("block index {k} out of range for K = {blocks}")]
    BlockIndex { k: usize, blocks: usize },
    #[error("{frames} audio frames are not divisible by K = {k}")]
    Divisibility { frames: usize, k: usize },
    #[error("distribution is off the simplex (sum {sum}, min {min})")]
    Simplex { sum: f64, min: f64 },
    #[error("feature dimension {got} does not match codebook dimension {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("expected a {expected:?}-rate sequence")]
    Rate { expected: FrameRate },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRate {
    Audio,
    Video,
}

/// Time-major `T×D` feature frames at one modality's rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    rate: FrameRate,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, rate: FrameRate) -> Self {
        assert_eq!(frames.ndim(), 2, "feature sequences are T×D");
        Self { frames, rate }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn rate(&self) -> FrameRate {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Video,
}

/// `K×N×D` code array for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityCodebook {
    pub codes: ParamId,
    pub modality: Modality,
    pub blocks: usize,
    pub codes_per_block: usize,
    pub dim: usize,
}

impl ModalityCodebook {
    /// Seeded Gaussian codes with scale `1/√D`; any code whose norm falls at
    /// or below the cosine guard is redrawn.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modality: Modality,
        (k, n, d): (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid scale");
        let mut data = Vec::with_capacity(k * n * d);
        for _ in 0..k * n {
            loop {
                let code: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
                if code.iter().map(|x| x * x).sum::<f64>().sqrt() > COSINE_EPS {
                    data.extend(code);
                    break;
                }
            }
        }
        let codes = store.add(name, Tensor::new([k, n, d], data).expect("sized"));
        Self { codes, modality, blocks: k, codes_per_block: n, dim: d }
    }

    pub fn param_count(&self) -> usize {
        self.blocks * self.codes_per_block * self.dim
    }

    fn check_block(&self, k: usize) -> Result<(), TameError> {
        if k >= self.blocks {
            Err(TameError::BlockIndex { k, blocks: self.blocks })
        } else {
            Ok(())
        }
    }

    /// Block `k` as an `N×D` tape value.
    pub fn block(&self, f: &mut Forward, k: usize) -> Result<Var, TameError> {
        self.check_block(k)?;
        let codes = f.param(self.codes);
        let slab = f.tape.slice(codes, 0, k, k + 1)?;
        Ok(f.tape.reshape(slab, &[self.codes_per_block, self.dim])?)
    }
}

/// Relation vector of one feature against block `k` of a code array
/// (`codes` is `K×N×D`): entry `n` is the cosine similarity of code `n` and `f`.
pub fn relate(f: &[f64], codes: &Tensor, k: usize) -> Result<Vec<f64>, TameError> {
    let [blocks, n, d] = codes.shape() else {
        return Err(NumericsError::Invalid { op: "relate", msg: format!("codes shape {:?}", codes.shape()) }.into());
    };
    if k >= *blocks {
        return Err(TameError::BlockIndex { k, blocks: *blocks });
    }
    if f.len() != *d {
        return Err(TameError::Dimension { got: f.len(), expected: *d });
    }
    let base = k * n * d;
    Ok((0..*n)
        .map(|i| cosine_similarity(&codes.data()[base + i * d..base + (i + 1) * d], f, COSINE_EPS))
        .collect())
}

/// Tempered softmax over a relation vector.
pub fn code_distribution(rel: &[f64], tau: f64) -> Vec<f64> {
    softmax_tempered(rel, tau)
}

pub fn check_simplex(dist: &[f64], tol: f64) -> Result<(), TameError> {
    let sum: f64 = dist.iter().sum();
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > tol || min < -tol || !sum.is_finite() {
        return Err(TameError::Simplex { sum, min });
    }
    Ok(())
}

/// Distribution-weighted sum of block `k`'s codes (retrieval before the
/// projection).
pub fn mix_codes(dist: &[f64], codes: &Tensor, k: usize) -> Result<Vec<f64>, TameError> {
    check_simplex(dist, SIMPLEX_TOL)?;
    let [blocks, n, d] = codes.shape() else {
        return Err(NumericsError::Invalid { op: "mix_codes", msg: format!("codes shape {:?}", codes.shape()) }.into());
    };
    if k >= *blocks {
        return Err(TameError::BlockIndex { k, blocks: *blocks });
    }
    if dist.len() != *n {
        return Err(TameError::Dimension { got: dist.len(), expected: *n });
    }
    let base = k * n * d;
    let mut out = vec![0.0; *d];
    for (i, w) in dist.iter().enumerate() {
        for (o, c) in out.iter_mut().zip(&codes.data()[base + i * d..base + (i + 1) * d]) {
            *o += w * c;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TameConfig {
    /// Audio frames per video frame (and codebook blocks).
    pub k: usize,
    /// Codes per block.
    pub n: usize,
    /// Feature dimension.
    pub d: usize,
    pub tau: f64,
    /// One projection shared by cross-modal retrieval and self-recall.
    pub shared_projection: bool,
    /// A separate batch-norm per block instead of one across all blocks.
    pub per_block_bn: bool,
}

impl Default for TameConfig {
    fn default() -> Self {
        Self { k: 4, n: 32, d: 32, tau: 1.0, shared_projection: true, per_block_bn: false }
    }
}

/// Linear layer followed by batch-norm (one shared, or one per block).
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub linear: Linear,
    pub norms: Vec<BatchNorm>,
}

impl Projection {
    fn new(store: &mut ParamStore, name: &str, cfg: &TameConfig, rng: &mut ChaCha8Rng) -> Self {
        let linear = Linear::new(store, &format!("{name}.linear"), cfg.d, cfg.d, rng);
        let count = if cfg.per_block_bn { cfg.k } else { 1 };
        let norms = (0..count)
            .map(|i| {
                let bn_name = if cfg.per_block_bn { format!("{name}.bn{i}") } else { format!("{name}.bn") };
                BatchNorm::new(store, &bn_name, cfg.d)
            })
            .collect();
        Self { linear, norms }
    }

    /// Project `K` blocks of rows at once. With a shared batch-norm the
    /// statistics span every block.
    fn forward_blocks(&self, f: &mut Forward, blocks: &[Var]) -> Result<Vec<Var>, TameError> {
        let mut projected = Vec::with_capacity(blocks.len());
        for b in blocks {
            projected.push(self.linear.forward(f, *b)?);
        }
        if self.norms.len() == 1 {
            let rows: Vec<usize> = projected.iter().map(|v| f.tape.shape(*v)[0]).collect();
            let stacked = if projected.len() == 1 { projected[0] } else { f.tape.concat(&projected, 0)? };
            let normed = self.norms[0].forward(f, stacked)?;
            let mut out = Vec::with_capacity(rows.len());
            let mut start = 0;
            for r in rows {
                out.push(if blocks.len() == 1 { normed } else { f.tape.slice(normed, 0, start, start + r)? });
                start += r;
            }
            Ok(out)
        } else {
            projected.iter().zip(&self.norms).map(|(p, bn)| Ok(bn.forward(f, *p)?)).collect()
        }
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count() + self.norms.iter().map(BatchNorm::param_count).sum::<usize>()
    }

    pub fn macs_per_row(&self) -> usize {
        self.linear.macs_per_row() + self.norms[0].macs_per_row()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.linear.params();
        for bn in &self.norms {
            ids.extend(bn.params());
        }
        ids
    }
}

/// Cross-modal estimation output on the tape.
#[derive(Clone, Debug)]
pub struct AudioToVideo {
    /// Estimated video features at audio rate, `[R, D]` with `R = B·T_a`.
    pub estimate: Var,
    /// Audio code distributions per block, each `[R/K, N]`.
    pub q: Vec<Var>,
}

/// Video self-recall output on the tape.
#[derive(Clone, Debug)]
pub struct VideoRecall {
    /// Recalled features per block, each `[M, D]`.
    pub recalled: Vec<Var>,
    /// Video code distributions per block, each `[M, N]`.
    pub p: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TameModule {
    pub config: TameConfig,
    pub codebook_audio: ModalityCodebook,
    pub codebook_video: ModalityCodebook,
    pub projection: Projection,
    /// Present only when self-recall uses its own projection.
    pub recall_projection: Option<Projection>,
}

impl TameModule {
    pub fn new(store: &mut ParamStore, name: &str, config: TameConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = (config.k, config.n, config.d);
        let codebook_audio =
            ModalityCodebook::new(store, &format!("{name}.codebook_audio"), Modality::Audio, dims, &mut rng);
        let codebook_video =
            ModalityCodebook::new(store, &format!("{name}.codebook_video"), Modality::Video, dims, &mut rng);
        let projection = Projection::new(store, &format!("{name}.projection"), &config, &mut rng);
        let recall_projection = (!config.shared_projection)
            .then(|| Projection::new(store, &format!("{name}.recall_projection"), &config, &mut rng));
        Self { config, codebook_audio, codebook_video, projection, recall_projection }
    }

    pub fn param_count(&self) -> usize {
        self.codebook_audio.param_count()
            + self.codebook_video.param_count()
            + self.projection.param_count()
            + self.recall_projection.as_ref().map_or(0, Projection::param_count)
    }

    /// Parameters used at inference (the recall projection is training-only).
    pub fn inference_param_count(&self) -> usize {
        self.codebook_audio.param_count() + self.codebook_video.param_count() + self.projection.param_count()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.codebook_audio.codes, self.codebook_video.codes];
        ids.extend(self.projection.params());
        if let Some(p) = &self.recall_projection {
            ids.extend(p.params());
        }
        ids
    }

    /// Cosine relation of each row of `frames` (`[M, D]`) to block `k`.
    pub fn relate_rows(
        &self,
        f: &mut Forward,
        frames: Var,
        modality: Modality,
        k: usize,
    ) -> Result<Var, TameError> {
        let book = match modality {
            Modality::Audio => &self.codebook_audio,
            Modality::Video => &self.codebook_video,
        };
        let codes = book.block(f, k)?;
        Ok(cosine_similarity_rows(f.tape, frames, codes, COSINE_EPS)?)
    }

    fn distribution_rows(&self, tape: &mut Tape, rel: Var) -> Result<Var, TameError> {
        Ok(softmax_rows(tape, rel, self.config.tau)?)
    }

    /// Estimate interleaved video features from audio features `[R, D]`,
    /// where `R` is a multiple of `K` and rows `K·t .. K·t+K−1` belong to
    /// video frame `t`.
    pub fn estimate_video_from_audio(&self, f: &mut Forward, audio: Var) -> Result<AudioToVideo, TameError> {
        let (k, d) = (self.config.k, self.config.d);
        let shape = f.tape.shape(audio).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(TameError::Dimension { got: *shape.last().unwrap_or(&0), expected: d });
        }
        let rows = shape[0];
        if rows % k != 0 {
            return Err(TameError::Divisibility { frames: rows, k });
        }
        let groups = rows / k;
        let grouped = f.tape.reshape(audio, &[groups, k, d])?;
        let mut q = Vec::with_capacity(k);
        let mut mixed = Vec::with_capacity(k);
        for block in 0..k {
            let a = f.tape.slice(grouped, 1, block, block + 1)?;
            let a = f.tape.reshape(a, &[groups, d])?;
            let rel = self.relate_rows(f, a, Modality::Audio, block)?;
            let dist = self.distribution_rows(f.tape, rel)?;
            let codes = self.codebook_video.block(f, block)?;
            mixed.push(f.tape.matmul(dist, codes)?);
            q.push(dist);
        }
        let projected = self.projection.forward_blocks(f, &mixed)?;
        let mut parts = Vec::with_capacity(k);
        for p in projected {
            parts.push(f.tape.reshape(p, &[groups, 1, d])?);
        }
        let stacked = f.tape.concat(&parts, 1)?;
        let estimate = f.tape.reshape(stacked, &[rows, d])?;
        Ok(AudioToVideo { estimate, q })
    }

    /// Recall every video feature (`[M, D]`) through each block of the video
    /// codebook.
    pub fn self_recall_video(&self, f: &mut Forward, video: Var) -> Result<VideoRecall, TameError> {
        let d = self.config.d;
        let shape = f.tape.shape(video).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(TameError::Dimension { got: *shape.last().unwrap_or(&0), expected: d });
        }
        let mut p = Vec::with_capacity(self.config.k);
        let mut mixed = Vec::with_capacity(self.config.k);
        for block in 0..self.config.k {
            let rel = self.relate_rows(f, video, Modality::Video, block)?;
            let dist = self.distribution_rows(f.tape, rel)?;
            let codes = self.codebook_video.block(f, block)?;
            mixed.push(f.tape.matmul(dist, codes)?);
            p.push(dist);
        }
        let projection = self.recall_projection.as_ref().unwrap_or(&self.projection);
        let recalled = projection.forward_blocks(f, &mixed)?;
        Ok(VideoRecall { recalled, p })
    }

    /// Project one pre-projection retrieval (eval-mode statistics; block `k`
    /// selects the batch-norm when those are per block).
    pub fn retrieve(
        &self,
        store: &ParamStore,
        dist: &[f64],
        k: usize,
        mode: Mode,
    ) -> Result<Vec<f64>, TameError> {
        let mixed = mix_codes(dist, store.get(self.codebook_video.codes), k)?;
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, store, mode);
        let x = f.tape.constant(Tensor::new([1, self.config.d], mixed)?);
        let mut blocks = vec![x];
        let projection = if self.projection.norms.len() > 1 {
            Projection { linear: self.projection.linear.clone(), norms: vec![self.projection.norms[k].clone()] }
        } else {
            self.projection.clone()
        };
        blocks = projection.forward_blocks(&mut f, &blocks)?;
        Ok(f.tape.value(blocks[0]).data().to_vec())
    }

    /// Convenience wrapper around [`Self::estimate_video_from_audio`] for a
    /// single audio-rate sequence.
    pub fn estimate_sequence(
        &self,
        store: &ParamStore,
        audio: &FeatureSequence,
        mode: Mode,
    ) -> Result<FeatureSequence, TameError> {
        if audio.rate() != FrameRate::Audio {
            return Err(TameError::Rate { expected: FrameRate::Audio });
        }
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, store, mode);
        let x = f.tape.constant(audio.frames().clone());
        let out = self.estimate_video_from_audio(&mut f, x)?;
        Ok(FeatureSequence::new(f.tape.value(out.estimate).clone(), FrameRate::Audio))
    }

    /// Convenience wrapper around [`Self::self_recall_video`]: `K` sequences
    /// of `T_v` frames.
    pub fn recall_sequence(
        &self,
        store: &ParamStore,
        video: &FeatureSequence,
        mode: Mode,
    ) -> Result<Vec<FeatureSequence>, TameError> {
        if video.rate() != FrameRate::Video {
            return Err(TameError::Rate { expected: FrameRate::Video });
        }
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, store, mode);
        let x = f.tape.constant(video.frames().clone());
        let out = self.self_recall_video(&mut f, x)?;
        Ok(out.recalled.iter().map(|v| FeatureSequence::new(f.tape.value(*v).clone(), FrameRate::Video)).collect())
    }
}

#[cfg(test)]
mod tests;
