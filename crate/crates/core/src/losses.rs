//! Training objectives: video self-recall, audio→video estimation, the
//! codebook-distribution KL link, the speech-enhancement task loss and their
//! weighted total.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Batch, SpecVars, TrainOutputs};
use crate::numerics::functional::repeat_rows;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::signal::metrics::{si_sdr_slices, SI_SDR_CAP_DB, SI_SDR_EPS};
use crate::signal::{ComplexSpectrogram, IstftOperator, Stft, Waveform};

/// Lower clamp applied to `q` before taking its logarithm.
pub const KL_Q_FLOOR: f64 = 1e-8;
/// Row-sum tolerance for distributions entering the KL term.
pub const KL_SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("distribution row {row} is off the simplex (sum {sum})")]
    Simplex { row: usize, sum: f64 },
    #[error("dual-pass task loss needs two task terms, got {0}")]
    MissingTask(usize),
    #[error("loss weights must be finite and non-negative: {0:?}")]
    Weights(LossWeights),
    #[error("estimate waveform is not the inverse STFT of the estimate spectrogram")]
    Inconsistent,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, lambda: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = [self.alpha, self.beta, self.gamma, self.lambda].iter().all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(LossError::Weights(*self))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v_to_v: f64,
    pub l_a_to_v: f64,
    pub l_kl: f64,
    pub l_task: f64,
    pub total: f64,
}

/// Weighted total. With `dual_pass` exactly two task terms are summed;
/// otherwise exactly one is used.
pub fn total_loss(
    l_v_to_v: f64,
    l_a_to_v: f64,
    l_kl: f64,
    task: &[f64],
    w: &LossWeights,
    dual_pass: bool,
) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    let expected = if dual_pass { 2 } else { 1 };
    if task.len() != expected {
        return Err(LossError::MissingTask(task.len()));
    }
    let l_task: f64 = task.iter().sum();
    let total = w.alpha * l_v_to_v + w.beta * l_a_to_v + w.gamma * l_kl + w.lambda * l_task;
    Ok(LossBreakdown { l_v_to_v, l_a_to_v, l_kl, l_task, total })
}

/// `KL(p ‖ q)` in nats with `q` clamped at [`KL_Q_FLOOR`]; `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_Q_FLOOR).ln()))
        .sum()
}

fn check_rows(tape: &Tape, dist: Var) -> Result<(), LossError> {
    let v = tape.value(dist);
    let n = *v.shape().last().unwrap_or(&0);
    for (row, chunk) in v.data().chunks(n.max(1)).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > KL_SIMPLEX_TOL || chunk.iter().any(|x| *x < -KL_SIMPLEX_TOL) {
            return Err(LossError::Simplex { row, sum });
        }
    }
    Ok(())
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<(), LossError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::Shape(format!("{what}: {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// `Σ_k Σ_t ‖ᵏf̃_v^t − f_v^t‖²` over recalled blocks (each `[M, D]`).
pub fn loss_v_to_v(tape: &mut Tape, recalled: &[Var], video: Var) -> Result<Var, LossError> {
    let mut total: Option<Var> = None;
    for r in recalled {
        same_shape(tape, *r, video, "recalled vs video features")?;
        let diff = tape.sub(*r, video)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| LossError::Shape("no recalled blocks".into()))
}

/// `Σ_t Σ_k ‖f̂_v^{K·t+k} − f_v^t‖²` for estimates `[K·M, D]` and video
/// features `[M, D]`.
pub fn loss_a_to_v(tape: &mut Tape, estimated: Var, video: Var, k: usize) -> Result<Var, LossError> {
    let (rows, vrows) = (tape.shape(estimated)[0], tape.shape(video)[0]);
    if k == 0 || rows != k * vrows {
        return Err(LossError::Shape(format!("{rows} estimated frames vs K={k} × {vrows} video frames")));
    }
    let target = repeat_rows(tape, video, k)?;
    same_shape(tape, estimated, target, "estimate vs video features")?;
    let diff = tape.sub(estimated, target)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// `Σ_k mean_t KL(ᵏp^t ‖ ᵏq^t)`; `p[k]` and `q[k]` are `[M, N]` with row `t`
/// of `q[k]` coming from audio frame `K·t+k`.
pub fn loss_codebook_kl(tape: &mut Tape, p: &[Var], q: &[Var]) -> Result<Var, LossError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(LossError::Shape(format!("{} video vs {} audio blocks", p.len(), q.len())));
    }
    let mut total: Option<Var> = None;
    for (pk, qk) in p.iter().zip(q) {
        same_shape(tape, *pk, *qk, "p vs q")?;
        check_rows(tape, *pk)?;
        check_rows(tape, *qk)?;
        let pc = tape.clamp_min(*pk, f64::MIN_POSITIVE);
        let lp = tape.log(pc);
        let qc = tape.clamp_min(*qk, KL_Q_FLOOR);
        let lq = tape.log(qc);
        let gap = tape.sub(lp, lq)?;
        let terms = tape.mul(*pk, gap)?;
        let rows = tape.sum_axis(terms, 1, false)?;
        let m = tape.mean(rows);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("non-empty"))
}

/// SI-SDR (dB) of the waveform `e` on the tape against a fixed reference,
/// with the same guards as [`si_sdr_slices`].
pub fn si_sdr_tape(tape: &mut Tape, e: Var, reference: &[f64]) -> Result<Var, LossError> {
    if tape.shape(e) != [reference.len()] {
        return Err(LossError::Shape(format!("estimate {:?} vs reference {}", tape.shape(e), reference.len())));
    }
    let cc: f64 = reference.iter().map(|x| x * x).sum();
    if cc == 0.0 {
        return Err(crate::signal::SignalError::ZeroNorm("reference").into());
    }
    let c = tape.constant(Tensor::vector(reference.to_vec()));
    let ec = tape.dot(e, c)?;
    let alpha = tape.mul_scalar(ec, 1.0 / cc);
    let target = {
        let a2 = tape.square(alpha);
        tape.mul_scalar(a2, cc)
    };
    let scaled = tape.mul(alpha, c)?;
    let resid_vec = tape.sub(scaled, e)?;
    let residual = {
        let sq = tape.square(resid_vec);
        tape.sum(sq)
    };
    let (t, r) = (tape.value(target).item()?, tape.value(residual).item()?);
    if t == 0.0 {
        return Ok(tape.constant(Tensor::scalar(-SI_SDR_CAP_DB)));
    }
    if r <= SI_SDR_EPS * cc {
        return Ok(tape.constant(Tensor::scalar(SI_SDR_CAP_DB)));
    }
    let floored = tape.clamp_min(residual, SI_SDR_EPS);
    let ratio = tape.div(target, floored)?;
    let ln = tape.log(ratio);
    let db = tape.mul_scalar(ln, 10.0 / std::f64::consts::LN_10);
    Ok(tape.clamp(db, -SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// `‖E − C‖₁ − SI-SDR(istft(E), c)` for one scene; `E` planes are `[T, F]`
/// tape values and `C` planes fixed tensors of the same shape. SI-SDR is
/// scored over the synthesis interior of `c = istft(C)`.
pub fn loss_task(
    tape: &mut Tape,
    estimate: SpecVars,
    clean: (&Tensor, &Tensor),
    clean_ref: &[f64],
    istft: &Arc<IstftOperator>,
) -> Result<Var, LossError> {
    let mut l1: Option<Var> = None;
    for (plane, target) in [(estimate.re, clean.0), (estimate.im, clean.1)] {
        if tape.shape(plane) != target.shape() {
            return Err(LossError::Shape(format!("estimate {:?} vs clean {:?}", tape.shape(plane), target.shape())));
        }
        let c = tape.constant(target.clone());
        let diff = tape.sub(plane, c)?;
        let a = tape.abs(diff);
        let s = tape.sum(a);
        l1 = Some(match l1 {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let e = tape.apply_linear(istft.clone(), &[estimate.re, estimate.im])?;
    let n = tape.shape(e)[0];
    if n != clean_ref.len() {
        return Err(LossError::Shape(format!("{n} synthesized samples vs {} reference", clean_ref.len())));
    }
    let range = istft.stft().interior(n);
    let e = tape.slice(e, 0, range.start, range.end)?;
    let sdr = si_sdr_tape(tape, e, &clean_ref[range])?;
    Ok(tape.sub(l1.expect("two planes"), sdr)?)
}

/// Value-level task loss. `e` must be `istft(E)`; SI-SDR is scored over the
/// synthesis interior.
pub fn task_loss_value(
    estimate: &ComplexSpectrogram,
    clean: &ComplexSpectrogram,
    e: &Waveform,
    c: &Waveform,
) -> Result<f64, LossError> {
    if estimate.frames() != clean.frames() || estimate.bins() != clean.bins() {
        return Err(LossError::Shape(format!(
            "{}×{} vs {}×{}",
            estimate.frames(),
            estimate.bins(),
            clean.frames(),
            clean.bins()
        )));
    }
    let synth = Stft::new(estimate.config())?.synthesize(estimate)?;
    let scale = synth.samples().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    if synth.len() != e.len() || synth.samples().iter().zip(e.samples()).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
        return Err(LossError::Inconsistent);
    }
    let l1: f64 = estimate.re().iter().zip(clean.re()).map(|(a, b)| (a - b).abs()).sum::<f64>()
        + estimate.im().iter().zip(clean.im()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    if c.len() != e.len() {
        return Err(LossError::Shape(format!("{} vs {} samples", e.len(), c.len())));
    }
    let range = Stft::new(estimate.config())?.interior(e.len());
    Ok(l1 - si_sdr_slices(&e.samples()[range.clone()], &c.samples()[range])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Sum the task loss over both MUTUD decoder passes.
    pub dual_pass: bool,
    /// Divide the self-recall and estimation sums by `T_v`.
    pub time_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), dual_pass: true, time_mean: false }
    }
}

/// Tape handles of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub l_v_to_v: Option<Var>,
    pub l_a_to_v: Option<Var>,
    pub l_kl: Option<Var>,
    pub l_task: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossBreakdown {
            l_v_to_v: get(self.l_v_to_v),
            l_a_to_v: get(self.l_a_to_v),
            l_kl: get(self.l_kl),
            l_task: get(Some(self.l_task)),
            total: get(Some(self.total)),
        }
    }
}

/// Batch objective: every term is computed per scene and averaged over the
/// scenes in the batch.
pub fn batch_objective(
    tape: &mut Tape,
    out: &TrainOutputs,
    batch: &Batch,
    k: usize,
    cfg: &LossConfig,
    istft: &Arc<IstftOperator>,
) -> Result<ObjectiveVars, LossError> {
    cfg.weights.validate()?;
    let b = batch.scenes as f64;
    let per_scene = if cfg.time_mean { 1.0 / (b * (batch.frames / k) as f64) } else { 1.0 / b };

    let passes: &[SpecVars] = match (out.tame.is_some(), cfg.dual_pass) {
        (true, true) => &out.estimates,
        (true, false) => &out.estimates[1..],
        (false, _) => &out.estimates[..1],
    };
    let mut task: Option<Var> = None;
    for est in passes {
        for s in 0..batch.scenes {
            let (lo, hi) = (s * batch.frames, (s + 1) * batch.frames);
            let re = tape.slice(est.re, 0, lo, hi)?;
            let im = tape.slice(est.im, 0, lo, hi)?;
            let cr = slice_rows(&batch.clean_re, lo, hi);
            let ci = slice_rows(&batch.clean_im, lo, hi);
            let l = loss_task(tape, SpecVars { re, im }, (&cr, &ci), &batch.clean_refs[s], istft)?;
            task = Some(match task {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    let l_task = tape.mul_scalar(task.ok_or(LossError::MissingTask(0))?, 1.0 / b);
    let w = cfg.weights;
    let mut total = tape.mul_scalar(l_task, w.lambda);

    let (mut vv, mut av, mut kl) = (None, None, None);
    if let Some(t) = &out.tame {
        let raw = loss_v_to_v(tape, &t.recall.recalled, t.video_features)?;
        let v = tape.mul_scalar(raw, per_scene);
        let raw = loss_a_to_v(tape, t.estimate.estimate, t.video_features, k)?;
        let a = tape.mul_scalar(raw, per_scene);
        let q = loss_codebook_kl(tape, &t.recall.p, &t.estimate.q)?;
        for (var, weight) in [(v, w.alpha), (a, w.beta), (q, w.gamma)] {
            let scaled = tape.mul_scalar(var, weight);
            total = tape.add(total, scaled)?;
        }
        (vv, av, kl) = (Some(v), Some(a), Some(q));
    }
    Ok(ObjectiveVars { total, l_v_to_v: vv, l_a_to_v: av, l_kl: kl, l_task })
}

fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::new([hi - lo, cols], t.data()[lo * cols..hi * cols].to_vec()).expect("row slice")
}

#[cfg(test)]
mod tests;
