//! Composite operations built from tape primitives, plus plain-value
//! counterparts used outside of training.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Zero-norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// `softmax(tau · v)` over a plain vector, with max subtraction.
pub fn softmax_tempered(v: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = v.iter().map(|x| tau * x).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `⟨x,y⟩ / (max(‖x‖,eps)·max(‖y‖,eps))`, clamped to `[-1, 1]`.
///
/// Symmetric bit-for-bit: products commute and the norms are combined in a
/// fixed order.
pub fn cosine_similarity(x: &[f64], y: &[f64], eps: f64) -> f64 {
    assert_eq!(x.len(), y.len(), "cosine_similarity length mismatch");
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    let (lo, hi) = if nx <= ny { (nx, ny) } else { (ny, nx) };
    (dot / (lo * hi)).clamp(-1.0, 1.0)
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Row-wise tempered softmax of an `[M, N]` matrix on the tape.
///
/// The row maximum is subtracted as a constant; softmax is invariant to it,
/// so the gradient is unchanged.
pub fn softmax_rows(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var, NumericsError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(NumericsError::Invalid {
            op: "softmax_rows",
            msg: format!("expected [M, N], got {shape:?}"),
        });
    }
    let (m, n) = (shape[0], shape[1]);
    let value = tape.value(logits);
    let maxes: Vec<f64> = (0..m)
        .map(|i| value.data()[i * n..(i + 1) * n].iter().map(|x| tau * x).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = tape.constant(Tensor::new([m, 1], maxes)?);
    let scaled = tape.mul_scalar(logits, tau);
    let centred = tape.sub(scaled, shift)?;
    let exps = tape.exp(centred);
    let totals = tape.sum_axis(exps, 1, true)?;
    tape.div(exps, totals)
}

/// Cosine similarity between every row of `a` (`[M, D]`) and every row of
/// `b` (`[N, D]`), giving `[M, N]`.
pub fn cosine_similarity_rows(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var, NumericsError> {
    let na = tape.l2_norm_axis(a, 1, true)?;
    let na = tape.clamp_min(na, eps);
    let nb = tape.l2_norm_axis(b, 1, true)?;
    let nb = tape.clamp_min(nb, eps);
    let an = tape.div(a, na)?;
    let bn = tape.div(b, nb)?;
    let bt = tape.transpose(bn)?;
    let sim = tape.matmul(an, bt)?;
    Ok(tape.clamp(sim, -1.0, 1.0))
}

/// Logistic function `e^x / (1 + e^x)`, written as `exp(x − softplus(x))`.
pub fn sigmoid(tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
    let sp = tape.softplus(x);
    let d = tape.sub(x, sp)?;
    Ok(tape.exp(d))
}

/// Repeat each row of `[M, D]` `k` times: `[v0, v1] → [v0, v0, v1, v1]` for
/// `k = 2`.
pub fn repeat_rows(tape: &mut Tape, x: Var, k: usize) -> Result<Var, NumericsError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || k == 0 {
        return Err(NumericsError::Invalid { op: "repeat_rows", msg: format!("shape {shape:?}, k = {k}") });
    }
    if k == 1 {
        return Ok(x);
    }
    let (m, d) = (shape[0], shape[1]);
    let col = tape.reshape(x, &[m, 1, d])?;
    let stacked = tape.concat(&vec![col; k], 1)?;
    tape.reshape(stacked, &[m * k, d])
}

/// Sum of squared entries.
pub fn sum_squares(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    tape.sum(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_tempered(&[0.0; 4], 1.0), vec![0.25; 4]);
        assert_eq!(softmax_tempered(&[3.0, -1.0, 7.5], 0.0), vec![1.0 / 3.0; 3]);
        let p = softmax_tempered(&[2f64.ln(), 0.0], 1.0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0], COSINE_EPS), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], COSINE_EPS), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0], COSINE_EPS);
        assert!((c - 0.70710678).abs() < 1e-8);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0], COSINE_EPS), 0.0);
    }

    #[test]
    fn tape_softmax_matches_plain() {
        let mut t = Tape::new();
        let rows = Tensor::matrix(&[vec![0.3, -1.2, 2.0], vec![5.0, 5.0, -5.0]]);
        let x = t.constant(rows.clone());
        let s = softmax_rows(&mut t, x, 2.5).unwrap();
        for i in 0..2 {
            let plain = softmax_tempered(rows.row(i), 2.5);
            for (a, b) in t.value(s).row(i).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new([1, 4], vec![0.5, -0.3, 1.7, 0.0]).unwrap());
        let s = softmax_rows(&mut t, x, 1.0).unwrap();
        let first = t.slice(s, 1, 0, 1).unwrap();
        let loss = t.sum(first);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().sum().abs() < 1e-15);

        // The summed probabilities are constant, so their gradient vanishes.
        let mut t = Tape::new();
        let x = t.param(Tensor::new([1, 4], vec![0.5, -0.3, 1.7, 0.0]).unwrap());
        let s = softmax_rows(&mut t, x, 1.0).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn tape_cosine_matches_plain() {
        let a = Tensor::matrix(&[vec![1.0, 2.0, -1.0], vec![0.0, 0.0, 0.0]]);
        let b = Tensor::matrix(&[vec![0.5, 0.5, 0.5], vec![-3.0, 1.0, 2.0]]);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let s = cosine_similarity_rows(&mut t, va, vb, COSINE_EPS).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let plain = cosine_similarity(a.row(i), b.row(j), COSINE_EPS);
                assert!((t.value(s).row(i)[j] - plain).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(v in prop::collection::vec(-50.0f64..50.0, 1..40), tau in -20.0f64..20.0) {
            let p = softmax_tempered(&v, tau);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            pair in (1usize..16).prop_flat_map(|d| (
                prop::collection::vec(-10.0f64..10.0, d),
                prop::collection::vec(-10.0f64..10.0, d),
            ))
        ) {
            let (x, y) = pair;
            let a = cosine_similarity(&x, &y, COSINE_EPS);
            let b = cosine_similarity(&y, &x, COSINE_EPS);
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
