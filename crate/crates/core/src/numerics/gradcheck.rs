//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tol_rel)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error >= self.tol_rel)
    }

    /// Pass/fail per parameter tensor.
    pub fn per_param(&self) -> Vec<(usize, bool, f64)> {
        let n = self.entries.iter().map(|e| e.param + 1).max().unwrap_or(0);
        (0..n)
            .map(|p| {
                let worst = self
                    .entries
                    .iter()
                    .filter(|e| e.param == p)
                    .map(|e| e.rel_error)
                    .fold(0.0, f64::max);
                (p, worst < self.tol_rel, worst)
            })
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), NumericsError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compare `backward` gradients of the scalar built by `f` against
/// `(f(p+h) − f(p−h)) / 2h`, element by element.
///
/// `f` receives a fresh tape with every entry of `params` registered as a
/// gradient-carrying leaf, in order.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    h: f64,
    tol_rel: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NumericsError::Invalid { op: "finite_difference_check", msg: format!("step {h}") });
    }
    let (tape, vars, loss) = evaluate(&mut f, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect();
    drop(tape);

    let mut entries = Vec::new();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let mut probe = |delta: f64, work: &mut Vec<Tensor>| -> Result<f64, NumericsError> {
                let mut data = param.data().to_vec();
                data[ei] += delta;
                work[pi] = Tensor::new(param.shape().to_vec(), data)?;
                let (tape, _, loss) = evaluate(&mut f, work)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(NumericsError::NonFinite {
                        context: format!("loss at perturbed parameter {pi}[{ei}]"),
                        index: ei,
                    });
                }
                Ok(value)
            };
            let plus = probe(h, &mut work)?;
            let minus = probe(-h, &mut work)?;
            work[pi] = param.clone();
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            entries.push(GradCheckEntry {
                param: pi,
                element: ei,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { entries, tol_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::functional::{cosine_similarity_rows, softmax_rows, COSINE_EPS};

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.7, 2.2]);
        let report = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                Ok(t.mul_scalar(s, 3.0))
            },
            &[p],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.entries);
    }

    #[test]
    fn constant_function_passes() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let report = finite_difference_check(
            |t, v| {
                let s = t.sum(v[0]);
                let z = t.mul_scalar(s, 0.0);
                Ok(t.add_scalar(z, 4.0))
            },
            &[p],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.entries.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let a = Tensor::new([3, 4], (0..12).map(|i| ((i * 7) as f64 * 0.31).sin() + 0.1).collect()).unwrap();
        let b = Tensor::new([5, 4], (0..20).map(|i| ((i * 3) as f64 * 0.53).cos()).collect()).unwrap();
        let report = finite_difference_check(
            |t, v| {
                let sim = cosine_similarity_rows(t, v[0], v[1], COSINE_EPS)?;
                let p = softmax_rows(t, sim, 2.0)?;
                let mixed = t.matmul(p, v[1])?;
                let sp = t.softplus(mixed);
                let l = t.log(sp);
                let ab = t.abs(l);
                let sq = t.sqrt(sp);
                let tot = t.add(ab, sq)?;
                let m = t.mean_axis(tot, 0, false)?;
                let e = t.exp(m);
                let c = t.concat(&[e, m], 0)?;
                let s = t.slice(c, 0, 1, 6)?;
                let d = t.dot(s, s)?;
                Ok(d)
            },
            &[a, b],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel {}", report.max_rel_error());
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::vector(vec![1.0]);
        assert!(finite_difference_check(|t, v| Ok(t.sum(v[0])), &[p], 0.0, 1e-4).is_err());
    }
}
