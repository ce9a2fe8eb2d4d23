use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::params::{Forward, Mode, ParamId, ParamStore};
use crate::numerics::{NumericsError, Tensor, Var};

/// Affine map `x·W + b` applied to every row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in ±1/√in, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(&format!("{name}.weight"), Tensor::new([in_dim, out_dim], w).expect("sized"));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Identity weights, zero bias (square layers only).
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        let weight = store.add(&format!("{name}.weight"), Tensor::new([dim, dim], w).expect("sized"));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros([dim]));
        Self { weight, bias, in_dim: dim, out_dim: dim }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, NumericsError> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let xw = f.tape.matmul(x, w)?;
        f.tape.add(xw, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn macs_per_row(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over rows with learned scale/shift and running
/// statistics for eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([dim])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([dim])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full([dim], 1.0)),
            dim,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running
    /// statistics update (momentum 0.1, unbiased variance); eval mode uses the
    /// stored statistics.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, NumericsError> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let normalized = match f.mode() {
            Mode::Train => {
                let rows = f.tape.shape(x)[0];
                let mean = f.tape.mean_axis(x, 0, true)?;
                let centred = f.tape.sub(x, mean)?;
                let sq = f.tape.square(centred);
                let var = f.tape.mean_axis(sq, 0, true)?;
                let shifted = f.tape.add_scalar(var, BN_EPS);
                let std = f.tape.sqrt(shifted);
                let out = f.tape.div(centred, std)?;

                let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
                let bm = f.tape.value(mean).data().to_vec();
                let bv = f.tape.value(var).data().to_vec();
                let rm = f.store().get(self.running_mean).data().to_vec();
                let rv = f.store().get(self.running_var).data().to_vec();
                let new_mean = rm.iter().zip(&bm).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
                let new_var =
                    rv.iter().zip(&bv).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias).collect();
                f.push_update(self.running_mean, Tensor::vector(new_mean));
                f.push_update(self.running_var, Tensor::vector(new_var));
                out
            }
            Mode::Eval => {
                let rm = f.param(self.running_mean);
                let rv = f.param(self.running_var);
                let centred = f.tape.sub(x, rm)?;
                let shifted = f.tape.add_scalar(rv, BN_EPS);
                let std = f.tape.sqrt(shifted);
                f.tape.div(centred, std)?
            }
        };
        let scaled = f.tape.mul(normalized, gamma)?;
        f.tape.add(scaled, beta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn macs_per_row(&self) -> usize {
        2 * self.dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Two affine layers with a softplus between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, NumericsError> {
        let h = self.hidden.forward(f, x)?;
        let h = f.tape.softplus(h);
        self.output.forward(f, h)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    pub fn macs_per_row(&self) -> usize {
        self.hidden.macs_per_row() + self.output.macs_per_row()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.hidden.params(), self.output.params()].concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::apply_updates;
    use crate::numerics::Tape;
    use rand::SeedableRng;

    #[test]
    fn dense_four_to_three_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "l", 4, 3, &mut rng);
        assert_eq!(l.param_count(), 15);
        assert_eq!(l.macs_per_row(), 12);
        assert_eq!(store.count(&l.params()), 15);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::matrix(&[vec![1.0, 10.0], vec![3.0, 20.0], vec![5.0, 30.0]]);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xv = f.tape.constant(x);
        let y = bn.forward(&mut f, xv).unwrap();
        let out = f.tape.value(y).clone();
        let updates = f.take_updates();
        for col in 0..2 {
            let m: f64 = (0..3).map(|r| out.row(r)[col]).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12);
        }
        apply_updates(&mut store, updates);
        assert!((store.get(bn.running_mean).data()[0] - 0.3).abs() < 1e-12);
        // unbiased variance of [1,3,5] is 4
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.set(bn.running_mean, Tensor::vector(vec![2.0]));
        store.set(bn.running_var, Tensor::vector(vec![4.0 - BN_EPS]));
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Eval);
        let xv = f.tape.constant(Tensor::new([2, 1], vec![2.0, 6.0]).unwrap());
        let y = bn.forward(&mut f, xv).unwrap();
        let v = f.tape.value(y).data().to_vec();
        assert!((v[0]).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
        assert!(f.take_updates().is_empty());
    }

    #[test]
    fn batch_norm_train_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.set(bn.gamma, Tensor::vector(vec![1.2, 0.7, -0.4]));
        store.set(bn.beta, Tensor::vector(vec![0.1, -0.3, 0.2]));
        let x = Tensor::new([4, 3], (0..12).map(|i| (i as f64 * 1.7).sin()).collect()).unwrap();
        let target = Tensor::new([4, 3], (0..12).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let params = vec![store.get(bn.gamma).clone(), store.get(bn.beta).clone(), x];
        let report = crate::numerics::finite_difference_check(
            |tape, v| {
                let mut f = Forward::with_bound(tape, &store, Mode::Train, &[(bn.gamma, v[0]), (bn.beta, v[1])]);
                let y = bn.forward(&mut f, v[2])?;
                let t = f.tape.constant(target.clone());
                let d = f.tape.mul(y, t)?;
                let sq = f.tape.square(d);
                Ok(f.tape.sum(sq))
            },
            &params,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error());
    }
}
