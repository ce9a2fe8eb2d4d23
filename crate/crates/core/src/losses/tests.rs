use super::*;
use crate::numerics::finite_difference_check;
use crate::signal::StftConfig;
use proptest::prelude::*;

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    let b = total_loss(2.0, 3.0, 0.5, &[100.0], &w, false).unwrap();
    assert!((b.total - 6.5).abs() < 1e-12);
    let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, lambda: 0.0 };
    assert_eq!(total_loss(2.0, 3.0, 0.5, &[100.0], &zero, false).unwrap().total, 0.0);
    let dual = total_loss(0.0, 0.0, 0.0, &[10.0, 14.0], &w, true).unwrap();
    assert_eq!(dual.l_task, 24.0);
    assert!(matches!(total_loss(0.0, 0.0, 0.0, &[10.0], &w, true), Err(LossError::MissingTask(1))));
    let bad = LossWeights { alpha: -1.0, ..w };
    assert!(matches!(total_loss(0.0, 0.0, 0.0, &[1.0], &bad, false), Err(LossError::Weights(_))));
}

#[test]
fn v_to_v_examples() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::matrix(&[vec![0.0, 0.0]]));
    let r = tape.constant(Tensor::matrix(&[vec![1.0, 0.0]]));
    let l = loss_v_to_v(&mut tape, &[r], f).unwrap();
    assert_eq!(scalar(&tape, l), 1.0);
    let same = loss_v_to_v(&mut tape, &[f, f], f).unwrap();
    assert_eq!(scalar(&tape, same), 0.0);

    let f2 = tape.constant(Tensor::matrix(&[vec![0.0, 0.0], vec![1.0, 1.0]]));
    let r1 = tape.constant(Tensor::matrix(&[vec![0.5, 0.0], vec![1.0, 1.5]]));
    let r2 = tape.constant(Tensor::matrix(&[vec![0.0, -0.5], vec![0.5, 1.0]]));
    let l = loss_v_to_v(&mut tape, &[r1, r2], f2).unwrap();
    assert!((scalar(&tape, l) - 1.0).abs() < 1e-15);
}

#[test]
fn a_to_v_examples() {
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::matrix(&[vec![0.0, 0.0]]));
    let est = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let l = loss_a_to_v(&mut tape, est, fv, 2).unwrap();
    assert_eq!(scalar(&tape, l), 2.0);
    let exact = tape.constant(Tensor::matrix(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
    let l = loss_a_to_v(&mut tape, exact, fv, 2).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    assert!(matches!(loss_a_to_v(&mut tape, est, fv, 3), Err(LossError::Shape(_))));
}

#[test]
fn kl_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(&[vec![1.0, 0.0]]));
    let q = tape.constant(Tensor::matrix(&[vec![0.5, 0.5]]));
    let l = loss_codebook_kl(&mut tape, &[p], &[q]).unwrap();
    assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((scalar(&tape, l) - 0.693147).abs() < 1e-6);
    let same = loss_codebook_kl(&mut tape, &[q], &[q]).unwrap();
    assert_eq!(scalar(&tape, same), 0.0);

    let pz = tape.constant(Tensor::matrix(&[vec![0.5, 0.5]]));
    let qz = tape.constant(Tensor::matrix(&[vec![1.0, 0.0]]));
    let l = loss_codebook_kl(&mut tape, &[pz], &[qz]).unwrap();
    let expected = 0.5 * (0.5f64 / 1.0).ln() + 0.5 * (0.5f64 / 1e-8).ln();
    assert!((scalar(&tape, l) - expected).abs() < 1e-12);
    assert!((kl_divergence(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-12);

    let off = tape.constant(Tensor::matrix(&[vec![0.5, 0.6]]));
    assert!(matches!(loss_codebook_kl(&mut tape, &[off], &[q]), Err(LossError::Simplex { .. })));
}

#[test]
fn kl_is_time_mean_summed_over_blocks() {
    let mut tape = Tape::new();
    let p0 = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.5, 0.5]]));
    let q0 = tape.constant(Tensor::matrix(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
    let l = loss_codebook_kl(&mut tape, &[p0, p0], &[q0, q0]).unwrap();
    // Each block: mean of (ln 2, 0); two blocks.
    assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn si_sdr_tape_matches_value_metric_and_gradients() {
    let c: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
    let e: Vec<f64> = (0..64).map(|i| 0.7 * (i as f64 * 0.3).sin() + 0.2 * (i as f64 * 1.1).cos()).collect();
    let mut tape = Tape::new();
    let ev = tape.param(Tensor::vector(e.clone()));
    let s = si_sdr_tape(&mut tape, ev, &c).unwrap();
    assert!((scalar(&tape, s) - si_sdr_slices(&e, &c).unwrap()).abs() < 1e-12);

    let perfect = tape.param(Tensor::vector(c.clone()));
    let s = si_sdr_tape(&mut tape, perfect, &c).unwrap();
    assert_eq!(scalar(&tape, s), SI_SDR_CAP_DB);

    let report = finite_difference_check(
        |t, v| si_sdr_tape(t, v[0], &c).map_err(|e| NumericsError::Invalid { op: "si_sdr", msg: e.to_string() }),
        &[Tensor::vector(e)],
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_error());
}

fn spec(frames: usize, f: impl Fn(usize) -> f64) -> ComplexSpectrogram {
    let cfg = StftConfig::default();
    let n = frames * cfg.bins();
    ComplexSpectrogram::new((0..n).map(&f).collect(), (0..n).map(|i| 0.5 * f(i + 7)).collect(), frames, cfg).unwrap()
}

#[test]
fn task_loss_examples() {
    let stft = Stft::new(StftConfig::default()).unwrap();
    let c_spec = spec(6, |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    let c = stft.synthesize(&c_spec).unwrap();
    assert_eq!(task_loss_value(&c_spec, &c_spec, &c, &c).unwrap(), -SI_SDR_CAP_DB);

    let zero = ComplexSpectrogram::zeros(6, StftConfig::default());
    let e = stft.synthesize(&zero).unwrap();
    let l1: f64 = c_spec.re().iter().chain(c_spec.im()).map(|v| v.abs()).sum();
    let v = task_loss_value(&zero, &c_spec, &e, &c).unwrap();
    assert!((v - (l1 + SI_SDR_CAP_DB)).abs() < 1e-9);

    assert!(matches!(task_loss_value(&c_spec, &c_spec, &c.scaled(2.0), &c), Err(LossError::Inconsistent)));
}

#[test]
fn tape_task_loss_agrees_with_value_version() {
    let stft = Stft::new(StftConfig::default()).unwrap();
    let c_spec = spec(5, |i| ((i * 13 % 7) as f64 - 3.0) / 4.0);
    let e_spec = spec(5, |i| ((i * 29 % 9) as f64 - 4.0) / 6.0);
    let c = stft.synthesize(&c_spec).unwrap();
    let e = stft.synthesize(&e_spec).unwrap();
    let expected = task_loss_value(&e_spec, &c_spec, &e, &c).unwrap();

    let op = Arc::new(IstftOperator::new(stft));
    let mut tape = Tape::new();
    let (er, ei) = e_spec.to_tensors();
    let (cr, ci) = c_spec.to_tensors();
    let est = SpecVars { re: tape.param(er), im: tape.param(ei) };
    let l = loss_task(&mut tape, est, (&cr, &ci), c.samples(), &op).unwrap();
    assert!((scalar(&tape, l) - expected).abs() < 1e-9);
}

fn simplex_rows(raw: &[f64], n: usize) -> Vec<f64> {
    raw.chunks(n).flat_map(|r| {
        let s: f64 = r.iter().sum();
        r.iter().map(move |x| x / s).collect::<Vec<_>>()
    }).collect()
}

proptest! {
    #[test]
    fn kl_is_non_negative(raw in prop::collection::vec(0.001f64..1.0, 16)) {
        let p = simplex_rows(&raw[..8], 8);
        let q = simplex_rows(&raw[8..], 8);
        prop_assert!(kl_divergence(&p, &q) >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn kl_invariant_to_joint_time_permutation(raw in prop::collection::vec(0.001f64..1.0, 24), shift in 1usize..3) {
        let p = simplex_rows(&raw[..12], 4);
        let q = simplex_rows(&raw[12..], 4);
        let rotate = |v: &[f64]| { let mut r = v.to_vec(); r.rotate_left(4 * shift); r };
        let eval = |p: Vec<f64>, q: Vec<f64>| {
            let mut tape = Tape::new();
            let pv = tape.constant(Tensor::new([3, 4], p).unwrap());
            let qv = tape.constant(Tensor::new([3, 4], q).unwrap());
            let l = loss_codebook_kl(&mut tape, &[pv], &[qv]).unwrap();
            tape.value(l).item().unwrap()
        };
        let a = eval(p.clone(), q.clone());
        let b = eval(rotate(&p), rotate(&q));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auxiliary_losses_are_non_negative(x in prop::collection::vec(-3.0f64..3.0, 12)) {
        let mut tape = Tape::new();
        let est = tape.constant(Tensor::new([4, 2], x[..8].to_vec()).unwrap());
        let fv = tape.constant(Tensor::new([2, 2], x[8..].to_vec()).unwrap());
        let a = loss_a_to_v(&mut tape, est, fv, 2).unwrap();
        prop_assert!(tape.value(a).item().unwrap() >= 0.0);
        let r = tape.slice(est, 0, 0, 2).unwrap();
        let v = loss_v_to_v(&mut tape, &[r], fv).unwrap();
        prop_assert!(tape.value(v).item().unwrap() >= 0.0);
    }
}
