use super::*;
use crate::numerics::finite_difference_check;
use crate::numerics::params::apply_updates;
use proptest::prelude::*;

fn eye_codes(k: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; k * n * n];
    for b in 0..k {
        for i in 0..n {
            data[b * n * n + i * n + i] = 1.0;
        }
    }
    Tensor::new([k, n, n], data).unwrap()
}

/// Module whose projection is the identity in eval mode.
fn identity_module(store: &mut ParamStore, cfg: TameConfig) -> TameModule {
    let m = TameModule::new(store, "tame", cfg, 1);
    let d = m.config.d;
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    store.set(m.projection.linear.weight, Tensor::new([d, d], w).unwrap());
    for bn in &m.projection.norms {
        store.set(bn.running_var, Tensor::full([d], 1.0 - crate::models::layers::BN_EPS));
    }
    m
}

#[test]
fn relate_examples() {
    let codes = eye_codes(2, 3);
    assert_eq!(relate(&[1.0, 0.0, 0.0], &codes, 1).unwrap(), vec![1.0, 0.0, 0.0]);
    let two = eye_codes(1, 2);
    let r = 1.0 / 2f64.sqrt();
    let rel = relate(&[r, r], &two, 0).unwrap();
    assert!(rel.iter().all(|v| (v - 0.70710678).abs() < 1e-8));
    assert_eq!(relate(&[0.0, 0.0], &two, 0).unwrap(), vec![0.0, 0.0]);
    assert!(matches!(relate(&[1.0, 0.0], &two, 1), Err(TameError::BlockIndex { k: 1, blocks: 1 })));
}

#[test]
fn distribution_examples() {
    assert_eq!(code_distribution(&[0.3; 5], 1.0), vec![0.2; 5]);
    let sharp = code_distribution(&[0.1, 0.9, 0.2, 0.85], 1000.0);
    assert!(sharp[1] > 0.99);
    let p = code_distribution(&[1.0, 0.0], 1.0);
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn retrieve_one_hot_selects_code() {
    let mut store = ParamStore::new();
    let m = identity_module(&mut store, TameConfig { k: 2, n: 3, d: 4, ..Default::default() });
    let codes = store.get(m.codebook_video.codes).clone();
    let out = m.retrieve(&store, &[0.0, 1.0, 0.0], 1, Mode::Eval).unwrap();
    let expected = &codes.data()[(3 + 1) * 4..(3 + 2) * 4];
    for (a, b) in out.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn retrieve_mixes_convexly_and_guards_simplex() {
    let codes = Tensor::new([1, 2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    assert_eq!(mix_codes(&[0.5, 0.5], &codes, 0).unwrap(), vec![1.0, 1.0]);
    assert!(matches!(mix_codes(&[0.25, 0.25], &codes, 0), Err(TameError::Simplex { .. })));
}

#[test]
fn estimate_shape_and_locality() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 4, n: 5, d: 3, ..Default::default() }, 3);
    let audio: Vec<f64> = (0..24).map(|i| (i as f64 * 0.77).sin()).collect();
    let seq = FeatureSequence::new(Tensor::new([8, 3], audio.clone()).unwrap(), FrameRate::Audio);
    let out = m.estimate_sequence(&store, &seq, Mode::Eval).unwrap();
    assert_eq!(out.len(), 8);

    let mut perturbed = audio;
    perturbed[5 * 3 + 1] += 0.5;
    let seq2 = FeatureSequence::new(Tensor::new([8, 3], perturbed).unwrap(), FrameRate::Audio);
    let out2 = m.estimate_sequence(&store, &seq2, Mode::Eval).unwrap();
    for t in 0..8 {
        let same = out.frame(t) == out2.frame(t);
        assert_eq!(same, t != 5, "frame {t}");
    }
}

#[test]
fn estimate_rejects_indivisible_frames() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 4, n: 2, d: 2, ..Default::default() }, 0);
    let seq = FeatureSequence::new(Tensor::zeros([6, 2]), FrameRate::Audio);
    assert!(matches!(m.estimate_sequence(&store, &seq, Mode::Eval), Err(TameError::Divisibility { frames: 6, k: 4 })));
}

#[test]
fn eval_mode_commutes_with_sequence_permutation() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 2, n: 4, d: 3, ..Default::default() }, 5);
    let seqs: Vec<Vec<f64>> = (0..3).map(|s| (0..12).map(|i| ((s * 12 + i) as f64 * 0.41).cos()).collect()).collect();
    let run = |order: &[usize]| {
        let data: Vec<f64> = order.iter().flat_map(|&s| seqs[s].clone()).collect();
        let seq = FeatureSequence::new(Tensor::new([12, 3], data).unwrap(), FrameRate::Audio);
        m.estimate_sequence(&store, &seq, Mode::Eval).unwrap()
    };
    let a = run(&[0, 1, 2]);
    let b = run(&[2, 0, 1]);
    for (pos, src) in [(0, 2), (1, 0), (2, 1)] {
        for t in 0..4 {
            assert_eq!(b.frame(pos * 4 + t), a.frame(src * 4 + t));
        }
    }
}

#[test]
fn hand_computed_audio_to_video() {
    let mut store = ParamStore::new();
    let cfg = TameConfig { k: 2, n: 2, d: 2, tau: 2.0, ..Default::default() };
    let m = TameModule::new(&mut store, "tame", cfg, 0);
    store.set(m.codebook_audio.codes, Tensor::new([2, 2, 2], vec![1., 0., 0., 1., 1., 1., 1., -1.]).unwrap());
    store.set(m.codebook_video.codes, Tensor::new([2, 2, 2], vec![2., 0., 0., 1., 0.5, 0.5, -1., 2.]).unwrap());
    store.set(m.projection.linear.weight, Tensor::matrix(&[vec![1.0, 0.5], vec![-0.25, 2.0]]));
    store.set(m.projection.linear.bias, Tensor::vector(vec![0.1, -0.2]));
    let bn = &m.projection.norms[0];
    store.set(bn.running_mean, Tensor::vector(vec![0.05, 0.1]));
    store.set(bn.running_var, Tensor::vector(vec![2.0, 0.5]));
    store.set(bn.gamma, Tensor::vector(vec![1.5, 0.8]));
    store.set(bn.beta, Tensor::vector(vec![0.0, 0.3]));
    let audio = FeatureSequence::new(Tensor::matrix(&[vec![3.0, 4.0], vec![1.0, 2.0]]), FrameRate::Audio);
    let out = m.estimate_sequence(&store, &audio, Mode::Eval).unwrap();
    let expected = [[0.7455921362316246, 1.7692826690208614], [0.3040232860535037, 1.5626380355127674]];
    for t in 0..2 {
        for d in 0..2 {
            assert!((out.frame(t)[d] - expected[t][d]).abs() < 1e-10);
        }
    }
}

#[test]
fn sharp_self_recall_reproduces_stored_feature() {
    let mut store = ParamStore::new();
    let cfg = TameConfig { k: 2, n: 3, d: 3, tau: 1000.0, ..Default::default() };
    let m = identity_module(&mut store, cfg);
    let f = [0.3, -0.6, 0.9];
    let mut codes = store.get(m.codebook_video.codes).data().to_vec();
    codes[3..6].copy_from_slice(&f); // block 0, code 1
    codes[9 + 6..9 + 9].copy_from_slice(&f); // block 1, code 2
    store.set(m.codebook_video.codes, Tensor::new([2, 3, 3], codes).unwrap());
    let seq = FeatureSequence::new(Tensor::new([1, 3], f.to_vec()).unwrap(), FrameRate::Video);
    let recalled = m.recall_sequence(&store, &seq, Mode::Eval).unwrap();
    assert_eq!(recalled.len(), 2);
    for r in &recalled {
        for (a, b) in r.frame(0).iter().zip(&f) {
            assert!((a - b).abs() < 1e-3);
        }
    }
    assert_eq!(recalled, m.recall_sequence(&store, &seq, Mode::Eval).unwrap());
}

#[test]
fn single_block_recall() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 1, n: 4, d: 2, ..Default::default() }, 2);
    let seq = FeatureSequence::new(Tensor::matrix(&[vec![1.0, 2.0], vec![-1.0, 0.5]]), FrameRate::Video);
    let out = m.recall_sequence(&store, &seq, Mode::Eval).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].len(), 2);
}

#[test]
fn codebook_init_codes_are_non_degenerate() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig::default(), 9);
    let codes = store.get(m.codebook_audio.codes);
    assert_eq!(codes.shape(), &[4, 32, 32]);
    for i in 0..4 * 32 {
        let norm: f64 = codes.data()[i * 32..(i + 1) * 32].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > COSINE_EPS);
    }
}

#[test]
fn block_isolation() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 3, n: 4, d: 3, ..Default::default() }, 4);
    let seq = FeatureSequence::new(
        Tensor::new([9, 3], (0..27).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap(),
        FrameRate::Audio,
    );
    let base = m.estimate_sequence(&store, &seq, Mode::Eval).unwrap();
    for book in [m.codebook_audio.codes, m.codebook_video.codes] {
        let mut s2 = store.clone();
        let mut codes = s2.get(book).data().to_vec();
        for v in &mut codes[12..24] {
            *v += 0.3; // block 1
        }
        s2.set(book, Tensor::new([3, 4, 3], codes).unwrap());
        let out = m.estimate_sequence(&s2, &seq, Mode::Eval).unwrap();
        for t in 0..9 {
            assert_eq!(base.frame(t) == out.frame(t), t % 3 != 1, "frame {t}");
        }
    }
}

#[test]
fn gradients_reach_codebooks_projection_and_inputs() {
    let mut store = ParamStore::new();
    let cfg = TameConfig { k: 2, n: 3, d: 3, tau: 1.5, ..Default::default() };
    let m = TameModule::new(&mut store, "tame", cfg, 8);
    let audio = Tensor::new([6, 3], (0..18).map(|i| (i as f64 * 0.9).sin() + 0.2).collect()).unwrap();
    let target = Tensor::new([6, 3], (0..18).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap();
    let ids = store.trainable_ids();
    let mut params: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).collect();
    params.push(audio);
    let report = finite_difference_check(
        |tape, vars| {
            let bound: Vec<(ParamId, Var)> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let mut f = Forward::with_bound(tape, &store, Mode::Eval, &bound);
            let out = m.estimate_video_from_audio(&mut f, *vars.last().unwrap()).map_err(|e| match e {
                TameError::Numerics(n) => n,
                other => NumericsError::Invalid { op: "tame", msg: other.to_string() },
            })?;
            let t = f.tape.constant(target.clone());
            let diff = f.tape.sub(out.estimate, t)?;
            let sq = f.tape.square(diff);
            Ok(f.tape.sum(sq))
        },
        &params,
        1e-4,
        1e-4,
    )
    .unwrap();
    let worst: Vec<_> = report.failures().take(5).collect();
    assert!(report.passed(), "max rel {} {:?}", report.max_rel_error(), worst);
    // Every group actually receives signal.
    for (p, _, _) in report.per_param() {
        let any = report.entries.iter().any(|e| e.param == p && e.analytic.abs() > 1e-9);
        let name = ids.get(p).map(|id| store.entry(*id).name.clone()).unwrap_or("audio".into());
        assert!(any, "no gradient reaches {name}");
    }
}

#[test]
fn train_mode_updates_running_stats() {
    let mut store = ParamStore::new();
    let m = TameModule::new(&mut store, "tame", TameConfig { k: 2, n: 3, d: 2, ..Default::default() }, 1);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let x = f.tape.constant(Tensor::new([4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
    m.estimate_video_from_audio(&mut f, x).unwrap();
    let updates = f.take_updates();
    assert_eq!(updates.len(), 2);
    let before = store.get(m.projection.norms[0].running_mean).clone();
    apply_updates(&mut store, updates);
    assert_ne!(&before, store.get(m.projection.norms[0].running_mean));
}

proptest! {
    #[test]
    fn distributions_lie_on_simplex(
        rel in prop::collection::vec(-1.0f64..1.0, 1..64),
        tau in 0.0f64..100.0,
    ) {
        let p = code_distribution(&rel, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(check_simplex(&p, 1e-9).is_ok());
    }

    #[test]
    fn retrieval_is_linear_in_distribution(
        a in prop::collection::vec(0.01f64..1.0, 4),
        b in prop::collection::vec(0.01f64..1.0, 4),
        lambda in 0.0f64..1.0,
    ) {
        let codes = Tensor::new([1, 4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (d1, d2) = (norm(&a), norm(&b));
        let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let m1 = mix_codes(&d1, &codes, 0).unwrap();
        let m2 = mix_codes(&d2, &codes, 0).unwrap();
        let mm = mix_codes(&mix, &codes, 0).unwrap();
        for i in 0..3 {
            prop_assert!((mm[i] - (lambda * m1[i] + (1.0 - lambda) * m2[i])).abs() < 1e-12);
        }
    }
}
