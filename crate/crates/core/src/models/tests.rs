use super::*;
use crate::numerics::params::Mode;
use crate::numerics::Tape;
use crate::signal::{generate_scene, SceneConfig};

fn scene_cfg() -> SceneConfig {
    SceneConfig { duration_s: 0.5, snr_db: -5.0, ..Default::default() }
}

fn prepared(seed: u64) -> PreparedScene {
    let cfg = scene_cfg();
    let stft = Stft::new(cfg.stft).unwrap();
    PreparedScene::new(&generate_scene(seed, &cfg).unwrap(), &stft).unwrap()
}

fn build(variant: VariantKind) -> (System, ParamStore, TameConfig) {
    let tame = TameConfig { n: 8, ..Default::default() };
    let cfg = ModelConfig { variant, ..Default::default() };
    let mut store = ParamStore::new();
    let sys = System::new(&mut store, cfg, &tame, 3).unwrap();
    (sys, store, tame)
}

#[test]
fn repeat_rows_example() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let r = repeat_rows(&mut tape, v, 2).unwrap();
    assert_eq!(tape.value(r).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
}

#[test]
fn store_counts_match_closed_form() {
    for variant in VariantKind::ALL {
        let (sys, store, tame) = build(variant);
        let counts = ParamCounts::of(&sys.config, &tame);
        assert_eq!(store.count(&sys.inference_params()), counts.inference(variant), "{variant:?}");
        assert_eq!(store.count(&sys.train_params()), counts.train(), "{variant:?}");
        assert_eq!(store.count(&store.ids().collect::<Vec<_>>()), counts.train(), "{variant:?}");
    }
}

#[test]
fn mutud_parameter_identities() {
    let tame = TameConfig::default();
    let m = ModelConfig::default();
    let a = ModelConfig { variant: VariantKind::AudioOnly, ..Default::default() };
    let (pm, pa) = (ParamCounts::of(&m, &tame), ParamCounts::of(&a, &tame));
    // The MUTUD decoder reads [F_a, F̂_v], so it has D·hidden more weights.
    assert_eq!(
        pm.inference(VariantKind::Mutud),
        pa.inference(VariantKind::AudioOnly) + pm.tame_inference + m.d * m.widths.decoder_hidden
    );
    assert_eq!(pm.train(), pm.inference(VariantKind::Mutud) + pm.video_encoder);
    assert_eq!(pm.tame_inference, 2 * 4 * 32 * 32 + 32 * 32 + 32 + 64);
}

#[test]
fn tame_closed_form_count() {
    let tame = TameConfig { k: 4, n: 8, d: 6, ..Default::default() };
    let cfg = ModelConfig { d: 6, ..Default::default() };
    assert_eq!(ParamCounts::of(&cfg, &tame).tame_inference, 438);
}

#[test]
fn matched_audio_only_within_two_percent() {
    let tame = TameConfig::default();
    let reference = ModelConfig::default();
    let matched = match_parameters(&reference, &tame).unwrap();
    let target = ParamCounts::of(&reference, &tame).inference(VariantKind::Mutud) as f64;
    let got = ParamCounts::of(&matched, &tame).inference(VariantKind::AudioOnlyMatched) as f64;
    assert!((got - target).abs() / target <= 0.02);
    assert_eq!(matched.variant, VariantKind::AudioOnlyMatched);

    let mut last = 0;
    for h in [1, 2, 8, 32, 64, 65, 128, 1024] {
        let mut c = matched.clone();
        c.widths.audio_hidden = h;
        c.widths.decoder_hidden = h;
        let n = ParamCounts::of(&c, &tame).inference(c.variant);
        assert!(n > last);
        last = n;
    }
    let not_mutud = ModelConfig { variant: VariantKind::AudioOnly, ..Default::default() };
    assert!(match_parameters(&not_mutud, &tame).is_err());
}

#[test]
fn training_pass_shapes() {
    let scenes = [prepared(1), prepared(2)];
    let batch = Batch::new(&scenes.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(batch.frames, 48);
    for variant in VariantKind::ALL {
        let (sys, store, _) = build(variant);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let out = sys.forward_train(&mut f, &batch).unwrap();
        let expected = if variant == VariantKind::Mutud { 2 } else { 1 };
        assert_eq!(out.estimates.len(), expected);
        for e in &out.estimates {
            assert_eq!(f.tape.shape(e.re), &[96, 161]);
        }
        assert_eq!(out.tame.is_some(), variant == VariantKind::Mutud);
    }
}

#[test]
fn audiovisual_decoder_input_width() {
    let cfg = SceneConfig { duration_s: 1.0, ..scene_cfg() };
    let stft = Stft::new(cfg.stft).unwrap();
    let s = PreparedScene::new(&generate_scene(5, &cfg).unwrap(), &stft).unwrap();
    assert_eq!(s.video.shape()[0], 24);
    let (sys, store, _) = build(VariantKind::Audiovisual);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let fa = f.tape.constant(Tensor::zeros([96, 32]));
    let fv = sys.video_features(&mut f, &s.video).unwrap();
    let fv = f.tape.constant(fv);
    let up = repeat_rows(f.tape, fv, 4).unwrap();
    let x = f.tape.concat(&[fa, up], 1).unwrap();
    assert_eq!(f.tape.shape(x), &[96, 64]);
    assert_eq!(sys.decoder.in_dim(), 64);
}

#[test]
fn inference_contracts() {
    let s = prepared(4);
    let (mutud, store, _) = build(VariantKind::Mutud);
    let run = |sys: &System, store: &ParamStore, video: Option<&Tensor>| {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, store, Mode::Eval);
        sys.forward_infer(&mut f, &s.noisy, video)
    };
    let a = run(&mutud, &store, None).unwrap();
    let b = run(&mutud, &store, None).unwrap();
    assert_eq!(a, b);
    assert!(run(&mutud, &store, Some(&s.video)).is_err());

    let (av, av_store, _) = build(VariantKind::Audiovisual);
    assert!(run(&av, &av_store, None).is_err());
    assert!(run(&av, &av_store, Some(&s.video)).is_ok());

    let (ao, ao_store, _) = build(VariantKind::AudioOnly);
    assert!(run(&ao, &ao_store, Some(&s.video)).is_err());
    assert_eq!(run(&ao, &ao_store, None).unwrap().frames(), 48);
}

#[test]
fn mutud_inference_never_reads_the_video_encoder() {
    let s = prepared(6);
    let (mutud, store, _) = build(VariantKind::Mutud);
    let mut scrambled = store.clone();
    for id in mutud.video.as_ref().unwrap().params() {
        let t = scrambled.get(id).map(|v| v * -3.0 + 1.0);
        scrambled.set(id, t);
    }
    let run = |store: &ParamStore| {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, store, Mode::Eval);
        mutud.forward_infer(&mut f, &s.noisy, None).unwrap()
    };
    assert_eq!(run(&store), run(&scrambled));
}

#[test]
fn mask_output_scales_noisy_planes() {
    let s = prepared(8);
    let tame = TameConfig { n: 8, ..Default::default() };
    let cfg = ModelConfig {
        variant: VariantKind::AudioOnly,
        input: InputFeatures::LogMagnitude,
        output: OutputMode::Mask,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let sys = System::new(&mut store, cfg, &tame, 1).unwrap();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let out = sys.forward_infer(&mut f, &s.noisy, None).unwrap();
    for ((er, ei), (nr, ni)) in out.re().iter().zip(out.im()).zip(s.noisy.re().iter().zip(s.noisy.im())) {
        assert!(er.abs() <= nr.abs() + 1e-15 && ei.abs() <= ni.abs() + 1e-15);
        if nr.abs() > 1e-9 && ni.abs() > 1e-9 {
            assert!((er / nr - ei / ni).abs() < 1e-9);
        }
    }
}
