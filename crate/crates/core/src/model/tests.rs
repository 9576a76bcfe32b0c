use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ctc::{ctc_loss_var, rows_normalized};
use crate::data::{synth_vocab, Casing, EOS};
use crate::tensor::Var;

fn tiny_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        conv_channels: 2,
        conv_kernel: 3,
        conv_stride: 2,
        conv_blocks: 1,
        dropout_ff: 0.0,
        dropout_att: 0.0,
        label_smoothing: 0.1,
    }
}

fn vocab(lang: &str, n: usize) -> Vocabulary {
    synth_vocab(lang, n, Casing::Lower).unwrap()
}

fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> Tensor {
    let data = (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(frames, dim, data).unwrap()
}

#[test]
fn conv_arithmetic() {
    let mut c = ModelConfig::desk(80);
    assert_eq!(c.subsampled_len(11), Some(5));
    assert_eq!(c.subsampled_feat(), 40);
    c.conv_blocks = 2;
    assert_eq!(c.subsampled_len(11), Some(2));
    assert_eq!(c.min_frames(), 7);
    assert_eq!(c.subsampled_len(6), None);
    assert_eq!(c.subsampled_feat(), 20);
}

#[test]
fn too_short_and_bad_dim_are_errors() {
    let mut cfg = tiny_config(4);
    cfg.conv_blocks = 2;
    let m = Model::new(cfg, &[vocab("xx", 3)], 1).unwrap();
    let err = m.encode(&Tensor::zeros(&[6, 4])).unwrap_err();
    assert!(matches!(err, ModelError::TooShort { frames: 6, required: 7 }));
    let err = m.encode(&Tensor::zeros(&[20, 5])).unwrap_err();
    assert!(matches!(err, ModelError::InputDim { got: 5, expected: 4 }));
}

#[test]
fn zero_input_gives_finite_normalized_outputs() {
    let m = Model::new(tiny_config(4), &[vocab("xx", 3)], 1).unwrap();
    let enc = m.encode(&Tensor::zeros(&[11, 4])).unwrap();
    assert_eq!(enc.states.shape(), &[5, 8]);
    let lp = m.ctc_log_probs(&enc, "xx").unwrap();
    assert_eq!(lp.shape(), &[5, 7]);
    assert!(lp.data().iter().all(|v| v.is_finite()));
    assert!(rows_normalized(&lp, 1e-9));
}

#[test]
fn heads_are_isolated_per_language() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = Model::new(tiny_config(4), &[vocab("aa", 3), vocab("bb", 5)], 7).unwrap();
    let x = random_features(&mut rng, 13, 4);
    let enc = m.encode(&x).unwrap();
    let a_before = m.ctc_log_probs(&enc, "aa").unwrap();
    let b_before = m.decode_step(&enc, &[SOS, 4], "bb").unwrap();
    // Scrambling one language's heads leaves the other untouched.
    for name in m.head_param_names("aa") {
        let t = m.param_mut(&name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let a_after = m.ctc_log_probs(&enc, "aa").unwrap();
    let b_after = m.decode_step(&enc, &[SOS, 4], "bb").unwrap();
    assert!(!a_before.bit_eq(&a_after));
    assert_eq!(
        b_before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b_after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(matches!(
        m.ctc_log_probs(&enc, "cc"),
        Err(ModelError::UnknownLanguage(_))
    ));
}

#[test]
fn decoder_is_causal_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::new(tiny_config(4), &[vocab("xx", 6)], 2).unwrap();
    let enc = m.encode(&random_features(&mut rng, 15, 4)).unwrap();
    let full = m.decoder_log_probs(&enc, &[SOS, 4, 7, 5, 9], "xx").unwrap();
    for i in 0..5 {
        let prefix = &[SOS, 4, 7, 5, 9][..=i];
        let step = m.decode_step(&enc, prefix, "xx").unwrap();
        let row = full.row(i);
        assert!(row.iter().zip(&step).all(|(a, b)| a.to_bits() == b.to_bits()));
        let total: f64 = step.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn teacher_forcing_matches_stepwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Model::new(tiny_config(4), &[vocab("xx", 6)], 4).unwrap();
    let enc = m.encode(&random_features(&mut rng, 15, 4)).unwrap();
    let y = [6, 4, 8];
    let mut input = vec![SOS];
    input.extend_from_slice(&y);
    let targets: Vec<usize> = y.iter().copied().chain([EOS]).collect();
    let tf = m.decoder_log_probs(&enc, &input, "xx").unwrap();
    let tf_sum: f64 = targets.iter().enumerate().map(|(i, &t)| tf.at2(i, t)).sum();
    let step_sum: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| m.decode_step(&enc, &input[..=i], "xx").unwrap()[t])
        .sum();
    assert!((tf_sum - step_sum).abs() < 1e-12);
}

#[test]
fn decoder_input_validation() {
    let m = Model::new(tiny_config(4), &[vocab("xx", 3)], 4).unwrap();
    let enc = m.encode(&Tensor::zeros(&[9, 4])).unwrap();
    assert!(matches!(
        m.decode_step(&enc, &[4], "xx"),
        Err(ModelError::MissingSos)
    ));
    assert!(matches!(
        m.decode_step(&enc, &[SOS, 7], "xx"),
        Err(ModelError::TokenRange { id: 7, vocab: 7 })
    ));
}

#[test]
fn adding_a_language_adds_three_head_tensors_of_expected_size() {
    let cfg = tiny_config(4);
    let d = cfg.d_model;
    let mut m = Model::new(cfg, &[vocab("aa", 3)], 1).unwrap();
    let before = m.param_count();
    let v = vocab("bb", 9);
    let n = v.len();
    m.add_language(v, 1).unwrap();
    assert_eq!(m.param_count() - before, 3 * d * n + 2 * n);
    assert_eq!(m.head_param_names("bb").len(), 5);
    assert!(matches!(
        m.add_language(vocab("bb", 2), 1),
        Err(ModelError::DuplicateLanguage(_))
    ));
}

#[test]
fn initialization_is_seeded_and_name_keyed() {
    let a = Model::new(tiny_config(4), &[vocab("aa", 3)], 9).unwrap();
    let b = Model::new(tiny_config(4), &[vocab("aa", 3)], 9).unwrap();
    let c = Model::new(tiny_config(4), &[vocab("aa", 3)], 10).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    // The body does not depend on which heads exist.
    let d = Model::new(tiny_config(4), &[vocab("aa", 3), vocab("bb", 4)], 9).unwrap();
    for (name, t) in a.params() {
        assert!(t.bit_eq(d.param(name).unwrap()), "{name}");
    }
}

#[test]
fn random_inputs_never_produce_nan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = Model::new(tiny_config(4), &[vocab("xx", 5)], 3).unwrap();
    for _ in 0..20 {
        let frames = rng.gen_range(3..30);
        let x = random_features(&mut rng, frames, 4);
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 50.0).collect()).unwrap();
        let enc = m.encode(&x).unwrap();
        assert!(!enc.states.has_nan());
        let lp = m.ctc_log_probs(&enc, "xx").unwrap();
        assert!(rows_normalized(&lp, 1e-9));
        let step = m.decode_step(&enc, &[SOS, 5, 6], "xx").unwrap();
        assert!(step.iter().all(|v| !v.is_nan()));
    }
}

fn st_loss(f: &mut Forward, x: &Tensor, src: &[usize], tgt: &[usize]) -> Var {
    let enc = f.encode(x).unwrap();
    let ctc_lp = f.ctc_log_probs(enc, "src").unwrap();
    let ctc = ctc_loss_var(&mut f.tape, ctc_lp, src).unwrap();
    let mut input = vec![SOS];
    input.extend_from_slice(tgt);
    let targets: Vec<usize> = tgt.iter().copied().chain([EOS]).collect();
    let dec = f.decoder_log_probs(enc, &input, "tgt").unwrap();
    let ce = f.tape.cross_entropy(dec, &targets, 0.1).unwrap();
    let ctc = f.tape.scale(ctc, 0.3).unwrap();
    let ce = f.tape.scale(ce, 0.7).unwrap();
    f.tape.add(ctc, ce).unwrap()
}

#[test]
fn full_forward_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut m = Model::new(tiny_config(4), &[vocab("src", 3), vocab("tgt", 4)], 5).unwrap();
    let x = random_features(&mut rng, 13, 4);
    let (src, tgt) = ([4, 5, 6], [7, 4]);
    let grads = {
        let mut f = Forward::trainable_no_dropout(&m, &[]);
        let loss = st_loss(&mut f, &x, &src, &tgt);
        f.tape.backward(loss).unwrap();
        f.param_grads()
    };
    // Unused: the source decoder heads and the target CTC head.
    assert_eq!(grads.len(), m.params().len() - 5);
    let eval = |m: &Model| {
        let mut f = Forward::inference(m);
        let loss = st_loss(&mut f, &x, &src, &tgt);
        f.tape.value(loss).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for _ in 0..3 {
            let i = rng.gen_range(0..g.len());
            let orig = m.param(name).unwrap().data()[i];
            m.param_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&m);
            m.param_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&m);
            m.param_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / (1.0f64).max(fd.abs().max(an.abs()));
            worst = worst.max(err);
            assert!(err < 1e-6, "{name}[{i}]: fd {fd} vs analytic {an}");
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn frozen_prefixes_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let m = Model::new(tiny_config(4), &[vocab("src", 3), vocab("tgt", 4)], 5).unwrap();
    let x = random_features(&mut rng, 13, 4);
    let mut f = Forward::training(&m, 1, &["heads.src.".to_string()]);
    let enc = f.encode(&x).unwrap();
    let mut input = vec![SOS, 7];
    let dec = f.decoder_log_probs(enc, &input, "tgt").unwrap();
    input.remove(0);
    let ce = f.tape.cross_entropy(dec, &[7, EOS], 0.0).unwrap();
    f.tape.backward(ce).unwrap();
    let names: Vec<String> = f.param_grads().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| !n.starts_with("heads.src.")));
    assert!(names.iter().any(|n| n.starts_with("heads.tgt.")));
}

#[test]
fn dropout_is_replayable_from_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut cfg = tiny_config(4);
    cfg.dropout_ff = 0.3;
    cfg.dropout_att = 0.2;
    let m = Model::new(cfg, &[vocab("xx", 3)], 5).unwrap();
    let x = random_features(&mut rng, 13, 4);
    let run = |seed| {
        let mut f = Forward::training(&m, seed, &[]);
        let enc = f.encode(&x).unwrap();
        f.tape.value(enc).clone()
    };
    assert!(run(1).bit_eq(&run(1)));
    assert!(!run(1).bit_eq(&run(2)));
    // Inference never applies dropout.
    let inf = m.encode(&x).unwrap();
    assert!(!inf.states.bit_eq(&run(1)));
}
