use super::*;
use crate::autodiff::Tape;
use crate::subword::{BOS, EOS};
use proptest::prelude::*;

fn tiny(arch: Arch) -> ModelConfig {
    match arch {
        Arch::Lstm | Arch::BiLstm => ModelConfig::Lstm(LstmConfig {
            embed_dim: 5,
            hidden_dim: 6,
            layers: 2,
            dropout: 0.0,
            bidirectional: arch == Arch::BiLstm,
            attention: true,
        }),
        Arch::Conv => ModelConfig::Conv(ConvConfig {
            enc_layers: 2,
            dec_layers: 2,
            dim: 6,
            kernel_width: 3,
            dropout: 0.0,
            max_positions: 16,
        }),
        Arch::Transformer => ModelConfig::Transformer(TransformerConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            dropout: 0.0,
            max_positions: 16,
            allow_uneven_heads: false,
        }),
    }
}

fn batch(rows: &[&[u32]]) -> IdBatch {
    IdBatch::from_rows(rows).unwrap()
}

fn logits(model: &SeqModel, src: &IdBatch, prefix: &IdBatch) -> Tensor {
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, model.params());
    (*model.forward(&ctx, src, prefix).unwrap().value()).clone()
}

#[test]
fn same_seed_same_parameters() {
    for arch in Arch::ALL {
        let a = build_model(&tiny(arch), 11, 13, 7).unwrap();
        let b = build_model(&tiny(arch), 11, 13, 7).unwrap();
        let c = build_model(&tiny(arch), 11, 13, 8).unwrap();
        let same = a.params().ids().all(|id| a.params().value(id) == b.params().value(id));
        let differ = a.params().ids().any(|id| a.params().value(id) != c.params().value(id));
        assert!(same && differ, "{arch}");
    }
}

#[test]
fn transformer_parameter_count() {
    // Per encoder layer: 4·(256² + 256) attention + (2·256·512 + 512 + 256)
    // feed-forward + 2·512 norms = 527,104. Per decoder layer one more
    // attention block and norm: 790,784. Plus two final norms (1,024),
    // embeddings 2·100·256 and output 256·100 + 100.
    let expected = 3 * 527_104 + 3 * 790_784 + 1_024 + 51_200 + 25_700;
    assert_eq!(expected, 4_031_588);
    let config = TransformerConfig::default();
    assert_eq!(transformer_param_count(&config, 100, 100), expected);
    let model = build_model(&ModelConfig::Transformer(config.clone()), 100, 100, 1).unwrap();
    assert_eq!(model.num_parameters(), expected);
    let uneven = TransformerConfig {
        n_heads: 3,
        allow_uneven_heads: true,
        ..config
    };
    let model = build_model(&ModelConfig::Transformer(uneven), 100, 100, 1).unwrap();
    assert_eq!(model.num_parameters(), expected);
}

#[test]
fn invalid_configs_rejected() {
    let three_heads = ModelConfig::Transformer(TransformerConfig {
        n_heads: 3,
        ..TransformerConfig::default()
    });
    assert!(matches!(build_model(&three_heads, 10, 10, 0), Err(ModelError::InvalidConfig(_))));
    assert!(build_model(&tiny(Arch::Lstm), 3, 10, 0).is_err());
}

#[test]
fn logits_shape_and_id_checks() {
    for arch in Arch::ALL {
        let model = build_model(&tiny(arch), 9, 10, 3).unwrap();
        let src = batch(&[&[4, 5, 6, EOS], &[7, EOS]]);
        let prefix = batch(&[&[BOS, 4, 5], &[BOS, 8, 9]]);
        assert_eq!(logits(&model, &src, &prefix).shape(), [2, 3, 10], "{arch}");
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let bad = batch(&[&[9]]);
        assert!(matches!(model.encode(&ctx, &bad), Err(ModelError::IdOutOfRange { id: 9, .. })));
    }
}

#[test]
fn bilstm_raw_width_is_twice_hidden() {
    let model = build_model(&tiny(Arch::BiLstm), 9, 9, 1).unwrap();
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, model.params());
    let src = batch(&[&[4, 5, EOS]]);
    let raw = model.recurrent_states(&ctx, &src).unwrap().unwrap();
    assert_eq!(raw.shape(), [1, 3, 12]);
    assert_eq!(model.encode(&ctx, &src).unwrap().states.shape(), [1, 3, 6]);
}

#[test]
fn bilstm_palindrome_symmetry() {
    // With the backward cell tied to the forward one, a palindrome read
    // right to left is the same sequence, so the mean-pooled halves agree.
    let mut config = tiny(Arch::BiLstm);
    if let ModelConfig::Lstm(c) = &mut config {
        c.layers = 1;
    }
    let mut model = build_model(&config, 9, 9, 5).unwrap();
    for suffix in ["weight_ih", "weight_hh", "bias"] {
        for l in 0..1 {
            let fwd = model.params().find(&format!("encoder.fwd.{l}.{suffix}")).unwrap();
            let bwd = model.params().find(&format!("encoder.bwd.{l}.{suffix}")).unwrap();
            let value = model.params().value(fwd).clone();
            *model.params_mut().value_mut(bwd) = value;
        }
    }
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, model.params());
    let src = batch(&[&[4, 6, 7, 6, 4]]);
    let raw = model.recurrent_states(&ctx, &src).unwrap().unwrap().value();
    let mut pooled = [0.0; 12];
    for row in raw.rows() {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    for j in 0..6 {
        assert!((pooled[j] - pooled[6 + j]).abs() < 1e-12);
    }
}

#[test]
fn conv_zeroed_layers_are_identity() {
    let mut model = build_model(&tiny(Arch::Conv), 9, 9, 2).unwrap();
    for l in 0..2 {
        for part in ["kernel", "bias"] {
            let id = model.params().find(&format!("encoder.{l}.{part}")).unwrap();
            model.params_mut().value_mut(id).data_mut().fill(0.0);
        }
    }
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, model.params());
    let src = batch(&[&[4, 5, 6]]);
    let memory = model.encode(&ctx, &src).unwrap();
    let embed = model.params().value(model.params().find("encoder.embed").unwrap());
    let pos = model.params().value(model.params().find("encoder.positions").unwrap());
    for (t, &id) in [4usize, 5, 6].iter().enumerate() {
        for j in 0..6 {
            let expected = embed.get(&[id, j]) + pos.get(&[t, j]);
            assert_eq!(memory.states.value().get(&[0, t, j]), expected);
        }
    }
}

#[test]
fn all_pad_source_is_flagged() {
    for arch in Arch::ALL {
        let model = build_model(&tiny(arch), 9, 9, 2).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let src = batch(&[&[PAD, PAD], &[4, EOS]]);
        let memory = model.encode(&ctx, &src).unwrap();
        assert_eq!(memory.fully_masked, [true, false], "{arch}");
        let out = model.decode(&ctx, &memory, &batch(&[&[BOS], &[BOS]])).unwrap();
        assert_eq!(out.shape(), [2, 1, 9]);
    }
}

#[test]
fn batch_order_equivariance() {
    for arch in Arch::ALL {
        let model = build_model(&tiny(arch), 9, 9, 4).unwrap();
        let rows: [&[u32]; 3] = [&[4, 5, EOS], &[6, EOS], &[7, 8, 4, EOS]];
        let swapped: [&[u32]; 3] = [rows[2], rows[0], rows[1]];
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let a = model.encode(&ctx, &batch(&rows)).unwrap().freeze();
        let b = model.encode(&ctx, &batch(&swapped)).unwrap().freeze();
        assert_eq!(a.select(&[2, 0, 1]).states, b.states, "{arch}");
    }
}

#[test]
fn causal_and_pad_invariant() {
    for arch in Arch::ALL {
        let model = build_model(&tiny(arch), 9, 9, 6).unwrap();
        let src = batch(&[&[4, 5, 6, EOS]]);
        let base = logits(&model, &src, &batch(&[&[BOS, 4, 5, 6]]));
        let changed = logits(&model, &src, &batch(&[&[BOS, 4, 8, 8]]));
        assert_eq!(base.data()[..2 * 9], changed.data()[..2 * 9], "{arch} causality");
        assert_ne!(base.data()[2 * 9..], changed.data()[2 * 9..]);
        let padded = batch(&[&[4, 5, 6, EOS, PAD, PAD]]);
        let again = logits(&model, &padded, &batch(&[&[BOS, 4, 5, 6]]));
        let worst = base.data().iter().zip(again.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{arch} pad drift {worst}");
    }
}

/// Pad id that no example uses, so target 0 is an ordinary class.
const NO_PAD: u32 = u32::MAX;

fn loss_of(logit_rows: &[f64], vocab: usize, targets: &[u32], eps: f64) -> f64 {
    loss_with_pad(logit_rows, vocab, targets, eps, NO_PAD)
}

fn loss_with_pad(logit_rows: &[f64], vocab: usize, targets: &[u32], eps: f64, pad: u32) -> f64 {
    let tape = Tape::inference();
    let rows = targets.len();
    let x = tape.constant(Tensor::new(&[1, rows, vocab], logit_rows.to_vec()).unwrap());
    label_smoothed_loss(x, targets, pad, eps).unwrap().value().item()
}

#[test]
fn loss_examples() {
    assert_eq!(loss_of(&[0.0, -1e4, -1e4, -1e4, -1e4], 5, &[0], 0.0), 0.0);
    for eps in [0.0, 0.1, 0.5] {
        assert!((loss_of(&[0.3; 4], 4, &[2], eps) - 4f64.ln()).abs() < 1e-12);
    }
    let (p, q) = (0.9f64, 0.1f64);
    let expected = (1.0 - 0.1) * -p.ln() + 0.1 * 0.5 * (-p.ln() - q.ln());
    let got = loss_of(&[p.ln(), q.ln()], 2, &[0], 0.1);
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 0.215_221_8).abs() < 1e-7);
}

#[test]
fn loss_ignores_pad_positions() {
    let a = loss_with_pad(&[0.1, 0.7, -0.2, 2.0, 1.0, 0.0], 3, &[2, PAD], 0.1, PAD);
    let b = loss_with_pad(&[0.1, 0.7, -0.2], 3, &[2], 0.1, PAD);
    assert_eq!(a, b);
    let tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(label_smoothed_loss(x, &[PAD, PAD], PAD, 0.1), Err(ModelError::AllPad)));
}

proptest! {
    #[test]
    fn loss_is_nonnegative(vals in proptest::collection::vec(-20.0f64..20.0, 12), eps in 0.0f64..0.9, t in 1u32..4) {
        let loss = loss_of(&vals, 4, &[t, (t + 1) % 4, 3], eps);
        prop_assert!(loss >= 0.0);
        if eps > 0.0 {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn softmax_shift_invariance(vals in proptest::collection::vec(-20.0f64..20.0, 6), shift in -50.0f64..50.0) {
        let tape = Tape::inference();
        let a = tape.constant(Tensor::new(&[1, 6], vals.clone()).unwrap()).softmax(1).unwrap().value();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let b = tape.constant(Tensor::new(&[1, 6], shifted).unwrap()).softmax(1).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let tape = Tape::inference();
    let mut rng = RngState::new(3);
    let mut t = |shape: &[usize]| tape.constant(Tensor::from_fn(shape, |_| rng.normal()));
    let (q, k, v) = (t(&[2, 3, 4]), t(&[2, 5, 4]), t(&[2, 5, 4]));
    let keep = [true, true, true, false, false, true, true, true, true, true];
    let bias = tape.constant(layers::key_bias(&keep, 2, 5));
    let (context, weights) = attend(q, k, v, Some(bias), 0.5).unwrap();
    assert_eq!(context.shape(), [2, 3, 4]);
    for (r, row) in weights.value().rows().enumerate() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if r < 3 {
            assert_eq!(&row[3..], [0.0, 0.0]);
        }
    }
}

/// Central differences on a sample of parameter coordinates.
#[test]
fn architecture_gradients_match_finite_differences() {
    for arch in Arch::ALL {
        let mut model = build_model(&tiny(arch), 9, 9, 12).unwrap();
        let src = batch(&[&[4, 5, 6, EOS], &[7, EOS]]);
        let prefix = batch(&[&[BOS, 4, 8], &[BOS, 5, PAD]]);
        let gold = [4, 8, EOS, 5, EOS, PAD];
        let loss = |m: &SeqModel| -> f64 {
            let tape = Tape::inference();
            let ctx = Ctx::eval(&tape, m.params());
            let l = label_smoothed_loss(m.forward(&ctx, &src, &prefix).unwrap(), &gold, PAD, 0.1).unwrap();
            l.value().item()
        };
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, model.params());
        let l = label_smoothed_loss(model.forward(&ctx, &src, &prefix).unwrap(), &gold, PAD, 0.1).unwrap();
        let grads = tape.backward(l).unwrap();
        let analytic: Vec<(ParamId, Tensor)> = grads.params().map(|(id, g)| (id, g.clone())).collect();
        drop(ctx);
        let mut rng = RngState::new(99);
        for (id, g) in analytic {
            for _ in 0..3 {
                let j = rng.below(g.numel());
                let orig = model.params().value(id).data()[j];
                model.params_mut().value_mut(id).data_mut()[j] = orig + 1e-5;
                let plus = loss(&model);
                model.params_mut().value_mut(id).data_mut()[j] = orig - 1e-5;
                let minus = loss(&model);
                model.params_mut().value_mut(id).data_mut()[j] = orig;
                let numeric = (plus - minus) / 2e-5;
                let a = g.data()[j];
                let err = (a - numeric).abs();
                assert!(
                    err < 1e-7 || err / a.abs().max(numeric.abs()) < 1e-4,
                    "{arch} {} [{j}]: {a} vs {numeric}",
                    model.params().name(id)
                );
            }
        }
    }
}

#[test]
fn incremental_steps_match_full_prefix() {
    for arch in Arch::ALL {
        let model = build_model(&tiny(arch), 9, 11, 5).unwrap();
        let src = batch(&[&[4, 5, 6, EOS], &[7, 8, EOS, 0]]);
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let memory = model.encode(&ctx, &src).unwrap().freeze();
        let mut cache = model.start_decoding(&memory).unwrap();
        let prefix: [[u32; 5]; 2] = [[BOS, 4, 9, 10, 5], [BOS, 6, 6, 7, 8]];
        for t in 1..=5 {
            let step = model.decode_step(&memory, &mut cache, &[prefix[0][t - 1], prefix[1][t - 1]]).unwrap();
            let rows: Vec<&[u32]> = prefix.iter().map(|p| &p[..t]).collect();
            let tape = Tape::inference();
            let ctx = Ctx::eval(&tape, model.params());
            let full = model
                .decode_last(&ctx, &memory.attach(&tape), &batch(&rows))
                .unwrap()
                .log_softmax(1)
                .unwrap()
                .value();
            for (a, b) in step.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-12, "{arch} step {t}: {a} vs {b}");
            }
        }
        assert_eq!(cache.steps(), 5);
        let picked = cache.select(&[1, 1, 0]);
        assert_eq!(picked.batch(), 3);
    }
}
