use super::*;
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::models::{build_model, Arch, Ctx, IdBatch, ModelConfig, SeqModel, TransformerConfig};
use crate::subword::{build_vocab, EOS};
use proptest::prelude::*;

fn pair(src: &[u32], tgt: &[u32]) -> EncodedPair {
    EncodedPair::new(src.to_vec(), tgt.to_vec())
}

fn of_len(n: usize) -> EncodedPair {
    let mut ids = vec![4; n - 1];
    ids.push(EOS);
    pair(&ids, &ids)
}

#[test]
fn token_budget_packing() {
    let pairs: Vec<_> = (0..10).map(|_| of_len(5)).collect();
    let plan = make_batches(&pairs, BatchSpec::MaxTokens(25), 7).unwrap();
    assert_eq!(plan.batches.iter().map(Vec::len).collect::<Vec<_>>(), [5, 5]);
    assert_eq!(plan.skipped, 0);
}

#[test]
fn fixed_sentence_chunks() {
    let pairs: Vec<_> = (0..300).map(|i| of_len(2 + i % 7)).collect();
    let plan = BatchPlan::new(&pairs, BatchSpec::Sentences(128)).unwrap();
    assert_eq!(plan.batches.iter().map(Vec::len).collect::<Vec<_>>(), [128, 128, 44]);
}

#[test]
fn overlong_pairs_are_skipped() {
    let pairs = vec![of_len(3), of_len(9), of_len(4)];
    let plan = BatchPlan::new(&pairs, BatchSpec::MaxTokens(8)).unwrap();
    assert_eq!(plan.skipped, 1);
    assert_eq!(plan.batches, vec![vec![0, 2]]);
}

#[test]
fn collate_shifts_targets() {
    let pairs = vec![pair(&[5, 6, EOS], &[7, EOS]), pair(&[5, EOS], &[8, 9, 7, EOS])];
    let b = Batch::collate(&pairs, &[0, 1]).unwrap();
    assert_eq!(b.source.ids(), [5, 6, EOS, 5, EOS, 0]);
    assert_eq!(b.prev_output.ids(), [2, 7, 0, 0, 2, 8, 9, 7]);
    assert_eq!(b.target, [7, EOS, 0, 0, 8, 9, 7, EOS]);
    assert_eq!(b.target_tokens(), 6);
}

proptest! {
    #[test]
    fn batches_respect_budget_and_cover_once(
        lens in proptest::collection::vec((1usize..20, 1usize..20), 1..80),
        budget in 10usize..80,
        seed in any::<u64>(),
    ) {
        let pairs: Vec<_> = lens.iter().map(|&(s, t)| pair(&vec![4; s], &vec![5; t])).collect();
        let plan = make_batches(&pairs, BatchSpec::MaxTokens(budget), seed).unwrap();
        let mut seen = vec![0; pairs.len()];
        for batch in &plan.batches {
            prop_assert!(!batch.is_empty());
            let sw = batch.iter().map(|&i| pairs[i].source.len()).max().unwrap();
            let tw = batch.iter().map(|&i| pairs[i].target.len()).max().unwrap();
            prop_assert!(sw * batch.len() <= budget && tw * batch.len() <= budget);
            for &i in batch {
                seen[i] += 1;
            }
        }
        let too_long = pairs.iter().filter(|p| p.source.len() > budget || p.target.len() > budget).count();
        prop_assert_eq!(plan.skipped, too_long);
        for (i, p) in pairs.iter().enumerate() {
            let expected = usize::from(p.source.len() <= budget && p.target.len() <= budget);
            prop_assert_eq!(seen[i], expected);
        }
    }
}

/// One scalar parameter with gradient `g` (via loss = g·p).
fn scalar_store(value: f64, g: f64) -> ParamStore {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(&[value]));
    let grads = {
        let tape = Tape::new();
        let loss = tape.param(&store, id).scale(g).sum();
        tape.backward(loss).unwrap()
    };
    store.accumulate(&grads);
    store
}

fn hp(lr: f64) -> AdamParams {
    AdamParams {
        lr,
        betas: (0.9, 0.999),
        eps: 1e-8,
        clip_norm: 0.0,
    }
}

#[test]
fn adam_first_step_by_hand() {
    let mut store = scalar_store(1.0, 1.0);
    let mut state = AdamState::new(&store);
    adam_step(&mut store, &mut state, &hp(0.1)).unwrap();
    let p = store.value(store.find("p").unwrap()).data()[0];
    assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((p - 0.9).abs() < 1e-8);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = scalar_store(0.7, 0.0);
    let mut state = AdamState::new(&store);
    for _ in 0..3 {
        adam_step(&mut store, &mut state, &hp(0.1)).unwrap();
    }
    assert_eq!(store.value(store.find("p").unwrap()).data(), [0.7]);
}

#[test]
fn adam_rejects_nan_gradient() {
    let mut store = scalar_store(0.7, f64::NAN);
    let mut state = AdamState::new(&store);
    assert!(matches!(
        adam_step(&mut store, &mut state, &hp(0.1)),
        Err(TrainError::NonFiniteGradient { step: 1 })
    ));
    assert_eq!(state.step, 0);
    assert_eq!(store.value(store.find("p").unwrap()).data(), [0.7]);
}

#[test]
fn adam_clips_global_norm() {
    let mut store = scalar_store(0.0, 10.0);
    let mut state = AdamState::new(&store);
    let stats = adam_step(
        &mut store,
        &mut state,
        &AdamParams {
            clip_norm: 1.0,
            ..hp(0.1)
        },
    )
    .unwrap();
    assert!(stats.clipped);
    assert_eq!(stats.grad_norm, 10.0);
    assert!((state.m[0][0] - 0.1 * 1.0 / (10.0 + 1e-6) * 10.0).abs() < 1e-12);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut store = scalar_store(0.3, 0.25);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &hp(0.01)).unwrap();
        adam_step(&mut store, &mut state, &hp(0.01)).unwrap();
        (store.value(store.find("p").unwrap()).data()[0], state)
    };
    assert_eq!(run(), run());
}

#[test]
fn plateau_halves_rate() {
    let mut s = PlateauSchedule::new(0.005, 0.5, 1, 1e-4);
    assert_eq!(s.observe(2.0), 0.005);
    assert_eq!(s.observe(2.0), 0.0025);
    assert_eq!(s.observe(1.5), 0.0025);
    assert_eq!(s.observe(1.49995), 0.00125);
    let mut s = PlateauSchedule::new(0.003, 0.7, 2, 1e-4);
    s.observe(1.0);
    for k in 1..=10 {
        s.observe(1.0);
        s.observe(1.0);
        assert_eq!(s.lr(), 0.003 * 0.7f64.powi(k));
    }
}

fn tiny_transformer(vocab: usize, seed: u64) -> SeqModel {
    let config = ModelConfig::Transformer(TransformerConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        dropout: 0.1,
        max_positions: 32,
        allow_uneven_heads: false,
    });
    build_model(&config, vocab, vocab, seed).unwrap()
}

fn copy_pairs(n: usize, seed: u64) -> Vec<EncodedPair> {
    let mut rng = crate::autodiff::RngState::new(seed);
    (0..n)
        .map(|_| {
            let len = 2 + rng.below(4);
            let mut ids: Vec<u32> = (0..len).map(|_| 4 + rng.below(6) as u32).collect();
            ids.push(EOS);
            pair(&ids, &ids)
        })
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        max_tokens: 0,
        batch_size: 8,
        epochs: 3,
        ..TrainConfig::for_arch(Arch::Transformer)
    }
}

fn forward(model: &SeqModel, src: &[u32], prefix: &[u32]) -> Vec<f64> {
    let tape = Tape::inference();
    let ctx = Ctx::eval(&tape, model.params());
    let out = model
        .forward(&ctx, &IdBatch::from_rows(&[src]).unwrap(), &IdBatch::from_rows(&[prefix]).unwrap())
        .unwrap();
    out.value().data().to_vec()
}

#[test]
fn memorization_loss_drops_tenfold() {
    let pairs = copy_pairs(16, 3);
    let mut model = tiny_transformer(10, 1);
    model.set_dropout(0.0);
    let batch = Batch::collate(&pairs, &(0..16).collect::<Vec<_>>()).unwrap();
    let mut state = AdamState::new(model.params());
    let mut losses = Vec::new();
    for _ in 0..500 {
        let grads = {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, model.params());
            let logits = model.forward(&ctx, &batch.source, &batch.prev_output).unwrap();
            let loss = crate::models::label_smoothed_loss(logits, &batch.target, crate::subword::PAD, 0.0).unwrap();
            losses.push(loss.value().item());
            tape.backward(loss).unwrap()
        };
        let store = model.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        adam_step(store, &mut state, &hp(0.003)).unwrap();
    }
    assert!(losses[499] < losses[0] / 10.0, "{} -> {}", losses[0], losses[499]);
}

#[test]
fn training_is_deterministic_and_reports_best_epoch() {
    let pairs = copy_pairs(24, 5);
    let run = || {
        let mut model = tiny_transformer(10, 2);
        let out = train(&mut model, &pairs, &pairs[..8], &quick_config(), &TrainOptions::default()).unwrap();
        (model, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    let strip = |r: &TrainReport| r.epochs.clone();
    assert_eq!(strip(&o1.report), strip(&o2.report));
    for id in m1.params().ids() {
        assert_eq!(m1.params().value(id), m2.params().value(id));
    }
    assert_eq!(o1.report.epochs.len(), 3);
    assert_eq!(Some(o1.report.best_epoch), best_epoch_of(&o1.report.epochs));
    let best = o1.report.best().unwrap();
    assert!(o1.report.epochs.iter().all(|r| r.dev_bleu <= best.dev_bleu));
    assert!(o1.report.epochs.iter().filter(|r| r.epoch < best.epoch).all(|r| r.dev_bleu < best.dev_bleu));
    assert_eq!(o1.best.epoch, o1.report.best_epoch);
}

#[test]
fn best_epoch_prefers_earliest_tie() {
    let rec = |epoch, dev_bleu| EpochRecord {
        epoch,
        train_loss: 1.0,
        dev_loss: 1.0,
        dev_bleu,
        lr: 1.0,
    };
    assert_eq!(best_epoch_of(&[rec(1, 0.2), rec(2, 0.5), rec(3, 0.5), rec(4, 0.1)]), Some(2));
    assert_eq!(best_epoch_of(&[]), None);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let pairs = copy_pairs(20, 9);
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
        resume: true,
        ..TrainOptions::default()
    };
    let short = TrainConfig {
        epochs: 2,
        ..quick_config()
    };
    let mut model = tiny_transformer(10, 4);
    train(&mut model, &pairs, &pairs[..6], &short, &options).unwrap();
    let long = TrainConfig {
        epochs: 4,
        ..quick_config()
    };
    let mut resumed = tiny_transformer(10, 4);
    let r = train(&mut resumed, &pairs, &pairs[..6], &long, &options).unwrap();

    let mut straight = tiny_transformer(10, 4);
    let s = train(&mut straight, &pairs, &pairs[..6], &long, &TrainOptions::default()).unwrap();
    assert_eq!(r.report.epochs, s.report.epochs);
    for id in straight.params().ids() {
        assert_eq!(straight.params().value(id), resumed.params().value(id));
    }
    assert!(dir.path().join("best.dmt").exists());
    assert!(epoch_checkpoint_path(dir.path(), 4).exists());
    let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
}

#[test]
fn keep_last_prunes_all_but_best() {
    let pairs = copy_pairs(16, 2);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 4,
        keep_last: Some(1),
        ..quick_config()
    };
    let mut model = tiny_transformer(10, 6);
    let out = train(
        &mut model,
        &pairs,
        &pairs[..4],
        &config,
        &TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    for e in 1..=4 {
        let exists = epoch_checkpoint_path(dir.path(), e).exists();
        assert_eq!(exists, e == 4 || e == out.report.best_epoch, "epoch {e}");
    }
}

#[test]
fn empty_corpora_and_bad_configs_fail() {
    let mut model = tiny_transformer(10, 0);
    let pairs = copy_pairs(4, 0);
    let opts = TrainOptions::default();
    assert!(matches!(
        train(&mut model, &[], &pairs, &quick_config(), &opts),
        Err(TrainError::EmptyCorpus(_))
    ));
    let both = TrainConfig {
        max_tokens: 100,
        ..quick_config()
    };
    assert!(matches!(both.validate(), Err(TrainError::InvalidConfig(_))));
    let bad_shrink = TrainConfig {
        lr_shrink: 0.0,
        ..quick_config()
    };
    assert!(bad_shrink.validate().is_err());
}

#[test]
fn config_round_trips_through_pairs() {
    let c = TrainConfig {
        stop_at_bleu: Some(0.99),
        dropout: Some(0.25),
        ..quick_config()
    };
    let pairs = c.to_pairs();
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    assert_eq!(TrainConfig::from_lookup(Arch::Lstm, &get).unwrap(), c);
}

fn vocab_of(tokens: &[&str]) -> crate::subword::Vocabulary {
    let line: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
    build_vocab(std::iter::once(line.as_slice()), 1, None)
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let pairs = copy_pairs(8, 1);
    let mut model = tiny_transformer(10, 8);
    let out = train(
        &mut model,
        &pairs,
        &pairs,
        &TrainConfig {
            epochs: 1,
            ..quick_config()
        },
        &TrainOptions {
            fingerprints: ("aa".into(), "bb".into()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dmt");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.best);
    let again = dir.path().join("d.dmt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let restored = loaded.to_model().unwrap();
    let original = out.best.to_model().unwrap();
    let src = [4, 5, 6, EOS];
    let prefix = [2, 4, 5];
    assert_eq!(forward(&restored, &src, &prefix), forward(&original, &src, &prefix));
    assert_eq!(loaded.get("train.batch_size"), Some("8"));
}

#[test]
fn checkpoint_errors() {
    let model = tiny_transformer(7, 1);
    let src = vocab_of(&["a", "b", "c"]);
    let tgt = vocab_of(&["x", "y", "z"]);
    let ckpt = Checkpoint::from_model(&model, (&src.fingerprint(), &tgt.fingerprint()), 0, None, Vec::new());
    ckpt.check_vocabs(&src, &tgt).unwrap();
    assert!(matches!(
        ckpt.check_vocabs(&tgt, &tgt),
        Err(CheckpointError::Fingerprint { which: "source", .. })
    ));

    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(CheckpointError::Version { .. })));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Truncated { .. })
    ));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(CheckpointError::Truncated { .. })));
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
}

#[test]
fn arch_defaults_follow_the_recipe() {
    let t = TrainConfig::for_arch(Arch::Transformer);
    assert_eq!((t.learning_rate, t.batch_size, t.max_tokens, t.epochs), (5e-4, 128, 0, 10));
    for arch in [Arch::Lstm, Arch::BiLstm] {
        let c = TrainConfig::for_arch(arch);
        assert_eq!((c.learning_rate, c.batch_size, c.max_tokens, c.epochs), (5e-3, 0, 12000, 25));
    }
    let c = TrainConfig::for_arch(Arch::Conv);
    assert_eq!((c.max_tokens, c.epochs), (12000, 20));
    for arch in Arch::ALL {
        let c = TrainConfig::for_arch(arch);
        assert_eq!(c.lr_shrink, 0.5);
        c.validate().unwrap();
    }
}

#[test]
fn naming_one_batching_mode_switches_to_it() {
    let get = |k: &str| (k == "train.max_tokens").then(|| "4000".to_string());
    let c = TrainConfig::from_lookup(Arch::Transformer, &get).unwrap();
    assert_eq!((c.max_tokens, c.batch_size), (4000, 0));
    let get = |k: &str| (k == "train.batch_size").then(|| "32".to_string());
    let c = TrainConfig::from_lookup(Arch::Lstm, &get).unwrap();
    assert_eq!((c.max_tokens, c.batch_size), (0, 32));
}
