use std::rc::Rc;

use clamp_core::contrastive::{clamp_loss_and_grads, ContrastiveConfig};
use clamp_core::m3::{apply_noise, greedy_decode, m3_loss_and_grads, NoiseConfig};
use clamp_core::nn::{
    AdamW, ClampModel, ContrastiveVariant, GradCheck, Graph, M3Model, Mat, ModelConfig, NnError,
    OptimizerConfig, ParamStore, SeqLayout,
};
use clamp_core::patch::{encode_patch, PatchSequence, PatchTokens, END, PATCH_LEN, VOCAB_SIZE};
use clamp_core::corpus::PatchKind;
use clamp_core::text::{tokenize_text, TextTokens, TextVocab};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        encoder_layers: layers,
        text_layers: layers,
        decoder_layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_patches: 16,
        max_text_len: 16,
        dropout: 0.0,
        init_std: 0.3,
    }
}

fn random_seq(rng: &mut impl Rng, len: usize) -> PatchSequence {
    let patches: Vec<PatchTokens> = (0..len)
        .map(|i| {
            if i == 0 {
                return encode_patch("K:G");
            }
            let n = rng.gen_range(1..12);
            let text: String = (0..n).map(|_| rng.gen_range(b' '..=b'~') as char).collect();
            encode_patch(&text)
        })
        .collect();
    let kinds = (0..len)
        .map(|i| if i == 0 { PatchKind::Header } else { PatchKind::Bar })
        .collect();
    PatchSequence {
        mask: vec![true; len],
        patches,
        kinds,
    }
}

fn vocab() -> TextVocab {
    TextVocab::build(["a lively jig in d major", "slow air in e minor", "waltz"], 1)
}

fn texts(v: &TextVocab) -> Vec<TextTokens> {
    ["a lively jig", "slow air in e minor", "waltz in d"]
        .iter()
        .map(|t| tokenize_text(t, v, 16))
        .collect()
}

#[test]
fn clamp_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ClampModel::new(tiny(2), vocab(), 5).unwrap();
    let seqs: Vec<PatchSequence> = (0..3).map(|i| random_seq(&mut rng, 3 + i)).collect();
    let seq_refs: Vec<&PatchSequence> = seqs.iter().collect();
    let toks = texts(&model.vocab);
    let tok_refs: Vec<&TextTokens> = toks.iter().collect();
    for variant in [ContrastiveVariant::ExcludePositive, ContrastiveVariant::IncludePositive] {
        for normalize in [true, false] {
            // Raw pooled features give large logits; a unit temperature keeps
            // the finite-difference noise floor below the tolerance.
            let cfg = ContrastiveConfig {
                tau: if normalize { 0.5 } else { 1.0 },
                batch_size: 3,
                variant,
                normalize,
            };
            let check = GradCheck {
                per_tensor: Some(12),
                ..GradCheck::default()
            };
            let report = check.run(&model.params, |p| {
                let m = ClampModel::from_params(model.config.clone(), model.vocab.clone(), p.clone()).unwrap();
                clamp_loss_and_grads(&m, &seq_refs, &tok_refs, &cfg, None).unwrap()
            });
            assert!(report.max_rel_error < 1e-3, "{variant:?} normalize={normalize}: {report:?}");
            assert!(report.checked > 300);
        }
    }
}

#[test]
fn m3_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = M3Model::new(tiny(2), 9).unwrap();
    let noise = NoiseConfig {
        ratio: 0.5,
        mask_prob: 0.5,
        shuffle_prob: 0.3,
        unchanged_prob: 0.2,
        seed: 0,
    };
    let noised: Vec<_> = (0..2)
        .map(|_| {
            let seq = random_seq(&mut rng, 5);
            apply_noise(&seq, &noise, &mut rng).unwrap()
        })
        .collect();
    let refs: Vec<_> = noised.iter().collect();
    let check = GradCheck {
        per_tensor: Some(12),
        ..GradCheck::default()
    };
    let report = check.run(&model.params, |p| {
        let m = M3Model::from_params(model.config.clone(), p.clone()).unwrap();
        m3_loss_and_grads(&m, &refs, None).unwrap()
    });
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn attention_rows_sum_to_one_over_unmasked_keys() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.input(Mat::from_shape_fn((7, 8), |_| rng.gen_range(-2.0..2.0)));
    let mask = vec![true, true, false, true, true, true, false];
    let layout = Rc::new(SeqLayout::with_mask(&[4, 3], mask.clone()));
    for causal in [false, true] {
        let a = g.attention(x, x, x, Rc::clone(&layout), 2, causal);
        let probs = g.attention_probs(a).unwrap();
        assert_eq!(probs.len(), 4);
        for (idx, p) in probs.iter().enumerate() {
            let (start, _) = layout.segments[idx / 2];
            for (i, row) in p.rows().into_iter().enumerate() {
                let sum: f64 = row.sum();
                // A causal first row can see only masked keys in the second segment.
                if row.iter().all(|&v| v == 0.0) {
                    assert!(causal);
                    continue;
                }
                assert!((sum - 1.0).abs() < 1e-6, "row {i}: {sum}");
                for (j, &v) in row.iter().enumerate() {
                    if !mask[start + j] || (causal && j > i) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn patch_projection_matches_one_hot_matmul() {
    let model = M3Model::new(tiny(1), 2).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(4), 4);
    let mut g = Graph::new(&model.params);
    let (x, _) = model.music.embed(&mut g, &[&seq]).unwrap();
    let got = g.value(x).clone();
    let w = model.params.get("music.patch.w").unwrap();
    let b = model.params.get("music.patch.b").unwrap();
    let pos = model.params.get("music.pos").unwrap();
    for (i, patch) in seq.patches.iter().enumerate() {
        let one_hot = Mat::from_shape_vec((1, PATCH_LEN * VOCAB_SIZE), patch.one_hot()).unwrap();
        let expected = one_hot.dot(w) + b + pos.slice(s![i..i + 1, ..]);
        for (a, e) in got.row(i).iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weight_pad_patch_embeds_to_position() {
    let mut model = M3Model::new(tiny(1), 2).unwrap();
    let id = model.params.id("music.patch.w").unwrap();
    model.params.value_mut(id).fill(0.0);
    let pad = PatchTokens([0; PATCH_LEN]);
    let seq = PatchSequence {
        patches: vec![pad, pad],
        kinds: vec![PatchKind::Bar; 2],
        mask: vec![true; 2],
    };
    let mut g = Graph::new(&model.params);
    let (x, _) = model.music.embed(&mut g, &[&seq]).unwrap();
    let pos = model.params.get("music.pos").unwrap();
    assert_eq!(g.value(x).slice(s![0..2, ..]), pos.slice(s![0..2, ..]));
}

#[test]
fn identical_patches_differ_only_by_position() {
    let model = M3Model::new(tiny(1), 2).unwrap();
    let p = encode_patch("abc |");
    let seq = PatchSequence {
        patches: vec![p, p],
        kinds: vec![PatchKind::Bar; 2],
        mask: vec![true; 2],
    };
    let mut g = Graph::new(&model.params);
    let (x, _) = model.music.embed(&mut g, &[&seq]).unwrap();
    let pos = model.params.get("music.pos").unwrap();
    let diff = &g.value(x).row(1) - &g.value(x).row(0);
    let pos_diff = &pos.row(1) - &pos.row(0);
    for (a, b) in diff.iter().zip(pos_diff.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sequence_longer_than_max_is_rejected() {
    let model = M3Model::new(tiny(1), 2).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(1), 17);
    let mut g = Graph::new(&model.params);
    assert!(matches!(
        model.music.embed(&mut g, &[&seq]),
        Err(NnError::SequenceTooLong { len: 17, max: 16 })
    ));
}

fn pooled(model: &M3Model, seq: &PatchSequence) -> (Mat, Mat) {
    let mut g = Graph::new(&model.params);
    let out = model.music.forward(&mut g, &[seq]).unwrap();
    let n = out.normalized(&mut g);
    (g.value(out.hidden).clone(), g.value(n).clone())
}

#[test]
fn single_patch_pools_to_its_hidden_state() {
    let model = M3Model::new(tiny(2), 3).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(2), 1);
    let (hidden, feat) = pooled(&model, &seq);
    let norm = hidden.row(0).dot(&hidden.row(0)).sqrt();
    for (h, f) in hidden.row(0).iter().zip(feat.row(0).iter()) {
        assert!((h / norm - f).abs() < 1e-12);
    }
}

#[test]
fn zero_layer_stack_pools_mean_embedding() {
    let model = M3Model::new(tiny(0), 3).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(5), 5);
    let mut g = Graph::new(&model.params);
    let (x, _) = model.music.embed(&mut g, &[&seq]).unwrap();
    let mean = g.value(x).mean_axis(ndarray::Axis(0)).unwrap();
    let expected = &mean / mean.dot(&mean).sqrt();
    let (_, feat) = pooled(&model, &seq);
    for (a, b) in feat.row(0).iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn swapping_patches_with_positions_keeps_pooled_feature() {
    let model = M3Model::new(tiny(2), 8).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(6), 5);
    let (_, before) = pooled(&model, &seq);
    let mut swapped = seq.clone();
    swapped.patches.swap(1, 3);
    swapped.kinds.swap(1, 3);
    let mut params = model.params.clone();
    let id = params.id("music.pos").unwrap();
    let pos = params.value_mut(id);
    for c in 0..pos.ncols() {
        pos.swap([1, c], [3, c]);
    }
    let permuted = M3Model::from_params(model.config.clone(), params).unwrap();
    let (_, after) = pooled(&permuted, &swapped);
    for (a, b) in before.iter().zip(after.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_positions_do_not_affect_pooling() {
    let model = M3Model::new(tiny(2), 8).unwrap();
    let mut seq = random_seq(&mut ChaCha8Rng::seed_from_u64(7), 4);
    seq.mask[3] = false;
    let (_, a) = pooled(&model, &seq);
    seq.patches[3] = encode_patch("zzzz");
    let (_, b) = pooled(&model, &seq);
    assert_eq!(a, b);
    seq.mask = vec![false; 4];
    let mut g = Graph::new(&model.params);
    assert!(matches!(model.music.forward(&mut g, &[&seq]), Err(NnError::EmptyPool)));
}

#[test]
fn features_are_unit_norm_and_deterministic() {
    let model = ClampModel::new(ModelConfig { dropout: 0.1, ..tiny(2) }, vocab(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs: Vec<PatchSequence> = (0..4).map(|i| random_seq(&mut rng, 2 + i)).collect();
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let a = model.music_features(&refs).unwrap();
    assert_eq!(a, model.music_features(&refs).unwrap());
    for row in a.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
    let toks = texts(&model.vocab);
    let trefs: Vec<&TextTokens> = toks.iter().collect();
    for row in model.text_features(&trefs).unwrap().rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batching_matches_single_sequences() {
    let model = ClampModel::new(tiny(2), vocab(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<PatchSequence> = (0..3).map(|i| random_seq(&mut rng, 2 + 2 * i)).collect();
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let batch = model.music_features(&refs).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let single = model.music_features(&[s]).unwrap();
        for (a, b) in batch.row(i).iter().zip(single.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal_and_finite() {
    let model = M3Model::new(ModelConfig { init_std: 0.02, ..tiny(1) }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let feature: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = encode_patch("|: F2 AB c2 :|");
    let logits = model.decoder_logits(&feature, &target);
    assert_eq!(logits.dim(), (PATCH_LEN, VOCAB_SIZE));
    assert!(logits.iter().all(|v| v.is_finite()));
    for t in [0usize, 3, 9] {
        let mut changed = target;
        for c in changed.0.iter_mut().skip(t + 1) {
            *c = rng.gen_range(3..VOCAB_SIZE as u8);
        }
        let other = model.decoder_logits(&feature, &changed);
        assert_eq!(logits.slice(s![..=t, ..]), other.slice(s![..=t, ..]));
    }
}

#[test]
fn decoder_memorizes_one_patch() {
    let cfg = ModelConfig {
        init_std: 0.02,
        hidden_dim: 32,
        heads: 4,
        ..tiny(1)
    };
    let mut model = M3Model::new(cfg, 12).unwrap();
    let target = encode_patch("|: F2 AB c2 :|");
    let feature = Mat::from_shape_fn((1, 32), |(_, j)| ((j as f64) * 0.37).sin());
    let mut optim = AdamW::new(
        OptimizerConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        &model.params,
    )
    .unwrap();
    let len = target.content_len() + 1;
    let labels: Vec<Option<usize>> = target.ids()[..len].iter().map(|&c| Some(c as usize)).collect();
    for _ in 0..300 {
        let grads = {
            let mut g = Graph::new(&model.params);
            let f = g.input(feature.clone());
            let logits = model.decoder.forward(&mut g, f, &[target], len);
            let loss = g.cross_entropy(logits, &labels);
            g.backward(loss)
        };
        optim.step(&mut model.params, &grads).unwrap();
    }
    let decoded = greedy_decode(&model, feature.as_slice().unwrap());
    assert_eq!(&decoded.0[..len], &target.0[..len]);
    assert_eq!(decoded.0[len - 1], END);
}

#[test]
fn evaluation_ignores_dropout_but_training_applies_it() {
    let model = ClampModel::new(ModelConfig { dropout: 0.5, ..tiny(2) }, vocab(), 1).unwrap();
    let seq = random_seq(&mut ChaCha8Rng::seed_from_u64(1), 4);
    let eval = |g: &mut Graph| {
        let out = model.music.forward(g, &[&seq]).unwrap();
        g.value(out.pooled).clone()
    };
    let a = eval(&mut Graph::new(&model.params));
    let b = eval(&mut Graph::new(&model.params));
    assert_eq!(a, b);
    let t1 = eval(&mut Graph::training(&model.params, ChaCha8Rng::seed_from_u64(1)));
    let t2 = eval(&mut Graph::training(&model.params, ChaCha8Rng::seed_from_u64(1)));
    assert_eq!(t1, t2);
    assert_ne!(t1, a);
}
