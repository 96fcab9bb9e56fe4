use std::collections::HashMap;

use clamp_core::contrastive::prepare_pairs;
use clamp_core::corpus::{segment_bars, PatchKind, PatchText};
use clamp_core::m3::{
    apply_noise, encode_hidden, m3_loss, pretrain_m3, shuffle_patch, train_step, M3Error, M3TrainConfig,
    NoiseConfig, NoiseTag, NoisedSequence,
};
use clamp_core::nn::{AdamW, Checkpoint, M3Model, ModelConfig, OptimizerConfig};
use clamp_core::patch::{decode_patch, encode_patch, encode_score, PatchSequence, MASK, PAD};
use clamp_core::synth::toy_corpus;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small(dim: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: dim,
        encoder_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_patches: 32,
        max_text_len: 32,
        dropout: 0.0,
        init_std: 0.02,
    }
}

fn sequence(headers: usize, bars: usize) -> PatchSequence {
    let mut texts: Vec<PatchText> = (0..headers).map(|i| PatchText::header(format!("X:{i}"))).collect();
    texts.extend((0..bars).map(|i| PatchText::bar(format!("| A{} B c{} d ", i % 7, i % 3))));
    encode_score(&texts, 1024).unwrap()
}

fn toy_sequences(n: usize, seed: u64) -> Vec<PatchSequence> {
    prepare_pairs(&toy_corpus(n, seed), 32)
        .unwrap()
        .into_iter()
        .map(|p| p.patches)
        .collect()
}

proptest! {
    #[test]
    fn selection_count_is_exact_and_headers_untouched(
        headers in 0usize..4,
        bars in 1usize..60,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let seq = sequence(headers, bars);
        let cfg = NoiseConfig { ratio, ..NoiseConfig::default() };
        let noised = apply_noise(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let selected = noised.selected();
        prop_assert_eq!(selected.len(), (ratio * bars as f64).round() as usize);
        for i in 0..headers {
            prop_assert_eq!(noised.tags[i], NoiseTag::Untouched);
            prop_assert_eq!(noised.input.patches[i], seq.patches[i]);
        }
        for (i, tag) in noised.tags.iter().enumerate() {
            match tag {
                NoiseTag::Masked => prop_assert!(noised.input.patches[i].0.iter().all(|&t| t == MASK)),
                NoiseTag::Untouched | NoiseTag::Unchanged => {
                    prop_assert_eq!(noised.input.patches[i], seq.patches[i])
                }
                NoiseTag::Shuffled => {}
            }
        }
        prop_assert_eq!(noised.original, seq);
    }

    #[test]
    fn shuffle_preserves_character_multiset(text in "[ -~]{0,63}", seed in any::<u64>()) {
        let patch = encode_patch(&text);
        let shuffled = shuffle_patch(&patch, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut a: Vec<char> = decode_patch(&patch).unwrap().chars().collect();
        let mut b: Vec<char> = decode_patch(&shuffled).unwrap().chars().collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(shuffled.content_len(), patch.content_len());
    }
}

#[test]
fn shuffle_reaches_the_figure_permutation() {
    let patch = encode_patch("|: F |");
    let hit = (0..20_000u64).any(|seed| {
        let s = shuffle_patch(&patch, &mut ChaCha8Rng::seed_from_u64(seed));
        decode_patch(&s).unwrap() == "F :| |"
    });
    assert!(hit);
}

#[test]
fn zero_ratio_leaves_sequence_alone() {
    let seq = sequence(2, 10);
    let cfg = NoiseConfig {
        ratio: 0.0,
        ..NoiseConfig::default()
    };
    let noised = apply_noise(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(noised.input, seq);
    assert!(noised.selected().is_empty());
    let model = M3Model::new(small(16), 0).unwrap();
    assert!(matches!(m3_loss(&model, &[&noised]), Err(M3Error::NoLossTargets)));
}

#[test]
fn headers_only_sequence_cannot_be_noised() {
    let seq = sequence(3, 0);
    assert!(matches!(
        apply_noise(&seq, &NoiseConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)),
        Err(M3Error::NoBarsToNoise)
    ));
    let bad = NoiseConfig {
        mask_prob: 0.5,
        ..NoiseConfig::default()
    };
    assert!(matches!(bad.validate(), Err(M3Error::Config(_))));
}

#[test]
fn selected_subsets_are_uniform() {
    // 4 bars, 2 selected: each of the 6 subsets has probability 1/6.
    let seq = sequence(1, 4);
    let cfg = NoiseConfig {
        ratio: 0.5,
        ..NoiseConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trials = 12_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..trials {
        let n = apply_noise(&seq, &cfg, &mut rng).unwrap();
        *counts.entry(n.selected()).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = trials as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
}

#[test]
fn untrained_loss_is_near_uniform() {
    let model = M3Model::new(small(32), 1).unwrap();
    let seqs = toy_sequences(8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noised: Vec<NoisedSequence> = seqs
        .iter()
        .map(|s| apply_noise(s, &NoiseConfig::default(), &mut rng).unwrap())
        .collect();
    let refs: Vec<&NoisedSequence> = noised.iter().collect();
    let loss = m3_loss(&model, &refs).unwrap();
    assert!((loss - 98f64.ln()).abs() < 0.1, "{loss}");
}

#[test]
fn loss_ignores_unselected_targets_and_matches_full_decoder_oracle() {
    let model = M3Model::new(ModelConfig { init_std: 0.2, ..small(16) }, 2).unwrap();
    let seq = toy_sequences(1, 9).remove(0);
    let noised = apply_noise(&seq, &NoiseConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let loss = m3_loss(&model, &[&noised]).unwrap();

    let unselected = noised.tags.iter().position(|t| !t.is_selected()).unwrap();
    let mut perturbed = noised.clone();
    perturbed.original.patches[unselected] = encode_patch("zzzzzzzzzzzz");
    assert_eq!(m3_loss(&model, &[&perturbed]).unwrap(), loss);

    // Oracle: full 64-position logits per selected patch, averaged over
    // every non-[PAD] target slot.
    let hidden = encode_hidden(&model, &noised.input).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for pos in noised.selected() {
        let target = noised.original.patches[pos];
        let logits = model.decoder_logits(hidden.row(pos).as_slice().unwrap(), &target);
        for (t, &c) in target.ids().iter().enumerate() {
            if c == PAD {
                continue;
            }
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c as usize];
            count += 1;
        }
    }
    assert!((loss - total / count as f64).abs() < 1e-10);
}

#[test]
fn zero_epochs_returns_initialization() {
    let cfg = M3TrainConfig {
        model: small(16),
        optim: OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::default()
        },
        seed: 4,
        ..M3TrainConfig::default()
    };
    let out = pretrain_m3(&toy_sequences(4, 1), &cfg, None, |_| {}).unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(out.model.params, M3Model::new(small(16), 4).unwrap().params);
    assert!(matches!(pretrain_m3(&[], &cfg, None, |_| {}), Err(M3Error::EmptyCorpus)));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = M3TrainConfig {
        model: ModelConfig { dropout: 0.1, ..small(16) },
        optim: OptimizerConfig {
            epochs: 2,
            ..OptimizerConfig::default()
        },
        batch_size: 4,
        seed: 7,
        ..M3TrainConfig::default()
    };
    let corpus = toy_sequences(8, 2);
    let run = || {
        let out = pretrain_m3(&corpus, &cfg, None, |_| {}).unwrap();
        Checkpoint::from_m3(&out.model, serde_json::Value::Null).to_bytes()
    };
    let a = run();
    assert_eq!(a, run());
    let other = M3TrainConfig { seed: 8, ..cfg.clone() };
    let b = Checkpoint::from_m3(&pretrain_m3(&corpus, &other, None, |_| {}).unwrap().model, serde_json::Value::Null)
        .to_bytes();
    assert_ne!(a, b);
}

#[test]
fn smoothed_loss_decreases_over_forty_epochs() {
    let cfg = M3TrainConfig {
        model: small(32),
        optim: OptimizerConfig {
            epochs: 40,
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        batch_size: 10,
        seed: 1,
        ..M3TrainConfig::default()
    };
    let corpus = toy_sequences(50, 5);
    let out = pretrain_m3(&corpus, &cfg, None, |_| {}).unwrap();
    assert_eq!(out.epochs.len(), 40);
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.mean_loss).collect();
    let smoothed: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (i, w) in smoothed.windows(2).enumerate() {
        assert!(w[1] < w[0], "window {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn fully_masked_input_learns_from_context() {
    let seq = encode_score(
        &segment_bars(&toy_corpus(1, 3)[0].music).unwrap(),
        32,
    )
    .unwrap();
    assert!(seq.kinds.contains(&PatchKind::Header));
    let cfg = NoiseConfig {
        ratio: 1.0,
        mask_prob: 1.0,
        shuffle_prob: 0.0,
        unchanged_prob: 0.0,
        seed: 0,
    };
    let mut model = M3Model::new(small(32), 3).unwrap();
    let mut optim = AdamW::new(OptimizerConfig::default(), &model.params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noised = apply_noise(&seq, &cfg, &mut rng).unwrap();
    for &pos in &seq.bar_positions() {
        assert!(noised.input.patches[pos].0.iter().all(|&t| t == MASK));
    }
    for _ in 0..60 {
        train_step(&mut model, &mut optim, &noised, None).unwrap();
    }
    let loss = m3_loss(&model, &[&noised]).unwrap();
    assert!(loss < 98f64.ln() - 1.0, "{loss}");
}
