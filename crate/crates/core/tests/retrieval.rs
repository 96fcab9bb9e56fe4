use clamp_core::contrastive::{build_vocab, prepare_pairs, train_clamp, ClampTrainConfig, ContrastiveConfig};
use clamp_core::corpus::MusicTextPair;
use clamp_core::nn::{ClampModel, Mat, ModelConfig, OptimizerConfig};
use clamp_core::retrieval::{
    build_index, eval_classification, eval_search, f1_macro, hr_at_k, linear_probe, mrr, random_mrr,
    random_mrr_std, search, zero_shot_classify, zero_shot_from_scores, EmbeddingIndex, LabelPrompt,
    LabelPromptSet, ProbeConfig, RetrievalError,
};
use clamp_core::synth::{key_prompts, toy_corpus};
use clamp_core::text::join_all;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        encoder_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_mult: 2,
        max_patches: 32,
        max_text_len: 64,
        dropout: 0.0,
        init_std: 0.02,
    }
}

fn untrained(pairs: &[MusicTextPair], seed: u64) -> ClampModel {
    ClampModel::new(model_cfg(), build_vocab(pairs), seed).unwrap()
}

#[test]
fn mrr_examples() {
    assert!((mrr(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
    assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
    assert!(matches!(mrr(&[]), Err(RetrievalError::EmptyInput)));
    assert!((random_mrr(1010) - 0.00739).abs() < 5e-5);
}

#[test]
fn random_rank_mrr_matches_harmonic_expectation() {
    let n = 1010;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=n)).collect();
    let observed = mrr(&ranks).unwrap();
    assert!((observed - random_mrr(n)).abs() < 3.0 * random_mrr_std(n, n));
}

#[test]
fn hit_ratio_examples() {
    assert_eq!(hr_at_k(&[1, 11], 10).unwrap(), 0.5);
    assert_eq!(hr_at_k(&[3, 7, 5], 7).unwrap(), 1.0);
    assert!(matches!(hr_at_k(&[], 1), Err(RetrievalError::EmptyInput)));
    assert!(matches!(hr_at_k(&[1], 0), Err(RetrievalError::InvalidK)));
}

#[test]
fn f1_examples() {
    let (f1, acc) = f1_macro(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
    assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    assert_eq!(acc, 0.75);
    assert_eq!(f1_macro(&[2, 0, 1], &[2, 0, 1]).unwrap(), (1.0, 1.0));
    let (f1, acc) = f1_macro(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
    assert!(f1 < acc);
    assert!((f1 - (0.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!(matches!(f1_macro(&[1], &[1, 2]), Err(RetrievalError::ShapeMismatch(1, 2))));
}

proptest! {
    #[test]
    fn metric_orderings(ranks in prop::collection::vec(1usize..300, 1..50)) {
        let m = mrr(&ranks).unwrap();
        let h1 = hr_at_k(&ranks, 1).unwrap();
        let h10 = hr_at_k(&ranks, 10).unwrap();
        let h100 = hr_at_k(&ranks, 100).unwrap();
        prop_assert!(h1 <= h10 && h10 <= h100);
        prop_assert!(h1 <= m && m <= 1.0);
        prop_assert_eq!(hr_at_k(&ranks, 300).unwrap(), 1.0);
    }

    #[test]
    fn f1_invariant_to_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        shift in 1usize..4,
    ) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let relabel = |v: &[usize]| v.iter().map(|x| (x + shift) % 4).collect::<Vec<_>>();
        let a = f1_macro(&p, &l).unwrap();
        let b = f1_macro(&relabel(&p), &relabel(&l)).unwrap();
        prop_assert!((a.0 - b.0).abs() < 1e-12 && a.1 == b.1);
    }

    #[test]
    fn zero_shot_argmax_invariant_to_monotone_maps(
        scores in prop::collection::vec(-1.0f64..1.0, 2..8),
        scale in 0.01f64..100.0,
        offset in -5.0f64..5.0,
    ) {
        let set = LabelPromptSet::new(
            "p",
            (0..scores.len())
                .map(|i| LabelPrompt { label: format!("l{i}"), prompt: "x".into() })
                .collect(),
        )
        .unwrap();
        let base = zero_shot_from_scores(&set, &scores).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| s * scale + offset).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(&zero_shot_from_scores(&set, &affine).unwrap().label, &base.label);
        prop_assert_eq!(&zero_shot_from_scores(&set, &cubed).unwrap().label, &base.label);
    }
}

#[test]
fn index_round_trips_bit_exactly_and_rebuilds_identically() {
    let pairs = toy_corpus(12, 2);
    let model = untrained(&pairs, 1);
    let index = build_index(&model, &pairs).unwrap();
    assert_eq!(index.len(), 12);
    for i in 0..index.len() {
        let n: f64 = index.vector(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.cidx");
    index.save(&path).unwrap();
    let loaded = EmbeddingIndex::load(&path).unwrap();
    assert_eq!(loaded, index);
    let again = dir.path().join("again.cidx");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(clamp_core::retrieval::meta_path(&path)).unwrap(),
        std::fs::read(clamp_core::retrieval::meta_path(&again)).unwrap()
    );
    let rebuilt = build_index(&model, &pairs).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    index.write_vectors(&mut a).unwrap();
    rebuilt.write_vectors(&mut b).unwrap();
    assert_eq!(a, b);
    let record = loaded.get("synth-0003").unwrap();
    assert_eq!(record.title.as_deref(), Some(pairs[2].label("title").unwrap()));
    assert!(record.abc.contains("K:"));
}

#[test]
fn truncated_or_mismatched_index_files_are_rejected() {
    let pairs = toy_corpus(3, 2);
    let index = build_index(&untrained(&pairs, 1), &pairs).unwrap();
    let mut bytes = Vec::new();
    index.write_vectors(&mut bytes).unwrap();
    let mut meta = Vec::new();
    index.write_meta(&mut meta).unwrap();
    let meta = String::from_utf8(meta).unwrap();
    assert!(EmbeddingIndex::read(&bytes[..bytes.len() - 1], &meta).is_err());
    let two_lines: String = meta.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(EmbeddingIndex::read(bytes.as_slice(), &two_lines).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(EmbeddingIndex::read(wrong.as_slice(), &meta).is_err());
    let other = ClampModel::new(ModelConfig { hidden_dim: 16, ..model_cfg() }, build_vocab(&pairs), 0).unwrap();
    assert!(matches!(
        search(&index, &other, "a jig", 3),
        Err(RetrievalError::ConfigMismatch { index: 32, model: 16 })
    ));
}

#[test]
fn empty_corpus_gives_empty_index() {
    let pairs = toy_corpus(2, 2);
    let model = untrained(&pairs, 1);
    let index = build_index(&model, &[]).unwrap();
    assert!(index.is_empty());
    assert_eq!(index.dim(), 32);
    assert!(matches!(search(&index, &model, "jig", 3), Err(RetrievalError::EmptyIndex)));
}

#[test]
fn search_orders_results_and_honours_k() {
    let pairs = toy_corpus(10, 4);
    let model = untrained(&pairs, 1);
    let index = build_index(&model, &pairs).unwrap();
    let all = search(&index, &model, "a reel in d major", 50).unwrap();
    assert_eq!(all.hits.len(), 10);
    for w in all.hits.windows(2) {
        assert!(w[0].score >= w[1].score);
        if w[0].score == w[1].score {
            assert!(w[0].source_id < w[1].source_id);
        }
    }
    let top = search(&index, &model, "a reel in d major", 3).unwrap();
    assert_eq!(top.hits[..], all.hits[..3]);
    assert!(matches!(search(&index, &model, "x", 0), Err(RetrievalError::InvalidK)));
}

#[test]
fn index_time_and_query_time_similarities_agree() {
    let pairs = toy_corpus(6, 4);
    let model = untrained(&pairs, 2);
    let index = build_index(&model, &pairs).unwrap();
    let prepared = prepare_pairs(&pairs, 32).unwrap();
    let query = "a waltz in c major";
    let text = model.text_features(&[&model.tokenize(query)]).unwrap();
    let result = search(&index, &model, query, 6).unwrap();
    for hit in &result.hits {
        let i = index.position(&hit.source_id).unwrap();
        let music = model.music_features(&[&prepared[i].patches]).unwrap();
        let direct = music.row(0).dot(&text.row(0));
        assert!((direct - hit.score).abs() < 1e-6);
    }
}

#[test]
fn eval_search_edge_cases() {
    let pairs = toy_corpus(5, 4);
    let model = untrained(&pairs, 2);
    let single = build_index(&model, &pairs[..1]).unwrap();
    assert_eq!(eval_search(&single, &model, &pairs[..1]).unwrap().mrr, 1.0);
    assert!(matches!(
        eval_search(&single, &model, &pairs[1..2]),
        Err(RetrievalError::MissingTarget(id)) if id == "synth-0002"
    ));
}

#[test]
fn untrained_model_is_at_the_random_baseline() {
    let pairs = toy_corpus(100, 8);
    let model = untrained(&pairs, 5);
    let index = build_index(&model, &pairs).unwrap();
    let report = eval_search(&index, &model, &pairs).unwrap();
    let sigma = random_mrr_std(100, 100);
    assert!(
        (report.mrr - random_mrr(100)).abs() < 3.0 * sigma,
        "mrr {} baseline {} sigma {sigma}",
        report.mrr,
        random_mrr(100)
    );
}

#[test]
fn trained_model_beats_the_random_baseline() {
    let pairs = toy_corpus(100, 8);
    let (train, held) = pairs.split_at(80);
    let cfg = ClampTrainConfig {
        model: model_cfg(),
        optim: OptimizerConfig {
            epochs: 20,
            lr: 2e-3,
            ..OptimizerConfig::default()
        },
        contrastive: ContrastiveConfig {
            batch_size: 16,
            ..ContrastiveConfig::default()
        },
        text_dropout: true,
        seed: 1,
    };
    let prepared = prepare_pairs(train, 32).unwrap();
    let model = train_clamp(&prepared, build_vocab(&pairs), &cfg, None, |_| {}).unwrap().model;
    let index = build_index(&model, held).unwrap();
    let report = eval_search(&index, &model, held).unwrap();
    assert!(report.mrr > report.random_mrr, "{report:?}");
    let exact = search(&index, &model, &join_all(&held[0].candidate_texts), 10).unwrap();
    assert!(exact.hits.iter().any(|h| h.source_id == held[0].source_id()));
    let keys = eval_classification(&model, held, &key_prompts(), "key").unwrap();
    assert!(keys.accuracy > keys.chance, "{keys:?}");
}

#[test]
fn zero_shot_reports_every_label_and_ties() {
    let pairs = toy_corpus(2, 4);
    let model = untrained(&pairs, 2);
    let seq = &prepare_pairs(&pairs, 32).unwrap()[0].patches;
    let prompts = key_prompts();
    let result = zero_shot_classify(&model, seq, &prompts).unwrap();
    assert_eq!(result.scores.len(), 8);
    let best = result.scores.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.scores.iter().find(|s| s.label == result.label).unwrap().score, best);
    let twins = LabelPromptSet::new(
        "twins",
        vec![
            LabelPrompt { label: "first".into(), prompt: "a jig".into() },
            LabelPrompt { label: "second".into(), prompt: "a jig".into() },
        ],
    )
    .unwrap();
    let tie = zero_shot_classify(&model, seq, &twins).unwrap();
    assert!(tie.tie);
    assert_eq!(tie.label, "first");
    let single = LabelPromptSet::new("one", vec![twins.labels[0].clone()]).unwrap();
    assert!(matches!(
        zero_shot_classify(&model, seq, &single),
        Err(RetrievalError::DegenerateLabelSet(1))
    ));
}

fn blobs(n: usize, seed: u64) -> (Mat, Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<String> = (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
    let features = Mat::from_shape_fn((n, 8), |(i, j)| {
        let centre = if j == 0 { if i % 2 == 0 { 2.0 } else { -2.0 } } else { 0.0 };
        centre + rng.gen_range(-1.0..1.0)
    });
    let ids = (0..n).map(|i| format!("p{i}")).collect();
    (features, labels, ids)
}

#[test]
fn probe_separates_linearly_separable_classes() {
    let (x, labels, ids) = blobs(60, 1);
    let report = linear_probe(&x, &labels, &ids, &ProbeConfig::default()).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert!(report.f1_macro > 0.95, "{report:?}");
    assert_eq!(report, linear_probe(&x, &labels, &ids, &ProbeConfig::default()).unwrap());
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Mat::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
    let mut labels: Vec<String> = (0..n).map(|i| ["a", "b", "c", "d"][i % 4].to_string()).collect();
    labels.shuffle(&mut rng);
    let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let report = linear_probe(&x, &labels, &ids, &ProbeConfig { epochs: 30, ..ProbeConfig::default() }).unwrap();
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((report.accuracy - 0.25).abs() < 3.0 * sigma, "{report:?}");
}
