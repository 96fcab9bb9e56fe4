//! Masked music modelling: bar-patch noising, character reconstruction loss
//! and the pretraining loop.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamW, Graph, Grads, M3Model, Mat, ModelConfig, NnError, OptimizerConfig, Var};
use crate::patch::{PatchSequence, PatchTokens, END, PAD, PATCH_LEN, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum M3Error {
    #[error("sequence has no bar patches to noise")]
    NoBarsToNoise,
    #[error("no noised patches to reconstruct")]
    NoLossTargets,
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("invalid noise configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of bar patches selected per sequence.
    pub ratio: f64,
    pub mask_prob: f64,
    pub shuffle_prob: f64,
    pub unchanged_prob: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            ratio: 0.45,
            mask_prob: 0.8,
            shuffle_prob: 0.1,
            unchanged_prob: 0.1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), M3Error> {
        let probs = [self.mask_prob, self.shuffle_prob, self.unchanged_prob];
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(M3Error::Config(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(M3Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(M3Error::Config("mask/shuffle/unchanged must sum to 1".into()));
        }
        Ok(())
    }

    /// Number of bar patches selected out of `bars`.
    pub fn selection_count(&self, bars: usize) -> usize {
        (self.ratio * bars as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTag {
    Untouched,
    Masked,
    Shuffled,
    /// Selected for reconstruction but left as is.
    Unchanged,
}

impl NoiseTag {
    pub fn is_selected(self) -> bool {
        self != NoiseTag::Untouched
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSequence {
    /// Encoder input.
    pub input: PatchSequence,
    pub tags: Vec<NoiseTag>,
    /// Reconstruction targets.
    pub original: PatchSequence,
}

impl NoisedSequence {
    pub fn selected(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_selected())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Permutes the characters before `[END]`.
pub fn shuffle_patch<R: Rng + ?Sized>(patch: &PatchTokens, rng: &mut R) -> PatchTokens {
    let mut out = *patch;
    let len = patch.content_len();
    out.0[..len].shuffle(rng);
    out
}

/// Selects `round(ratio · B)` of the `B` bar patches uniformly without
/// replacement and masks, shuffles or keeps each one. Headers are never
/// selected.
pub fn apply_noise<R: Rng + ?Sized>(
    seq: &PatchSequence,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<NoisedSequence, M3Error> {
    cfg.validate()?;
    let bars = seq.bar_positions();
    if bars.is_empty() {
        return Err(M3Error::NoBarsToNoise);
    }
    let mut input = seq.clone();
    let mut tags = vec![NoiseTag::Untouched; seq.len()];
    let count = cfg.selection_count(bars.len());
    for pick in sample(rng, bars.len(), count).into_iter() {
        let pos = bars[pick];
        let u: f64 = rng.gen();
        tags[pos] = if u < cfg.mask_prob {
            input.patches[pos] = PatchTokens::masked();
            NoiseTag::Masked
        } else if u < cfg.mask_prob + cfg.shuffle_prob {
            input.patches[pos] = shuffle_patch(&seq.patches[pos], rng);
            NoiseTag::Shuffled
        } else {
            NoiseTag::Unchanged
        };
    }
    Ok(NoisedSequence {
        input,
        tags,
        original: seq.clone(),
    })
}

/// Teacher-forced reconstruction loss of a batch, recorded on `g`: the
/// encoder reads the noised inputs and the decoder predicts the original
/// characters of every selected patch. Cross-entropy is averaged over all
/// non-`[PAD]` target positions.
pub fn m3_loss_graph(g: &mut Graph, model: &M3Model, batch: &[&NoisedSequence]) -> Result<Var, M3Error> {
    let inputs: Vec<&PatchSequence> = batch.iter().map(|n| &n.input).collect();
    let encoded = model.music.forward(g, &inputs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for noised in batch {
        for pos in noised.selected() {
            rows.push(offset + pos);
            targets.push(noised.original.patches[pos]);
        }
        offset += noised.input.len();
    }
    if targets.is_empty() {
        return Err(M3Error::NoLossTargets);
    }
    // Positions past the longest [END] only carry [PAD] targets.
    let len = targets
        .iter()
        .map(|t| (t.content_len() + 1).min(PATCH_LEN))
        .max()
        .expect("non-empty");
    let features = g.select_rows(encoded.hidden, &rows);
    let logits = model.decoder.forward(g, features, &targets, len);
    let labels: Vec<Option<usize>> = targets
        .iter()
        .flat_map(|t| t.ids()[..len].iter().map(|&c| (c != PAD).then_some(c as usize)))
        .collect();
    Ok(g.cross_entropy(logits, &labels))
}

/// Evaluation-mode loss.
pub fn m3_loss(model: &M3Model, batch: &[&NoisedSequence]) -> Result<f64, M3Error> {
    let mut g = Graph::new(&model.params);
    let loss = m3_loss_graph(&mut g, model, batch)?;
    Ok(g.scalar(loss))
}

/// Loss and parameter gradients; dropout is active when `rng` is given.
pub fn m3_loss_and_grads(
    model: &M3Model,
    batch: &[&NoisedSequence],
    rng: Option<ChaCha8Rng>,
) -> Result<(f64, Grads), M3Error> {
    let mut g = match rng {
        Some(rng) => Graph::training(&model.params, rng),
        None => Graph::new(&model.params),
    };
    let loss = m3_loss_graph(&mut g, model, batch)?;
    Ok((g.scalar(loss), g.backward(loss)))
}

/// Last-layer encoder states of one sequence (evaluation mode).
pub fn encode_hidden(model: &M3Model, seq: &PatchSequence) -> Result<Mat, M3Error> {
    let mut g = Graph::new(&model.params);
    let out = model.music.forward(&mut g, &[seq])?;
    Ok(g.value(out.hidden).clone())
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy autoregressive decoding of one patch from its encoder feature.
pub fn greedy_decode(model: &M3Model, feature: &[f64]) -> PatchTokens {
    let mut out = PatchTokens([PAD; PATCH_LEN]);
    for t in 0..PATCH_LEN {
        let mut g = Graph::new(&model.params);
        let f = g.input(Mat::from_shape_vec((1, feature.len()), feature.to_vec()).expect("row"));
        let logits = model.decoder.forward(&mut g, f, std::slice::from_ref(&out), t + 1);
        let next = argmax(g.value(logits).row(t));
        debug_assert!(next < VOCAB_SIZE);
        out.0[t] = next as u8;
        if next as u8 == END {
            break;
        }
    }
    out
}

/// Fraction of target characters (through `[END]`) that greedy decoding
/// reproduces for the selected patches of `noised`.
pub fn reconstruction_accuracy(model: &M3Model, noised: &NoisedSequence, tag: Option<NoiseTag>) -> Result<f64, M3Error> {
    let hidden = encode_hidden(model, &noised.input)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for pos in noised.selected() {
        if tag.is_some_and(|t| t != noised.tags[pos]) {
            continue;
        }
        let decoded = greedy_decode(model, hidden.row(pos).as_slice().expect("contiguous row"));
        let target = noised.original.patches[pos];
        let len = (target.content_len() + 1).min(PATCH_LEN);
        hits += (0..len).filter(|&i| decoded.0[i] == target.0[i]).count();
        total += len;
    }
    if total == 0 {
        return Err(M3Error::NoLossTargets);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M3TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub noise: NoiseConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for M3TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimizerConfig::default(),
            noise: NoiseConfig::default(),
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct M3Outcome {
    pub model: M3Model,
    pub epochs: Vec<EpochLog>,
    /// Epoch at which training diverged; `model` then holds the weights from
    /// the end of the previous epoch.
    pub diverged_at: Option<usize>,
}

/// Runs `cfg.optim.epochs` epochs of masked reconstruction over `corpus`,
/// drawing fresh noise each epoch. Sequences without bar patches are skipped.
pub fn pretrain_m3(
    corpus: &[PatchSequence],
    cfg: &M3TrainConfig,
    init: Option<M3Model>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<M3Outcome, M3Error> {
    cfg.noise.validate()?;
    let usable: Vec<&PatchSequence> = corpus.iter().filter(|s| !s.bar_positions().is_empty()).collect();
    if usable.len() < corpus.len() {
        log::warn!("skipping {} sequences without bar patches", corpus.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(M3Error::EmptyCorpus);
    }
    let mut model = match init {
        Some(m) => m,
        None => M3Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut optim = AdamW::new(cfg.optim.clone(), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.noise.seed.rotate_left(32));
    let batch_size = cfg.batch_size.max(1);
    let mut epochs = Vec::new();
    for epoch in 0..cfg.optim.epochs {
        let snapshot = model.params.clone();
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        let mut diverged = false;
        for chunk in order.chunks(batch_size) {
            let noised = chunk
                .iter()
                .map(|&i| apply_noise(usable[i], &cfg.noise, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&NoisedSequence> = noised.iter().collect();
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let (loss, grads) = match m3_loss_and_grads(&model, &refs, Some(dropout_rng)) {
                Err(M3Error::NoLossTargets) => continue,
                other => other?,
            };
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            match optim.step(&mut model.params, &grads) {
                Err(NnError::NonFiniteGradient(name)) => {
                    log::error!("non-finite gradient for {name}");
                    diverged = true;
                    break;
                }
                other => other?,
            }
            total += loss;
            steps += 1;
        }
        if diverged {
            log::error!("M3 pretraining diverged in epoch {}; keeping the previous weights", epoch + 1);
            model.params = snapshot;
            return Ok(M3Outcome {
                model,
                epochs,
                diverged_at: Some(epoch + 1),
            });
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            steps,
        };
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(M3Outcome {
        model,
        epochs,
        diverged_at: None,
    })
}

/// Helper for tests and tooling: a single-sequence training step.
pub fn train_step(
    model: &mut M3Model,
    optim: &mut AdamW,
    noised: &NoisedSequence,
    rng: Option<ChaCha8Rng>,
) -> Result<f64, M3Error> {
    let (loss, grads) = m3_loss_and_grads(model, &[noised], rng)?;
    optim.step(&mut model.params, &grads)?;
    Ok(loss)
}
