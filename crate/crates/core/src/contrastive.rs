//! Symmetric in-batch contrastive objective and the joint training loop for
//! the music and text encoders.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{segment_bars, CorpusError, MusicTextPair};
use crate::nn::{
    contrastive_loss_and_grad, AdamW, ClampModel, ContrastiveVariant, Graph, Grads, M3Model, Mat,
    ModelConfig, NnError, OptimizerConfig, Var,
};
use crate::patch::{encode_score, PatchError, PatchSequence};
use crate::text::{join_all, text_dropout, TextError, TextTokens, TextVocab};

#[derive(Debug, Error)]
pub enum ClampError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid contrastive configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub variant: ContrastiveVariant,
    /// Scale pooled features to unit norm before the dot product.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            batch_size: 32,
            variant: ContrastiveVariant::ExcludePositive,
            normalize: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ClampError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ClampError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(ClampError::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Loss of one batch of paired features, rows aligned (`music[i]` ↔
/// `text[i]`). Features are used as given; normalization happens upstream.
pub fn contrastive_loss(music: &Mat, text: &Mat, cfg: &ContrastiveConfig) -> Result<f64, ClampError> {
    Ok(contrastive_loss_with_grads(music, text, cfg)?.0)
}

/// Loss plus gradients with respect to both feature matrices.
pub fn contrastive_loss_with_grads(
    music: &Mat,
    text: &Mat,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Mat, Mat), ClampError> {
    if music.dim() != text.dim() {
        return Err(NnError::Shape(format!("music {:?} vs text {:?}", music.dim(), text.dim())).into());
    }
    if music.iter().chain(text.iter()).any(|x| !x.is_finite()) {
        return Err(NnError::NonFiniteInput.into());
    }
    let logits = music.dot(&text.t()) / cfg.tau;
    let (loss, d_logits) = contrastive_loss_and_grad(&logits, cfg.variant)?;
    let d_music = d_logits.dot(text) / cfg.tau;
    let d_text = d_logits.t().dot(music) / cfg.tau;
    Ok((loss, d_music, d_text))
}

/// One pair ready for the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub source_id: String,
    pub patches: PatchSequence,
    pub texts: Vec<String>,
}

pub fn prepare_pair(pair: &MusicTextPair, max_patches: usize) -> Result<PreparedPair, ClampError> {
    let patches = encode_score(&segment_bars(&pair.music)?, max_patches)?;
    Ok(PreparedPair {
        source_id: pair.source_id().to_string(),
        patches,
        texts: pair.candidate_texts.clone(),
    })
}

pub fn prepare_pairs(pairs: &[MusicTextPair], max_patches: usize) -> Result<Vec<PreparedPair>, ClampError> {
    pairs.iter().map(|p| prepare_pair(p, max_patches)).collect()
}

/// Vocabulary over every candidate text of the corpus.
pub fn build_vocab(pairs: &[MusicTextPair]) -> TextVocab {
    TextVocab::build(pairs.iter().flat_map(|p| p.candidate_texts.iter().map(String::as_str)), 1)
}

/// Records the batch loss on `g`.
pub fn clamp_loss_graph(
    g: &mut Graph,
    model: &ClampModel,
    music: &[&PatchSequence],
    text: &[&TextTokens],
    cfg: &ContrastiveConfig,
) -> Result<Var, ClampError> {
    let m = model.music.forward(g, music)?;
    let t = model.text.forward(g, text)?;
    let (fm, ft) = if cfg.normalize {
        (m.normalized(g), t.normalized(g))
    } else {
        (m.pooled, t.pooled)
    };
    let sim = g.matmul_t(fm, ft);
    let logits = g.scale(sim, 1.0 / cfg.tau);
    Ok(g.contrastive(logits, cfg.variant)?)
}

pub fn clamp_loss_and_grads(
    model: &ClampModel,
    music: &[&PatchSequence],
    text: &[&TextTokens],
    cfg: &ContrastiveConfig,
    rng: Option<ChaCha8Rng>,
) -> Result<(f64, Grads), ClampError> {
    let mut g = match rng {
        Some(rng) => Graph::training(&model.params, rng),
        None => Graph::new(&model.params),
    };
    let loss = clamp_loss_graph(&mut g, model, music, text, cfg)?;
    Ok((g.scalar(loss), g.backward(loss)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampTrainConfig {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub contrastive: ContrastiveConfig,
    pub text_dropout: bool,
    pub seed: u64,
}

impl Default for ClampTrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimizerConfig::default(),
            contrastive: ContrastiveConfig::default(),
            text_dropout: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct ClampOutcome {
    pub model: ClampModel,
    pub epochs: Vec<ClampEpochLog>,
}

/// Splits a shuffled order into batches of `size`; a trailing single pair
/// joins the previous batch since one pair has no negatives.
pub fn batch_indices(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Trains both encoders jointly. The text side of each pair is redrawn with
/// text dropout every time the pair is visited (or all candidates when
/// dropout is off). `m3` initializes the music encoder.
pub fn train_clamp(
    pairs: &[PreparedPair],
    vocab: TextVocab,
    cfg: &ClampTrainConfig,
    m3: Option<&M3Model>,
    mut on_epoch: impl FnMut(&ClampEpochLog),
) -> Result<ClampOutcome, ClampError> {
    cfg.contrastive.validate()?;
    if pairs.is_empty() {
        return Err(ClampError::EmptyCorpus);
    }
    if pairs.len() < 2 {
        return Err(NnError::BatchTooSmall(pairs.len()).into());
    }
    if pairs.len() < cfg.contrastive.batch_size {
        log::warn!(
            "corpus of {} pairs is smaller than the batch size {}; using full-corpus batches",
            pairs.len(),
            cfg.contrastive.batch_size
        );
    }
    let mut model = ClampModel::new(cfg.model.clone(), vocab, cfg.seed)?;
    if let Some(m3) = m3 {
        let copied = model.init_music_from(m3)?;
        log::info!("initialized {copied} music encoder tensors from M3");
    }
    let mut optim = AdamW::new(cfg.optim.clone(), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::new();
    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in batch_indices(&order, cfg.contrastive.batch_size) {
            let texts = batch
                .iter()
                .map(|&i| {
                    let joined = if cfg.text_dropout {
                        text_dropout(&pairs[i].texts, &mut rng)?
                    } else {
                        join_all(&pairs[i].texts)
                    };
                    Ok(model.tokenize(&joined))
                })
                .collect::<Result<Vec<_>, TextError>>()?;
            let music: Vec<&PatchSequence> = batch.iter().map(|&i| &pairs[i].patches).collect();
            let text_refs: Vec<&TextTokens> = texts.iter().collect();
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let (loss, grads) =
                clamp_loss_and_grads(&model, &music, &text_refs, &cfg.contrastive, Some(dropout_rng))?;
            optim.step(&mut model.params, &grads)?;
            total += loss;
            steps += 1;
        }
        let entry = ClampEpochLog {
            epoch: epoch + 1,
            mean_loss: total / steps as f64,
            steps,
        };
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(ClampOutcome { model, epochs })
}

/// Encodes pairs in chunks, returning unit-norm music and text feature
/// matrices (texts joined without dropout).
pub fn encode_pairs(model: &ClampModel, pairs: &[PreparedPair], chunk: usize) -> Result<(Mat, Mat), ClampError> {
    let mut music = Vec::new();
    let mut text = Vec::new();
    for part in pairs.chunks(chunk.max(1)) {
        let seqs: Vec<&PatchSequence> = part.iter().map(|p| &p.patches).collect();
        music.push(model.music_features(&seqs)?);
        let tokens: Vec<TextTokens> = part.iter().map(|p| model.tokenize(&join_all(&p.texts))).collect();
        let refs: Vec<&TextTokens> = tokens.iter().collect();
        text.push(model.text_features(&refs)?);
    }
    Ok((crate::nn::graph::stack_rows(&music), crate::nn::graph::stack_rows(&text)))
}

/// Mean diagonal minus mean off-diagonal cosine similarity.
pub fn similarity_gap(music: &Mat, text: &Mat) -> f64 {
    let sim = music.dot(&text.t());
    let n = sim.nrows();
    let diag: f64 = (0..n).map(|i| sim[[i, i]]).sum::<f64>() / n as f64;
    let off = (sim.sum() - diag * n as f64) / (n * n - n).max(1) as f64;
    diag - off
}
