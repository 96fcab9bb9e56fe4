//! Multi-seed comparison of training configurations on a held-out split.

use serde::{Deserialize, Serialize};

use crate::contrastive::{build_vocab, prepare_pairs, train_clamp, ClampError, ClampTrainConfig};
use crate::corpus::MusicTextPair;
use crate::m3::{pretrain_m3, M3Error, M3TrainConfig};
use crate::nn::ClampModel;
use crate::patch::PatchSequence;
use crate::retrieval::{build_index, eval_search, RetrievalError, SearchReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    /// M3 initialization and text dropout.
    Full,
    NoTextDropout,
    NoM3,
    /// Untrained encoders.
    Random,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [Self::Full, Self::NoTextDropout, Self::NoM3, Self::Random];

    fn uses_m3(self) -> bool {
        matches!(self, Self::Full | Self::NoTextDropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub clamp: ClampTrainConfig,
    pub m3: M3TrainConfig,
    pub seeds: Vec<u64>,
    /// Pairs at the end of the corpus kept for evaluation.
    pub holdout: usize,
    pub arms: Vec<AblationArm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub seed: u64,
    pub search: SearchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: AblationArm,
    pub runs: usize,
    pub mean_mrr: f64,
    pub std_mrr: f64,
    pub mean_hr_at_1: f64,
    pub mean_hr_at_10: f64,
    pub mean_hr_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub random_mrr: f64,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, arm: AblationArm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("holdout of {holdout} leaves fewer than 2 of {total} pairs for training")]
    Split { holdout: usize, total: usize },
    #[error(transparent)]
    Clamp(#[from] ClampError),
    #[error(transparent)]
    M3(#[from] M3Error),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

fn summarize(arm: AblationArm, rows: &[AblationRow]) -> ArmSummary {
    let runs: Vec<&SearchReport> = rows.iter().filter(|r| r.arm == arm).map(|r| &r.search).collect();
    let n = runs.len().max(1) as f64;
    let mean = |f: fn(&SearchReport) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
    let mean_mrr = mean(|r| r.mrr);
    let var = runs.iter().map(|r| (r.mrr - mean_mrr).powi(2)).sum::<f64>() / n;
    ArmSummary {
        arm,
        runs: runs.len(),
        mean_mrr,
        std_mrr: var.sqrt(),
        mean_hr_at_1: mean(|r| r.hr_at_1),
        mean_hr_at_10: mean(|r| r.hr_at_10),
        mean_hr_at_100: mean(|r| r.hr_at_100),
    }
}

/// Trains and evaluates every arm for every seed. The M3 model for a seed is
/// pretrained once on the training pieces plus `unlabelled` (music without
/// texts, never the held-out pieces) and shared by the arms using it.
pub fn ablation_suite(
    pairs: &[MusicTextPair],
    unlabelled: &[PatchSequence],
    cfg: &AblationConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport, AblationError> {
    if pairs.len() < cfg.holdout + 2 || cfg.holdout == 0 {
        return Err(AblationError::Split {
            holdout: cfg.holdout,
            total: pairs.len(),
        });
    }
    let (train, held) = pairs.split_at(pairs.len() - cfg.holdout);
    let vocab = build_vocab(pairs);
    let prepared = prepare_pairs(train, cfg.clamp.model.max_patches)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let needs_m3 = cfg.arms.iter().any(|a| a.uses_m3());
        let m3 = if needs_m3 {
            let m3_cfg = M3TrainConfig {
                model: cfg.clamp.model.clone(),
                seed,
                ..cfg.m3.clone()
            };
            let corpus: Vec<_> = prepared
                .iter()
                .map(|p| p.patches.clone())
                .chain(unlabelled.iter().cloned())
                .collect();
            Some(pretrain_m3(&corpus, &m3_cfg, None, |_| {})?.model)
        } else {
            None
        };
        for &arm in &cfg.arms {
            let model = match arm {
                AblationArm::Random => ClampModel::new(cfg.clamp.model.clone(), vocab.clone(), seed)
                    .map_err(ClampError::from)?,
                _ => {
                    let train_cfg = ClampTrainConfig {
                        seed,
                        text_dropout: arm != AblationArm::NoTextDropout,
                        ..cfg.clamp.clone()
                    };
                    let init = if arm.uses_m3() { m3.as_ref() } else { None };
                    train_clamp(&prepared, vocab.clone(), &train_cfg, init, |_| {})?.model
                }
            };
            let index = build_index(&model, held)?;
            let mut search = eval_search(&index, &model, held)?;
            search.ranks.clear();
            let row = AblationRow { arm, seed, search };
            on_row(&row);
            rows.push(row);
        }
    }
    let summary = cfg.arms.iter().map(|&arm| summarize(arm, &rows)).collect();
    Ok(AblationReport {
        train_pairs: train.len(),
        eval_pairs: held.len(),
        random_mrr: crate::retrieval::random_mrr(held.len()),
        rows,
        summary,
    })
}
