//! Softmax-regression probe on frozen features with k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::f1_macro;
use super::RetrievalError;
use crate::nn::{AdamW, Graph, Mat, OptimizerConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            batch_size: 10,
            epochs: 100,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train: usize,
    pub test: usize,
    pub f1_macro: f64,
    pub accuracy: f64,
    /// Test classes never seen in training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unseen_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub folds: Vec<FoldReport>,
    pub f1_macro: f64,
    pub accuracy: f64,
}

fn fold_key(seed: u64, id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    hasher.finalize().into()
}

/// Stratified fold assignment: within each class, samples are ordered by a
/// hash of `(seed, id)` and dealt round-robin, continuing the deal across
/// classes so fold sizes stay balanced.
pub fn assign_folds(ids: &[String], labels: &[String], folds: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut out = vec![0; ids.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.sort_by_key(|&i| (fold_key(seed, &ids[i]), i));
        for &i in members.iter() {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

fn train_softmax(
    features: &Mat,
    targets: &[usize],
    rows: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore, RetrievalError> {
    let mut params = ParamStore::new();
    let w = params.zeros("probe.w", (features.ncols(), classes));
    let b = params.zeros("probe.b", (1, classes));
    let optim_cfg = OptimizerConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        epochs: cfg.epochs,
        ..OptimizerConfig::default()
    };
    let mut optim = AdamW::new(optim_cfg, &params)?;
    let mut order = rows.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let x = features.select(ndarray::Axis(0), batch);
            let labels: Vec<Option<usize>> = batch.iter().map(|&i| Some(targets[i])).collect();
            let grads = {
                let mut g = Graph::new(&params);
                let xv = g.input(x);
                let wv = g.param(w);
                let bv = g.param(b);
                let logits = g.matmul(xv, wv);
                let logits = g.add_row(logits, bv);
                let loss = g.cross_entropy(logits, &labels);
                g.backward(loss)
            };
            optim.step(&mut params, &grads)?;
        }
    }
    Ok(params)
}

/// Cross-validated softmax regression over frozen `features`.
pub fn linear_probe(
    features: &Mat,
    labels: &[String],
    ids: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeReport, RetrievalError> {
    if features.nrows() != labels.len() {
        return Err(RetrievalError::ShapeMismatch(features.nrows(), labels.len()));
    }
    if ids.len() != labels.len() {
        return Err(RetrievalError::ShapeMismatch(ids.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let folds = cfg.folds.max(2);
    let classes: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let class_id: BTreeMap<&String, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let targets: Vec<usize> = labels.iter().map(|l| class_id[l]).collect();
    let assignment = assign_folds(ids, labels, folds, cfg.seed);
    let mut reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assignment[i] == fold);
        if test.is_empty() || train.is_empty() {
            log::warn!("fold {fold} is empty; skipping");
            continue;
        }
        let seen: BTreeSet<usize> = train.iter().map(|&i| targets[i]).collect();
        let unseen: BTreeSet<String> = test
            .iter()
            .filter(|&&i| !seen.contains(&targets[i]))
            .map(|&i| labels[i].clone())
            .collect();
        if !unseen.is_empty() {
            log::warn!("fold {fold}: classes absent from training: {unseen:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let params = train_softmax(features, &targets, &train, classes.len(), cfg, &mut rng)?;
        let w = params.value(0);
        let b = params.value(1);
        let x = features.select(ndarray::Axis(0), &test);
        let logits = x.dot(w) + b;
        let predictions: Vec<usize> = logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let gold: Vec<usize> = test.iter().map(|&i| targets[i]).collect();
        let (f1, accuracy) = f1_macro(&predictions, &gold)?;
        reports.push(FoldReport {
            fold,
            train: train.len(),
            test: test.len(),
            f1_macro: f1,
            accuracy,
            unseen_classes: unseen.into_iter().collect(),
        });
    }
    if reports.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let n = reports.len() as f64;
    Ok(ProbeReport {
        f1_macro: reports.iter().map(|r| r.f1_macro).sum::<f64>() / n,
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
        folds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified_and_seeded() {
        let ids: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let labels: Vec<String> = (0..20).map(|i| if i < 10 { "a" } else { "b" }.to_string()).collect();
        let f = assign_folds(&ids, &labels, 5, 1);
        for fold in 0..5 {
            let a = (0..10).filter(|&i| f[i] == fold).count();
            let b = (10..20).filter(|&i| f[i] == fold).count();
            assert_eq!((a, b), (2, 2));
        }
        assert_eq!(f, assign_folds(&ids, &labels, 5, 1));
        assert_ne!(f, assign_folds(&ids, &labels, 5, 2));
    }
}
