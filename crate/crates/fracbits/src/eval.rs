//! Evaluation protocols: repeated random validation subsets for the generic
//! classifier, repeated episodes for the few-shot encoder. Both are pure
//! functions of (model, dataset, seed); each round derives its own RNG from
//! the master seed and the round index.

use rand::seq::index::sample as sample_without_replacement;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::episode::{sample_episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::ops::proto::{prototypes, query_logits};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// Anything that maps a batch [B,1,T,F] to logits [B,K].
pub trait Classifier {
    fn logits(&mut self, batch: &Tensor) -> Result<Tensor>;
}

/// Anything that maps a batch [B,1,T,F] to embeddings [B,D].
pub trait Embedder {
    fn embed(&mut self, batch: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GenericEvalConfig {
    pub rounds: usize,
    pub samples_per_round: usize,
}

impl Default for GenericEvalConfig {
    fn default() -> Self {
        GenericEvalConfig {
            rounds: 100,
            samples_per_round: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FewshotEvalConfig {
    pub rounds: usize,
    pub episode: EpisodeConfig,
}

impl Default for FewshotEvalConfig {
    fn default() -> Self {
        FewshotEvalConfig {
            rounds: 100,
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub rounds: usize,
}

fn summarize(per_round: &[f64]) -> EvalSummary {
    let n = per_round.len() as f64;
    let mean = per_round.iter().sum::<f64>() / n;
    let var = per_round.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    EvalSummary {
        mean,
        std: var.sqrt(),
        rounds: per_round.len(),
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean top-1 accuracy over `rounds` random validation subsets.
pub fn evaluate_generic(
    model: &mut dyn Classifier,
    dataset: &Dataset,
    cfg: &GenericEvalConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let val = &dataset.val_idx;
    if val.len() < cfg.samples_per_round {
        return Err(Error::InsufficientData {
            what: "validation samples",
            needed: cfg.samples_per_round,
            available: val.len(),
        });
    }
    let mut per_round = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "generic-eval-round", round as u64));
        let picks = sample_without_replacement(&mut rng, val.len(), cfg.samples_per_round);
        let indices: Vec<usize> = picks.iter().map(|i| val[i]).collect();
        let (batch, labels) = dataset.batch(&indices);
        let logits = model.logits(&batch)?;
        let k = logits.shape()[1];
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(row, &label)| argmax(&logits.data()[row * k..(row + 1) * k]) == label)
            .count();
        per_round.push(correct as f64 / labels.len() as f64);
    }
    Ok(summarize(&per_round))
}

/// Mean nearest-prototype accuracy over `rounds` validation episodes.
pub fn evaluate_fewshot(
    model: &mut dyn Embedder,
    dataset: &Dataset,
    cfg: &FewshotEvalConfig,
    seed: u64,
) -> Result<EvalSummary> {
    let pool = dataset.val_by_class();
    let mut per_round = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "fewshot-eval-round", round as u64));
        let episode = sample_episode(&pool, &cfg.episode, &mut rng)?;
        let (batch, _) = dataset.batch(&episode.row_indices());
        let embeddings = model.embed(&batch)?;
        let shape = episode.shape;
        let protos = prototypes(&embeddings, shape)?;
        let logits = query_logits(&embeddings, &protos, shape)?;
        let correct = (0..shape.n_way * shape.n_query)
            .filter(|&q| argmax(&logits.data()[q * shape.n_way..(q + 1) * shape.n_way]) == q / shape.n_query)
            .count();
        per_round.push(correct as f64 / (shape.n_way * shape.n_query) as f64);
    }
    Ok(summarize(&per_round))
}
