//! Prediction for unseen queries from retrieved exemplar tokens.
//!
//! `Ensemble` runs one forward pass per neighbor and averages the logits
//! with softmax weights. `SoftmaxToken` and `RankToken` mix the neighbor
//! tokens first and run a single pass. The mask is always `[1, 1]`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, PathwayMask};
use crate::error::{Error, Result};
use crate::membank::{self, ExemplarMemory, KeyEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Ensemble,
    #[serde(alias = "softmax")]
    SoftmaxToken,
    #[serde(alias = "rank")]
    RankToken,
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Self::Ensemble),
            "softmax" | "softmax_token" => Ok(Self::SoftmaxToken),
            "rank" | "rank_token" => Ok(Self::RankToken),
            other => Err(Error::Config(format!("unknown strategy `{other}` (ensemble, softmax, rank)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionStrategy {
    pub kind: StrategyKind,
    pub k: usize,
    pub tau: f64,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        Self { kind: StrategyKind::Ensemble, k: 4, tau: 0.07 }
    }
}

impl FusionStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("strategy needs k >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("strategy tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub class: usize,
    pub neighbors: Vec<u64>,
    pub similarities: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(
    image: &[f32],
    params: &BackboneParams<f32>,
    encoder: &KeyEncoder,
    memory: &ExemplarMemory,
    strategy: &FusionStrategy,
) -> Result<Prediction> {
    strategy.validate()?;
    let key = encoder.encode(image)?;
    let nb = memory.retrieve(&key, strategy.k, None)?;
    let sims = nb.similarities();
    let tokens: Vec<&[f32]> = nb.entries.iter().map(|e| memory.value(e.index)).collect();
    let (logits, weights) = match strategy.kind {
        StrategyKind::Ensemble => {
            let w = membank::softmax_weights(&sims, strategy.tau)?;
            let per = params.logits_with_tokens(image, &tokens, PathwayMask::BOTH)?;
            let mut acc = vec![0f64; params.config.classes];
            for (row, wj) in per.iter().zip(&w) {
                acc.iter_mut().zip(row).for_each(|(a, x)| *a += wj * *x as f64);
            }
            (acc.into_iter().map(|v| v as f32).collect(), w)
        }
        StrategyKind::SoftmaxToken | StrategyKind::RankToken => {
            let w = if strategy.kind == StrategyKind::SoftmaxToken {
                membank::softmax_weights(&sims, strategy.tau)?
            } else {
                membank::rank_weights(tokens.len())?
            };
            let mixed = membank::aggregate(&tokens, &w)?;
            let mut per = params.logits_with_tokens(image, &[&mixed], PathwayMask::BOTH)?;
            (per.swap_remove(0), w)
        }
    };
    Ok(Prediction { class: argmax(&logits), logits, neighbors: nb.ids(), similarities: sims, weights })
}

/// [`predict`] for each query in order.
pub fn predict_batch<'q>(
    queries: impl IntoIterator<Item = &'q [f32]>,
    params: &BackboneParams<f32>,
    encoder: &KeyEncoder,
    memory: &ExemplarMemory,
    strategy: &FusionStrategy,
) -> Result<Vec<Prediction>> {
    queries.into_iter().map(|q| predict(q, params, encoder, memory, strategy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn strategy_names() {
        assert_eq!("softmax".parse::<StrategyKind>().unwrap(), StrategyKind::SoftmaxToken);
        assert_eq!("rank".parse::<StrategyKind>().unwrap(), StrategyKind::RankToken);
        assert!("median".parse::<StrategyKind>().is_err());
        let s: FusionStrategy = serde_json::from_str(r#"{"kind": "rank", "k": 2}"#).unwrap();
        assert_eq!(s.kind, StrategyKind::RankToken);
    }
}
