//! Evaluation: accuracies, the membership-inference attack, average gap,
//! pathway sensitivity, model selection and the two reference baselines.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, PathwayMask};
use crate::checkpoint::Checkpoint;
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::inference::{self, argmax, FusionStrategy};
use crate::membank::ExemplarMemory;
use crate::rng::{self, Stream};
use crate::trainer::{self, TrainConfig};

pub const SENSITIVITY_EPS: f64 = 1e-8;
/// Health-check threshold on the sensitivity score.
pub const DEFAULT_XI: f64 = 0.3;
/// Gaps within this many accuracy points of the best count as comparable.
pub const DEFAULT_GAP_TOLERANCE: f64 = 0.1;

/// Percentage of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("accuracy needs at least one prediction"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// `(loss, entropy, confidence, margin)` of the softmax of `logits`.
pub fn mia_features(logits: &[f32], label: usize) -> Result<[f64; 4]> {
    if label >= logits.len() {
        return Err(Error::Index(format!("label {label} out of range for {} classes", logits.len())));
    }
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let p: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    let loss = lse - z[label];
    let entropy: f64 = z.iter().zip(&p).map(|(v, q)| if *q > 0.0 { -q * (v - lse) } else { 0.0 }).sum();
    let mut sorted = p.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let margin = sorted[0] - sorted.get(1).copied().unwrap_or(0.0);
    Ok([loss, entropy, sorted[0], margin])
}

/// Logistic regression on standardized MIA features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaAttacker {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub weights: [f64; 4],
    pub bias: f64,
    pub iterations: usize,
    pub step: f64,
    pub l2: f64,
    pub seed: u64,
}

impl MiaAttacker {
    /// Full-batch gradient descent, 500 iterations, step 0.1, L2 1e-4, on
    /// members (label 1) vs nonmembers (label 0). Weights start from a
    /// small seeded draw.
    pub fn fit(members: &[[f64; 4]], nonmembers: &[[f64; 4]], seed: u64) -> Result<Self> {
        if members.is_empty() || nonmembers.is_empty() {
            return Err(Error::EmptyInput("attacker needs members and nonmembers"));
        }
        let all: Vec<&[f64; 4]> = members.iter().chain(nonmembers).collect();
        let n = all.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for j in 0..4 {
            mean[j] = all.iter().map(|x| x[j]).sum::<f64>() / n;
            std[j] = (all.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
        if std.iter().all(|s| *s <= 1e-12) {
            return Err(Error::DegenerateFeatures("every attack feature is constant".into()));
        }
        let std = std.map(|s| if s <= 1e-12 { 1.0 } else { s });

        let mut rng = rng::stream(seed, Stream::Attacker);
        let init = rng::gaussian_vec(&mut rng, 4, 0.01);
        let mut a = Self {
            mean,
            std,
            weights: [init[0] as f64, init[1] as f64, init[2] as f64, init[3] as f64],
            bias: 0.0,
            iterations: 500,
            step: 0.1,
            l2: 1e-4,
            seed,
        };
        let data: Vec<([f64; 4], f64)> = members
            .iter()
            .map(|x| (a.standardize(x), 1.0))
            .chain(nonmembers.iter().map(|x| (a.standardize(x), 0.0)))
            .collect();
        for _ in 0..a.iterations {
            let mut gw = [0.0; 4];
            let mut gb = 0.0;
            for (x, y) in &data {
                let err = sigmoid(a.logit(x)) - y;
                for j in 0..4 {
                    gw[j] += err * x[j];
                }
                gb += err;
            }
            for j in 0..4 {
                a.weights[j] -= a.step * (gw[j] / n + a.l2 * a.weights[j]);
            }
            a.bias -= a.step * gb / n;
        }
        Ok(a)
    }

    fn standardize(&self, x: &[f64; 4]) -> [f64; 4] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j])
    }

    fn logit(&self, z: &[f64; 4]) -> f64 {
        self.bias + (0..4).map(|j| self.weights[j] * z[j]).sum::<f64>()
    }

    /// Member probability.
    pub fn score(&self, features: &[f64; 4]) -> f64 {
        sigmoid(self.logit(&self.standardize(features)))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Percentage of pairs `(a, b)` with `a > b`, ties counting half.
/// `auroc(a, b) + auroc(b, a)` is exactly 100.
pub fn auroc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("auroc needs two non-empty score sets"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numerics { op: "auroc" });
    }
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the concordance: 2 per win, 1 per tie.
    let mut k: u128 = 0;
    for x in a {
        let below = sorted.partition_point(|v| v < x);
        let not_above = sorted.partition_point(|v| v <= x);
        k += 2 * below as u128 + (not_above - below) as u128;
    }
    let m = 2 * a.len() as u128 * b.len() as u128;
    // Evaluate from whichever end is closer so swapping the sets gives the
    // exact complement.
    Ok(if 2 * k <= m { 100.0 * k as f64 / m as f64 } else { 100.0 - 100.0 * (m - k) as f64 / m as f64 })
}

/// Mean absolute difference over `(TA, RA, FA, MIA)`.
pub fn avg_gap(method: [f64; 4], oracle: [f64; 4]) -> f64 {
    method.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0
}

/// `|a_img - a_tok| / (a_both + eps)`.
pub fn sensitivity_score(a_img: f64, a_tok: f64, a_both: f64, eps: f64) -> f64 {
    (a_img - a_tok).abs() / (a_both + eps)
}

/// Accuracies (fractions in `[0, 1]`) over `ids` with each sample's own
/// token, under masks `[1,0]`, `[0,1]` and `[1,1]`.
pub fn measure_pathway_accuracies(
    params: &BackboneParams<f32>,
    memory: &ExemplarMemory,
    dataset: &Dataset,
    ids: &[u64],
) -> Result<(f64, f64, f64)> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("pathway accuracies need at least one sample"));
    }
    let mut hits = [0usize; 3];
    for &id in ids {
        let token = memory.value(memory.live_index(id)?);
        let image = dataset.image(id)?;
        let label = dataset.label(id)?;
        let masks = [PathwayMask::IMAGE_ONLY, PathwayMask::TOKEN_ONLY, PathwayMask::BOTH];
        for (h, mask) in hits.iter_mut().zip(masks) {
            let logits = params.logits_with_tokens(image, &[token], mask)?;
            if argmax(&logits[0]) == label {
                *h += 1;
            }
        }
    }
    let n = ids.len() as f64;
    Ok((hits[0] as f64 / n, hits[1] as f64 / n, hits[2] as f64 / n))
}

/// One configuration considered by [`select_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    pub p_s: f64,
    /// `|val_acc - forget_acc|` in accuracy points.
    pub gap: f64,
    pub checkpoint: Option<String>,
}

/// Drops candidates with `p_s >= xi`, keeps those within `gap_tolerance`
/// of the smallest gap, and returns the id with the lowest `p_s` (lowest
/// id on ties).
pub fn select_model(candidates: &[CandidateRecord], xi: f64, gap_tolerance: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("select_model needs at least one candidate"));
    }
    let healthy: Vec<&CandidateRecord> = candidates.iter().filter(|c| c.p_s < xi).collect();
    let best_gap = healthy
        .iter()
        .map(|c| c.gap)
        .min_by(f64::total_cmp)
        .ok_or(Error::NoViableCandidate)?;
    healthy
        .into_iter()
        .filter(|c| c.gap <= best_gap + gap_tolerance)
        .min_by(|a, b| a.p_s.total_cmp(&b.p_s).then(a.id.cmp(&b.id)))
        .map(|c| c.id)
        .ok_or(Error::NoViableCandidate)
}

/// Label frequencies among the `k` nearest live entries.
pub fn knn_baseline(query_key: &[f32], memory: &ExemplarMemory, dataset: &Dataset, k: usize) -> Result<Vec<f64>> {
    let nb = memory.retrieve(query_key, k, None)?;
    let mut counts = vec![0usize; dataset.classes];
    for id in nb.ids() {
        counts[dataset.label(id)?] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / nb.len() as f64).collect())
}

/// Trains from scratch on the dataset with `forget` removed.
pub fn retrain_oracle(config: &TrainConfig, dataset: &Dataset, forget: &[u64]) -> Result<Checkpoint> {
    trainer::train(config, &dataset.without(forget)?)
}

/// Per-model numbers before any comparison with an oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMetrics {
    pub ta: f64,
    pub ra: f64,
    pub fa: f64,
    pub mia_auroc: f64,
    pub p_s: f64,
}

impl ModelMetrics {
    pub fn tuple(&self) -> [f64; 4] {
        [self.ta, self.ra, self.fa, self.mia_auroc]
    }
}

struct Scored {
    classes: Vec<usize>,
    labels: Vec<usize>,
    features: Vec<[f64; 4]>,
}

fn score_ids(ckpt: &Checkpoint, dataset: &Dataset, ids: &[u64], strategy: &FusionStrategy) -> Result<Scored> {
    let mut s = Scored { classes: Vec::new(), labels: Vec::new(), features: Vec::new() };
    for &id in ids {
        let p = inference::predict(dataset.image(id)?, &ckpt.params, &ckpt.encoder, &ckpt.memory, strategy)?;
        let label = dataset.label(id)?;
        s.features.push(mia_features(&p.logits, label)?);
        s.classes.push(p.class);
        s.labels.push(label);
    }
    Ok(s)
}

/// TA, RA, FA with the checkpoint's current memory; MIA AUROC of forget vs
/// held-out test scores from an attacker fit on retain vs the other half of
/// test; `p_s` over the retain set.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    forget: &[u64],
    strategy: &FusionStrategy,
    seed: u64,
) -> Result<ModelMetrics> {
    let mut forget_sorted = forget.to_vec();
    forget_sorted.sort_unstable();
    let retain: Vec<u64> =
        dataset.split_ids(Split::Train).into_iter().filter(|id| forget_sorted.binary_search(id).is_err()).collect();
    let test = dataset.split_ids(Split::Test);
    if test.len() < 2 {
        return Err(Error::Data("evaluation needs at least two test samples".into()));
    }

    let t = score_ids(ckpt, dataset, &test, strategy)?;
    let r = score_ids(ckpt, dataset, &retain, strategy)?;
    let f = score_ids(ckpt, dataset, forget, strategy)?;

    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Attacker));
    let (fit_half, probe_half) = order.split_at(test.len() / 2);
    let nonmembers: Vec<[f64; 4]> = fit_half.iter().map(|&i| t.features[i]).collect();
    let attacker = MiaAttacker::fit(&r.features, &nonmembers, seed)?;
    let forget_scores: Vec<f64> = f.features.iter().map(|x| attacker.score(x)).collect();
    let probe_scores: Vec<f64> = probe_half.iter().map(|&i| attacker.score(&t.features[i])).collect();

    let (a_img, a_tok, a_both) = measure_pathway_accuracies(&ckpt.params, &ckpt.memory, dataset, &retain)?;
    Ok(ModelMetrics {
        ta: accuracy(&t.classes, &t.labels)?,
        ra: accuracy(&r.classes, &r.labels)?,
        fa: accuracy(&f.classes, &f.labels)?,
        mia_auroc: auroc(&forget_scores, &probe_scores)?,
        p_s: sensitivity_score(a_img, a_tok, a_both, SENSITIVITY_EPS),
    })
}

/// Headline numbers of one unlearning run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ta: f64,
    pub ra: f64,
    pub fa: f64,
    pub mia_auroc: f64,
    pub avg_gap: Option<f64>,
    pub p_s: f64,
    pub unlearn_seconds: f64,
}

impl MetricsReport {
    /// Fixed key order, four decimals, `null` for a missing gap.
    pub fn to_json(&self) -> String {
        let gap = self.avg_gap.map_or_else(|| "null".to_owned(), |g| format!("{g:.4}"));
        format!(
            "{{\"ta\": {:.4}, \"ra\": {:.4}, \"fa\": {:.4}, \"mia_auroc\": {:.4}, \"avg_gap\": {gap}, \"p_s\": {:.4}, \"unlearn_seconds\": {:.4}}}",
            self.ta, self.ra, self.fa, self.mia_auroc, self.p_s, self.unlearn_seconds
        )
    }
}

/// Deletes `forget` from a copy of `method` (ids the memory never held are
/// skipped, so an oracle can be passed as the method), times the deletion,
/// evaluates, and compares against `oracle` when given.
pub fn evaluate_unlearning(
    method: &Checkpoint,
    oracle: Option<&Checkpoint>,
    dataset: &Dataset,
    forget: &[u64],
    strategy: &FusionStrategy,
    seed: u64,
) -> Result<MetricsReport> {
    let mut unlearned = method.clone();
    let present: Vec<u64> = forget.iter().copied().filter(|&id| unlearned.memory.contains(id)).collect();
    let start = Instant::now();
    unlearned.memory.delete(&present)?;
    let unlearn_seconds = start.elapsed().as_secs_f64();

    let m = evaluate_model(&unlearned, dataset, forget, strategy, seed)?;
    let avg_gap = match oracle {
        Some(o) => Some(avg_gap(m.tuple(), evaluate_model(o, dataset, forget, strategy, seed)?.tuple())),
        None => None,
    };
    Ok(MetricsReport {
        ta: m.ta,
        ra: m.ra,
        fa: m.fa,
        mia_auroc: m.mia_auroc,
        avg_gap,
        p_s: m.p_s,
        unlearn_seconds,
    })
}
