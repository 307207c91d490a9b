//! Joint training of the backbone, adapter, null tokens and memory values.
//!
//! Per sample, one draw picks the pathway mask, a second decides whether
//! the exemplar slot gets the sample's own value token (`r = 0`) or a
//! softmax-weighted mix of `K'` retrieved neighbor tokens (`r = 1`). The
//! neighbor mix sits behind a gradient stop, so only the sample's own
//! token is ever trained through its slot.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, BackboneConfig, BackboneParams, PathwayMask, SequenceSpec};
use crate::checkpoint::{Checkpoint, EpochRecord};
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::harness;
use crate::inference::{self, FusionStrategy};
use crate::membank::{self, ExemplarMemory, KeyEncoder};
use crate::nncore::{cosine_lr, AdamW, Graph, NodeId, OptimState, Scalar, Tensor};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Probability of dropping the image pathway (mask `[0, 1]`).
    pub p_i: f64,
    /// Probability of dropping the token pathway (mask `[1, 0]`).
    pub p_t: f64,
    /// Probability of the retrieval branch.
    pub p_r: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Multiplier on the scheduled lr for memory value rows.
    pub memory_lr_scale: f64,
    /// Neighbors used for the per-epoch validation accuracy.
    pub eval_k: usize,
    /// Training samples in the per-epoch pathway-sensitivity probe.
    pub probe_size: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_i: 0.1,
            p_t: 0.3,
            p_r: 0.2,
            k_min: 2,
            k_max: 16,
            tau: 0.07,
            epochs: 30,
            batch_size: 32,
            lr0: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.05,
            memory_lr_scale: 10.0,
            eval_k: 4,
            probe_size: 128,
            seed: 0,
            backbone: BackboneConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..1.0).contains(&p);
        if !unit(self.p_i) || !unit(self.p_t) {
            return Err(Error::Config(format!("p_i and p_t must lie in [0, 1), got {} and {}", self.p_i, self.p_t)));
        }
        if self.p_i + self.p_t > 1.0 {
            return Err(Error::Config(format!("p_i + p_t = {} exceeds 1", self.p_i + self.p_t)));
        }
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::Config(format!("p_r must lie in [0, 1], got {}", self.p_r)));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!("K' range {}..={} is empty or starts at 0", self.k_min, self.k_max)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_k == 0 {
            return Err(Error::Config("batch size and eval k must be positive".into()));
        }
        let positive = [self.lr0, self.memory_lr_scale];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("lr0 and memory_lr_scale must be positive".into()));
        }
        if !(unit(self.beta1) && unit(self.beta2)) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and weight decay be >= 0".into()));
        }
        self.backbone.validate()
    }

    pub fn optimizer(&self, lr: f64) -> AdamW {
        AdamW { lr, beta1: self.beta1, beta2: self.beta2, weight_decay: self.weight_decay, eps: 1e-8 }
    }
}

/// One categorical draw: `[0,1]` with `p_i`, `[1,0]` with `p_t`, else `[1,1]`.
pub fn sample_mask(p_i: f64, p_t: f64, rng: &mut Rng) -> Result<PathwayMask> {
    if !(p_i >= 0.0 && p_t >= 0.0 && p_i + p_t <= 1.0) {
        return Err(Error::Config(format!("mask probabilities p_i={p_i}, p_t={p_t} are not a distribution")));
    }
    let u: f64 = rng.gen();
    Ok(if u < p_i {
        PathwayMask::TOKEN_ONLY
    } else if u < p_i + p_t {
        PathwayMask::IMAGE_ONLY
    } else {
        PathwayMask::BOTH
    })
}

/// `r ~ Bernoulli(p_r)`; when `r = 1`, also `K' ~ U{k_min..=k_max}`.
pub fn sample_retrieval(p_r: f64, k_min: usize, k_max: usize, rng: &mut Rng) -> Option<usize> {
    let u: f64 = rng.gen();
    if u < p_r {
        Some(rng.gen_range(k_min..=k_max))
    } else {
        None
    }
}

/// The random choices for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub mask: PathwayMask,
    /// `Some(K')` when the retrieval branch is active.
    pub retrieval: Option<usize>,
}

/// Where a sample's exemplar slot reads from, as rows of the value table.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSource {
    /// The sample's own row, trainable.
    Own(usize),
    /// Weighted neighbor rows behind a gradient stop.
    Mixed(Vec<(usize, f64)>),
    /// Token pathway dropped and nothing to feed it.
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub mask: PathwayMask,
    pub label: usize,
    pub token: TokenSource,
}

/// Builds the mean cross-entropy of a batch. `images` holds one flattened
/// image per plan. Own rows enter as one trainable row leaf; neighbor rows
/// as a second leaf that passes through a stop before mixing.
pub fn batch_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a BackboneParams<T>,
    values: &Tensor<T>,
    images: &[&[f32]],
    plans: &[SamplePlan],
) -> Result<NodeId> {
    let cfg = &params.config;
    if images.len() != plans.len() || plans.is_empty() {
        return Err(Error::Shape(format!("{} images for {} plans", images.len(), plans.len())));
    }
    let n = cfg.patches();
    let mut flat = Vec::with_capacity(images.len() * cfg.pixels());
    for img in images {
        flat.extend(patchify::<T>(cfg, img)?);
    }
    let x = g.input(images.len() * n, cfg.patch_dim(), flat)?;
    let emb = params.embed_patches(g, x)?;

    let own: Vec<usize> = plans
        .iter()
        .filter_map(|p| match p.token {
            TokenSource::Own(r) => Some(r),
            _ => None,
        })
        .collect();
    let mixed: Vec<&Vec<(usize, f64)>> = plans
        .iter()
        .filter_map(|p| match &p.token {
            TokenSource::Mixed(v) => Some(v),
            _ => None,
        })
        .collect();

    let mut parts = Vec::new();
    if !own.is_empty() {
        parts.push(g.rows(values, &own)?);
    }
    if !mixed.is_empty() {
        let rows: Vec<usize> = mixed.iter().flat_map(|v| v.iter().map(|(r, _)| *r)).collect();
        let nb = g.rows(values, &rows)?;
        let nb = g.stop(nb)?;
        let mut w = vec![T::zero(); mixed.len() * rows.len()];
        let mut col = 0;
        for (i, v) in mixed.iter().enumerate() {
            for (_, weight) in v.iter() {
                w[i * rows.len() + col] = T::lit(*weight);
                col += 1;
            }
        }
        let w = g.input(mixed.len(), rows.len(), w)?;
        parts.push(g.matmul(w, nb)?);
    }
    let raw = match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => {
            let picks: Vec<(usize, usize)> =
                (0..own.len()).map(|i| (0, i)).chain((0..mixed.len()).map(|i| (1, i))).collect();
            Some(g.gather(&parts, &picks)?)
        }
    };
    let exemplars = raw.map(|r| params.adapter(g, r)).transpose()?;

    let (mut next_own, mut next_mixed) = (0, own.len());
    let mut specs = Vec::with_capacity(plans.len());
    for (b, p) in plans.iter().enumerate() {
        let exemplar_row = match p.token {
            TokenSource::Own(_) => {
                next_own += 1;
                next_own - 1
            }
            TokenSource::Mixed(_) => {
                next_mixed += 1;
                next_mixed - 1
            }
            TokenSource::Absent => 0,
        };
        if p.mask.token() && p.token == TokenSource::Absent {
            return Err(Error::Contract("token pathway active without a token source".into()));
        }
        specs.push(SequenceSpec { patch_base: b * n, exemplar_row, mask: p.mask });
    }
    let seq = params.assemble(g, emb, exemplars, &specs)?;
    let logits = params.forward(g, seq)?;
    let labels: Vec<usize> = plans.iter().map(|p| p.label).collect();
    g.cross_entropy(logits, &labels)
}

/// Training state over one dataset: model, memory, optimizer moments and
/// the random stream.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub params: BackboneParams<f32>,
    pub encoder: KeyEncoder,
    pub memory: ExemplarMemory,
    dataset: &'d Dataset,
    train_pos: Vec<usize>,
    probe_ids: Vec<u64>,
    val_pos: Vec<usize>,
    opt: OptimState<f32>,
    mem_opt: OptimState<f32>,
    rng: Rng,
    step: u64,
    total_steps: u64,
    history: Vec<EpochRecord>,
}

impl<'d> Trainer<'d> {
    /// Fits the key encoder on the training images and builds one memory
    /// entry per training sample.
    pub fn new(config: &TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let cfg = &config.backbone;
        if dataset.channels != cfg.channels || dataset.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
                dataset.channels, dataset.image_size, dataset.image_size, cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        if dataset.classes > cfg.classes {
            return Err(Error::Config(format!("dataset has {} classes, head has {}", dataset.classes, cfg.classes)));
        }
        let train_pos: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.split_at(i) == Split::Train).collect();
        if train_pos.is_empty() {
            return Err(Error::Data("dataset has no training samples".into()));
        }
        let val_pos: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.split_at(i) == Split::Val).collect();

        let params = BackboneParams::init(cfg, config.seed)?;
        let encoder =
            KeyEncoder::fit(train_pos.iter().map(|&i| dataset.image_at(i)), cfg.channels, cfg.key_dim, config.seed)?;
        let memory = ExemplarMemory::build(
            train_pos.iter().map(|&i| (dataset.ids()[i], dataset.image_at(i))),
            &encoder,
            cfg.token_dim,
            config.seed,
        )?;

        let mut probe_rng = rng::stream(config.seed, Stream::Probe);
        let mut probe_ids: Vec<u64> = train_pos.iter().map(|&i| dataset.ids()[i]).collect();
        probe_ids.shuffle(&mut probe_rng);
        probe_ids.truncate(config.probe_size);
        probe_ids.sort_unstable();

        let per_epoch = train_pos.len().div_ceil(config.batch_size) as u64;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            memory,
            dataset,
            train_pos,
            probe_ids,
            val_pos,
            opt: OptimState::new(),
            mem_opt: OptimState::new(),
            rng: rng::stream(config.seed, Stream::Training),
            step: 0,
            total_steps: per_epoch * config.epochs as u64,
            history: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Draws mask, then `r`, then `K'` for each sample in order.
    pub fn draw(&mut self, count: usize) -> Result<Vec<Draw>> {
        let c = &self.config;
        (0..count)
            .map(|_| {
                let mask = sample_mask(c.p_i, c.p_t, &mut self.rng)?;
                let retrieval = sample_retrieval(c.p_r, c.k_min, c.k_max, &mut self.rng);
                Ok(Draw { mask, retrieval })
            })
            .collect()
    }

    /// Resolves draws into token sources against the current memory.
    pub fn plan(&self, ids: &[u64], draws: &[Draw]) -> Result<Vec<SamplePlan>> {
        if ids.len() != draws.len() {
            return Err(Error::Shape(format!("{} ids for {} draws", ids.len(), draws.len())));
        }
        let mut plans = Vec::with_capacity(ids.len());
        for (&id, d) in ids.iter().zip(draws) {
            let row = self.memory.live_index(id)?;
            let label = self.dataset.label(id)?;
            let token = match d.retrieval {
                None => TokenSource::Own(row),
                Some(_) if !d.mask.token() => TokenSource::Absent,
                Some(k) => {
                    let nb = self.memory.retrieve(self.memory.key(row), k, Some(id))?;
                    let w = membank::softmax_weights(&nb.similarities(), self.config.tau)?;
                    TokenSource::Mixed(nb.entries.iter().map(|e| e.index).zip(w).collect())
                }
            };
            plans.push(SamplePlan { mask: d.mask, label, token });
        }
        Ok(plans)
    }

    /// One optimizer step on `ids` with the given draws at learning rate
    /// `lr`. Returns the batch loss.
    pub fn step_with_draws(&mut self, ids: &[u64], draws: &[Draw], lr: f64) -> Result<f64> {
        let plans = self.plan(ids, draws)?;
        let images: Vec<&[f32]> = ids.iter().map(|&id| self.dataset.image(id)).collect::<Result<_>>()?;
        let (loss, grads) = {
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, &self.params, self.memory.values(), &images, &plans)?;
            (g.value(loss)[0] as f64, g.backward(loss)?)
        };
        self.params.store.set_grads(&grads)?;
        self.config.optimizer(lr).step(&mut self.params.store, &mut self.opt)?;

        let mut own: Vec<usize> = plans
            .iter()
            .filter_map(|p| match p.token {
                TokenSource::Own(r) => Some(r),
                _ => None,
            })
            .collect();
        own.sort_unstable();
        own.dedup();
        let updates: Vec<(usize, &[f32])> =
            own.iter().map(|&r| (r, grads.row(r).expect("own rows are graph leaves"))).collect();
        let mem_opt = AdamW { weight_decay: 0.0, ..self.config.optimizer(lr * self.config.memory_lr_scale) };
        mem_opt.step_rows(self.memory.values_mut(), &updates, &mut self.mem_opt, false)?;
        self.step += 1;
        Ok(loss)
    }

    /// Draws, then steps at the scheduled lr.
    pub fn step(&mut self, ids: &[u64]) -> Result<(f64, f64)> {
        let draws = self.draw(ids.len())?;
        let lr = cosine_lr(self.step + 1, self.total_steps.max(self.step + 1), self.config.lr0)?;
        Ok((self.step_with_draws(ids, &draws, lr)?, lr))
    }

    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let mut order = self.train_pos.clone();
        order.shuffle(&mut self.rng);
        let ids: Vec<u64> = order.iter().map(|&i| self.dataset.ids()[i]).collect();
        let (mut total, mut lr) = (0.0, 0.0);
        for batch in ids.chunks(self.config.batch_size) {
            let (loss, l) = self.step(batch)?;
            total += loss * batch.len() as f64;
            lr = l;
        }
        let record = EpochRecord {
            epoch: self.history.len() + 1,
            train_loss: total / ids.len() as f64,
            val_acc: self.val_accuracy()?,
            lr,
            p_s_probe: self.probe_sensitivity()?,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Ensemble accuracy (percent) on the validation split; 0 without one.
    pub fn val_accuracy(&self) -> Result<f64> {
        if self.val_pos.is_empty() {
            return Ok(0.0);
        }
        let strategy = FusionStrategy { k: self.config.eval_k, tau: self.config.tau, ..FusionStrategy::default() };
        let mut preds = Vec::with_capacity(self.val_pos.len());
        let mut labels = Vec::with_capacity(self.val_pos.len());
        for &i in &self.val_pos {
            let p = inference::predict(self.dataset.image_at(i), &self.params, &self.encoder, &self.memory, &strategy)?;
            preds.push(p.class);
            labels.push(self.dataset.label_at(i));
        }
        harness::accuracy(&preds, &labels)
    }

    pub fn probe_sensitivity(&self) -> Result<f64> {
        let (a_img, a_tok, a_both) =
            harness::measure_pathway_accuracies(&self.params, &self.memory, self.dataset, &self.probe_ids)?;
        Ok(harness::sensitivity_score(a_img, a_tok, a_both, harness::SENSITIVITY_EPS))
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            params: self.params,
            encoder: self.encoder,
            memory: self.memory,
            history: self.history,
        }
    }
}

/// Trains for `config.epochs` epochs and packages the result.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    train_with(config, dataset, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(config: &TrainConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, dataset)?;
    for _ in 0..config.epochs {
        let r = t.train_epoch()?;
        on_epoch(&r);
    }
    Ok(t.into_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_edge_probabilities() {
        let mut rng = rng::stream(1, Stream::Training);
        for _ in 0..1000 {
            assert_eq!(sample_mask(0.0, 0.0, &mut rng).unwrap(), PathwayMask::BOTH);
            assert_eq!(sample_mask(1.0, 0.0, &mut rng).unwrap(), PathwayMask::TOKEN_ONLY);
            assert_eq!(sample_retrieval(0.0, 2, 16, &mut rng), None);
        }
        assert!(matches!(sample_mask(0.6, 0.5, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { p_i: 0.6, p_t: 0.5, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { k_min: 5, k_max: 4, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"p_i": 0.2, "typo": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"p_i": 0.2}"#).unwrap();
        assert_eq!(c.p_i, 0.2);
        assert_eq!(c.k_max, 16);
    }
}
