//! The exemplar memory: frozen keys, learnable value tokens, exact cosine
//! retrieval and tombstone deletion.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::rng::{self, Stream};

const MIN_PROJECTED_NORM: f64 = 1e-12;

/// Frozen key encoder: per-channel standardization followed by a fixed
/// random projection with orthonormal columns, then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEncoder {
    channels: usize,
    d_in: usize,
    d: usize,
    /// `d_in x d`, row-major.
    projection: Vec<f32>,
    mean: Vec<f32>,
    std: Vec<f32>,
    seed: u64,
}

impl KeyEncoder {
    /// Draws a Gaussian `d_in x d` matrix from `seed` and keeps the Q factor
    /// of its QR decomposition.
    pub fn new(channels: usize, d_in: usize, d: usize, mean: Vec<f32>, std: Vec<f32>, seed: u64) -> Result<Self> {
        if channels == 0 || d_in == 0 || d == 0 || d > d_in || d_in % channels != 0 {
            return Err(Error::Config(format!(
                "key encoder needs 0 < d <= d_in and channels | d_in (channels={channels}, d_in={d_in}, d={d})"
            )));
        }
        if mean.len() != channels || std.len() != channels {
            return Err(Error::Shape(format!("mean/std need {channels} channel entries")));
        }
        let mut rng = rng::stream(seed, Stream::Encoder);
        let gauss = rng::gaussian_vec(&mut rng, d_in * d, 1.0);
        let m = DMatrix::from_row_iterator(d_in, d, gauss.iter().map(|&v| v as f64));
        let q = m.qr().q();
        let mut projection = Vec::with_capacity(d_in * d);
        for r in 0..d_in {
            for c in 0..d {
                projection.push(q[(r, c)] as f32);
            }
        }
        Ok(Self { channels, d_in, d, projection, mean, std, seed })
    }

    /// Per-channel pixel statistics over `images`, then [`KeyEncoder::new`].
    pub fn fit<'a>(
        images: impl IntoIterator<Item = &'a [f32]>,
        channels: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        let mut count = 0usize;
        let mut d_in = None;
        for img in images {
            let len = *d_in.get_or_insert(img.len());
            if img.len() != len || len % channels != 0 {
                return Err(Error::Shape("images differ in size".into()));
            }
            let per = len / channels;
            for (c, chunk) in img.chunks(per).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += per;
        }
        let d_in = d_in.ok_or(Error::EmptyInput("key encoder needs at least one image"))?;
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| ((q / n - (s / n).powi(2)).max(0.0)).sqrt() as f32)
            .collect();
        Self::new(channels, d_in, d, mean, std, seed)
    }

    /// Restores an encoder from stored tensors.
    pub fn from_parts(channels: usize, d_in: usize, d: usize, projection: Vec<f32>, mean: Vec<f32>, std: Vec<f32>, seed: u64) -> Result<Self> {
        if projection.len() != d_in * d || mean.len() != channels || std.len() != channels {
            return Err(Error::Shape("encoder parts have inconsistent sizes".into()));
        }
        Ok(Self { channels, d_in, d, projection, mean, std, seed })
    }

    pub fn key_dim(&self) -> usize {
        self.d
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn encode(&self, image: &[f32]) -> Result<Vec<f32>> {
        if image.len() != self.d_in {
            return Err(Error::Shape(format!(
                "encoder expects {} pixels, got {}",
                self.d_in,
                image.len()
            )));
        }
        let per = self.d_in / self.channels;
        let mut acc = vec![0f64; self.d];
        for (p, &x) in image.iter().enumerate() {
            let c = p / per;
            let s = if self.std[c] > 1e-12 { self.std[c] } else { 1.0 };
            let z = ((x - self.mean[c]) / s) as f64;
            if z == 0.0 {
                continue;
            }
            let row = &self.projection[p * self.d..(p + 1) * self.d];
            acc.iter_mut().zip(row).for_each(|(a, q)| *a += z * *q as f64);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_PROJECTED_NORM) {
            return Err(Error::DegenerateKey { norm });
        }
        Ok(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Cosine similarity of two unit keys, accumulated in double precision.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    dot.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// Row of the entry inside the memory tables.
    pub index: usize,
    pub similarity: f64,
}

/// Retrieved entries, best first (similarity descending, then id ascending).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn similarities(&self) -> Vec<f64> {
        self.entries.iter().map(|n| n.similarity).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn ranks_before(a: &Neighbor, b: &Neighbor) -> bool {
    a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id)
}

/// The bank `{(key_i, value_i)}` with per-entry live flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    ids: Vec<u64>,
    keys: Vec<f32>,
    key_dim: usize,
    values: Tensor<f32>,
    live: Vec<bool>,
    index: HashMap<u64, usize>,
    live_count: usize,
}

/// Standard deviation of freshly initialized value tokens.
pub const VALUE_INIT_STD: f64 = 0.02;

impl ExemplarMemory {
    /// One live entry per `(id, image)`: key from `encoder`, value drawn
    /// from `N(0, 0.02^2)` using `seed`.
    pub fn build<'a>(
        entries: impl IntoIterator<Item = (u64, &'a [f32])>,
        encoder: &KeyEncoder,
        token_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        let mut keys = Vec::new();
        let mut index = HashMap::new();
        for (id, img) in entries {
            if index.insert(id, ids.len()).is_some() {
                return Err(Error::Build(format!("duplicate id {id}")));
            }
            ids.push(id);
            keys.extend(encoder.encode(img)?);
        }
        if ids.is_empty() {
            return Err(Error::Build("dataset is empty".into()));
        }
        if token_dim == 0 {
            return Err(Error::Build("token dimension must be positive".into()));
        }
        let n = ids.len();
        let mut rng = rng::stream(seed, Stream::MemoryValues);
        let values = Tensor::matrix(n, token_dim, rng::gaussian_vec(&mut rng, n * token_dim, VALUE_INIT_STD))?;
        Ok(Self {
            ids,
            keys,
            key_dim: encoder.key_dim(),
            values,
            live: vec![true; n],
            index,
            live_count: n,
        })
    }

    /// Reassembles a memory from stored tables, validating every invariant.
    pub fn from_parts(ids: Vec<u64>, keys: Vec<f32>, key_dim: usize, values: Tensor<f32>, live: Vec<bool>) -> Result<Self> {
        let n = ids.len();
        if n == 0 || key_dim == 0 || keys.len() != n * key_dim || values.dims2().0 != n || live.len() != n {
            return Err(Error::Format("memory tables have inconsistent sizes".into()));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Format(format!("duplicate memory id {id}")));
            }
        }
        for (i, k) in keys.chunks(key_dim).enumerate() {
            let norm = k.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if live[i] && (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Format(format!("key of id {} has norm {norm}", ids[i])));
            }
        }
        let live_count = live.iter().filter(|l| **l).count();
        Ok(Self { ids, keys, key_dim, values, live, index, live_count })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn live_count(&self) -> usize {
        self.live_count
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn token_dim(&self) -> usize {
        self.values.dims2().1
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn live_flags(&self) -> &[bool] {
        &self.live
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    /// Mutable access for the optimizer. Keys are not reachable mutably.
    pub fn values_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.values
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn index_of(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn is_live(&self, id: u64) -> Result<bool> {
        Ok(self.live[self.index_of(id)?])
    }

    /// Row index of a live entry; dead entries are stale.
    pub fn live_index(&self, id: u64) -> Result<usize> {
        let i = self.index_of(id)?;
        if self.live[i] {
            Ok(i)
        } else {
            Err(Error::StaleSample(id))
        }
    }

    pub fn key(&self, index: usize) -> &[f32] {
        &self.keys[index * self.key_dim..(index + 1) * self.key_dim]
    }

    pub fn value(&self, index: usize) -> &[f32] {
        self.values.row(index)
    }

    /// Exact top-`k` live entries by cosine similarity to `query`, ties by
    /// ascending id. Returns every live entry when fewer than `k` exist.
    pub fn retrieve(&self, query: &[f32], k: usize, exclude: Option<u64>) -> Result<NeighborSet> {
        if k == 0 {
            return Err(Error::Config("retrieve needs k >= 1".into()));
        }
        if query.len() != self.key_dim {
            return Err(Error::Shape(format!(
                "query key has {} dims, memory keys have {}",
                query.len(),
                self.key_dim
            )));
        }
        let available = self.live_count
            - usize::from(exclude.is_some_and(|id| self.index.get(&id).is_some_and(|&i| self.live[i])));
        if available == 0 {
            return Err(Error::EmptyMemory);
        }
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for (i, &id) in self.ids.iter().enumerate() {
            if !self.live[i] || Some(id) == exclude {
                continue;
            }
            let cand = Neighbor { id, index: i, similarity: cosine(query, self.key(i)) };
            if best.len() == k && !ranks_before(&cand, best.last().expect("k >= 1")) {
                continue;
            }
            let pos = best.partition_point(|b| ranks_before(b, &cand));
            best.insert(pos, cand);
            best.truncate(k);
        }
        debug_assert!(best.iter().all(|n| self.live[n.index]));
        Ok(NeighborSet { entries: best })
    }

    /// Tombstones every id in `forget`. Unknown ids abort the whole call
    /// before anything changes; already-dead ids count as zero removals.
    pub fn delete(&mut self, forget: &[u64]) -> Result<usize> {
        let mut rows = Vec::with_capacity(forget.len());
        for &id in forget {
            rows.push(self.index_of(id)?);
        }
        let mut removed = 0;
        for r in rows {
            if self.live[r] {
                self.live[r] = false;
                removed += 1;
            }
        }
        self.live_count -= removed;
        Ok(removed)
    }

    /// Drops dead entries for good, renumbering rows. Ids of survivors are
    /// unchanged.
    pub fn compact(&mut self) -> Result<usize> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.live[i]).collect();
        let dropped = self.len() - keep.len();
        if dropped == 0 {
            return Ok(0);
        }
        if keep.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let m = self.token_dim();
        let mut values = Vec::with_capacity(keep.len() * m);
        let mut keys = Vec::with_capacity(keep.len() * self.key_dim);
        let mut ids = Vec::with_capacity(keep.len());
        for &i in &keep {
            ids.push(self.ids[i]);
            keys.extend_from_slice(self.key(i));
            values.extend_from_slice(self.value(i));
        }
        *self = Self::from_parts(ids, keys, self.key_dim, Tensor::matrix(keep.len(), m, values)?, vec![true; keep.len()])?;
        Ok(dropped)
    }
}

/// `w_j = exp(s_j / tau) / sum_l exp(s_l / tau)`, max-subtracted.
pub fn softmax_weights(similarities: &[f64], tau: f64) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(Error::EmptyInput("softmax_weights needs at least one similarity"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let max = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = similarities.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Linearly decreasing rank weights `(k - r + 1) / (k (k + 1) / 2)`.
pub fn rank_weights(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("rank_weights needs k >= 1".into()));
    }
    let total = (k * (k + 1) / 2) as f64;
    Ok((1..=k).map(|r| (k - r + 1) as f64 / total).collect())
}

/// Convex combination `sum_j w_j v_j`.
pub fn aggregate(values: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::Shape(format!("{} values vs {} weights", values.len(), weights.len())));
    }
    let m = values[0].len();
    if values.iter().any(|v| v.len() != m) {
        return Err(Error::Shape("values differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Contract(format!("weights must be a convex combination (sum {total})")));
    }
    let mut acc = vec![0f64; m];
    for (v, w) in values.iter().zip(weights) {
        acc.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += w * *x as f64);
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}
