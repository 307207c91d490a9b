//! Deterministic synthetic images and stratified forget sampling.
//!
//! An image is `class prototype + instance pattern + noise`. The prototype
//! is a fixed white-noise pattern per class; the instance pattern is a
//! blocky low-frequency pattern unique to each sample, so there is
//! something per-instance worth memorizing.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub prototype_amplitude: f64,
    pub instance_amplitude: f64,
    pub noise_std: f64,
    /// Side length of the blocks of the instance pattern.
    pub instance_block: usize,
    /// Split proportions in permille; the remainder is the test split.
    pub train_permille: u32,
    pub val_permille: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 625,
            image_size: 16,
            channels: 1,
            prototype_amplitude: 0.6,
            instance_amplitude: 0.5,
            noise_std: 1.0,
            instance_block: 4,
            train_permille: 700,
            val_permille: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.instance_block == 0 || self.image_size % self.instance_block != 0 {
            return Err(Error::Config("instance block must divide the image size".into()));
        }
        let amps = [self.prototype_amplitude, self.instance_amplitude, self.noise_std];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("amplitudes must be finite and non-negative".into()));
        }
        if self.train_permille + self.val_permille > 1000 {
            return Err(Error::Config("train + val permille exceeds 1000".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Images with labels and split tags, stored as parallel arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    ids: Vec<u64>,
    images: Vec<f32>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(
        classes: usize,
        channels: usize,
        image_size: usize,
        ids: Vec<u64>,
        images: Vec<f32>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = ids.len();
        let pixels = channels * image_size * image_size;
        if labels.len() != n || splits.len() != n || images.len() != n * pixels {
            return Err(Error::Data("dataset arrays differ in length".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Data(format!("duplicate sample id {id}")));
            }
        }
        Ok(Self { classes, channels, image_size, ids, images, labels, splits, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn image_at(&self, pos: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[pos * p..(pos + 1) * p]
    }

    pub fn image(&self, id: u64) -> Result<&[f32]> {
        Ok(self.image_at(self.position(id)?))
    }

    pub fn label_at(&self, pos: usize) -> usize {
        self.labels[pos]
    }

    pub fn label(&self, id: u64) -> Result<usize> {
        Ok(self.labels[self.position(id)?])
    }

    pub fn split_at(&self, pos: usize) -> Split {
        self.splits[pos]
    }

    /// Ids tagged `split`, in dataset order.
    pub fn split_ids(&self, split: Split) -> Vec<u64> {
        self.ids
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Same samples with the ids in `drop` removed.
    pub fn without(&self, drop: &[u64]) -> Result<Self> {
        let mut skip = vec![false; self.len()];
        for &id in drop {
            skip[self.position(id)?] = true;
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !skip[i]).collect();
        let mut images = Vec::with_capacity(keep.len() * self.pixels());
        for &i in &keep {
            images.extend_from_slice(self.image_at(i));
        }
        Self::new(
            self.classes,
            self.channels,
            self.image_size,
            keep.iter().map(|&i| self.ids[i]).collect(),
            images,
            keep.iter().map(|&i| self.labels[i]).collect(),
            keep.iter().map(|&i| self.splits[i]).collect(),
        )
    }

    /// Writes `images.bin` (u64 count, u32 channels, u32 height, u32 width,
    /// then little-endian f32 pixels) and `labels.csv` (`id,label,split`).
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(20 + self.images.len() * 4);
        bin.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in [self.channels, self.image_size, self.image_size] {
            bin.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.images {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(dir.join("images.bin"))?.write_all(&bin)?;

        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("labels.csv")).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record([self.ids[i].to_string(), self.labels[i].to_string(), self.splits[i].as_str().to_owned()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a directory written by [`Dataset::export`]. The class count is
    /// one past the largest label.
    pub fn import(dir: &Path) -> Result<Self> {
        let mut bin = Vec::new();
        fs::File::open(dir.join("images.bin"))?.read_to_end(&mut bin)?;
        if bin.len() < 20 {
            return Err(Error::Data("images.bin header truncated".into()));
        }
        let count = u64::from_le_bytes(bin[0..8].try_into().expect("8 bytes")) as usize;
        let dims: Vec<usize> = (0..3)
            .map(|i| u32::from_le_bytes(bin[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize)
            .collect();
        let (channels, height, width) = (dims[0], dims[1], dims[2]);
        if height != width {
            return Err(Error::Data(format!("only square images are supported, got {height}x{width}")));
        }
        let expected = count
            .checked_mul(channels * height * width * 4)
            .ok_or_else(|| Error::Data("images.bin header overflows".into()))?;
        if bin.len() - 20 != expected {
            return Err(Error::Data(format!(
                "images.bin holds {} payload bytes, header promises {expected}",
                bin.len() - 20
            )));
        }
        let images: Vec<f32> = bin[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut splits = Vec::with_capacity(count);
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(dir.join("labels.csv")).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 3 {
                return Err(Error::Data(format!("labels.csv line has {} fields", rec.len())));
            }
            ids.push(rec[0].trim().parse().map_err(|e| Error::Data(format!("bad id `{}`: {e}", &rec[0])))?);
            labels.push(rec[1].trim().parse().map_err(|e| Error::Data(format!("bad label `{}`: {e}", &rec[1])))?);
            splits.push(Split::parse(rec[2].trim())?);
        }
        if ids.len() != count {
            return Err(Error::Data(format!("labels.csv has {} rows for {count} images", ids.len())));
        }
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self::new(classes, channels, height, ids, images, labels, splits)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("labels.csv: {e}"))
}

/// Splits `total` items over `weights` (sizes of groups) in proportion,
/// `floor` shares first, leftovers to the largest remainders (lower index
/// wins ties).
fn largest_remainder(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut rem: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| ((total * s) % n, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = total - quota.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(left) {
        quota[i] += 1;
    }
    quota
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let (c, s) = (spec.channels, spec.image_size);
    let pixels = c * s * s;
    let block = spec.instance_block;
    let coarse = s / block;

    let prototypes: Vec<Vec<f32>> = (0..spec.classes).map(|_| rng::gaussian_vec(&mut rng, pixels, 1.0)).collect();

    let total = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(total * pixels);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.classes;
        let pattern = rng::gaussian_vec(&mut rng, c * coarse * coarse, 1.0);
        let noise = rng::gaussian_vec(&mut rng, pixels, 1.0);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let p = ch * s * s + y * s + x;
                    let inst = pattern[ch * coarse * coarse + (y / block) * coarse + x / block];
                    let v = spec.prototype_amplitude * prototypes[label][p] as f64
                        + spec.instance_amplitude * inst as f64
                        + spec.noise_std * noise[p] as f64;
                    images.push(v as f32);
                }
            }
        }
        labels.push(label);
    }

    // Per-class split counts from cumulative floors: totals per split are
    // exact and each class is within one of its proportional share.
    let mut splits = vec![Split::Test; total];
    let floor_share = |permille: u32, count: usize| count * permille as usize / 1000;
    let mut cum = 0;
    for class in 0..spec.classes {
        let mut members: Vec<usize> = (0..total).filter(|i| labels[*i] == class).collect();
        let before = cum;
        cum += members.len();
        let train = floor_share(spec.train_permille, cum) - floor_share(spec.train_permille, before);
        let train_val = floor_share(spec.train_permille + spec.val_permille, cum)
            - floor_share(spec.train_permille + spec.val_permille, before);
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            splits[i] = if k < train {
                Split::Train
            } else if k < train_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    Dataset::new(spec.classes, c, s, (0..total as u64).collect(), images, labels, splits)
}

/// Draws `floor(rate * |train|)` train ids, sorted ascending. Stratified
/// draws allot per-class counts by largest remainder.
pub fn sample_forget(dataset: &Dataset, rate: f64, stratified: bool, seed: u64) -> Result<Vec<u64>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("forget rate must be in (0, 1), got {rate}")));
    }
    let train = dataset.split_ids(Split::Train);
    let count = (rate * train.len() as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "forget rate {rate} selects no samples from {} training ids",
            train.len()
        )));
    }
    let mut rng = rng::stream(seed, Stream::Forget);
    let mut out = if stratified {
        let mut by_class: Vec<Vec<u64>> = vec![Vec::new(); dataset.classes];
        for &id in &train {
            by_class[dataset.label(id)?].push(id);
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let quota = largest_remainder(count, &sizes);
        let mut out = Vec::with_capacity(count);
        for (ids, q) in by_class.iter_mut().zip(quota) {
            ids.shuffle(&mut rng);
            out.extend_from_slice(&ids[..q]);
        }
        out
    } else {
        let mut ids = train;
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids
    };
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_arithmetic() {
        let d = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.len(), 2500);
        assert_eq!(d.split_ids(Split::Train).len(), 1750);
        assert_eq!(d.split_ids(Split::Val).len(), 250);
        assert_eq!(d.split_ids(Split::Test).len(), 500);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { samples_per_class: 20, ..SyntheticSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn degenerate_spec_gives_identical_class_images() {
        let spec = SyntheticSpec {
            samples_per_class: 6,
            instance_amplitude: 0.0,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let d = generate(&spec).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d.label_at(i) == d.label_at(j) {
                    assert_eq!(d.image_at(i), d.image_at(j));
                } else {
                    assert_ne!(d.image_at(i), d.image_at(j));
                }
            }
        }
    }

    #[test]
    fn largest_remainder_cases() {
        assert_eq!(largest_remainder(200, &[500; 4]), vec![50; 4]);
        assert_eq!(largest_remainder(10, &[1, 1, 1]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(3, &[5, 3, 2]), vec![1, 1, 1]);
    }

    #[test]
    fn forget_rate_errors() {
        let d = generate(&SyntheticSpec { samples_per_class: 3, ..SyntheticSpec::default() }).unwrap();
        assert!(matches!(sample_forget(&d, 0.0, true, 0), Err(Error::Config(_))));
        assert!(matches!(sample_forget(&d, 0.01, true, 0), Err(Error::Config(_))));
    }

    #[test]
    fn export_import_roundtrip() {
        let d = generate(&SyntheticSpec { samples_per_class: 5, ..SyntheticSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.export(dir.path()).unwrap();
        let e = Dataset::import(dir.path()).unwrap();
        assert_eq!(d, e);
        let csv = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        let first = csv.lines().next().unwrap();
        assert_eq!(first, format!("0,0,{}", d.split_at(0).as_str()));
    }
}
