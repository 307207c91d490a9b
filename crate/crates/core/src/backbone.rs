//! The patch transformer, its exemplar-token adapter and the two learned
//! null tokens.
//!
//! An input sequence is `[CLS; patch_1 .. patch_n; exemplar]`. Dropping a
//! pathway swaps its rows for the matching null token; the sequence length
//! stays `n + 2` either way. The exemplar slot carries no positional
//! embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{self, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width `m` of the memory value tokens.
    pub token_dim: usize,
    /// Width `d` of the frozen keys.
    pub key_dim: usize,
    pub classes: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// 16x16 single-channel images, patch 4, h=48, 3 blocks, 4 heads.
    pub fn desk() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch: 4,
            hidden: 48,
            layers: 3,
            heads: 4,
            mlp_ratio: 4,
            token_dim: 32,
            key_dim: 64,
            classes: 4,
            ln_eps: 1e-5,
        }
    }

    /// ViT-Tiny/16 sized: 224x224 RGB, h=192, 12 blocks, 3 heads, m=128.
    pub fn vit_tiny(classes: usize) -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch: 16,
            hidden: 192,
            layers: 12,
            heads: 3,
            mlp_ratio: 4,
            token_dim: 128,
            key_dim: 768,
            classes,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch,
            self.hidden,
            self.layers,
            self.heads,
            self.mlp_ratio,
            self.token_dim,
            self.key_dim,
            self.classes,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.key_dim > self.pixels() {
            return Err(Error::Config("key dimension exceeds pixel count".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// `n + 2`: class token, patches, exemplar slot.
    pub fn seq_len(&self) -> usize {
        self.patches() + 2
    }
}

/// Which pathways survive: `(gamma_img, gamma_tok)`. `(0, 0)` cannot be
/// constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathwayMask {
    image: bool,
    token: bool,
}

impl PathwayMask {
    pub const BOTH: Self = Self { image: true, token: true };
    /// `[1, 0]`: the exemplar slot holds the null token.
    pub const IMAGE_ONLY: Self = Self { image: true, token: false };
    /// `[0, 1]`: every patch row holds the null token.
    pub const TOKEN_ONLY: Self = Self { image: false, token: true };

    pub fn new(image: bool, token: bool) -> Result<Self> {
        if !image && !token {
            return Err(Error::Contract("pathway mask (0,0) drops every input".into()));
        }
        Ok(Self { image, token })
    }

    pub fn image(self) -> bool {
        self.image
    }

    pub fn token(self) -> bool {
        self.token
    }
}

/// Layout of one sequence inside a batched assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSpec {
    /// First row of this sample's patches in the patch-embedding node.
    pub patch_base: usize,
    /// Row of the exemplar node feeding the token slot.
    pub exemplar_row: usize,
    pub mask: PathwayMask,
}

/// All learnable weights of the classifier, adapter and null tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub config: BackboneConfig,
    pub store: ParamStore<T>,
}

fn xavier(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Vec<f32> {
    use rand::Rng as _;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a) as f32).collect()
}

const TOKEN_INIT_STD: f64 = 0.02;

impl BackboneParams<f32> {
    /// Xavier-uniform weight matrices, zero biases, unit norm gains and
    /// `N(0, 0.02^2)` class/positional/null tokens.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Params);
        let h = config.hidden;
        let mut store = ParamStore::new();
        let linear = |store: &mut ParamStore<f32>, rng: &mut rng::Rng, name: &str, fan_in: usize, fan_out: usize| {
            store.insert(
                format!("{name}.weight"),
                Tensor::matrix(fan_in, fan_out, xavier(rng, fan_in, fan_out))?,
                true,
            )?;
            store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out])?, false)
        };
        let norm = |store: &mut ParamStore<f32>, name: &str| -> Result<()> {
            store.insert(format!("{name}.gamma"), Tensor::filled(vec![h], 1.0)?, false)?;
            store.insert(format!("{name}.beta"), Tensor::zeros(vec![h])?, false)
        };

        linear(&mut store, &mut rng, "model.patch", config.patch_dim(), h)?;
        let n = config.patches();
        store.insert(
            "model.pos",
            Tensor::matrix(n + 1, h, rng::gaussian_vec(&mut rng, (n + 1) * h, TOKEN_INIT_STD))?,
            false,
        )?;
        store.insert("model.cls", Tensor::vector(rng::gaussian_vec(&mut rng, h, TOKEN_INIT_STD))?, false)?;
        for l in 0..config.layers {
            let p = format!("model.blocks.{l}");
            norm(&mut store, &format!("{p}.ln1"))?;
            linear(&mut store, &mut rng, &format!("{p}.attn.qkv"), h, 3 * h)?;
            linear(&mut store, &mut rng, &format!("{p}.attn.proj"), h, h)?;
            norm(&mut store, &format!("{p}.ln2"))?;
            linear(&mut store, &mut rng, &format!("{p}.mlp.fc1"), h, config.mlp_ratio * h)?;
            linear(&mut store, &mut rng, &format!("{p}.mlp.fc2"), config.mlp_ratio * h, h)?;
        }
        norm(&mut store, "model.norm")?;
        linear(&mut store, &mut rng, "model.head", h, config.classes)?;
        linear(&mut store, &mut rng, "model.adapter", config.token_dim, h)?;
        store.insert("model.null_img", Tensor::vector(rng::gaussian_vec(&mut rng, h, TOKEN_INIT_STD))?, false)?;
        store.insert("model.null_tok", Tensor::vector(rng::gaussian_vec(&mut rng, h, TOKEN_INIT_STD))?, false)?;
        Ok(Self { config: config.clone(), store })
    }
}

/// Rearranges a `[C x H x W]` image into `n` rows of `C * p * p` values,
/// patches in row-major grid order.
pub fn patchify<T: Scalar>(config: &BackboneConfig, image: &[f32]) -> Result<Vec<T>> {
    if config.image_size % config.patch != 0 {
        return Err(Error::Config(format!(
            "image size {} not divisible by patch {}",
            config.image_size, config.patch
        )));
    }
    if image.len() != config.pixels() {
        return Err(Error::Shape(format!("expected {} pixels, got {}", config.pixels(), image.len())));
    }
    let (s, p, c) = (config.image_size, config.patch, config.channels);
    let grid = s / p;
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for py in 0..p {
                    let row = ch * s * s + (gy * p + py) * s + gx * p;
                    out.extend(image[row..row + p].iter().map(|&v| T::lit(v as f64)));
                }
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> BackboneParams<T> {
    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams { config: self.config.clone(), store: self.store.cast() }
    }

    /// Patch projection plus positional embeddings for `count` images whose
    /// patchified rows are stacked in `patches` (`count * n` rows).
    pub fn embed_patches<'a>(&'a self, g: &mut Graph<'a, T>, patches: NodeId) -> Result<NodeId> {
        let n = self.config.patches();
        let (rows, cols) = g.dims(patches);
        if cols != self.config.patch_dim() || rows % n != 0 {
            return Err(Error::Shape(format!(
                "patch input is {rows}x{cols}, expected multiples of {n}x{}",
                self.config.patch_dim()
            )));
        }
        let proj = nncore::linear(g, &self.store, "model.patch", patches)?;
        let pos = g.param(&self.store, "model.pos")?;
        let picks: Vec<(usize, usize)> = (0..rows).map(|r| (0, 1 + r % n)).collect();
        let pos_rows = g.gather(&[pos], &picks)?;
        g.add(proj, pos_rows)
    }

    /// Convenience: embed one raw image.
    pub fn embed_image<'a>(&'a self, g: &mut Graph<'a, T>, image: &[f32]) -> Result<NodeId> {
        let data = patchify::<T>(&self.config, image)?;
        let x = g.input(self.config.patches(), self.config.patch_dim(), data)?;
        self.embed_patches(g, x)
    }

    /// `h_psi`: one affine map from token width `m` to hidden width `h`.
    pub fn adapter<'a>(&'a self, g: &mut Graph<'a, T>, tokens: NodeId) -> Result<NodeId> {
        if g.dims(tokens).1 != self.config.token_dim {
            return Err(Error::Shape(format!(
                "exemplar token width {} does not match m={}",
                g.dims(tokens).1,
                self.config.token_dim
            )));
        }
        nncore::linear(g, &self.store, "model.adapter", tokens)
    }

    /// Builds stacked sequences `[CLS; P(z, null_img, g_img); P(v', null_tok, g_tok)]`.
    pub fn assemble<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        patch_emb: NodeId,
        exemplars: Option<NodeId>,
        specs: &[SequenceSpec],
    ) -> Result<NodeId> {
        let n = self.config.patches();
        let h = self.config.hidden;
        if g.dims(patch_emb).1 != h {
            return Err(Error::Shape("patch embeddings have the wrong width".into()));
        }
        if let Some(e) = exemplars {
            if g.dims(e).1 != h {
                return Err(Error::Shape("exemplar tokens must be projected to the hidden width".into()));
            }
        }
        let cls = g.param(&self.store, "model.cls")?;
        let pos = g.param(&self.store, "model.pos")?;
        let pos0 = g.gather(&[pos], &[(0, 0)])?;
        let cls_row = g.add(cls, pos0)?;
        let null_img = g.param(&self.store, "model.null_img")?;
        let null_tok = g.param(&self.store, "model.null_tok")?;

        const CLS: usize = 0;
        const PATCH: usize = 1;
        const NULL_IMG: usize = 2;
        const NULL_TOK: usize = 3;
        const EXEMPLAR: usize = 4;
        let mut sources = vec![cls_row, patch_emb, null_img, null_tok];
        if let Some(e) = exemplars {
            sources.push(e);
        }
        let mut picks = Vec::with_capacity(specs.len() * (n + 2));
        for s in specs {
            picks.push((CLS, 0));
            for j in 0..n {
                picks.push(if s.mask.image() { (PATCH, s.patch_base + j) } else { (NULL_IMG, 0) });
            }
            if s.mask.token() {
                if exemplars.is_none() {
                    return Err(Error::Contract("token pathway active but no exemplar supplied".into()));
                }
                picks.push((EXEMPLAR, s.exemplar_row));
            } else {
                picks.push((NULL_TOK, 0));
            }
        }
        g.gather(&sources, &picks)
    }

    /// Single-sample assembly: `patches` is `n x h`, `exemplar` is `1 x h`.
    pub fn assemble_input<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        patches: NodeId,
        exemplar: NodeId,
        mask: PathwayMask,
    ) -> Result<NodeId> {
        if g.dims(patches).0 != self.config.patches() || g.dims(exemplar).0 != 1 {
            return Err(Error::Shape("assemble_input takes one sample".into()));
        }
        self.assemble(g, patches, Some(exemplar), &[SequenceSpec { patch_base: 0, exemplar_row: 0, mask }])
    }

    /// Pre-norm transformer over stacked sequences of length `n + 2`; the
    /// head reads each sequence's class-token row. Returns `batch x C`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, seq: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_features(g, seq)?.1)
    }

    /// Returns `(class-token features after the final norm, logits)`.
    pub fn forward_with_features<'a>(&'a self, g: &mut Graph<'a, T>, seq: NodeId) -> Result<(NodeId, NodeId)> {
        let cfg = &self.config;
        let seq_len = cfg.seq_len();
        let (rows, cols) = g.dims(seq);
        if cols != cfg.hidden || rows % seq_len != 0 {
            return Err(Error::Shape(format!("sequence input is {rows}x{cols}")));
        }
        let eps = T::lit(cfg.ln_eps);
        let mut x = seq;
        for l in 0..cfg.layers {
            let p = format!("model.blocks.{l}");
            let a = nncore::layer_norm(g, &self.store, &format!("{p}.ln1"), x, eps)?;
            let a = nncore::multi_head_attention(g, &self.store, &format!("{p}.attn"), a, cfg.heads, seq_len)?;
            x = g.add(x, a)?;
            let m = nncore::layer_norm(g, &self.store, &format!("{p}.ln2"), x, eps)?;
            let m = nncore::linear(g, &self.store, &format!("{p}.mlp.fc1"), m)?;
            let m = g.gelu(m)?;
            let m = nncore::linear(g, &self.store, &format!("{p}.mlp.fc2"), m)?;
            x = g.add(x, m)?;
        }
        // Row-wise norm commutes with row selection.
        let cls_rows: Vec<(usize, usize)> = (0..rows / seq_len).map(|b| (0, b * seq_len)).collect();
        let cls = g.gather(&[x], &cls_rows)?;
        let cls = nncore::layer_norm(g, &self.store, "model.norm", cls, eps)?;
        let logits = nncore::linear(g, &self.store, "model.head", cls)?;
        Ok((cls, logits))
    }

    /// Logits of one image paired with each supplied raw token (`m`-vectors)
    /// under `mask`. Tokens may be empty when the token pathway is dropped.
    pub fn logits_with_tokens(&self, image: &[f32], tokens: &[&[f32]], mask: PathwayMask) -> Result<Vec<Vec<T>>> {
        Ok(self.run_with_tokens(image, tokens, mask)?.0)
    }

    /// Like [`Self::logits_with_tokens`], also returning class-token features.
    pub fn run_with_tokens(
        &self,
        image: &[f32],
        tokens: &[&[f32]],
        mask: PathwayMask,
    ) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let patches = self.embed_image(&mut g, image)?;
        let count = tokens.len().max(1);
        let exemplars = if mask.token() {
            if tokens.is_empty() {
                return Err(Error::Contract("token pathway active but no tokens supplied".into()));
            }
            let m = self.config.token_dim;
            let mut flat = Vec::with_capacity(tokens.len() * m);
            for t in tokens {
                if t.len() != m {
                    return Err(Error::Shape(format!("token has {} dims, expected {m}", t.len())));
                }
                flat.extend(t.iter().map(|&v| T::lit(v as f64)));
            }
            let raw = g.input(tokens.len(), m, flat)?;
            Some(self.adapter(&mut g, raw)?)
        } else {
            None
        };
        let specs: Vec<SequenceSpec> = (0..count)
            .map(|i| SequenceSpec { patch_base: 0, exemplar_row: i, mask })
            .collect();
        let seq = self.assemble(&mut g, patches, exemplars, &specs)?;
        let (feats, logits) = self.forward_with_features(&mut g, seq)?;
        let rows = |id: NodeId| {
            let (b, c) = g.dims(id);
            (0..b).map(|i| g.value(id)[i * c..(i + 1) * c].to_vec()).collect::<Vec<_>>()
        };
        Ok((rows(logits), rows(feats)))
    }
}
