//! Reverse-mode gradients against central finite differences in f64.
//! Each check returns the worst norm-wise relative error it saw.

use forgekey_core::backbone::{BackboneConfig, BackboneParams, PathwayMask};
use forgekey_core::nncore::{Graph, NodeId, ParamStore, Tensor};
use forgekey_core::rng::{self, Stream};
use forgekey_core::trainer::{batch_loss, SamplePlan, TokenSource};
use forgekey_core::Result;
use rand::Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

fn randn(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    rng::gaussian_vec(rng, n, 1.0).into_iter().map(f64::from).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Contracts `out` with a fixed random tensor so every output entry matters.
fn project<'a>(g: &mut Graph<'a, f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = g.dims(out);
    let mut rng = rng::stream(seed, Stream::Probe);
    let w = g.input(r, c, randn(&mut rng, r * c))?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Compares backward against finite differences for every parameter of
/// `store`, returning the norm-wise relative error per parameter.
fn check_store<F>(store: &ParamStore<f64>, build: F) -> Vec<(String, f64)>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::new();
        let loss = build(&mut g, store).unwrap();
        g.backward(loss).unwrap()
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let loss = build(&mut g, s).unwrap();
        g.value(loss)[0]
    };
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut out = Vec::new();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let mut fd = vec![0.0; n];
        let mut s = store.clone();
        for i in 0..n {
            let orig = s.get(&name).unwrap().data()[i];
            s.get_mut(&name).unwrap().data_mut()[i] = orig + H;
            let up = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[i] = orig - H;
            let down = eval(&s);
            s.get_mut(&name).unwrap().data_mut()[i] = orig;
            fd[i] = (up - down) / (2.0 * H);
        }
        let analytic = grads.param(&name).expect("every leaf reports a gradient");
        out.push((name, rel_err(analytic, &fd)));
    }
    out
}

fn store_of(entries: &[(&str, usize, usize)], rng: &mut rng::Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for &(name, r, c) in entries {
        s.insert(name, Tensor::matrix(r, c, randn(rng, r * c)).unwrap(), true).unwrap();
    }
    s
}

/// Worst norm-wise relative error over all instances and parameters.
fn run_primitive<F>(shapes: impl Fn(&mut rng::Rng, u64) -> Vec<(&'static str, usize, usize)>, build: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>, u64) -> Result<NodeId>,
{
    let mut worst = 0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng::stream(seed, Stream::Params);
        let spec = shapes(&mut rng, seed);
        let store = store_of(&spec, &mut rng);
        for (_, err) in check_store(&store, |g, s| build(g, s, seed)) {
            worst = worst.max(err);
        }
    }
    worst
}

fn dim(rng: &mut rng::Rng) -> usize {
    rng.gen_range(1..=4)
}

pub fn linear_with_and_without_bias() -> f64 {
    run_primitive(
        |rng, _| {
            let (n, p, q) = (dim(rng), dim(rng), dim(rng));
            vec![("x", n, p), ("w", p, q), ("b", 1, q)]
        },
        |g, s, seed| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = if seed % 2 == 0 { g.linear(x, w, Some(b))? } else { g.linear(x, w, None)? };
            let y = if seed % 2 == 0 { y } else { g.add_row(y, b)? };
            project(g, y, seed)
        },
    )
}

pub fn matmul() -> f64 {
    run_primitive(
        |rng, _| {
            let (n, p, q) = (dim(rng), dim(rng), dim(rng));
            vec![("a", n, p), ("b", p, q)]
        },
        |g, s, seed| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = g.matmul(a, b)?;
            project(g, y, seed)
        },
    )
}

pub fn elementwise_ops() -> f64 {
    run_primitive(
        |rng, _| {
            let (n, c) = (dim(rng), dim(rng));
            vec![("a", n, c), ("b", n, c), ("r", 1, c)]
        },
        |g, s, seed| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let r = g.param(s, "r")?;
            let y = g.add(a, b)?;
            let y = g.mul(y, a)?;
            let y = g.scale(y, -0.7)?;
            let y = g.add_row(y, r)?;
            project(g, y, seed)
        },
    )
}

pub fn layer_norm() -> f64 {
    run_primitive(
        |rng, _| {
            let (n, c) = (dim(rng), rng.gen_range(2..=6));
            vec![("x", n, c), ("gamma", 1, c), ("beta", 1, c)]
        },
        |g, s, seed| {
            let x = g.param(s, "x")?;
            let gamma = g.param(s, "gamma")?;
            let beta = g.param(s, "beta")?;
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            project(g, y, seed)
        },
    )
}

pub fn gelu() -> f64 {
    run_primitive(
        |rng, _| vec![("x", dim(rng), dim(rng))],
        |g, s, seed| {
            let x = g.param(s, "x")?;
            let y = g.gelu(x)?;
            project(g, y, seed)
        },
    )
}

/// `(heads, seq_len, batch, head width)` for one instance.
fn attention_layout(seed: u64) -> (usize, usize, usize, usize) {
    (1 + (seed % 2) as usize, 2 + (seed % 3) as usize, 1 + (seed / 2 % 2) as usize, 1 + (seed / 3 % 3) as usize)
}

pub fn attention() -> f64 {
    run_primitive(
        |_, seed| {
            let (heads, seq, batch, width) = attention_layout(seed);
            vec![("qkv", batch * seq, 3 * heads * width)]
        },
        |g, s, seed| {
            let qkv = g.param(s, "qkv")?;
            let (heads, seq, _, _) = attention_layout(seed);
            let y = g.attention(qkv, heads, seq)?;
            project(g, y, seed)
        },
    )
}

pub fn gather_with_repeats() -> f64 {
    run_primitive(
        |rng, _| {
            let c = dim(rng);
            vec![("a", dim(rng), c), ("b", dim(rng), c)]
        },
        |g, s, seed| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let (ra, rb) = (g.dims(a).0, g.dims(b).0);
            let mut rng = rng::stream(seed, Stream::Data);
            let picks: Vec<(usize, usize)> = (0..6)
                .map(|i| if i % 2 == 0 { (0, rng.gen_range(0..ra)) } else { (1, rng.gen_range(0..rb)) })
                .collect();
            let y = g.gather(&[a, b], &picks)?;
            project(g, y, seed)
        },
    )
}

pub fn cross_entropy() -> f64 {
    run_primitive(
        |rng, _| vec![("z", dim(rng), rng.gen_range(2..=5))],
        |g, s, seed| {
            let z = g.param(s, "z")?;
            let (n, c) = g.dims(z);
            let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % c).collect();
            g.cross_entropy(z, &labels)
        },
    )
}

fn tiny() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        channels: 1,
        patch: 4,
        hidden: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        token_dim: 4,
        key_dim: 8,
        classes: 3,
        ln_eps: 1e-5,
    }
}

/// The assembled training loss: backbone, adapter, null tokens and
/// exemplar values, across all masks and both token branches.
/// Panics if a neighbor row behind the stop receives gradient.
pub fn full_loss() -> f64 {
    let cfg = tiny();
    let mut worst = 0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng::stream(seed, Stream::Data);
        let params = BackboneParams::init(&cfg, seed).unwrap().cast::<f64>();
        // Give tokens some scale so the exemplar path matters.
        let values = Tensor::matrix(6, cfg.token_dim, randn(&mut rng, 6 * cfg.token_dim)).unwrap();
        let images: Vec<Vec<f32>> = (0..4).map(|_| rng::gaussian_vec(&mut rng, cfg.pixels(), 1.0)).collect();
        let image_refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let masks = [PathwayMask::BOTH, PathwayMask::IMAGE_ONLY, PathwayMask::TOKEN_ONLY, PathwayMask::BOTH];
        let plans: Vec<SamplePlan> = (0..4)
            .map(|i| SamplePlan {
                mask: masks[(i + seed as usize) % 4],
                label: rng.gen_range(0..cfg.classes),
                token: if i == 3 { TokenSource::Mixed(vec![(4, 0.7), (5, 0.3)]) } else { TokenSource::Own(i) },
            })
            .collect();

        let loss_of = |p: &BackboneParams<f64>, v: &Tensor<f64>| {
            let mut g = Graph::new();
            let l = batch_loss(&mut g, p, v, &image_refs, &plans).unwrap();
            g.value(l)[0]
        };
        let grads = {
            let mut g = Graph::new();
            let l = batch_loss(&mut g, &params, &values, &image_refs, &plans).unwrap();
            g.backward(l).unwrap()
        };

        let mut analytic = Vec::new();
        let mut fd = Vec::new();
        let mut p = params.clone();
        let names: Vec<String> = params.store.names().map(str::to_owned).collect();
        for name in &names {
            let g = grads.param(name).unwrap();
            for i in 0..g.len() {
                let orig = p.store.get(name).unwrap().data()[i];
                p.store.get_mut(name).unwrap().data_mut()[i] = orig + H;
                let up = loss_of(&p, &values);
                p.store.get_mut(name).unwrap().data_mut()[i] = orig - H;
                let down = loss_of(&p, &values);
                p.store.get_mut(name).unwrap().data_mut()[i] = orig;
                analytic.push(g[i]);
                fd.push((up - down) / (2.0 * H));
            }
        }
        let mut v = values.clone();
        for row in 0..3 {
            let g = grads.row(row).unwrap();
            for c in 0..cfg.token_dim {
                let orig = v.row(row)[c];
                v.row_mut(row)[c] = orig + H;
                let up = loss_of(&params, &v);
                v.row_mut(row)[c] = orig - H;
                let down = loss_of(&params, &v);
                v.row_mut(row)[c] = orig;
                analytic.push(g[c]);
                fd.push((up - down) / (2.0 * H));
            }
        }
        worst = worst.max(rel_err(&analytic, &fd));
        // Neighbor rows sit behind the stop.
        for row in [4, 5] {
            assert!(grads.row(row).unwrap().iter().all(|&x| x == 0.0));
        }
    }
    worst
}

pub const ALL: [(&str, fn() -> f64); 9] = [
    ("linear", linear_with_and_without_bias),
    ("matmul", matmul),
    ("add/mul/scale/add_row/sum", elementwise_ops),
    ("layer_norm", layer_norm),
    ("gelu", gelu),
    ("attention", attention),
    ("gather", gather_with_repeats),
    ("cross_entropy", cross_entropy),
    ("full loss", full_loss),
];
