//! Shared oracles for the integration tests.
//!
//! `reference_forward` is a loop-based transformer written directly from the
//! architecture description. It reads weights by name and shares no code with
//! the library's tape.

#![allow(dead_code)]

use memae::patchgrid::{sample_mask, ImageTensor, MaskPartition};
use memae::pipeline::{MaskedAutoencoder, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Array2<f64>;

fn p<'a>(model: &'a MaskedAutoencoder<f64>, name: &str) -> &'a M {
    model
        .store()
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows());
    let mut out = M::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn linear(model: &MaskedAutoencoder<f64>, x: &M, name: &str) -> M {
    let w = p(model, &format!("{name}.weight"));
    let b = p(model, &format!("{name}.bias"));
    let mut y = matmul(x, w);
    for mut row in y.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b.row(0)) {
            *v += bb;
        }
    }
    y
}

fn layer_norm(model: &MaskedAutoencoder<f64>, x: &M, name: &str) -> M {
    let g = p(model, &format!("{name}.gamma"));
    let b = p(model, &format!("{name}.beta"));
    let d = x.ncols() as f64;
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[[0, j]] + b[[0, j]];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn mlp(model: &MaskedAutoencoder<f64>, x: &M, name: &str) -> M {
    let h = linear(model, x, &format!("{name}.fc1")).mapv(gelu);
    linear(model, &h, &format!("{name}.fc2"))
}

/// Multi-head scaled dot-product attention.
pub fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let (n, d) = q.dim();
    let m = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = M::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[[i, c]] = (0..m).map(|j| exps[j] / z * v[[j, c]]).sum();
            }
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a + b
}

/// Sine-cosine table: first half row position, second half column position,
/// each half `[sin(pos ω_i)…, cos(pos ω_i)…]`, `ω_i = 10000^(-i/f)`.
pub fn sincos(grid: (usize, usize), width: usize) -> M {
    let half = width / 2;
    let f_sin = (half + 1) / 2;
    let f_cos = half - f_sin;
    let mut t = M::zeros((grid.0 * grid.1, width));
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..f_sin {
                    let w = (10000f64).powf(-(i as f64) / f_sin as f64);
                    t[[r * grid.1 + c, offset + i]] = (pos * w).sin();
                    if i < f_cos {
                        t[[r * grid.1 + c, offset + f_sin + i]] = (pos * w).cos();
                    }
                }
            }
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Predicted patches (`|P| × patch_dim`) for `patches` under `partition`.
/// Handles memory, gating and long skips so it can check any configuration.
pub fn reference_forward(model: &MaskedAutoencoder<f64>, patches: &M, partition: &MaskPartition) -> M {
    let cfg = model.config().clone();
    let grid = cfg.grid_dims();
    let (ew, dw) = (cfg.encoder.width, cfg.decoder.width);

    // Encoder over visible patches.
    let visible = patches.select(ndarray::Axis(0), &partition.visible_idx);
    let pos = sincos(grid, ew).select(ndarray::Axis(0), &partition.visible_idx);
    let mut x = add(&linear(model, &visible, "encoder.patch_embed"), &pos);
    let depth = cfg.encoder.depth;
    let mut raw: Vec<M> = Vec::new();
    for l in 0..depth {
        let pre = format!("encoder.layers.{l}");
        let h = layer_norm(model, &x, &format!("{pre}.norm1"));
        let q = linear(model, &h, &format!("{pre}.attn.q"));
        let mut k = linear(model, &h, &format!("{pre}.attn.k"));
        let mut v = linear(model, &h, &format!("{pre}.attn.v"));
        if let Some(mk) = model.store().by_name(&format!("{pre}.memory.key")) {
            k = ndarray::concatenate![ndarray::Axis(0), k, mk.clone()];
            v = ndarray::concatenate![ndarray::Axis(0), v, p(model, &format!("{pre}.memory.value")).clone()];
        }
        let a = linear(model, &attention(&q, &k, &v, cfg.encoder.heads), &format!("{pre}.attn.out"));
        let x1 = add(&x, &a);
        let h = layer_norm(model, &x1, &format!("{pre}.norm2"));
        let mut y = add(&x1, &mlp(model, &h, &format!("{pre}.mlp")));
        let src = depth - 1 - l;
        if cfg.long_skips && src < l {
            y = add(&y, &raw[src]);
        }
        raw.push(y.clone());
        x = y;
    }
    let levels: Vec<M> = raw
        .iter()
        .enumerate()
        .map(|(l, r)| layer_norm(model, r, &format!("encoder.layers.{l}.level_norm")))
        .collect();

    // Decoder input.
    let z = linear(model, levels.last().unwrap(), "decoder.embed");
    let token = p(model, "decoder.mask_token");
    let n = partition.num_patches();
    let mut y = M::zeros((n, dw));
    for i in 0..n {
        y.row_mut(i).assign(&token.row(0));
    }
    for (rank, &i) in partition.visible_idx.iter().enumerate() {
        y.row_mut(i).assign(&z.row(rank));
    }
    y = add(&y, &sincos(grid, dw));

    let ddepth = cfg.decoder.depth;
    let used: Vec<usize> = if cfg.ablation.mc_dec {
        (0..depth).collect()
    } else {
        vec![depth - 1]
    };
    let mut outs: Vec<M> = Vec::new();
    for d in 0..ddepth {
        let pre = format!("decoder.layers.{d}");
        let h = layer_norm(model, &y, &format!("{pre}.norm1"));
        let sa = attention(
            &linear(model, &h, &format!("{pre}.self_attn.q")),
            &linear(model, &h, &format!("{pre}.self_attn.k")),
            &linear(model, &h, &format!("{pre}.self_attn.v")),
            cfg.decoder.heads,
        );
        let s = add(&y, &linear(model, &sa, &format!("{pre}.self_attn.out")));
        let sn = layer_norm(model, &s, &format!("{pre}.norm2"));
        let q = linear(model, &sn, &format!("{pre}.cross_attn.q"));
        let mut fused = M::zeros((n, dw));
        for &l in &used {
            let lp = format!("{pre}.cross_attn.levels.{l}");
            let c = attention(
                &q,
                &linear(model, &levels[l], &format!("{lp}.key")),
                &linear(model, &levels[l], &format!("{lp}.value")),
                cfg.decoder.heads,
            );
            if cfg.ablation.mc_dec {
                let joint = ndarray::concatenate![ndarray::Axis(1), sn.clone(), c.clone()];
                let alpha = linear(model, &joint, &format!("{lp}.gate")).mapv(sigmoid);
                for i in 0..n {
                    for j in 0..dw {
                        let a = if alpha.ncols() == 1 { alpha[[i, 0]] } else { alpha[[i, j]] };
                        fused[[i, j]] += a * c[[i, j]];
                    }
                }
            } else {
                fused = fused + &c;
            }
        }
        let o = linear(model, &fused, &format!("{pre}.cross_attn.out"));
        let zz = if cfg.decoder.fusion_residual { add(&s, &o) } else { o };
        let h = layer_norm(model, &zz, &format!("{pre}.norm3"));
        let mut next = add(&zz, &mlp(model, &h, &format!("{pre}.mlp")));
        let src = ddepth - 1 - d;
        if cfg.long_skips && src < d {
            next = add(&next, &outs[src]);
        }
        outs.push(next.clone());
        y = next;
    }
    let y = layer_norm(model, &y, "decoder.norm");
    linear(model, &y, "decoder.head")
}

/// A random small configuration whose widths divide by their head counts.
pub fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    let patch = [4usize, 8][rng.random_range(0..2)];
    cfg.patch_side = patch;
    cfg.image_size = patch * rng.random_range(3..=5);
    cfg.channels = [1usize, 3][rng.random_range(0..2)];
    cfg.encoder.heads = rng.random_range(1..=3);
    cfg.encoder.width = 4 * cfg.encoder.heads * rng.random_range(1..=2);
    cfg.encoder.depth = rng.random_range(1..=4);
    cfg.encoder.mlp_ratio = rng.random_range(1..=3);
    cfg.decoder.heads = rng.random_range(1..=2);
    cfg.decoder.width = 4 * cfg.decoder.heads * rng.random_range(1..=2);
    cfg.decoder.depth = rng.random_range(1..=3);
    cfg.long_skips = rng.random();
    cfg.mask_ratio = [0.5, 0.75][rng.random_range(0..2)];
    cfg.init_seed = rng.random();
    cfg
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(cfg.image_size, cfg.image_size, cfg.channels, |_| rng.random::<f32>()).unwrap()
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, 1)`.
pub fn max_rel_err(a: &M, b: &M) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Per-coordinate comparison of analytic and central-difference gradients.
pub struct GradSample {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Samples `per_tensor` coordinates from every parameter whose name contains
/// one of `patterns` and compares analytic and central-difference gradients
/// of the masked-pixel loss.
pub fn gradient_samples(
    model: &mut MaskedAutoencoder<f64>,
    image: &ImageTensor,
    partition: &MaskPartition,
    patterns: &[&str],
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Vec<GradSample> {
    let patches = model.patchify(image).unwrap().to_real::<f64>();
    let (_, grads) = model.loss_and_grads(&patches, partition).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<(usize, String)> = model
        .store()
        .iter()
        .enumerate()
        .filter(|(_, prm)| patterns.iter().any(|pat| prm.name.contains(pat)))
        .map(|(i, prm)| (i, prm.name.clone()))
        .collect();
    let mut out = Vec::new();
    for (i, name) in targets {
        let id = model.store().id(&name).unwrap();
        let (r, c) = model.store().get(id).dim();
        for _ in 0..per_tensor {
            let idx = (rng.random_range(0..r), rng.random_range(0..c));
            let orig = model.store().get(id)[idx];
            model.store_mut().get_mut(id)[idx] = orig + eps;
            let plus = model.loss(image, partition).unwrap();
            model.store_mut().get_mut(id)[idx] = orig - eps;
            let minus = model.loss(image, partition).unwrap();
            model.store_mut().get_mut(id)[idx] = orig;
            out.push(GradSample {
                name: name.clone(),
                index: idx,
                analytic: grads[i][idx],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    out
}

/// Model for the gradient suite: memory, gated multi-level decoder, long skips.
pub fn gradient_model() -> (MaskedAutoencoder<f64>, ImageTensor, MaskPartition) {
    let mut cfg = ModelConfig::tiny();
    cfg.image_size = 16;
    cfg.patch_side = 4;
    cfg.channels = 1;
    cfg.encoder.depth = 2;
    cfg.encoder.width = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.memory_slots = 3;
    cfg.decoder.depth = 2;
    cfg.decoder.width = 8;
    cfg.decoder.heads = 2;
    cfg.init_seed = 11;
    let mut model = MaskedAutoencoder::<f64>::new(cfg.clone()).unwrap();
    // Larger memory entries make their gradients comparable to the others.
    for prm in model.store_mut().iter_mut() {
        if prm.name.contains("memory") || prm.name.contains("mask_token") {
            prm.value.mapv_inplace(|v| v * 25.0);
        }
    }
    let image = random_image(&cfg, 4);
    let partition = sample_mask(cfg.num_patches(), cfg.mask_ratio, 2).unwrap();
    (model, image, partition)
}

/// Parameter groups checked by the gradient suite.
pub const GRADIENT_TARGETS: [&str; 8] = [
    "memory.key",
    "memory.value",
    ".gate.weight",
    "attn.q.weight",
    "attn.k.weight",
    "self_attn.v.weight",
    "levels.0.key.weight",
    "levels.1.value.weight",
];
