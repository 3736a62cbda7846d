//! Transformer encoder over the visible patch tokens.
//!
//! Each block extends the keys and values of its self-attention with a
//! learnable memory: for tokens `X`,
//!
//! ```text
//! out = attention(X W_Q, [X W_K ; M_K], [X W_V ; M_V]) W_O
//! ```
//!
//! where `[A ; B]` stacks rows. Queries come from the tokens only, so the
//! output keeps one row per visible patch while each query can also attend
//! to the `slots` memory rows. Memory rows are split across heads exactly
//! like projected tokens. Blocks are pre-norm, and with long skips enabled
//! the output of block `i` is also added to the output of block `L-1-i`.
//! Every block output is layer-normalized and retained for the decoder.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, LinearIds, MlpIds, NormIds, ParamId, ParamStore};
use crate::pipeline::EncoderConfig;
use crate::real::Real;

/// Memory std for initialization.
pub const MEMORY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct MemoryIds {
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub norm1: NormIds,
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub out: LinearIds,
    pub memory: Option<MemoryIds>,
    pub norm2: NormIds,
    pub mlp: MlpIds,
    /// Normalizes the block output before it is exposed as a level.
    pub level_norm: NormIds,
}

/// Per-layer key/value memory matrices, each `slots × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<F> {
    pub keys: Vec<Array2<F>>,
    pub values: Vec<Array2<F>>,
    pub slots: usize,
}

/// Outputs of every encoder block, ordered from the first block to the last.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs<F> {
    pub per_layer: Vec<Array2<F>>,
}

impl<F: Real> EncoderOutputs<F> {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }

    pub fn last(&self) -> &Array2<F> {
        self.per_layer.last().expect("encoder has at least one layer")
    }
}

/// Result of one memory-augmented attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionOutput<F> {
    pub tokens: Array2<F>,
    /// Per-head weights, each `n × (n + slots)`.
    pub weights: Vec<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch_embed: LinearIds,
    pub layers: Vec<EncoderLayerParams>,
    pub width: usize,
    pub heads: usize,
    pub slots: usize,
    pub long_skips: bool,
}

impl Encoder {
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_, R>,
        cfg: &EncoderConfig,
        patch_dim: usize,
        long_skips: bool,
    ) -> Self {
        let w = cfg.width;
        let patch_embed = LinearIds::new(store, init, "encoder.patch_embed", patch_dim, w);
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                let norm1 = NormIds::new(store, &format!("{p}.norm1"), w);
                let query = LinearIds::new(store, init, &format!("{p}.attn.q"), w, w);
                let key = LinearIds::new(store, init, &format!("{p}.attn.k"), w, w);
                let value = LinearIds::new(store, init, &format!("{p}.attn.v"), w, w);
                let out = LinearIds::new(store, init, &format!("{p}.attn.out"), w, w);
                let memory = (cfg.memory_slots > 0).then(|| MemoryIds {
                    key: store.add(
                        format!("{p}.memory.key"),
                        init.normal(cfg.memory_slots, w, MEMORY_INIT_STD),
                        true,
                    ),
                    value: store.add(
                        format!("{p}.memory.value"),
                        init.normal(cfg.memory_slots, w, MEMORY_INIT_STD),
                        true,
                    ),
                });
                let norm2 = NormIds::new(store, &format!("{p}.norm2"), w);
                let mlp = MlpIds::new(store, init, &format!("{p}.mlp"), w, w * cfg.mlp_ratio);
                let level_norm = NormIds::new(store, &format!("{p}.level_norm"), w);
                EncoderLayerParams {
                    norm1,
                    query,
                    key,
                    value,
                    out,
                    memory,
                    norm2,
                    mlp,
                    level_norm,
                }
            })
            .collect();
        Self {
            patch_embed,
            layers,
            width: w,
            heads: cfg.heads,
            slots: cfg.memory_slots,
            long_skips,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `X⁽⁰⁾ = P_visible W⁽⁰⁾ + b + positional rows`.
    pub fn embed<'p, F: Real>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        visible_patches: Array2<F>,
        pos_rows: Array2<F>,
    ) -> Var {
        let x = tape.constant(visible_patches);
        let x = self.patch_embed.apply(tape, b, x);
        let pos = tape.constant(pos_rows);
        tape.add(x, pos)
    }

    /// Memory-augmented self-attention of `layer` applied to `x` (no norm, no
    /// residual). Returns the projected output and the raw attention node.
    pub fn mem_attention<'p, F: Real>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        layer: usize,
        x: Var,
    ) -> (Var, Var) {
        let p = &self.layers[layer];
        let q = p.query.apply(tape, b, x);
        let mut k = p.key.apply(tape, b, x);
        let mut v = p.value.apply(tape, b, x);
        if let Some(mem) = p.memory {
            k = tape.concat_rows(k, b.var(mem.key));
            v = tape.concat_rows(v, b.var(mem.value));
        }
        let a = tape.attention(q, k, v, self.heads);
        (p.out.apply(tape, b, a), a)
    }

    fn block<'p, F: Real>(&self, tape: &mut Tape<'p, F>, b: &Bound, layer: usize, x: Var) -> Var {
        let p = &self.layers[layer];
        let h = p.norm1.apply(tape, b, x);
        let (h, _) = self.mem_attention(tape, b, layer, h);
        let x = tape.add(x, h);
        let h = p.norm2.apply(tape, b, x);
        let h = p.mlp.apply(tape, b, h);
        tape.add(x, h)
    }

    /// Runs every block on embedded tokens and returns the normalized level outputs.
    pub fn forward<'p, F: Real>(&self, tape: &mut Tape<'p, F>, b: &Bound, x0: Var) -> Vec<Var> {
        let depth = self.depth();
        let mut raw: Vec<Var> = Vec::with_capacity(depth);
        let mut x = x0;
        for j in 0..depth {
            let mut y = self.block(tape, b, j, x);
            if self.long_skips {
                if let Some(i) = long_skip_source(depth, j) {
                    y = tape.add(y, raw[i]);
                }
            }
            raw.push(y);
            x = y;
        }
        raw.into_iter()
            .zip(&self.layers)
            .map(|(x, p)| p.level_norm.apply(tape, b, x))
            .collect()
    }

    /// Evaluates one layer's memory-augmented attention on plain tokens.
    pub fn mem_self_attention<F: Real>(
        &self,
        store: &ParamStore<F>,
        layer: usize,
        tokens: &Array2<F>,
    ) -> Result<AttentionOutput<F>> {
        self.check_tokens(layer, tokens)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(tokens.clone());
        let (out, attn) = self.mem_attention(&mut tape, &b, layer, x);
        let weights = tape.attention_weights(attn).expect("attention node").to_vec();
        Ok(AttentionOutput {
            tokens: tape.value(out).to_owned(),
            weights,
        })
    }

    /// Encodes already-embedded visible tokens `X⁽⁰⁾`.
    pub fn encode<F: Real>(&self, store: &ParamStore<F>, tokens: &Array2<F>) -> Result<EncoderOutputs<F>> {
        self.check_tokens(0, tokens)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(tokens.clone());
        let levels = self.forward(&mut tape, &b, x);
        let per_layer: Vec<Array2<F>> = levels.iter().map(|&v| tape.value(v).to_owned()).collect();
        for (i, out) in per_layer.iter().enumerate() {
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {i} output")));
            }
        }
        Ok(EncoderOutputs { per_layer })
    }

    pub fn memory_bank<F: Real>(&self, store: &ParamStore<F>) -> MemoryBank<F> {
        let (keys, values) = self
            .layers
            .iter()
            .filter_map(|p| p.memory)
            .map(|m| (store.get(m.key).clone(), store.get(m.value).clone()))
            .unzip();
        MemoryBank {
            keys,
            values,
            slots: self.slots,
        }
    }

    fn check_tokens<F: Real>(&self, layer: usize, tokens: &Array2<F>) -> Result<()> {
        if layer >= self.depth() {
            return Err(Error::InvalidArgument(format!("encoder has no layer {layer}")));
        }
        if tokens.nrows() == 0 {
            return Err(Error::NoVisiblePatches);
        }
        if tokens.ncols() != self.width {
            return Err(Error::Shape(format!(
                "tokens have width {}, encoder width is {}",
                tokens.ncols(),
                self.width
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input tokens".into()));
        }
        Ok(())
    }
}

/// The block whose output is added to block `j`'s output by a long skip.
pub(crate) fn long_skip_source(depth: usize, j: usize) -> Option<usize> {
    let i = depth - 1 - j;
    (i < j).then_some(i)
}
