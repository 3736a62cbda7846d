//! Decoder over all patch tokens with gated multi-level cross-attention.
//!
//! Layer `d` first self-attends over its tokens `Y` (pre-norm, residual),
//! giving `S`. Queries from `S` then cross-attend to every retained encoder
//! level `X⁽ˡ⁾` with that level's own key/value projections, producing `C_l`.
//! A sigmoid gate computed from `[S, C_l]` weighs each level:
//!
//! ```text
//! α_l = σ([S, C_l] W_α⁽ˡ⁾ + b_α⁽ˡ⁾)
//! fused = Σ_l α_l ⊙ C_l
//! ```
//!
//! Gates are independent sigmoids, not a softmax over levels. The fused
//! result is projected, added back to `S`, and followed by the MLP block.
//! With multi-level fusion disabled the layer attends only to the last
//! encoder level and uses no gate.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{long_skip_source, EncoderOutputs};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, LinearIds, MlpIds, NormIds, ParamId, ParamStore};
use crate::patchgrid::{MaskPartition, PatchGrid, PositionalEmbedding};
use crate::pipeline::{DecoderConfig, GateGranularity};
use crate::real::Real;

pub const MASK_TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct CrossLevelParams {
    /// Index of the encoder level this entry attends to.
    pub level: usize,
    pub key: LinearIds,
    pub value: LinearIds,
    pub gate: Option<LinearIds>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub norm1: NormIds,
    pub self_query: LinearIds,
    pub self_key: LinearIds,
    pub self_value: LinearIds,
    pub self_out: LinearIds,
    pub norm2: NormIds,
    pub cross_query: LinearIds,
    pub levels: Vec<CrossLevelParams>,
    pub cross_out: LinearIds,
    pub norm3: NormIds,
    pub mlp: MlpIds,
}

/// Decoder tokens `Y⁽ᵈ⁾`, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F> {
    pub tokens: Array2<F>,
}

/// Output of one decoder layer together with its fusion gates.
#[derive(Debug, Clone)]
pub struct LayerOutput<F> {
    pub state: DecoderState<F>,
    /// One `|P| × g` matrix per attended level (`g` is 1 or the width); empty
    /// when fusion is ungated.
    pub gates: Vec<Array2<F>>,
    /// Per-level cross-attention results `C_l`.
    pub cross: Vec<Array2<F>>,
    /// Gated sum of the cross-attention results, before the output projection.
    pub fused: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Projects the last encoder level to the decoder width.
    pub embed: LinearIds,
    pub mask_token: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub norm: NormIds,
    pub head: LinearIds,
    pub width: usize,
    pub heads: usize,
    pub encoder_levels: usize,
    pub gated: bool,
    pub fusion_residual: bool,
    pub long_skips: bool,
}

impl Decoder {
    /// `multi_level` selects gated fusion over all `encoder_levels`; otherwise
    /// each layer cross-attends to the last level only.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Init<'_, R>,
        cfg: &DecoderConfig,
        encoder_width: usize,
        encoder_levels: usize,
        multi_level: bool,
        patch_dim: usize,
        long_skips: bool,
    ) -> Self {
        let w = cfg.width;
        let embed = LinearIds::new(store, init, "decoder.embed", encoder_width, w);
        let mask_token = store.add("decoder.mask_token", init.normal(1, w, MASK_TOKEN_INIT_STD), false);
        let used: Vec<usize> = if multi_level {
            (0..encoder_levels).collect()
        } else {
            vec![encoder_levels - 1]
        };
        let gate_width = match cfg.gate_granularity {
            GateGranularity::PerToken => 1,
            GateGranularity::PerChannel => w,
        };
        let layers = (0..cfg.depth)
            .map(|d| {
                let p = format!("decoder.layers.{d}");
                let norm1 = NormIds::new(store, &format!("{p}.norm1"), w);
                let self_query = LinearIds::new(store, init, &format!("{p}.self_attn.q"), w, w);
                let self_key = LinearIds::new(store, init, &format!("{p}.self_attn.k"), w, w);
                let self_value = LinearIds::new(store, init, &format!("{p}.self_attn.v"), w, w);
                let self_out = LinearIds::new(store, init, &format!("{p}.self_attn.out"), w, w);
                let norm2 = NormIds::new(store, &format!("{p}.norm2"), w);
                let cross_query = LinearIds::new(store, init, &format!("{p}.cross_attn.q"), w, w);
                let levels = used
                    .iter()
                    .map(|&l| {
                        let lp = format!("{p}.cross_attn.levels.{l}");
                        CrossLevelParams {
                            level: l,
                            key: LinearIds::new(store, init, &format!("{lp}.key"), encoder_width, w),
                            value: LinearIds::new(store, init, &format!("{lp}.value"), encoder_width, w),
                            gate: multi_level
                                .then(|| LinearIds::new(store, init, &format!("{lp}.gate"), 2 * w, gate_width)),
                        }
                    })
                    .collect();
                let cross_out = LinearIds::new(store, init, &format!("{p}.cross_attn.out"), w, w);
                let norm3 = NormIds::new(store, &format!("{p}.norm3"), w);
                let mlp = MlpIds::new(store, init, &format!("{p}.mlp"), w, w * cfg.mlp_ratio);
                DecoderLayerParams {
                    norm1,
                    self_query,
                    self_key,
                    self_value,
                    self_out,
                    norm2,
                    cross_query,
                    levels,
                    cross_out,
                    norm3,
                    mlp,
                }
            })
            .collect();
        let norm = NormIds::new(store, "decoder.norm", w);
        let head = LinearIds::new(store, init, "decoder.head", w, patch_dim);
        Self {
            embed,
            mask_token,
            layers,
            norm,
            head,
            width: w,
            heads: cfg.heads,
            encoder_levels,
            gated: multi_level,
            fusion_residual: cfg.fusion_residual,
            long_skips,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn check_levels(&self, got: usize) -> Result<()> {
        if got != self.encoder_levels {
            return Err(Error::Shape(format!(
                "decoder expects {} encoder levels, got {got}",
                self.encoder_levels
            )));
        }
        Ok(())
    }

    /// Projects the encoder output, places it at the visible positions, fills
    /// the masked positions with the shared mask token and adds `pos_rows`
    /// (one row per patch) when given.
    pub fn assemble<'p, F: Real>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        encoder_last: Var,
        partition: &MaskPartition,
        pos_rows: Option<Array2<F>>,
    ) -> Var {
        let z = self.embed.apply(tape, b, encoder_last);
        let y = tape.scatter(z, b.var(self.mask_token), &partition.visible_idx, partition.num_patches());
        match pos_rows {
            Some(pos) => {
                let pos = tape.constant(pos);
                tape.add(y, pos)
            }
            None => y,
        }
    }

    /// One decoder layer; returns the new tokens, the gate nodes, the
    /// per-level cross-attention nodes and the fused node.
    pub fn layer<'p, F: Real>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        d: usize,
        y: Var,
        levels: &[Var],
    ) -> (Var, Vec<Var>, Vec<Var>, Var) {
        let p = &self.layers[d];
        let h = p.norm1.apply(tape, b, y);
        let q = p.self_query.apply(tape, b, h);
        let k = p.self_key.apply(tape, b, h);
        let v = p.self_value.apply(tape, b, h);
        let sa = tape.attention(q, k, v, self.heads);
        let sa = p.self_out.apply(tape, b, sa);
        let s = tape.add(y, sa);

        let s_norm = p.norm2.apply(tape, b, s);
        let q = p.cross_query.apply(tape, b, s_norm);
        let mut fused: Option<Var> = None;
        let mut gates = Vec::new();
        let mut cross = Vec::new();
        for lp in &p.levels {
            let x = levels[lp.level];
            let k = lp.key.apply(tape, b, x);
            let v = lp.value.apply(tape, b, x);
            let c = tape.attention(q, k, v, self.heads);
            cross.push(c);
            let term = match lp.gate {
                Some(gate) => {
                    let joint = tape.concat_cols(s_norm, c);
                    let pre = gate.apply(tape, b, joint);
                    let alpha = tape.sigmoid(pre);
                    gates.push(alpha);
                    if tape.value(alpha).ncols() == 1 {
                        tape.mul_col(c, alpha)
                    } else {
                        tape.mul(c, alpha)
                    }
                }
                None => c,
            };
            fused = Some(match fused {
                Some(f) => tape.add(f, term),
                None => term,
            });
        }
        let fused = fused.expect("decoder layer attends to at least one level");
        let out = p.cross_out.apply(tape, b, fused);
        let z = if self.fusion_residual { tape.add(s, out) } else { out };
        let h = p.norm3.apply(tape, b, z);
        let h = p.mlp.apply(tape, b, h);
        (tape.add(z, h), gates, cross, fused)
    }

    /// All layers, long skips and the final norm.
    pub fn forward<'p, F: Real>(&self, tape: &mut Tape<'p, F>, b: &Bound, y0: Var, levels: &[Var]) -> Var {
        let depth = self.depth();
        let mut outs: Vec<Var> = Vec::with_capacity(depth);
        let mut y = y0;
        for d in 0..depth {
            let (mut next, ..) = self.layer(tape, b, d, y, levels);
            if self.long_skips {
                if let Some(i) = long_skip_source(depth, d) {
                    next = tape.add(next, outs[i]);
                }
            }
            outs.push(next);
            y = next;
        }
        self.norm.apply(tape, b, y)
    }

    pub fn head<'p, F: Real>(&self, tape: &mut Tape<'p, F>, b: &Bound, y: Var) -> Var {
        self.head.apply(tape, b, y)
    }

    /// Builds the decoder input from plain arrays.
    pub fn assemble_decoder_input<F: Real>(
        &self,
        store: &ParamStore<F>,
        encoder_last: &Array2<F>,
        partition: &MaskPartition,
        pos: Option<&PositionalEmbedding<F>>,
    ) -> Result<DecoderState<F>> {
        if encoder_last.nrows() != partition.visible_idx.len() {
            return Err(Error::Shape(format!(
                "{} encoder tokens for {} visible patches",
                encoder_last.nrows(),
                partition.visible_idx.len()
            )));
        }
        if let Some(pos) = pos {
            if pos.table.dim() != (partition.num_patches(), self.width) {
                return Err(Error::Shape(format!(
                    "positional table {:?} for {} patches of width {}",
                    pos.table.dim(),
                    partition.num_patches(),
                    self.width
                )));
            }
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(encoder_last.clone());
        let y = self.assemble(&mut tape, &b, x, partition, pos.map(|p| p.table.clone()));
        Ok(DecoderState {
            tokens: tape.value(y).to_owned(),
        })
    }

    /// Evaluates decoder layer `d` on plain arrays.
    pub fn multi_level_cross_attention<F: Real>(
        &self,
        store: &ParamStore<F>,
        d: usize,
        state: &DecoderState<F>,
        encoder_out: &EncoderOutputs<F>,
    ) -> Result<LayerOutput<F>> {
        self.check_levels(encoder_out.depth())?;
        if d >= self.depth() {
            return Err(Error::InvalidArgument(format!("decoder has no layer {d}")));
        }
        if state.tokens.ncols() != self.width {
            return Err(Error::Shape(format!(
                "decoder tokens have width {}, expected {}",
                state.tokens.ncols(),
                self.width
            )));
        }
        let inputs_finite = state.tokens.iter().all(|v| v.is_finite())
            && encoder_out.per_layer.iter().all(|x| x.iter().all(|v| v.is_finite()));
        if !inputs_finite {
            return Err(Error::NonFinite("decoder layer inputs".into()));
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let y = tape.constant(state.tokens.clone());
        let levels: Vec<Var> = encoder_out
            .per_layer
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect();
        let (out, gates, cross, fused) = self.layer(&mut tape, &b, d, y, &levels);
        let tokens = tape.value(out).to_owned();
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoder layer {d} output")));
        }
        Ok(LayerOutput {
            state: DecoderState { tokens },
            gates: gates.iter().map(|&g| tape.value(g).to_owned()).collect(),
            cross: cross.iter().map(|&c| tape.value(c).to_owned()).collect(),
            fused: tape.value(fused).to_owned(),
        })
    }

    /// Linear pixel head applied to every token.
    pub fn predict_pixels<F: Real>(
        &self,
        store: &ParamStore<F>,
        state: &DecoderState<F>,
        patch_side: usize,
        channels: usize,
        grid_dims: (usize, usize),
    ) -> Result<PatchGrid> {
        let w = store.get(self.head.weight);
        if state.tokens.ncols() != w.nrows() || w.ncols() != patch_side * patch_side * channels {
            return Err(Error::Shape("pixel head does not match state or patch size".into()));
        }
        if state.tokens.nrows() != grid_dims.0 * grid_dims.1 {
            return Err(Error::Shape("token count does not match patch grid".into()));
        }
        let pred = state.tokens.dot(w) + store.get(self.head.bias);
        Ok(PatchGrid {
            patches: pred.mapv(|v| v.as_f32()),
            patch_side,
            channels,
            grid_dims,
        })
    }
}
