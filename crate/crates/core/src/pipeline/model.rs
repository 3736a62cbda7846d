use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutputs};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::patchgrid::{patchify, unpatchify, ImageTensor, MaskPartition, PatchGrid, PositionalEmbedding};
use crate::pipeline::config::{EncoderConfig, ModelConfig};
use crate::real::Real;

/// Masked autoencoder with a memory-augmented encoder and a gated
/// multi-level cross-attention decoder.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoder<F: Real> {
    config: ModelConfig,
    store: ParamStore<F>,
    encoder: Encoder,
    decoder: Decoder,
    encoder_pos: PositionalEmbedding<F>,
    decoder_pos: PositionalEmbedding<F>,
}

/// Tape nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub params: Bound,
    pub levels: Vec<Var>,
    pub decoder_input: Var,
    pub decoder_output: Var,
    pub prediction: Var,
}

/// Output of [`MaskedAutoencoder::forward`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Image assembled from the predicted patches at every position.
    pub image: ImageTensor,
    pub prediction: PatchGrid,
    pub partition: MaskPartition,
}

impl<F: Real> MaskedAutoencoder<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { rng: &mut rng };
        let enc_cfg = EncoderConfig {
            memory_slots: config.effective_memory_slots(),
            ..config.encoder.clone()
        };
        let encoder = Encoder::new(&mut store, &mut init, &enc_cfg, config.patch_dim(), config.long_skips);
        let decoder = Decoder::new(
            &mut store,
            &mut init,
            &config.decoder,
            config.encoder.width,
            config.encoder.depth,
            config.ablation.mc_dec,
            config.patch_dim(),
            config.long_skips,
        );
        let grid = config.grid_dims();
        let encoder_pos = crate::patchgrid::positional_table(grid, config.encoder.width)?;
        let decoder_pos = crate::patchgrid::positional_table(grid, config.decoder.width)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            encoder_pos,
            decoder_pos,
        })
    }

    /// Rebuilds a model from `config` and replaces every parameter with the
    /// tensors in `store`; names and shapes must match exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match architecture ({})",
                store.len(),
                model.store.len()
            )));
        }
        for p in store.iter() {
            let slot = model
                .store
                .by_name_mut(&p.name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter {}", p.name)))?;
            if slot.dim() != p.value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(&p.value);
        }
        Ok(model)
    }

    pub fn cast<G: Real>(&self) -> MaskedAutoencoder<G> {
        MaskedAutoencoder::from_store(self.config.clone(), self.store.cast())
            .expect("same architecture")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder_pos(&self) -> &PositionalEmbedding<F> {
        &self.encoder_pos
    }

    pub fn decoder_pos(&self) -> &PositionalEmbedding<F> {
        &self.decoder_pos
    }

    pub fn patchify(&self, image: &ImageTensor) -> Result<PatchGrid> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size || image.channels() != c.channels {
            return Err(Error::Shape(format!(
                "image {}×{}×{} does not match model input {}×{}×{}",
                image.height(),
                image.width(),
                image.channels(),
                c.image_size,
                c.image_size,
                c.channels
            )));
        }
        patchify(image, c.patch_side)
    }

    fn check_partition(&self, partition: &MaskPartition) -> Result<()> {
        if partition.num_patches() != self.config.num_patches() {
            return Err(Error::Shape(format!(
                "partition covers {} patches, model has {}",
                partition.num_patches(),
                self.config.num_patches()
            )));
        }
        if partition.visible_idx.is_empty() {
            return Err(Error::NoVisiblePatches);
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`. `patches` holds every patch
    /// of the image (`|P| × patch_dim`).
    pub fn record<'p>(
        &'p self,
        tape: &mut Tape<'p, F>,
        patches: &Array2<F>,
        partition: &MaskPartition,
    ) -> Result<ForwardNodes> {
        self.check_partition(partition)?;
        if patches.dim() != (self.config.num_patches(), self.config.patch_dim()) {
            return Err(Error::Shape(format!("patch matrix {:?}", patches.dim())));
        }
        let b = self.store.bind(tape);
        let visible = patches.select(ndarray::Axis(0), &partition.visible_idx);
        let x0 = self
            .encoder
            .embed(tape, &b, visible, self.encoder_pos.rows(&partition.visible_idx));
        let levels = self.encoder.forward(tape, &b, x0);
        let last = *levels.last().expect("encoder depth ≥ 1");
        let y0 = self
            .decoder
            .assemble(tape, &b, last, partition, Some(self.decoder_pos.table.clone()));
        let y = self.decoder.forward(tape, &b, y0, &levels);
        let prediction = self.decoder.head(tape, &b, y);
        Ok(ForwardNodes {
            params: b,
            levels,
            decoder_input: y0,
            decoder_output: y,
            prediction,
        })
    }

    /// Predicts every patch of `image` under `partition`.
    pub fn forward(&self, image: &ImageTensor, partition: &MaskPartition) -> Result<Reconstruction> {
        let grid = self.patchify(image)?;
        let prediction = self.predict(&grid, partition)?;
        Ok(Reconstruction {
            image: unpatchify(&prediction)?,
            prediction,
            partition: partition.clone(),
        })
    }

    /// Predicted patches for an already patchified image.
    pub fn predict(&self, grid: &PatchGrid, partition: &MaskPartition) -> Result<PatchGrid> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, &grid.to_real(), partition)?;
        let pred = tape.value(nodes.prediction);
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reconstruction".into()));
        }
        Ok(PatchGrid {
            patches: pred.mapv(|v| v.as_f32()),
            patch_side: grid.patch_side,
            channels: grid.channels,
            grid_dims: grid.grid_dims,
        })
    }

    /// Encoder level outputs for the visible patches of `image`.
    pub fn encode_image(&self, image: &ImageTensor, partition: &MaskPartition) -> Result<EncoderOutputs<F>> {
        let grid = self.patchify(image)?;
        self.check_partition(partition)?;
        let visible = grid.to_real::<F>().select(ndarray::Axis(0), &partition.visible_idx);
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x0 = self
            .encoder
            .embed(&mut tape, &b, visible, self.encoder_pos.rows(&partition.visible_idx));
        let x0 = tape.value(x0).to_owned();
        self.encoder.encode(&self.store, &x0)
    }

    /// Masked-pixel mean squared error.
    pub fn loss(&self, image: &ImageTensor, partition: &MaskPartition) -> Result<F> {
        let grid = self.patchify(image)?;
        let patches = grid.to_real::<F>();
        if partition.masked_idx.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, &patches, partition)?;
        let loss = tape.masked_mse(nodes.prediction, patches, &partition.masked_idx);
        Ok(tape.scalar(loss))
    }

    /// Loss and its gradient with respect to every parameter, in store order.
    pub fn loss_and_grads(&self, patches: &Array2<F>, partition: &MaskPartition) -> Result<(F, Vec<Array2<F>>)> {
        if partition.masked_idx.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, patches, partition)?;
        let loss = tape.masked_mse(nodes.prediction, patches.clone(), &partition.masked_idx);
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        let out = nodes
            .params
            .vars()
            .iter()
            .zip(self.store.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
            .collect();
        Ok((value, out))
    }
}

/// Mean squared error over the pixels of masked patches only.
pub fn masked_mse_loss(
    reconstruction: &ImageTensor,
    target: &ImageTensor,
    partition: &MaskPartition,
    patch_side: usize,
) -> Result<f64> {
    if reconstruction.pixels().dim() != target.pixels().dim() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            reconstruction.pixels().dim(),
            target.pixels().dim()
        )));
    }
    if partition.masked_idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let r = patchify(reconstruction, patch_side)?;
    let t = patchify(target, patch_side)?;
    if partition.num_patches() != r.num_patches() {
        return Err(Error::Shape("partition does not match patch grid".into()));
    }
    let mut acc = 0.0f64;
    for &i in &partition.masked_idx {
        for (&a, &b) in r.patches.row(i).iter().zip(t.patches.row(i)) {
            let d = a as f64 - b as f64;
            acc += d * d;
        }
    }
    Ok(acc / (partition.masked_idx.len() * r.patch_dim()) as f64)
}
