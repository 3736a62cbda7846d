//! Image ↔ patch-token conversion, random mask partitions and fixed
//! sine-cosine positional tables.
//!
//! Patches are laid out in row-major grid order and each patch row is the
//! raster flattening `(y, x, channel)` of its pixels.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// An `H × W × R` image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let c = pixels.dim().2;
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("{c} channels, expected 1 or 3")));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, channels)))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl FnMut((usize, usize, usize)) -> f32,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, channels), f))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `|P| × (side·side·channels)` patch rows.
    pub patches: Array2<f32>,
    pub patch_side: usize,
    pub channels: usize,
    /// `(rows, cols)` of the patch grid.
    pub grid_dims: (usize, usize),
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.ncols()
    }

    /// Converts the patch matrix to the model's element type.
    pub fn to_real<F: Real>(&self) -> Array2<F> {
        self.patches.mapv(<F as Real>::from_f32)
    }
}

pub fn patchify(image: &ImageTensor, patch_side: usize) -> Result<PatchGrid> {
    let (h, w, c) = image.pixels.dim();
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(Error::Dimension(format!(
            "image {h}×{w} is not divisible into {patch_side}-pixel patches"
        )));
    }
    let (rows, cols) = (h / patch_side, w / patch_side);
    let dim = patch_side * patch_side * c;
    let mut patches = Array2::<f32>::zeros((rows * cols, dim));
    for gr in 0..rows {
        for gc in 0..cols {
            let mut row = patches.row_mut(gr * cols + gc);
            let mut k = 0;
            for y in 0..patch_side {
                for x in 0..patch_side {
                    for ch in 0..c {
                        row[k] = image.pixels[[gr * patch_side + y, gc * patch_side + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        patch_side,
        channels: c,
        grid_dims: (rows, cols),
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<ImageTensor> {
    let (rows, cols) = grid.grid_dims;
    let p = grid.patch_side;
    let c = grid.channels;
    if grid.patches.dim() != (rows * cols, p * p * c) || p == 0 {
        return Err(Error::Shape(format!(
            "patch matrix {:?} inconsistent with grid {rows}×{cols}, side {p}, {c} channels",
            grid.patches.dim()
        )));
    }
    let mut pixels = Array3::<f32>::zeros((rows * p, cols * p, c));
    for gr in 0..rows {
        for gc in 0..cols {
            let row = grid.patches.row(gr * cols + gc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        pixels[[gr * p + y, gc * p + x, ch]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    ImageTensor::new(pixels)
}

/// A split of patch indices into encoder-visible and masked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
    /// Stored as raw bits so the partition stays `Eq`.
    ratio_bits: u64,
}

impl MaskPartition {
    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn num_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Builds a partition from an explicit visible set.
    pub fn from_visible(num_patches: usize, mut visible_idx: Vec<usize>) -> Result<Self> {
        visible_idx.sort_unstable();
        visible_idx.dedup();
        if visible_idx.last().is_some_and(|&i| i >= num_patches) {
            return Err(Error::InvalidArgument("visible index out of range".into()));
        }
        let masked_idx = complement(num_patches, &visible_idx);
        let ratio = masked_idx.len() as f64 / num_patches as f64;
        Ok(Self {
            visible_idx,
            masked_idx,
            seed: 0,
            ratio_bits: ratio.to_bits(),
        })
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_idx.binary_search(&patch).is_ok()
    }
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Number of visible patches: `round((1 - ratio) n)`, halves rounded down.
pub fn visible_count(num_patches: usize, ratio: f64) -> usize {
    let x = (1.0 - ratio) * num_patches as f64;
    let k = (x - 0.5 - 1e-9).ceil().max(0.0) as usize;
    k.min(num_patches)
}

/// Draws a uniformly random visible subset without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, seed: u64) -> Result<MaskPartition> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    if num_patches < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patches, got {num_patches}"
        )));
    }
    let k = visible_count(num_patches, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visible_idx = rand::seq::index::sample(&mut rng, num_patches, k).into_vec();
    visible_idx.sort_unstable();
    let masked_idx = complement(num_patches, &visible_idx);
    Ok(MaskPartition {
        visible_idx,
        masked_idx,
        seed,
        ratio_bits: ratio.to_bits(),
    })
}

/// Fixed 2-D sine-cosine table, one row per patch in raster order.
///
/// The first half of each row encodes the grid row, the second half the grid
/// column. Each half is `[sin(pos·ω_i)…, cos(pos·ω_i)…]` with
/// `ω_i = 10000^(-i/f)` for the `f` frequencies of that half.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding<F> {
    pub table: Array2<F>,
    pub grid_dims: (usize, usize),
}

impl<F: Real> PositionalEmbedding<F> {
    pub fn width(&self) -> usize {
        self.table.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> Array2<F> {
        self.table.select(ndarray::Axis(0), idx)
    }
}

pub fn positional_table<F: Real>(grid_dims: (usize, usize), width: usize) -> Result<PositionalEmbedding<F>> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional width must be even and positive, got {width}"
        )));
    }
    let (rows, cols) = grid_dims;
    let half = width / 2;
    let mut table = Array2::<F>::zeros((rows * cols, width));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            encode_1d(r as f64, half, |j, v| row[j] = F::lit(v));
            encode_1d(c as f64, half, |j, v| row[half + j] = F::lit(v));
        }
    }
    Ok(PositionalEmbedding { table, grid_dims })
}

fn encode_1d(pos: f64, dims: usize, mut put: impl FnMut(usize, f64)) {
    let n_sin = dims.div_ceil(2);
    let n_cos = dims - n_sin;
    for i in 0..n_sin {
        let omega = 10000f64.powf(-(i as f64) / n_sin as f64);
        put(i, (pos * omega).sin());
        if i < n_cos {
            put(n_sin + i, (pos * omega).cos());
        }
    }
}
