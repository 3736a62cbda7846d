//! Test-time anomaly scoring.
//!
//! An image is reconstructed under several random mask partitions. For every
//! masked patch, the reconstruction is pasted into the original image and the
//! patch score is `1 − MS-SSIM` between original and composite over a
//! context window centered on the patch. Scores are averaged over the seeds
//! in which the patch was masked; the image score is their mean.

mod msssim;

pub use msssim::{ms_ssim, ms_ssim_view, MsSsimParams};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::upsample_grid;
use crate::patchgrid::{patchify, sample_mask, unpatchify, ImageTensor, MaskPartition, PatchGrid};
use crate::pipeline::{Checkpoint, MaskedAutoencoder};

/// What is averaged across mask seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average per-patch dissimilarities.
    #[default]
    Scores,
    /// Average the predicted patches first, then score once.
    Reconstructions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub n_seeds: usize,
    pub mask_ratio: f64,
    /// Seeds are `base_seed, base_seed + 1, ...`.
    pub base_seed: u64,
    /// Context window side in pixels; `None` means three patches.
    pub context_side: Option<usize>,
    pub pooling: Pooling,
    pub ms_ssim: MsSsimParams,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            mask_ratio: 0.75,
            base_seed: 0,
            context_side: None,
            pooling: Pooling::Scores,
            ms_ssim: MsSsimParams::default(),
        }
    }
}

impl ScoringConfig {
    /// Settings for 64×64 images with 8-pixel patches.
    pub fn tiny() -> Self {
        Self {
            context_side: Some(24),
            ms_ssim: MsSsimParams::with_scales(2, 7),
            ..Self::default()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.base_seed.wrapping_add(k)).collect()
    }

    pub fn context_for(&self, patch_side: usize) -> usize {
        self.context_side.unwrap_or(3 * patch_side)
    }

    pub fn validate(&self, image_size: usize, patch_side: usize) -> Result<()> {
        if self.n_seeds < 1 {
            return Err(Error::InvalidArgument("at least one mask seed is required".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidRatio(self.mask_ratio));
        }
        self.ms_ssim.validate()?;
        let ctx = self.context_for(patch_side);
        if ctx > image_size {
            return Err(Error::Config(format!(
                "context window {ctx} exceeds image size {image_size}"
            )));
        }
        if ctx < self.ms_ssim.min_side() {
            return Err(Error::Config(format!(
                "context window {ctx} is smaller than the {} pixels MS-SSIM needs",
                self.ms_ssim.min_side()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreWarning {
    /// The checkpoint has not completed any training epoch.
    UntrainedModel,
    /// Patches masked under none of the seeds; their scores are the mean of
    /// their scored neighbors.
    NeverMasked(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// Dissimilarity per patch, shaped like the patch grid.
    pub patch_scores: Array2<f64>,
    /// Bilinear upsampling of `patch_scores` to image resolution.
    pub pixel_map: Array2<f64>,
    pub image_score: f64,
    pub seeds_used: Vec<u64>,
    pub warnings: Vec<ScoreWarning>,
}

/// Scores `image` with a trained checkpoint.
pub fn score_image(image: &ImageTensor, model: &Checkpoint, cfg: &ScoringConfig) -> Result<AnomalyResult> {
    let mut result = score_with_model(image, &model.model, cfg)?;
    if model.epoch == 0 {
        log::warn!("scoring with a checkpoint that has not been trained");
        result.warnings.insert(0, ScoreWarning::UntrainedModel);
    }
    Ok(result)
}

pub fn score_with_model(
    image: &ImageTensor,
    model: &MaskedAutoencoder<f32>,
    cfg: &ScoringConfig,
) -> Result<AnomalyResult> {
    let mcfg = model.config();
    model.patchify(image)?;
    score_with_predictor(image, mcfg.patch_side, cfg, &mut |grid, partition| model.predict(grid, partition))
}

/// Scores `image` with any patch predictor. `predict` receives the full patch
/// grid and a partition and returns predictions for every patch; only the
/// masked ones are used.
pub fn score_with_predictor(
    image: &ImageTensor,
    patch_side: usize,
    cfg: &ScoringConfig,
    predict: &mut dyn FnMut(&PatchGrid, &MaskPartition) -> Result<PatchGrid>,
) -> Result<AnomalyResult> {
    if image.height() != image.width() {
        return Err(Error::Shape(format!("image {}×{} is not square", image.height(), image.width())));
    }
    cfg.validate(image.height(), patch_side)?;
    let grid = patchify(image, patch_side)?;
    let p = grid.num_patches();
    let seeds = cfg.seeds();
    let ctx = cfg.context_for(patch_side);

    let mut sums = vec![0.0f64; p];
    let mut counts = vec![0usize; p];
    match cfg.pooling {
        Pooling::Scores => {
            for &seed in &seeds {
                let partition = sample_mask(p, cfg.mask_ratio, seed)?;
                let pred = predict(&grid, &partition)?;
                let composite = paste(&grid, &pred, &partition.masked_idx)?;
                for &i in &partition.masked_idx {
                    sums[i] += patch_dissimilarity(image, &composite, &grid, i, ctx, &cfg.ms_ssim)?;
                    counts[i] += 1;
                }
            }
        }
        Pooling::Reconstructions => {
            let mut acc = Array2::<f64>::zeros(grid.patches.dim());
            for &seed in &seeds {
                let partition = sample_mask(p, cfg.mask_ratio, seed)?;
                let pred = predict(&grid, &partition)?;
                for &i in &partition.masked_idx {
                    let mut row = acc.row_mut(i);
                    row += &pred.patches.row(i).mapv(f64::from);
                    counts[i] += 1;
                }
            }
            let mut mean = grid.clone();
            let covered: Vec<usize> = (0..p).filter(|&i| counts[i] > 0).collect();
            for &i in &covered {
                let n = counts[i] as f64;
                mean.patches
                    .row_mut(i)
                    .assign(&acc.row(i).mapv(|v| (v / n) as f32));
            }
            let composite = paste(&grid, &mean, &covered)?;
            for &i in &covered {
                sums[i] = patch_dissimilarity(image, &composite, &grid, i, ctx, &cfg.ms_ssim)?;
                counts[i] = 1;
            }
        }
    }

    let (gh, gw) = grid.grid_dims;
    let mut scores: Vec<Option<f64>> = (0..p)
        .map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64))
        .collect();
    let missing: Vec<usize> = (0..p).filter(|&i| scores[i].is_none()).collect();
    let mut warnings = Vec::new();
    if !missing.is_empty() {
        log::warn!("{} patches were never masked; using neighbor means", missing.len());
        fill_from_neighbors(&mut scores, (gh, gw));
        warnings.push(ScoreWarning::NeverMasked(missing));
    }
    let patch_scores = Array2::from_shape_fn((gh, gw), |(r, c)| scores[r * gw + c].unwrap_or(0.0));
    let image_score = patch_scores.iter().sum::<f64>() / p as f64;
    let pixel_map = upsample_grid(&patch_scores, image.height(), image.width()).mapv(|v| v.clamp(0.0, 1.0));
    Ok(AnomalyResult {
        patch_scores,
        pixel_map,
        image_score,
        seeds_used: seeds,
        warnings,
    })
}

/// Pixels at or above `threshold`.
pub fn localization_mask(result: &AnomalyResult, threshold: f64) -> Array2<bool> {
    result.pixel_map.mapv(|v| v >= threshold)
}

/// Original patches everywhere except `replaced`, which come from `pred`;
/// clamped to `[0, 1]`.
fn paste(original: &PatchGrid, pred: &PatchGrid, replaced: &[usize]) -> Result<ImageTensor> {
    let mut grid = original.clone();
    for &i in replaced {
        grid.patches.row_mut(i).assign(&pred.patches.row(i));
    }
    Ok(unpatchify(&grid)?.clamped())
}

/// Top-left corner of a `ctx`-pixel window centered on patch `i`, shifted to
/// stay inside the image.
fn context_origin(grid: &PatchGrid, i: usize, ctx: usize, h: usize, w: usize) -> (usize, usize) {
    let side = grid.patch_side;
    let (r, c) = (i / grid.grid_dims.1, i % grid.grid_dims.1);
    let center = |k: usize| (k * side) as isize + side as isize / 2;
    let origin = |k: usize, extent: usize| -> usize {
        (center(k) - ctx as isize / 2).clamp(0, (extent - ctx) as isize) as usize
    };
    (origin(r, h), origin(c, w))
}

fn patch_dissimilarity(
    original: &ImageTensor,
    composite: &ImageTensor,
    grid: &PatchGrid,
    i: usize,
    ctx: usize,
    params: &MsSsimParams,
) -> Result<f64> {
    let (h, w) = (original.height(), original.width());
    let (y, x) = context_origin(grid, i, ctx, h, w);
    let window = s![y..y + ctx, x..x + ctx, ..];
    let sim = ms_ssim_view(original.pixels().slice(window), composite.pixels().slice(window), params)?;
    Ok(1.0 - sim)
}

fn fill_from_neighbors(scores: &mut [Option<f64>], (gh, gw): (usize, usize)) {
    let known: Vec<f64> = scores.iter().flatten().copied().collect();
    let global = if known.is_empty() {
        0.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let snapshot = scores.to_vec();
    for (i, slot) in scores.iter_mut().enumerate() {
        if slot.is_some() {
            continue;
        }
        let (r, c) = ((i / gw) as isize, (i % gw) as isize);
        let mut acc = 0.0;
        let mut n = 0;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= gh as isize || cc >= gw as isize {
                    continue;
                }
                if let Some(v) = snapshot[rr as usize * gw + cc as usize] {
                    acc += v;
                    n += 1;
                }
            }
        }
        *slot = Some(if n > 0 { acc / n as f64 } else { global });
    }
}

/// Overlays the masked patches of `image` with mid-gray, for visual display.
pub fn masked_view(image: &ImageTensor, patch_side: usize, masked_idx: &[usize]) -> Result<ImageTensor> {
    let mut grid = patchify(image, patch_side)?;
    for &i in masked_idx {
        grid.patches.row_mut(i).fill(0.5);
    }
    unpatchify(&grid)
}

/// Stacks images horizontally with a one-pixel white gutter.
pub fn hstack(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
    let (h, c) = (first.height(), first.channels());
    if images.iter().any(|im| im.height() != h || im.channels() != c) {
        return Err(Error::Shape("stacked images must share height and channels".into()));
    }
    let total = images.iter().map(|im| im.width()).sum::<usize>() + images.len() - 1;
    let mut out = Array3::<f32>::ones((h, total, c));
    let mut x = 0;
    for im in images {
        out.slice_mut(s![.., x..x + im.width(), ..]).assign(im.pixels());
        x += im.width() + 1;
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> MaskedAutoencoder<f32> {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.depth = 2;
        cfg.encoder.width = 32;
        cfg.decoder.width = 16;
        cfg.encoder.memory_slots = 4;
        MaskedAutoencoder::new(cfg).unwrap()
    }

    fn texture(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(64, 64, 1, |_| rng.random::<f32>()).unwrap()
    }

    fn quick() -> ScoringConfig {
        ScoringConfig {
            n_seeds: 3,
            ..ScoringConfig::tiny()
        }
    }

    #[test]
    fn image_score_is_patch_mean_and_maps_are_bounded() {
        let model = small_model();
        let r = score_with_model(&texture(1), &model, &quick()).unwrap();
        assert_eq!(r.patch_scores.dim(), (8, 8));
        assert_eq!(r.pixel_map.dim(), (64, 64));
        let mean = r.patch_scores.iter().sum::<f64>() / 64.0;
        assert_eq!(r.image_score, mean);
        assert!(r.patch_scores.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.pixel_map.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.seeds_used, vec![0, 1, 2]);
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = small_model();
        let img = texture(2);
        let a = score_with_model(&img, &model, &quick()).unwrap();
        let b = score_with_model(&img, &model, &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_seed_leaves_gaps_that_are_filled_and_flagged() {
        let model = small_model();
        let cfg = ScoringConfig {
            n_seeds: 1,
            ..ScoringConfig::tiny()
        };
        let r = score_with_model(&texture(3), &model, &cfg).unwrap();
        let partition = sample_mask(64, 0.75, 0).unwrap();
        match &r.warnings[..] {
            [ScoreWarning::NeverMasked(missing)] => assert_eq!(missing, &partition.visible_idx),
            other => panic!("unexpected warnings {other:?}"),
        }
        assert!(r.patch_scores.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ten_seeds_cover_every_patch_of_a_tiny_grid() {
        // Miss probability per patch is 0.25^10; seeds 0..10 cover all 64.
        let mut covered = [false; 64];
        for seed in 0..10 {
            for i in sample_mask(64, 0.75, seed).unwrap().masked_idx {
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        let r = score_with_model(&texture(4), &small_model(), &ScoringConfig::tiny()).unwrap();
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn reconstruction_pooling_runs() {
        let cfg = ScoringConfig {
            pooling: Pooling::Reconstructions,
            ..quick()
        };
        let r = score_with_model(&texture(5), &small_model(), &cfg).unwrap();
        assert!(r.image_score.is_finite());
    }

    #[test]
    fn zero_seeds_is_an_error() {
        let cfg = ScoringConfig {
            n_seeds: 0,
            ..ScoringConfig::tiny()
        };
        assert!(matches!(
            score_with_model(&texture(1), &small_model(), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn localization_mask_thresholds() {
        let r = score_with_model(&texture(6), &small_model(), &quick()).unwrap();
        assert!(localization_mask(&r, 0.0).iter().all(|&b| b));
        let max = r.pixel_map.iter().cloned().fold(0.0, f64::max);
        assert!(localization_mask(&r, max + 1e-9).iter().all(|&b| !b));
    }

    #[test]
    fn context_windows_stay_inside_the_image() {
        let grid = patchify(&texture(0), 8).unwrap();
        assert_eq!(context_origin(&grid, 0, 32, 64, 64), (0, 0));
        assert_eq!(context_origin(&grid, 63, 32, 64, 64), (32, 32));
        // Patch (3, 4) centered at (28, 36).
        assert_eq!(context_origin(&grid, 3 * 8 + 4, 32, 64, 64), (12, 20));
    }

    #[test]
    fn neighbor_fill_uses_adjacent_scores() {
        let mut s = vec![Some(1.0), None, Some(3.0), Some(5.0)];
        fill_from_neighbors(&mut s, (2, 2));
        assert_eq!(s[1], Some(3.0));
    }
}
