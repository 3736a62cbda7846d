//! Seeded synthetic texture dataset with injected anomalies.
//!
//! Normal images are a mid-gray background plus Gaussian-smoothed noise and
//! an oriented sinusoidal grating with random orientation, period and phase.
//! Anomalous images use the same texture family with one sharp-edged region
//! injected; the returned mask is exactly the set of modified pixels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::dataset::{Label, LabeledTestSet, ManifestRow, NormalImageSet, SplitManifest, TestEntry};
use crate::evalharness::render::{save_image_png, save_mask_png};
use crate::patchgrid::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Rotated ellipse with a uniform brightness offset.
    Blob,
    /// Axis-aligned square with a uniform brightness offset.
    Square,
    /// Axis-aligned square whose texture is replaced by flat intensity.
    IntensityPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    pub background: f64,
    /// Standard deviation of the smoothed noise after scaling.
    pub noise_amplitude: f64,
    /// Gaussian smoothing radius of the noise, in pixels.
    pub noise_sigma: f64,
    pub grating_amplitude: f64,
    /// Grating period range in pixels.
    pub grating_period: [f64; 2],
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            background: 0.5,
            noise_amplitude: 0.06,
            noise_sigma: 2.0,
            grating_amplitude: 0.15,
            grating_period: [10.0, 16.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub texture: TextureParams,
    pub anomaly: AnomalyKind,
    /// Anomaly extent range (diameter or side) in pixels.
    pub anomaly_size: [usize; 2],
    /// Magnitude of the brightness change inside the anomaly.
    pub anomaly_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            n_train: 200,
            n_test_normal: 50,
            n_test_anomalous: 50,
            texture: TextureParams::default(),
            anomaly: AnomalyKind::Blob,
            anomaly_size: [12, 20],
            anomaly_contrast: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("{} channels, expected 1 or 3", self.channels)));
        }
        let [lo, hi] = self.anomaly_size;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("anomaly size range [{lo}, {hi}] is empty")));
        }
        if hi > self.image_size {
            return Err(Error::InvalidArgument(format!(
                "anomaly size {hi} exceeds image size {}",
                self.image_size
            )));
        }
        let [p0, p1] = self.texture.grating_period;
        if !(p0 > 0.0 && p0 <= p1) || !(self.texture.noise_sigma > 0.0) {
            return Err(Error::Config("texture periods and smoothing must be positive".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(NormalImageSet, LabeledTestSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = NormalImageSet::default();
    for i in 0..spec.n_train {
        train.push(format!("train_{i:04}"), to_image(&texture(spec, &mut rng), spec.channels));
    }
    let mut test = LabeledTestSet::default();
    for i in 0..spec.n_test_normal {
        test.push(TestEntry {
            id: format!("test_normal_{i:04}"),
            image: to_image(&texture(spec, &mut rng), spec.channels),
            label: Label::Normal,
            mask: None,
        })?;
    }
    for i in 0..spec.n_test_anomalous {
        let mut img = texture(spec, &mut rng);
        let mask = inject(spec, &mut img, &mut rng);
        test.push(TestEntry {
            id: format!("test_anomalous_{i:04}"),
            image: to_image(&img, spec.channels),
            label: Label::Anomalous,
            mask: Some(mask),
        })?;
    }
    Ok((train, test))
}

fn to_image(gray: &Array2<f64>, channels: usize) -> ImageTensor {
    let (h, w) = gray.dim();
    ImageTensor::new(Array3::from_shape_fn((h, w, channels), |(y, x, _)| {
        gray[[y, x]].clamp(0.0, 1.0) as f32
    }))
    .expect("1 or 3 channels")
}

fn texture(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = spec.image_size;
    let t = &spec.texture;
    let white = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
    let smooth = blur_periodic(&white, t.noise_sigma);
    let mean = smooth.mean().unwrap_or(0.0);
    let std = smooth.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt().max(1e-12);
    let theta = rng.random::<f64>() * PI;
    let period = rng.random_range(t.grating_period[0]..=t.grating_period[1]);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let (ct, st) = (theta.cos(), theta.sin());
    Array2::from_shape_fn((n, n), |(y, x)| {
        let u = x as f64 * ct + y as f64 * st;
        t.background
            + t.noise_amplitude * (smooth[[y, x]] - mean) / std
            + t.grating_amplitude * (2.0 * PI * u / period + phase).sin()
    })
}

/// Separable Gaussian blur with wrap-around borders.
fn blur_periodic(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    let (h, w) = x.dim();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).map(|d| x[[i, wrap(j as isize + d, w)]] * k[(d + r) as usize]).sum::<f64>() / sum
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).map(|d| rows[[wrap(i as isize + d, h), j]] * k[(d + r) as usize]).sum::<f64>() / sum
    })
}

/// Modifies `img` in place and returns the exact anomaly mask.
fn inject(spec: &SyntheticSpec, img: &mut Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let n = spec.image_size;
    let size = rng.random_range(spec.anomaly_size[0]..=spec.anomaly_size[1]);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let offset = sign * spec.anomaly_contrast;
    let y0 = rng.random_range(0..=n - size);
    let x0 = rng.random_range(0..=n - size);
    let mask = match spec.anomaly {
        AnomalyKind::Blob => {
            let ry = size as f64 / 2.0;
            let rx = ry * rng.random_range(0.6..=1.0);
            let angle = rng.random::<f64>() * PI;
            let (cy, cx) = (y0 as f64 + ry, x0 as f64 + ry);
            let (ca, sa) = (angle.cos(), angle.sin());
            Array2::from_shape_fn((n, n), |(y, x)| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = dx * ca + dy * sa;
                let v = -dx * sa + dy * ca;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
        }
        AnomalyKind::Square | AnomalyKind::IntensityPatch => {
            Array2::from_shape_fn((n, n), |(y, x)| (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x))
        }
    };
    let flat = (spec.texture.background + offset).clamp(0.0, 1.0);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            img[[y, x]] = match spec.anomaly {
                AnomalyKind::IntensityPatch => flat,
                _ => img[[y, x]] + offset,
            };
        }
    }
    mask
}

/// Writes the dataset as PNGs in the directory layout plus manifests, and
/// returns the manifest.
pub fn materialize(train: &NormalImageSet, test: &LabeledTestSet, root: &Path) -> Result<SplitManifest> {
    for d in ["train/normal", "test/normal", "test/anomalous", "test/masks"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    let mut manifest = SplitManifest::default();
    for (id, img) in train.ids.iter().zip(&train.images) {
        let rel = PathBuf::from(format!("train/normal/{id}.png"));
        save_image_png(&root.join(&rel), img)?;
        manifest.train.push(ManifestRow {
            path: rel,
            label: Label::Normal.as_str().into(),
            mask_path: None,
        });
    }
    for e in &test.entries {
        let rel = PathBuf::from(format!("test/{}/{}.png", e.label, e.id));
        save_image_png(&root.join(&rel), &e.image)?;
        let mask_path = match &e.mask {
            Some(m) => {
                let mp = PathBuf::from(format!("test/masks/{}.png", e.id));
                save_mask_png(&root.join(&mp), m)?;
                Some(mp)
            }
            None => None,
        };
        manifest.test.push(ManifestRow {
            path: rel,
            label: e.label.as_str().into(),
            mask_path,
        });
    }
    manifest.write(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::dataset::load_dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 6,
            n_test_normal: 3,
            n_test_anomalous: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sizes_and_masks() {
        let spec = SyntheticSpec {
            n_train: 100,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.count(Label::Normal), 50);
        assert_eq!(test.count(Label::Anomalous), 50);
        for e in &test.entries {
            match e.label {
                Label::Anomalous => assert!(e.mask.as_ref().unwrap().iter().any(|&b| b)),
                Label::Normal => assert!(e.mask.is_none()),
            }
        }
        assert!(train.images[0].pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn masks_cover_exactly_the_changed_pixels() {
        for kind in [AnomalyKind::Blob, AnomalyKind::Square, AnomalyKind::IntensityPatch] {
            let spec = SyntheticSpec {
                anomaly: kind,
                n_train: 0,
                n_test_normal: 0,
                n_test_anomalous: 5,
                seed: 3,
                ..SyntheticSpec::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..5 {
                let base = texture(&spec, &mut rng);
                let mut img = base.clone();
                let mask = inject(&spec, &mut img, &mut rng);
                for ((y, x), &m) in mask.indexed_iter() {
                    assert_eq!(m, img[[y, x]] != base[[y, x]], "{kind:?} at ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn anomaly_free_variant() {
        let spec = SyntheticSpec {
            n_test_anomalous: 0,
            ..small()
        };
        let (_, test) = generate_synthetic(&spec).unwrap();
        assert_eq!(test.count(Label::Anomalous), 0);
    }

    #[test]
    fn oversized_anomaly_is_rejected() {
        let spec = SyntheticSpec {
            anomaly_size: [10, 65],
            ..small()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn materialized_dataset_loads_back() {
        let (train, test) = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        materialize(&train, &test, dir.path()).unwrap();
        let (train2, test2) = load_dataset(dir.path(), 64, 1).unwrap();
        assert_eq!(train2.len(), train.len());
        assert_eq!(test2.len(), test.len());
        for (a, b) in test.entries.iter().zip(&test2.entries) {
            assert_eq!(a.mask, b.mask);
            let diff = a
                .image
                .pixels()
                .iter()
                .zip(b.image.pixels())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(diff <= 0.5 / 255.0 + 1e-6);
        }
    }
}
