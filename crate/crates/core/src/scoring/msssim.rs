//! Multi-scale structural similarity.
//!
//! For each scale `j = 1..M` the contrast-structure term
//! `cs_j = mean((2σ_ab + c2) / (σ_a² + σ_b² + c2))` is evaluated under a
//! Gaussian window (valid positions only), then both images are 2×2
//! average-pooled. The luminance term `l_M = mean((2μ_aμ_b + c1) / (μ_a² + μ_b² + c1))`
//! is taken at the coarsest scale only:
//!
//! ```text
//! MS-SSIM = Π_{j<M} cs_j^{w_j} · (l_M · cs_M)^{w_M}
//! ```
//!
//! Negative terms are clamped to zero before exponentiation, and channels are
//! averaged.

use ndarray::{s, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchgrid::ImageTensor;

const DEFAULT_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Weights left out of a config file default to the standard ones for
/// `scales`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawParams")]
pub struct MsSsimParams {
    pub scales: usize,
    /// One positive weight per scale, summing to 1.
    pub weights: Vec<f64>,
    /// Side of the Gaussian window; odd.
    pub window_side: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawParams {
    scales: usize,
    weights: Option<Vec<f64>>,
    window_side: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
}

impl Default for RawParams {
    fn default() -> Self {
        let p = MsSsimParams::default();
        Self {
            scales: p.scales,
            weights: None,
            window_side: p.window_side,
            sigma: p.sigma,
            c1: p.c1,
            c2: p.c2,
        }
    }
}

impl From<RawParams> for MsSsimParams {
    fn from(r: RawParams) -> Self {
        Self {
            weights: r.weights.unwrap_or_else(|| default_weights(r.scales)),
            scales: r.scales,
            window_side: r.window_side,
            sigma: r.sigma,
            c1: r.c1,
            c2: r.c2,
        }
    }
}

impl Default for MsSsimParams {
    fn default() -> Self {
        Self::with_scales(3, 11)
    }
}

impl MsSsimParams {
    /// Standard constants (`c1 = (0.01)²`, `c2 = (0.03)²` for unit dynamic
    /// range, σ = 1.5) and the first `scales` standard weights renormalized.
    pub fn with_scales(scales: usize, window_side: usize) -> Self {
        Self {
            scales,
            weights: default_weights(scales),
            window_side,
            sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }

    /// Smallest image side the coarsest scale can still cover with a window.
    pub fn min_side(&self) -> usize {
        self.window_side << self.scales.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("MS-SSIM needs at least one scale".into()));
        }
        if self.weights.len() != self.scales {
            return Err(Error::Config(format!(
                "{} MS-SSIM weights for {} scales",
                self.weights.len(),
                self.scales
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("MS-SSIM weights must be positive".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("MS-SSIM weights sum to {sum}, not 1")));
        }
        if self.window_side == 0 || self.window_side % 2 == 0 {
            return Err(Error::Config(format!("window side {} must be odd", self.window_side)));
        }
        if !(self.sigma > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Config("sigma, c1 and c2 must be positive".into()));
        }
        Ok(())
    }
}

fn default_weights(scales: usize) -> Vec<f64> {
    let base: Vec<f64> = if scales <= DEFAULT_WEIGHTS.len() {
        DEFAULT_WEIGHTS[..scales].to_vec()
    } else {
        vec![1.0; scales]
    };
    let sum: f64 = base.iter().sum();
    base.into_iter().map(|w| w / sum).collect()
}

pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor, params: &MsSsimParams) -> Result<f64> {
    ms_ssim_view(a.pixels().view(), b.pixels().view(), params)
}

/// MS-SSIM between two `H × W × C` views, e.g. crops of larger images.
pub fn ms_ssim_view(a: ArrayView3<f32>, b: ArrayView3<f32>, params: &MsSsimParams) -> Result<f64> {
    params.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("MS-SSIM inputs {:?} and {:?}", a.dim(), b.dim())));
    }
    let (h, w, c) = a.dim();
    let min = params.min_side();
    if h < min || w < min {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} image is smaller than the {}-pixel window at scale {}",
            params.window_side, params.scales
        )));
    }
    let kernel = gaussian_kernel(params.window_side, params.sigma);
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.slice(s![.., .., ch]).mapv(f64::from);
        let y = b.slice(s![.., .., ch]).mapv(f64::from);
        total += single_channel(x, y, &kernel, params);
    }
    Ok((total / c as f64).clamp(0.0, 1.0))
}

fn single_channel(mut x: Array2<f64>, mut y: Array2<f64>, kernel: &[f64], p: &MsSsimParams) -> f64 {
    let mut value = 1.0;
    for j in 0..p.scales {
        let (l, cs) = ssim_terms(x.view(), y.view(), kernel, p.c1, p.c2);
        let term = if j + 1 == p.scales { l * cs } else { cs };
        value *= term.max(0.0).powf(p.weights[j]);
        if j + 1 < p.scales {
            x = avg_pool2(&x);
            y = avg_pool2(&y);
        }
    }
    value
}

/// Mean luminance and contrast-structure terms over valid window positions.
fn ssim_terms(x: ArrayView2<f64>, y: ArrayView2<f64>, kernel: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mu_x = filter(x, kernel);
    let mu_y = filter(y, kernel);
    let xx = filter((&x * &x).view(), kernel);
    let yy = filter((&y * &y).view(), kernel);
    let xy = filter((&x * &y).view(), kernel);
    let n = mu_x.len() as f64;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x.iter().zip(&mu_y).zip(&xx).zip(&yy).zip(&xy) {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        l_sum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs_sum += (2.0 * cov + c2) / (var_x + var_y + c2);
    }
    (l_sum / n, cs_sum / n)
}

fn gaussian_kernel(side: usize, sigma: f64) -> Vec<f64> {
    let r = (side / 2) as f64;
    let k: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering.
fn filter(x: ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(i, j)| {
        (0..n).map(|t| x[[i, j + t]] * k[t]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| {
        (0..n).map(|t| rows[[i + t, j]] * k[t]).sum::<f64>()
    })
}

fn avg_pool2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (x[[2 * i, 2 * j]] + x[[2 * i + 1, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j + 1]])
    })
}
