use rand::Rng;

use crate::imaging::resize_bilinear;
use crate::patchgrid::ImageTensor;
use crate::pipeline::config::AugmentConfig;

/// Crops a random region (area fraction and aspect ratio drawn from `cfg`)
/// and resizes it back to the input size.
pub fn random_resized_crop<R: Rng>(image: &ImageTensor, cfg: &AugmentConfig, rng: &mut R) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (cfg.ratio[0].ln(), cfg.ratio[1].ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale[0]..=cfg.scale[1]);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or((0, 0, h, w));
    let crop = image
        .pixels()
        .slice(ndarray::s![top..top + ch, left..left + cw, ..])
        .to_owned();
    ImageTensor::new(resize_bilinear(&crop, h, w)).expect("channel count preserved")
}
