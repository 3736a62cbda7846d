//! Small raster helpers shared by augmentation, dataset loading and scoring.

use ndarray::{Array2, Array3};

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] as f64 * (1.0 - fx) + src[[y0, x1, ch]] as f64 * fx;
                let bot = src[[y1, x0, ch]] as f64 * (1.0 - fx) + src[[y1, x1, ch]] as f64 * fx;
                out[[oy, ox, ch]] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

/// Upsamples a coarse grid (e.g. per-patch scores) to `out_h × out_w`.
pub fn upsample_grid(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bot = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
