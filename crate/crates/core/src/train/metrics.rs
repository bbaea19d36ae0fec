//! Image quality and mask agreement metrics for images in `[-1, 1]`.

use ndarray::{Array2, Array3};

/// Reported instead of infinity for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio for a dynamic range of 2.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr: shapes differ");
    let mse = (a - b).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a plane with a 1-D kernel.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, wo), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean structural similarity over channels, 11x11 Gaussian window with
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 2. Windows that do not
/// fit are shrunk to the image size.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "ssim: shapes differ");
    let (c, h, w) = a.dim();
    let size = 11.min(h).min(w);
    let k = gaussian_window(size, 1.5);
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let y = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &k) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
        let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
        let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
        total += (num / den).mean().unwrap();
    }
    total / c as f64
}

/// Intersection over union of `mask > threshold` with a binary ground
/// truth. `None` when the ground truth is empty.
pub fn mask_iou(mask: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Option<f64> {
    assert_eq!(mask.dim(), gt.dim(), "iou: shapes differ");
    let (mut inter, mut union, mut positives) = (0usize, 0usize, 0usize);
    for (&m, &g) in mask.iter().zip(gt) {
        let (p, t) = (m > threshold, g >= 0.5);
        positives += t as usize;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    (positives > 0).then(|| inter as f64 / union as f64)
}
