//! Structural similarity with a uniform window.

use crate::error::{dim_err, Result};

use super::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Mean SSIM over every fully-contained 7×7 window of two H×W images with
/// unit dynamic range. Window statistics use population (biased) moments.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (h, w) = match a.shape() {
        &[h, w] => (h, w),
        &[1, h, w] => (h, w),
        s => return Err(dim_err!("ssim expects an HxW image, got {s:?}")),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let (x, y) = (a.data(), b.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + SSIM_WINDOW {
                for c in left..left + SSIM_WINDOW {
                    let (u, v) = (x[r * w + c], y[r * w + c]);
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cov = sxy / n - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::rand_uniform(&[16, 16], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_patches_closed_form() {
        let a = Tensor::zeros(&[16, 16]);
        let b = Tensor::ones(&[16, 16]);
        let expect = (SSIM_C1 / (1.0 + SSIM_C1)) * (SSIM_C2 / SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::rand_uniform(&[12, 9], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[12, 9], 0.0, 1.0, &mut rng);
        let d = ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap();
        assert!(d.abs() <= 1e-12);
    }

    #[test]
    fn too_small() {
        let a = Tensor::zeros(&[6, 16]);
        assert!(ssim(&a, &a).is_err());
    }
}
