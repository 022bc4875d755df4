//! PSNR and SSIM on `[B, H, W, C]` images.

use fractal_ir::{Scalar, Tensor};

/// Returned for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
}

/// PSNR over all elements of two equally shaped tensors.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr operands differ in shape");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    psnr_from_mse(mse, max_val)
}

/// Mean of per-image PSNR over the batch axis.
pub fn mean_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr operands differ in shape");
    let n = a.shape()[0];
    let per = a.len() / n;
    (0..n)
        .map(|i| {
            let mse = a.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&b.data()[i * per..(i + 1) * per])
                .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                / per as f64;
            psnr_from_mse(mse, max_val)
        })
        .sum::<f64>()
        / n as f64
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    t
}

/// Gaussian-window SSIM averaged over pixels, channels and images, with data
/// range 1. Near borders the window is cut to the image and renormalised.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim operands differ in shape");
    let s = a.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let taps = gaussian_taps();
    let r = (SSIM_WINDOW / 2) as isize;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for img in 0..n {
        for ch in 0..c {
            let at = |d: &[T], y: usize, x: usize| d[((img * h + y) * w + x) * c + ch].as_f64();
            let mut map = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wt = taps[(dy + r) as usize] * taps[(dx + r) as usize];
                            let (u, v) = (at(ad, yy as usize, xx as usize), at(bd, yy as usize, xx as usize));
                            sw += wt;
                            mx += wt * u;
                            my += wt * v;
                            sxx += wt * u * u;
                            syy += wt * v * v;
                            sxy += wt * u * v;
                        }
                    }
                    let (mx, my) = (mx / sw, my / sw);
                    let vx = sxx / sw - mx * mx;
                    let vy = syy / sw - my * my;
                    let cov = sxy / sw - mx * my;
                    map += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
            total += map / (h * w) as f64;
        }
    }
    total / (n * c) as f64
}
