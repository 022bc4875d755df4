use fractal_ir::Tensor;
use fractal_ir_harness::metrics::{mean_psnr, psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separable filtering of a single-channel image with a border-cut window.
fn filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() as isize / 2;
    let pass = |src: &[f64], vertical: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let d = i as isize - r;
                    let (yy, xx) = if vertical { (y as isize + d, x as isize) } else { (y as isize, x as isize + d) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += t * src[yy as usize * w + xx as usize];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(img, false), true)
}

fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let ones = vec![1.0; h * w];
    let mul = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let norm = filter(&ones, h, w, &taps);
    let f = |img: &[f64]| filter(img, h, w, &taps).iter().zip(&norm).map(|(x, n)| x / n).collect::<Vec<_>>();
    let (ma, mb) = (f(a), f(b));
    let (saa, sbb, sab) = (f(&mul(a, a)), f(&mul(b, b)), f(&mul(a, b)));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    (0..h * w)
        .map(|i| {
            let (va, vb, cov) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
            ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i].powi(2) + mb[i].powi(2) + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / (h * w) as f64
}

#[test]
fn ssim_matches_separable_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(8, 8), (5, 13), (16, 16)] {
        let a = Tensor::<f64>::rand_uniform(&[1, h, w, 1], 0.0, 1.0, &mut rng);
        let noise = Tensor::<f64>::randn(&[1, h, w, 1], 0.1, &mut rng);
        let b = a.zip_map(&noise, |x, n| x + n);
        let want = ssim_oracle(a.data(), b.data(), h, w);
        assert!((ssim(&a, &b) - want).abs() < 1e-9, "{h}x{w}");
    }
}

#[test]
fn psnr_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Tensor::<f64>::rand_uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut rng);
    let mse = |lo: usize, hi: usize| {
        a.data()[lo..hi].iter().zip(&b.data()[lo..hi]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (hi - lo) as f64
    };
    let whole = -10.0 * mse(0, 128).log10();
    assert!((psnr(&a, &b, 1.0) - whole).abs() < 1e-9);
    let per = (-10.0 * mse(0, 64).log10() - 10.0 * mse(64, 128).log10()) / 2.0;
    assert!((mean_psnr(&a, &b, 1.0) - per).abs() < 1e-9);
    assert!((psnr(&a, &b, 255.0) - psnr(&a, &b, 1.0) - 20.0 * 255f64.log10()).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), sigma in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::rand_uniform(&[1, 9, 7, 2], 0.0, 1.0, &mut rng);
        let n = Tensor::<f64>::randn(&[1, 9, 7, 2], sigma, &mut rng);
        let b = a.zip_map(&n, |x, e| x + e);
        let (ab, ba) = (ssim(&a, &b), ssim(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    }
}
