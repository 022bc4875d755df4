//! Seeded synthetic images and degradations.

use fractal_ir::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DatasetConfig, Task};

/// One clean `[size, size, channels]` image in `[0, 1]`: a linear gradient,
/// a few flat rectangles and a low-frequency sinusoidal texture.
pub fn synth_clean<R: Rng + ?Sized>(rng: &mut R, size: usize, channels: usize) -> Vec<f32> {
    let n = size as f64;
    let mut img = vec![0.0f64; size * size * channels];
    for c in 0..channels {
        let base = rng.random_range(0.2..0.8);
        let gx = rng.random_range(-0.3..0.3);
        let gy = rng.random_range(-0.3..0.3);
        let rects: Vec<(usize, usize, usize, usize, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                let y0 = rng.random_range(0..size);
                let x0 = rng.random_range(0..size);
                let y1 = rng.random_range(y0 + 1..=size);
                let x1 = rng.random_range(x0 + 1..=size);
                (y0, x0, y1, x1, rng.random_range(-0.4..0.4))
            })
            .collect();
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..0.06),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 / n, x as f64 / n);
                let mut v = base + gx * (fx - 0.5) + gy * (fy - 0.5);
                for &(y0, x0, y1, x1, a) in &rects {
                    if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                        v += a;
                    }
                }
                for &(ky, kx, ph, a) in &waves {
                    v += a * (std::f64::consts::TAU * (ky * fy + kx * fx) + ph).sin();
                }
                img[(y * size + x) * channels + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    img.into_iter().map(|v| v as f32).collect()
}

/// `[n, size, size, channels]` clean images.
pub fn synth_clean_batch(n: usize, size: usize, channels: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).flat_map(|_| synth_clean(&mut rng, size, channels)).collect();
    Tensor::new(&[n, size, size, channels], data).expect("batch shape")
}

/// Adds Gaussian noise of std `sigma` and clips to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(clean: &Tensor<f32>, sigma: f64, rng: &mut R) -> Tensor<f32> {
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            (v as f64 + sigma * z).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(clean.shape(), data).expect("same shape")
}

/// Mean over non-overlapping 2×2 blocks, `[B, H, W, C] → [B, H/2, W/2, C]`.
pub fn box_downsample(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; b * ho * wo * c];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x.at(&[bi, 2 * y + dy, 2 * xx + dx, ch]);
                        }
                    }
                    out[((bi * ho + y) * wo + xx) * c + ch] = acc * 0.25;
                }
            }
        }
    }
    Tensor::new(&[b, ho, wo, c], out).expect("downsample shape")
}

/// Replicates every pixel into a 2×2 block.
pub fn box_upsample(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(x.len() * 4);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let base = ((bi * h + y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&x.data()[base..base + c]);
            }
        }
    }
    Tensor::new(&[b, 2 * h, 2 * w, c], out).expect("upsample shape")
}

/// Degraded inputs and clean targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairs {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

pub fn degrade<R: Rng + ?Sized>(task: Task, clean: &Tensor<f32>, sigma: f64, rng: &mut R) -> Tensor<f32> {
    match task {
        Task::Denoise => add_noise(clean, sigma, rng),
        Task::Sr2x => box_downsample(clean),
    }
}

/// `n` pairs drawn from `seed`; clean images and noise share one stream.
pub fn synth_dataset(task: Task, spec: &DatasetConfig, n: usize, sigma: f64, seed: u64) -> Pairs {
    let targets = synth_clean_batch(n, spec.image_size, spec.channels, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let inputs = degrade(task, &targets, sigma, &mut rng);
    Pairs { inputs, targets }
}

/// Validation pairs of a run.
pub fn validation_set(task: Task, spec: &DatasetConfig, sigma: f64) -> Pairs {
    synth_dataset(task, spec, spec.n_val, sigma, spec.seed.wrapping_add(1))
}

/// Copies images `indices` of `src` into one batch.
pub fn gather_images(src: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let s = src.shape();
    let per = s[1..].iter().product::<usize>();
    let data = indices
        .iter()
        .flat_map(|&i| src.data()[i * per..(i + 1) * per].iter().copied())
        .collect();
    let mut shape = s.to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data).expect("gather shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn spec() -> DatasetConfig {
        DatasetConfig {
            n_train: 8,
            n_val: 64,
            image_size: 16,
            channels: 1,
            seed: 5,
        }
    }

    #[test]
    fn clean_images_are_in_range_and_deterministic() {
        let a = synth_clean_batch(8, 16, 3, 1);
        let b = synth_clean_batch(8, 16, 3, 1);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, synth_clean_batch(8, 16, 3, 2));
        let mean = a.data().iter().sum::<f32>() / a.len() as f32;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.len() as f32;
        assert!(var > 1e-3);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let p = synth_dataset(Task::Denoise, &spec(), 4, 0.0, 3);
        assert_eq!(p.inputs, p.targets);
    }

    #[test]
    fn noisy_psnr_near_theory() {
        let sigma = 25.0 / 255.0;
        let p = synth_dataset(Task::Denoise, &spec(), 64, sigma, 3);
        let got = psnr(&p.inputs, &p.targets, 1.0);
        let theory = 10.0 * (1.0 / (sigma * sigma)).log10();
        assert!((theory - 20.17).abs() < 0.01);
        assert!((got - theory).abs() < 0.5, "{got} vs {theory}");
    }

    #[test]
    fn box_resampling() {
        let x = Tensor::new(&[1, 2, 2, 1], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(box_downsample(&x).data(), &[1.5]);
        let up = box_upsample(&x);
        assert_eq!(up.shape(), &[1, 4, 4, 1]);
        assert_eq!(box_downsample(&up), x);
    }
}
