//! Reflect padding so arbitrary image sizes fit the window geometry.

use fractal_ir::{Scalar, Tensor};

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads `[B, H, W, C]` at the bottom and right up to multiples of `multiple`,
/// mirroring about the last row/column without repeating it.
pub fn pad_reflect_to_geometry<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let m = multiple.max(1);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(b * hp * wp * c);
    for bi in 0..b {
        for y in 0..hp {
            let sy = reflect(y, h);
            for xx in 0..wp {
                let base = ((bi * h + sy) * w + reflect(xx, w)) * c;
                out.extend_from_slice(&x.data()[base..base + c]);
            }
        }
    }
    Tensor::new(&[b, hp, wp, c], out).expect("padded shape")
}

/// Keeps the top-left `h × w` region.
pub fn crop<T: Scalar>(y: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = y.shape();
    let (b, hy, wy, c) = (s[0], s[1], s[2], s[3]);
    assert!(h <= hy && w <= wy, "crop {h}x{w} larger than {hy}x{wy}");
    if (h, w) == (hy, wy) {
        return y.clone();
    }
    let mut out = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for row in 0..h {
            let base = (bi * hy + row) * wy * c;
            out.extend_from_slice(&y.data()[base..base + w * c]);
        }
    }
    Tensor::new(&[b, h, w, c], out).expect("crop shape")
}
