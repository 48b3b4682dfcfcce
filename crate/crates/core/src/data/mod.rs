//! Procedural tampered-image synthesis, augmentation and dataset I/O.
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`; masks are `[1, H, W]` with
//! values in `{0, 1}`.

pub mod augment;
pub mod dataset;
pub mod imageio;
pub mod synth;

pub use augment::{augment, AugmentSpec};
pub use dataset::{Dataset, ManifestRecord};
pub use imageio::jpeg_roundtrip;
pub use synth::{synthesize_one, Sample, SynthSpec, TamperType};

use crate::graph::resample::linear_taps;
use crate::tensor::Tensor;

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Mirrors along the width axis.
pub fn flip_h(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..c * h {
        for j in 0..w {
            out[p * w + j] = src[p * w + w - 1 - j];
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Half-pixel bilinear resize of a `[C, H, W]` tensor.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = chw(t);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &t.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = chw(t);
    let pick = |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let y = pick(oy, h, out_h);
            for ox in 0..out_w {
                let x = pick(ox, w, out_w);
                out[(ch * out_h + oy) * out_w + ox] = t.data()[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return t.clone();
    }
    let (c, h, w) = chw(t);
    let k = gaussian_taps(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; c * h * w];
    let src = t.data();
    for p in 0..c * h {
        for j in 0..w {
            let mut acc = 0.0;
            for (u, &kv) in k.iter().enumerate() {
                let x = (j as isize + u as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * src[p * w + x];
            }
            tmp[p * w + j] = acc;
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (u, &kv) in k.iter().enumerate() {
                    let y = (i as isize + u as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ch * h + y) * w + j];
                }
                out[(ch * h + i) * w + j] = acc;
            }
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Rounds to the 8-bit grid, as storing to PNG would.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Stacks `[C, H, W]` items into `[N, C, H, W]`.
pub fn batch(items: &[&Tensor]) -> Tensor {
    let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned).expect("uniform item shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        assert!(flip_h(&flip_h(&t)).bit_eq(&t));
        assert!(!flip_h(&t).bit_eq(&t));
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::uniform(&[1, 9, 9], 0.0, 1.0, &mut rng).map(|v| (v > 0.5) as u8 as f64);
        let r = resize_nearest(&m, 13, 6);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn blur_preserves_constants_and_mean_mass() {
        let t = Tensor::full(&[1, 6, 6], 0.3);
        assert!(gaussian_blur(&t, 1.3).max_abs_diff(&t) < 1e-15);
        let taps = gaussian_taps(0.8);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
