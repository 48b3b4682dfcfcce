//! Joint geometric and image-only photometric augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imageio::jpeg_roundtrip;
use super::{flip_h, gaussian_blur, resize_bilinear, resize_nearest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub jpeg_prob: f64,
    pub jpeg_quality: [u8; 2],
    /// Final square size; `None` keeps the input size.
    pub out_size: Option<usize>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_prob: 0.5,
            scale_range: [0.75, 1.25],
            blur_prob: 0.5,
            blur_sigma: [0.3, 1.2],
            jpeg_prob: 0.5,
            jpeg_quality: [60, 95],
            out_size: None,
        }
    }
}

impl AugmentSpec {
    /// Never changes its input.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale_prob: 0.0,
            scale_range: [1.0, 1.0],
            blur_prob: 0.0,
            jpeg_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.scale_prob, self.blur_prob, self.jpeg_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("bad scale range [{s0}, {s1}]")));
        }
        let [b0, b1] = self.blur_sigma;
        if !(b0 >= 0.0 && b0 <= b1) {
            return Err(Error::Config(format!("bad blur sigma range [{b0}, {b1}]")));
        }
        let [q0, q1] = self.jpeg_quality;
        if !(10 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::Config(format!(
                "JPEG quality range [{q0}, {q1}] outside [10, 100]"
            )));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Crops or pads `[C, h, w]` to `[C, th, tw]`. Per axis, `offset` is where
/// the crop starts in the larger input, or where the input starts in the
/// larger output. Padded pixels replicate the edge or are zero.
fn crop_or_pad(t: &Tensor, th: usize, tw: usize, oy: usize, ox: usize, fill_edge: bool) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src_index = |o: usize, off: usize, inp: usize, out: usize| -> isize {
        if inp >= out {
            (o + off) as isize
        } else {
            o as isize - off as isize
        }
    };
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        for i in 0..th {
            let y = src_index(i, oy, h, th);
            for j in 0..tw {
                let x = src_index(j, ox, w, tw);
                let inside = (0..h as isize).contains(&y) && (0..w as isize).contains(&x);
                let value = if inside || fill_edge {
                    let yy = y.clamp(0, h as isize - 1) as usize;
                    let xx = x.clamp(0, w as isize - 1) as usize;
                    t.data()[(ch * h + yy) * w + xx]
                } else {
                    0.0
                };
                out[(ch * th + i) * tw + j] = value;
            }
        }
    }
    Tensor::new(&[c, th, tw], out).expect("sized")
}

/// Applies a random augmentation; geometry is shared by image and mask.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &Tensor,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (mut img, mut msk) = (image.clone(), mask.clone());
    if spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob) {
        img = flip_h(&img);
        msk = flip_h(&msk);
    }
    if spec.scale_prob > 0.0 && rng.random_bool(spec.scale_prob) {
        let s = uniform(rng, spec.scale_range);
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let (sh, sw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        if (sh, sw) != (h, w) {
            let si = resize_bilinear(&img, sh, sw);
            let sm = resize_nearest(&msk, sh, sw);
            let oy = rng.random_range(0..=sh.abs_diff(h));
            let ox = rng.random_range(0..=sw.abs_diff(w));
            img = crop_or_pad(&si, h, w, oy, ox, true);
            msk = crop_or_pad(&sm, h, w, oy, ox, false);
        }
    }
    if spec.blur_prob > 0.0 && rng.random_bool(spec.blur_prob) {
        img = gaussian_blur(&img, uniform(rng, spec.blur_sigma));
    }
    if spec.jpeg_prob > 0.0 && rng.random_bool(spec.jpeg_prob) {
        let [q0, q1] = spec.jpeg_quality;
        img = jpeg_roundtrip(&img, rng.random_range(q0..=q1))?;
    }
    if let Some(n) = spec.out_size {
        if img.shape()[1..] != [n, n] {
            img = resize_bilinear(&img, n, n);
            msk = resize_nearest(&msk, n, n);
        }
    }
    Ok((img, msk))
}
