//! Deterministic generator of tampered images with exact masks.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{gaussian_blur, quantize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperType {
    Splice,
    CopyMove,
    Removal,
    Authentic,
}

impl TamperType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Splice => "splice",
            Self::CopyMove => "copy_move",
            Self::Removal => "removal",
            Self::Authentic => "authentic",
        }
    }
}

impl fmt::Display for TamperType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TamperType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splice" => Ok(Self::Splice),
            "copy_move" => Ok(Self::CopyMove),
            "removal" => Ok(Self::Removal),
            "authentic" => Ok(Self::Authentic),
            _ => Err(Error::InvalidArgument(format!("unknown tamper type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Gradient,
    ValueNoise,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_images: usize,
    pub tamper_types: Vec<TamperType>,
    pub shapes: Vec<ShapeFamily>,
    pub textures: Vec<TextureFamily>,
    /// Fraction of samples left authentic with an empty mask.
    pub authentic_fraction: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_images: 512,
            tamper_types: vec![TamperType::Splice, TamperType::CopyMove, TamperType::Removal],
            shapes: vec![ShapeFamily::Ellipse, ShapeFamily::Polygon],
            textures: vec![
                TextureFamily::Gradient,
                TextureFamily::ValueNoise,
                TextureFamily::Checker,
            ],
            authentic_fraction: 0.0,
            min_area: 0.05,
            max_area: 0.40,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.tamper_types.is_empty() || self.shapes.is_empty() || self.textures.is_empty() {
            return Err(Error::Config(
                "tamper_types, shapes and textures must be nonempty".into(),
            ));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area < 1.0) {
            return Err(Error::Config(format!(
                "area bounds must satisfy 0 < min < max < 1, got {} and {}",
                self.min_area, self.max_area
            )));
        }
        if !(0.0..=1.0).contains(&self.authentic_fraction) {
            return Err(Error::Config("authentic_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The RNG of sample `index`, independent of every other index.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub image: Tensor,
    pub mask: Tensor,
    pub tamper: TamperType,
    /// The host image before manipulation.
    pub host: Tensor,
}

/// Samples a texture with additive Gaussian sensor noise of std `sigma`.
fn texture(rng: &mut ChaCha8Rng, family: TextureFamily, size: usize, sigma: f64) -> Tensor {
    let n = size;
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let mut data = vec![0.0; 3 * n * n];
    match family {
        TextureFamily::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            for i in 0..n {
                for j in 0..n {
                    let u = ((j as f64 / n as f64 - 0.5) * dx + (i as f64 / n as f64 - 0.5) * dy) / 1.5 + 0.5;
                    for c in 0..3 {
                        data[(c * n + i) * n + j] = c0[c] + (c1[c] - c0[c]) * u;
                    }
                }
            }
        }
        TextureFamily::ValueNoise => {
            let cell = rng.random_range(4..=(n / 4).max(5));
            let g = n / cell + 2;
            let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            for i in 0..n {
                for j in 0..n {
                    let (fy, fx) = (i as f64 / cell as f64, j as f64 / cell as f64);
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (ty, tx) = (smooth(fy - y0 as f64), smooth(fx - x0 as f64));
                    let v = |y: usize, x: usize| grid[y * g + x];
                    let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
                    let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
                    let u = top * (1.0 - ty) + bot * ty;
                    for c in 0..3 {
                        data[(c * n + i) * n + j] = c0[c] + (c1[c] - c0[c]) * u;
                    }
                }
            }
        }
        TextureFamily::Checker => {
            let cell = rng.random_range(3..=(n / 4).max(4));
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for i in 0..n {
                for j in 0..n {
                    let odd = ((i + oy) / cell + (j + ox) / cell) % 2 == 1;
                    for c in 0..3 {
                        data[(c * n + i) * n + j] = if odd { c1[c] } else { c0[c] };
                    }
                }
            }
        }
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[3, n, n], data).expect("sized")
}

/// A binary `[1, n, n]` region.
fn region(rng: &mut ChaCha8Rng, family: ShapeFamily, n: usize, area: f64) -> Tensor {
    let nf = n as f64;
    let mut m = vec![0.0; n * n];
    match family {
        ShapeFamily::Ellipse => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let target = area * nf * nf / std::f64::consts::PI;
            let (ry, rx) = ((target / aspect).sqrt(), (target * aspect).sqrt());
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (cy, cx) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
            let (s, c) = theta.sin_cos();
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                    let (u, v) = (c * x + s * y, -s * x + c * y);
                    if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                        m[i * n + j] = 1.0;
                    }
                }
            }
        }
        ShapeFamily::Polygon => {
            let k = rng.random_range(5..=8);
            let r0 = (area * nf * nf / std::f64::consts::PI).sqrt();
            let (cy, cx) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            let pts: Vec<(f64, f64)> = angles
                .iter()
                .map(|&a| {
                    let r = r0 * rng.random_range(0.7..1.3);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                    let mut inside = false;
                    for e in 0..k {
                        let (x1, y1) = pts[e];
                        let (x2, y2) = pts[(e + 1) % k];
                        if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
                            inside = !inside;
                        }
                    }
                    if inside {
                        m[i * n + j] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(&[1, n, n], m).expect("sized")
}

fn area_fraction(m: &Tensor) -> f64 {
    m.mean()
}

/// Draws a region whose area fraction lies in `[min_area, max_area]`.
fn bounded_region(rng: &mut ChaCha8Rng, spec: &SynthSpec, max_area: f64) -> Option<Tensor> {
    for _ in 0..64 {
        let family = *spec.shapes.choose(rng).expect("nonempty");
        let target = rng.random_range(spec.min_area..max_area);
        let m = region(rng, family, spec.image_size, target);
        let a = area_fraction(&m);
        if a >= spec.min_area && a <= max_area {
            return Some(m);
        }
    }
    None
}

/// Inclusive `(y0, y1, x0, x1)` of the set pixels of a nonempty mask.
fn bbox(m: &Tensor) -> (usize, usize, usize, usize) {
    let n = m.shape()[1];
    let (mut y0, mut y1, mut x0, mut x1) = (n, 0, n, 0);
    for i in 0..n {
        for j in 0..n {
            if m.data()[i * n + j] > 0.0 {
                (y0, y1, x0, x1) = (y0.min(i), y1.max(i), x0.min(j), x1.max(j));
            }
        }
    }
    (y0, y1, x0, x1)
}

fn shifted(m: &Tensor, dy: isize, dx: isize) -> Option<Tensor> {
    let n = m.shape()[1];
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if m.data()[i * n + j] > 0.0 {
                let (y, x) = (i as isize + dy, j as isize + dx);
                if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                    return None;
                }
                out[y as usize * n + x as usize] = 1.0;
            }
        }
    }
    Tensor::new(&[1, n, n], out).ok()
}

/// Writes `src` into `dst` where `mask` is set.
fn paste(dst: &mut Tensor, src: &Tensor, mask: &Tensor) {
    let hw = mask.numel();
    let m = mask.data().to_vec();
    let s = src.data();
    let d = dst.data_mut();
    for c in 0..3 {
        for p in 0..hw {
            if m[p] > 0.0 {
                d[c * hw + p] = s[c * hw + p];
            }
        }
    }
}

/// Fills the masked region from a normalized blur of its surroundings.
fn surround_fill(image: &Tensor, mask: &Tensor) -> Tensor {
    let n = mask.shape()[1];
    let hw = n * n;
    let keep = mask.map(|v| 1.0 - v);
    let mut masked = image.clone();
    for c in 0..3 {
        for p in 0..hw {
            masked.data_mut()[c * hw + p] *= keep.data()[p];
        }
    }
    let sigma = (n as f64 / 8.0).max(2.0);
    let num = gaussian_blur(&masked, sigma);
    let den = gaussian_blur(&keep, sigma);
    let mut outside_mean = [0.0; 3];
    let kept: f64 = keep.sum().max(1.0);
    for c in 0..3 {
        outside_mean[c] = masked.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / kept;
    }
    let mut out = image.clone();
    for c in 0..3 {
        for p in 0..hw {
            if mask.data()[p] > 0.0 {
                let d = den.data()[p];
                out.data_mut()[c * hw + p] = if d > 1e-6 {
                    num.data()[c * hw + p] / d
                } else {
                    outside_mean[c]
                };
            }
        }
    }
    out
}

/// Generates sample `index`; `None` when region placement fails.
pub fn synthesize_one(spec: &SynthSpec, index: usize) -> Option<Sample> {
    let mut rng = spec.rng_for(index);
    let n = spec.image_size;
    let host_sigma = rng.random_range(0.004..0.015);
    let host_tex = *spec.textures.choose(&mut rng).expect("nonempty");
    // Everything stays on the 8-bit grid so a sample equals its PNG.
    let host = quantize(&texture(&mut rng, host_tex, n, host_sigma));
    let authentic = spec.authentic_fraction > 0.0 && rng.random_bool(spec.authentic_fraction);
    if authentic {
        return Some(Sample {
            index,
            image: host.clone(),
            mask: Tensor::zeros(&[1, n, n]),
            tamper: TamperType::Authentic,
            host,
        });
    }
    let tamper = *spec.tamper_types.choose(&mut rng).expect("nonempty");
    let (image, mask) = match tamper {
        TamperType::Splice => {
            let mask = bounded_region(&mut rng, spec, spec.max_area)?;
            let donor_tex = *spec.textures.choose(&mut rng).expect("nonempty");
            let donor_sigma = rng.random_range(0.03..0.06);
            let donor = texture(&mut rng, donor_tex, n, donor_sigma);
            let mut image = host.clone();
            paste(&mut image, &donor, &mask);
            (image, mask)
        }
        TamperType::CopyMove => {
            let mut placed = None;
            for _ in 0..32 {
                let src = bounded_region(&mut rng, spec, spec.max_area.min(0.25))?;
                // Shifts that keep the bounding box inside the frame.
                let (y0, y1, x0, x1) = bbox(&src);
                let dy = rng.random_range(-(y0 as i64)..=(n - 1 - y1) as i64) as isize;
                let dx = rng.random_range(-(x0 as i64)..=(n - 1 - x1) as i64) as isize;
                let Some(dst) = shifted(&src, dy, dx) else {
                    continue;
                };
                let overlap = src.data().iter().zip(dst.data()).any(|(a, b)| a * b > 0.0);
                if !overlap {
                    placed = Some((src, dst, dy, dx));
                    break;
                }
            }
            let (_src, dst, dy, dx) = placed?;
            let mut image = host.clone();
            let hw = n * n;
            for c in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        if dst.data()[i * n + j] > 0.0 {
                            let (si, sj) = ((i as isize - dy) as usize, (j as isize - dx) as usize);
                            image.data_mut()[c * hw + i * n + j] = host.data()[c * hw + si * n + sj];
                        }
                    }
                }
            }
            (image, dst)
        }
        TamperType::Removal => {
            let mask = bounded_region(&mut rng, spec, spec.max_area)?;
            (surround_fill(&host, &mask), mask)
        }
        TamperType::Authentic => unreachable!("authentic handled above"),
    };
    Some(Sample {
        index,
        image: quantize(&image),
        mask,
        tamper,
        host,
    })
}

/// Generates samples `0..n_images`, skipping failed placements with a warning.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    spec.validate()?;
    let out: Vec<Option<Sample>> = (0..spec.n_images)
        .into_par_iter()
        .map(|i| synthesize_one(spec, i))
        .collect();
    Ok(out
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.is_none() {
                log::warn!("sample {i}: region placement failed, skipped");
            }
            s
        })
        .collect())
}
