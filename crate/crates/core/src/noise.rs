//! Fixed high-pass residual filters turning RGB into a 9-channel noise map.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One frozen residual kernel with integer taps and a normalizing divisor.
#[derive(Debug, Clone)]
pub struct HpfKernel {
    pub name: &'static str,
    pub size: usize,
    pub taps: Vec<i32>,
    pub divisor: f64,
}

impl HpfKernel {
    pub fn tap_sum(&self) -> i32 {
        self.taps.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct HpfBank {
    pub kernels: Vec<HpfKernel>,
}

impl Default for HpfBank {
    fn default() -> Self {
        #[rustfmt::skip]
        let first = vec![
            0, 0, 0,
            0, -1, 1,
            0, 0, 0,
        ];
        #[rustfmt::skip]
        let kb = vec![
            -1, 2, -1,
            2, -4, 2,
            -1, 2, -1,
        ];
        #[rustfmt::skip]
        let square = vec![
            -1, 2, -2, 2, -1,
            2, -6, 8, -6, 2,
            -2, 8, -12, 8, -2,
            2, -6, 8, -6, 2,
            -1, 2, -2, 2, -1,
        ];
        Self {
            kernels: vec![
                HpfKernel {
                    name: "first_order",
                    size: 3,
                    taps: first,
                    divisor: 1.0,
                },
                HpfKernel {
                    name: "kb",
                    size: 3,
                    taps: kb,
                    divisor: 4.0,
                },
                HpfKernel {
                    name: "square5",
                    size: 5,
                    taps: square,
                    divisor: 12.0,
                },
            ],
        }
    }
}

impl HpfBank {
    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.kernels.len() * in_channels
    }

    /// Filters `[N, 3, H, W]` in `[0, 1]` to `[N, 9, H, W]`.
    ///
    /// Output channel `3k + c` is kernel `k` on input channel `c`, computed on
    /// the 0..255 scale with edge-replicated borders. Each tap multiplies the
    /// difference to the window center, so constant regions give exactly 0.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(
                "extract_noise",
                format!("expected [N, 3, H, W], got {s:?}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let k_count = self.kernels.len();
        let mut out = vec![0.0; n * k_count * c * h * w];
        let src = x.data();
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (k, kern) in self.kernels.iter().enumerate() {
                    let oc = k * c + ch;
                    let dst = &mut out[(b * k_count * c + oc) * h * w..][..h * w];
                    let r = (kern.size / 2) as isize;
                    let scale = 255.0 / kern.divisor;
                    for i in 0..h {
                        for j in 0..w {
                            let center = plane[i * w + j];
                            let mut acc = 0.0;
                            for (t, &tap) in kern.taps.iter().enumerate() {
                                if tap == 0 {
                                    continue;
                                }
                                let di = (t / kern.size) as isize - r;
                                let dj = (t % kern.size) as isize - r;
                                let y = (i as isize + di).clamp(0, h as isize - 1) as usize;
                                let xx = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                                acc += tap as f64 * (plane[y * w + xx] - center);
                            }
                            dst[i * w + j] = acc * scale;
                        }
                    }
                }
            }
        }
        Tensor::new(&[n, k_count * c, h, w], out)
    }
}

pub fn extract_noise(x: &Tensor) -> Result<Tensor> {
    HpfBank::default().apply(x)
}
