use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for half-pixel-centered linear interpolation.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Graph {
    /// Bilinear resize of `[N, C, H, W]`, corners not aligned.
    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let s = t.shape();
            if s.len() != 4 || out_h == 0 || out_w == 0 {
                return Err(Error::shape(
                    "upsample_bilinear",
                    format!("input {s:?} to {out_h}x{out_w}"),
                ));
            }
            let (h, w) = (s[2], s[3]);
            let ty = linear_taps(h, out_h);
            let tx = linear_taps(w, out_w);
            let planes = s[0] * s[1];
            let mut data = vec![0.0; planes * out_h * out_w];
            for p in 0..planes {
                let src = &t.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
            Tensor::from_parts(vec![s[0], s[1], out_h, out_w], data)
        };
        Ok(self.push(out, Op::Upsample { x }))
    }
}

pub(super) fn upsample_backward(x: Var, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let s = sink.value(x).shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let (out_h, out_w) = (out.shape()[2], out.shape()[3]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let gx = sink.buf(x);
    for p in 0..s[0] * s[1] {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        let src = &gout[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}
