//! All-MLP head from the fused pyramid to a full-resolution probability map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamStore};

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dim: usize,
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub classifier: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: [usize; 4],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &format!("{name}.proj{}", i + 1), c, dim, true, rng))
            .collect();
        Self {
            dim,
            proj,
            fuse: Linear::new(store, &format!("{name}.fuse"), 4 * dim, dim, true, rng),
            classifier: Linear::new(store, &format!("{name}.classifier"), dim, 1, true, rng),
        }
    }

    /// Logits `[N, 1, out_h, out_w]` before the final sigmoid.
    pub fn logits(&self, ctx: &mut Ctx<'_>, feats: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        let g = ctx.graph;
        if feats.len() != 4 {
            return Err(Error::shape(
                "decode",
                format!("expected 4 scales, got {}", feats.len()),
            ));
        }
        let (h4, w4) = (out_h / 4, out_w / 4);
        let mut ups = Vec::with_capacity(4);
        for (s, (&z, proj)) in feats.iter().zip(&self.proj).enumerate() {
            let shape = g.shape(z);
            let f = 4 << s;
            if shape.len() != 4 || shape[2] * f != out_h || shape[3] * f != out_w {
                return Err(Error::shape(
                    "decode",
                    format!(
                        "scale {} has shape {shape:?}, inconsistent with output {out_h}x{out_w}",
                        s + 1
                    ),
                ));
            }
            let p = proj.forward_nchw(ctx, z)?;
            ups.push(if s == 0 { p } else { g.upsample_bilinear(p, h4, w4)? });
        }
        let cat = g.concat(&ups, 1)?;
        let fused = self.fuse.forward_nchw(ctx, cat)?;
        let fused = g.relu(fused);
        let logit = self.classifier.forward_nchw(ctx, fused)?;
        g.upsample_bilinear(logit, out_h, out_w)
    }

    /// `P` in `(0, 1)`, `[N, 1, out_h, out_w]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, feats: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        let logit = self.logits(ctx, feats, out_h, out_w)?;
        Ok(ctx.graph.sigmoid(logit))
    }

    pub fn zero_classifier(&self, store: &mut ParamStore) {
        self.classifier.zero(store);
    }
}
