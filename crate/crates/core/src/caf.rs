//! Coordinate-attention fusion of the RGB and noise features of one scale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvOpts, PoolKind, Var};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};

#[derive(Debug, Clone)]
pub struct Caf {
    pub channels: usize,
    pub mid: usize,
    pub encode: Conv2d,
    pub bn: BatchNorm2d,
    pub decode_h: Conv2d,
    pub decode_w: Conv2d,
}

/// Intermediate maps of one fusion, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct CafTrace {
    pub zcat: Var,
    pub t: Var,
    pub mh: Var,
    pub mw: Var,
    pub out: Var,
}

impl Caf {
    /// `channels` is the concatenated width `2 C`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, mid: usize, rng: &mut R) -> Self {
        let one = ConvOpts::default();
        Self {
            channels,
            mid,
            encode: Conv2d::new(store, &format!("{name}.encode"), channels, mid, 1, one, true, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), mid),
            decode_h: Conv2d::new(store, &format!("{name}.decode_h"), mid, channels, 1, one, true, rng),
            decode_w: Conv2d::new(store, &format!("{name}.decode_w"), mid, channels, 1, one, true, rng),
        }
    }

    /// Row means `[N, C, H, 1]` and column means `[N, C, 1, W]`.
    pub fn pool(ctx: &Ctx<'_>, z: Var) -> Result<(Var, Var)> {
        let g = ctx.graph;
        Ok((g.pool(z, PoolKind::HorizontalAvg)?, g.pool(z, PoolKind::VerticalAvg)?))
    }

    /// `T = sigmoid(BN(conv([zw^T, zh])))`, shape `[N, mid, W + H, 1]`.
    pub fn encode(&self, ctx: &mut Ctx<'_>, zh: Var, zw: Var) -> Result<Var> {
        let g = ctx.graph;
        let zw_t = g.permute(zw, &[0, 1, 3, 2])?;
        let cat = g.concat(&[zw_t, zh], 2)?;
        let y = self.encode.forward(ctx, cat)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(g.sigmoid(y))
    }

    /// Splits `T` into its column and row parts and decodes `(M_h, M_w)`.
    pub fn attend(&self, ctx: &mut Ctx<'_>, t: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let g = ctx.graph;
        let parts = g.split(t, &[w, h], 2)?;
        let (tw, th) = (parts[0], parts[1]);
        let mh = self.decode_h.forward(ctx, th)?;
        let mh = g.sigmoid(mh);
        let mw = self.decode_w.forward(ctx, tw)?;
        let mw = g.sigmoid(mw);
        let mw = g.permute(mw, &[0, 1, 3, 2])?;
        Ok((mh, mw))
    }

    pub fn trace(&self, ctx: &mut Ctx<'_>, z_rgb: Var, z_noise: Var) -> Result<CafTrace> {
        let g = ctx.graph;
        let (sa, sb) = (g.shape(z_rgb), g.shape(z_noise));
        if sa.len() != 4 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(
                "caf_fuse",
                format!("rgb {sa:?} and noise {sb:?} are not the same scale"),
            ));
        }
        if sa[1] + sb[1] != self.channels {
            return Err(Error::shape(
                "caf_fuse",
                format!(
                    "rgb {sa:?} and noise {sb:?} do not concatenate to {} channels",
                    self.channels
                ),
            ));
        }
        let zcat = g.concat(&[z_rgb, z_noise], 1)?;
        let (zh, zw) = Self::pool(ctx, zcat)?;
        let t = self.encode(ctx, zh, zw)?;
        let (mh, mw) = self.attend(ctx, t, sa[2], sa[3])?;
        let a = g.mul(zcat, mh)?;
        let out = g.mul(a, mw)?;
        Ok(CafTrace { zcat, t, mh, mw, out })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, z_rgb: Var, z_noise: Var) -> Result<Var> {
        Ok(self.trace(ctx, z_rgb, z_noise)?.out)
    }

    pub fn zero_decoders(&self, store: &mut ParamStore) {
        self.decode_h.zero(store);
        self.decode_w.zero(store);
    }
}
