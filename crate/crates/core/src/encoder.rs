//! Four-stage Mix-Transformer branch with feature enhancement after stage 3.
//!
//! Token tensors are `[N, L, C]` with `L = H * W` in row-major pixel order;
//! stage outputs are `[N, C, H, W]` maps.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, PoolKind, Var};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, LayerNorm, Linear, ParamStore};

pub fn to_tokens(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

pub fn to_map(g: &Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t);
    let cl = g.permute(t, &[0, 2, 1])?;
    g.reshape(cl, &[s[0], s[2], h, w])
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        dim: usize,
        first: bool,
        rng: &mut R,
    ) -> Self {
        let (k, opts) = if first {
            (7, ConvOpts::new(4, 3))
        } else {
            (3, ConvOpts::new(2, 1))
        };
        Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), cin, dim, k, opts, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    /// Returns normalized tokens and the new spatial size.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<(Var, usize, usize)> {
        let y = self.proj.forward(ctx, x)?;
        let s = ctx.graph.shape(y);
        let t = to_tokens(ctx.graph, y)?;
        Ok((self.norm.forward(ctx, t)?, s[2], s[3]))
    }
}

/// Multi-head self-attention whose keys and values come from a strided
/// reduction of the token map.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, true, rng);
        let kv = Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, true, rng);
        let sr = (sr_ratio > 1).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.sr"),
                    dim,
                    dim,
                    sr_ratio,
                    ConvOpts::new(sr_ratio, 0),
                    true,
                    rng,
                ),
                LayerNorm::new(store, &format!("{name}.sr_norm"), dim),
            )
        });
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng);
        Self {
            q,
            kv,
            sr,
            proj,
            heads,
            dim,
        }
    }

    fn split_heads(&self, g: &Graph, t: Var) -> Result<Var> {
        let s = g.shape(t);
        let r = g.reshape(t, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// Returns the output tokens and the `[N, heads, L, L']` attention weights.
    pub fn forward_with_weights(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let g = ctx.graph;
        let s = g.shape(x);
        let q = self.q.forward(ctx, x)?;
        let q = self.split_heads(g, q)?;
        let src = match &self.sr {
            Some((conv, norm)) => {
                let map = to_map(g, x, h, w)?;
                let red = conv.forward(ctx, map)?;
                let t = to_tokens(g, red)?;
                norm.forward(ctx, t)?
            }
            None => x,
        };
        let kv = self.kv.forward(ctx, src)?;
        let parts = g.split(kv, &[self.dim, self.dim], 2)?;
        let k = self.split_heads(g, parts[0])?;
        let v = self.split_heads(g, parts[1])?;
        let kt = g.permute(k, &[0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let head_dim = (self.dim / self.heads) as f64;
        let scores = g.scale(scores, 1.0 / head_dim.sqrt());
        let attn = g.softmax_lastdim(scores);
        let out = g.matmul(attn, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[s[0], s[1], self.dim])?;
        Ok((self.proj.forward(ctx, out)?, attn))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, x, h, w)?.0)
    }
}

/// Feed-forward block with a depthwise 3x3 conv between the two linears.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            dwconv: Conv2d::new(
                store,
                &format!("{name}.dwconv"),
                hidden,
                hidden,
                3,
                ConvOpts::new(1, 1).with_groups(hidden),
                true,
                rng,
            ),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let g = ctx.graph;
        let a = self.fc1.forward(ctx, x)?;
        let map = to_map(g, a, h, w)?;
        let c = self.dwconv.forward(ctx, map)?;
        let t = to_tokens(g, c)?;
        let act = g.gelu(t);
        self.fc2.forward(ctx, act)
    }
}

#[derive(Debug, Clone)]
pub struct MitBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: MixFfn,
}

impl MitBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, sr_ratio, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: MixFfn::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let g = ctx.graph;
        let n1 = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, n1, h, w)?;
        let x = g.add(x, a)?;
        let n2 = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, n2, h, w)?;
        g.add(x, m)
    }
}

/// Attention-style enhancement: `G' = G + G * sigmoid(M_s(G) + M_c(G))`.
#[derive(Debug, Clone)]
pub struct FeatureEnhance {
    pub reduce: Conv2d,
    pub dil1: Conv2d,
    pub dil2: Conv2d,
    pub out: Conv2d,
    pub spatial_bn: BatchNorm2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channel_bn: BatchNorm2d,
}

impl FeatureEnhance {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.embed_dims[2];
        let r = cfg.fe_spatial_channels();
        let hid = cfg.fe_channel_hidden();
        let d = cfg.fe_dilation;
        let sp = format!("{name}.spatial");
        let ch = format!("{name}.channel");
        Self {
            reduce: Conv2d::new(store, &format!("{sp}.reduce"), c, r, 1, ConvOpts::default(), true, rng),
            dil1: Conv2d::new(
                store,
                &format!("{sp}.dil1"),
                r,
                r,
                3,
                ConvOpts::dilated(d, d),
                true,
                rng,
            ),
            dil2: Conv2d::new(
                store,
                &format!("{sp}.dil2"),
                r,
                r,
                3,
                ConvOpts::dilated(d, d),
                true,
                rng,
            ),
            out: Conv2d::new(store, &format!("{sp}.out"), r, 1, 1, ConvOpts::default(), true, rng),
            spatial_bn: BatchNorm2d::new(store, &format!("{sp}.bn"), 1),
            fc1: Linear::new(store, &format!("{ch}.fc1"), c, hid, true, rng),
            fc2: Linear::new(store, &format!("{ch}.fc2"), hid, c, true, rng),
            channel_bn: BatchNorm2d::new(store, &format!("{ch}.bn"), c),
        }
    }

    /// `M_s`: `[N, 1, H, W]`, before the sigmoid.
    pub fn spatial(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let a = self.reduce.forward(ctx, x)?;
        let b = self.dil1.forward(ctx, a)?;
        let c = self.dil2.forward(ctx, b)?;
        let d = self.out.forward(ctx, c)?;
        self.spatial_bn.forward(ctx, d)
    }

    /// `M_c`: `[N, C, 1, 1]`, before the sigmoid.
    pub fn channel(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.graph;
        let s = g.shape(x);
        let gap = g.pool(x, PoolKind::GlobalAvg)?;
        let flat = g.reshape(gap, &[s[0], s[1]])?;
        let hidden = self.fc1.forward(ctx, flat)?;
        let hidden = g.relu(hidden);
        let out = self.fc2.forward(ctx, hidden)?;
        let out = g.reshape(out, &[s[0], s[1], 1, 1])?;
        self.channel_bn.forward(ctx, out)
    }

    /// The attention map `M` in `(0, 1)`, `[N, C, H, W]`.
    pub fn attention(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let ms = self.spatial(ctx, x)?;
        let mc = self.channel(ctx, x)?;
        let sum = ctx.graph.add(ms, mc)?;
        Ok(ctx.graph.sigmoid(sum))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.graph;
        let m = self.attention(ctx, x)?;
        let gm = g.mul(x, m)?;
        g.add(x, gm)
    }

    /// Zeros the last layer of each path so both pre-activations vanish.
    pub fn zero_output_layers(&self, store: &mut ParamStore) {
        self.out.zero(store);
        self.fc2.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<MitBlock>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
    pub fe: Option<FeatureEnhance>,
    pub fe_feeds_next_stage: bool,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut fe = None;
        let mut cin = in_channels;
        for s in 0..4 {
            let dim = cfg.embed_dims[s];
            let n = s + 1;
            let embed = PatchEmbed::new(store, &format!("{prefix}.patch_embed{n}"), cin, dim, s == 0, rng);
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    MitBlock::new(
                        store,
                        &format!("{prefix}.block{n}.{i}"),
                        dim,
                        cfg.num_heads[s],
                        cfg.sr_ratios[s],
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect();
            let norm = LayerNorm::new(store, &format!("{prefix}.norm{n}"), dim);
            stages.push(Stage { embed, blocks, norm });
            if s == 2 && cfg.use_fe {
                fe = Some(FeatureEnhance::new(store, &format!("{prefix}.fe"), cfg, rng));
            }
            cin = dim;
        }
        Self {
            in_channels,
            stages,
            fe,
            fe_feeds_next_stage: cfg.fe_feeds_next_stage,
        }
    }

    /// Runs one stage from a `[N, C, H, W]` map to the next map.
    pub fn run_stage(&self, ctx: &mut Ctx<'_>, s: usize, x: Var) -> Result<Var> {
        let stage = &self.stages[s];
        let (mut t, h, w) = stage.embed.forward(ctx, x)?;
        for block in &stage.blocks {
            t = block.forward(ctx, t, h, w)?;
        }
        let t = stage.norm.forward(ctx, t)?;
        to_map(ctx.graph, t, h, w)
    }

    /// Returns `[Z1, Z2, Z3, Z4]`; `Z3` is the enhanced map when FE is on.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Vec<Var>> {
        let c = ctx.graph.shape(x)[1];
        if c != self.in_channels {
            return Err(Error::shape(
                "encode_branch",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let mut feats = Vec::with_capacity(4);
        let mut cur = x;
        for s in 0..4 {
            let z = self.run_stage(ctx, s, cur)?;
            if s == 2 {
                if let Some(fe) = &self.fe {
                    let enhanced = fe.forward(ctx, z)?;
                    feats.push(enhanced);
                    cur = if self.fe_feeds_next_stage { enhanced } else { z };
                    continue;
                }
            }
            feats.push(z);
            cur = z;
        }
        Ok(feats)
    }
}
