//! Full two-branch network: noise residuals, encoders, fusion and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caf::Caf;
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::Branch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, ParamStore};
use crate::noise::HpfBank;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub hpf: HpfBank,
    pub rgb: Branch,
    pub noise: Branch,
    /// Empty when fusion is plain concatenation.
    pub caf: Vec<Caf>,
    pub decoder: Decoder,
}

/// Every intermediate pyramid of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub rgb: Vec<Var>,
    pub noise: Vec<Var>,
    pub fused: Vec<Var>,
    pub mask: Var,
}

impl Network {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let hpf = HpfBank::default();
        let rgb = Branch::new(store, "rgb", 3, config, rng);
        let noise = Branch::new(store, "noise", hpf.out_channels(3), config, rng);
        let caf = if config.use_caf {
            (0..4)
                .map(|s| {
                    Caf::new(
                        store,
                        &format!("caf{}", s + 1),
                        2 * config.embed_dims[s],
                        config.caf_mid_channels(s),
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let fused = config.embed_dims.map(|c| 2 * c);
        let decoder = Decoder::new(store, "decoder", fused, config.decoder_dim, rng);
        Ok(Self {
            config: config.clone(),
            hpf,
            rgb,
            noise,
            caf,
            decoder,
        })
    }

    /// Fuses the two pyramids scale by scale.
    pub fn fuse(&self, ctx: &mut Ctx<'_>, rgb: &[Var], noise: &[Var]) -> Result<Vec<Var>> {
        (0..4)
            .map(|s| match self.caf.get(s) {
                Some(caf) => caf.forward(ctx, rgb[s], noise[s]),
                None => ctx.graph.concat(&[rgb[s], noise[s]], 1),
            })
            .collect()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<ForwardTrace> {
        let s = ctx.graph.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("forward", format!("expected [N, 3, H, W], got {s:?}")));
        }
        self.config.check_input(s[2], s[3])?;
        let residual = self.hpf.apply(&ctx.graph.value(x))?;
        let xn = ctx.graph.constant(residual);
        let rgb = self.rgb.forward(ctx, x)?;
        let noise = self.noise.forward(ctx, xn)?;
        let fused = self.fuse(ctx, &rgb, &noise)?;
        let mask = self.decoder.forward(ctx, &fused, s[2], s[3])?;
        Ok(ForwardTrace {
            rgb,
            noise,
            fused,
            mask,
        })
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let network = Network::new(config, &mut store, &mut rng)?;
        Ok(Self { network, store })
    }

    /// Builds the network for `config` and takes its values from `store`,
    /// which must hold exactly the same names and shapes.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", p.name)))?;
            if model.store.get(id).trainable != p.trainable {
                return Err(Error::Checkpoint(format!("{}: parameter kind mismatch", p.name)));
            }
            model
                .store
                .set(&p.name, p.value.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    /// Runs one forward pass on a fresh graph and returns its output mask.
    pub fn forward_value(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let g = Graph::new();
        let mut ctx = if training {
            Ctx::train_no_grad(&g, &mut self.store)
        } else {
            Ctx::new(&g, &mut self.store, false)
        };
        let xv = g.constant(x.clone());
        let trace = self.network.forward(&mut ctx, xv)?;
        let out = g.value(trace.mask).clone();
        Ok(out)
    }

    /// Eval-mode probability map `[N, 1, H, W]`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_value(x, false)
    }
}
