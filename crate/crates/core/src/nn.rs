//! Named parameter storage and the basic layers built on it.
//!
//! Layers own only [`ParamId`]s. Values live in a [`ParamStore`] so a whole
//! model serializes as one name-to-tensor table, and a forward pass binds
//! them onto a fresh [`Graph`] through a [`Ctx`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, ConvOpts, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as BN running statistics are stored but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let slot = self.value_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param",
                format!("{name}: stored {:?}, given {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Per-forward binding of stored parameters onto a graph.
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
    track_grads: bool,
}

impl<'a> Ctx<'a> {
    /// Trainable parameters become gradient leaves when `training` is set.
    pub fn new(graph: &'a Graph, store: &'a mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Self {
            graph,
            store,
            bound: vec![None; n],
            training,
            track_grads: training,
        }
    }

    /// Training-mode statistics without recording parameter gradients.
    pub fn train_no_grad(graph: &'a Graph, store: &'a mut ParamStore) -> Self {
        let mut ctx = Self::new(graph, store, true);
        ctx.track_grads = false;
        ctx
    }

    /// Uses `var` in place of the stored value of `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = &self.store.params[id.0];
        let v = self
            .graph
            .leaf(param.value.clone(), self.track_grads && param.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.params[i].trainable {
                    return None;
                }
                self.graph.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Normal init with std `sqrt(2 / fan_out)`, the usual rule for convs.
fn conv_init<R: Rng + ?Sized>(shape: &[usize], groups: usize, rng: &mut R) -> Tensor {
    let fan_out = shape[0] * shape[2] * shape[3] / groups;
    Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: ConvOpts,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [cout, cin / opts.groups, kernel, kernel];
        let weight = store.add(format!("{name}.weight"), conv_init(&shape, opts.groups, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Self { weight, bias, opts }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.graph.conv2d(x, w, b, self.opts)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[dout, din], 0.02, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), true));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.graph.linear(x, w, b)
    }

    /// Applies the map per pixel of an `[N, C, H, W]` input.
    pub fn forward_nchw(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.graph;
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(ctx, t)?;
        g.permute(y, &[0, 3, 1, 2])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

fn zero_param(store: &mut ParamStore, id: ParamId) {
    let v = store.value_mut(id);
    *v = Tensor::zeros(v.shape());
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        if ctx.training {
            let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, self.eps, BatchNormMode::Train)?;
            let stats = stats.expect("training mode returns batch statistics");
            let m = self.momentum;
            let store = ctx.store_mut();
            for (r, &b) in store
                .value_mut(self.running_mean)
                .data_mut()
                .iter_mut()
                .zip(&stats.mean)
            {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in store
                .value_mut(self.running_var)
                .data_mut()
                .iter_mut()
                .zip(&stats.var_unbiased)
            {
                *r = (1.0 - m) * *r + m * b;
            }
            Ok(y)
        } else {
            let store = ctx.store();
            let rm = store.value(self.running_mean).data().to_vec();
            let rv = store.value(self.running_var).data().to_vec();
            let (y, _) = ctx.graph.batch_norm(
                x,
                gamma,
                beta,
                self.eps,
                BatchNormMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                },
            )?;
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.graph.layer_norm(x, gamma, beta, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_rejects_shape_change_and_tracks_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, ConvOpts::new(1, 1), true, &mut rng);
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        assert_eq!(store.len(), 6);
        assert_eq!(store.trainable_ids().len(), 4);
        assert!(store.set("c.bias", Tensor::zeros(&[4])).is_err());
        assert!(store.set("c.bias", Tensor::ones(&[3])).is_ok());
        assert_eq!(store.id("c.weight"), Some(conv.weight));
        assert!(!store.get(bn.running_var).trainable);
    }

    #[test]
    fn batchnorm_updates_running_stats_in_training_only() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        {
            let g = Graph::new();
            let mut ctx = Ctx::new(&g, &mut store, false);
            let xv = g.constant(x.clone());
            bn.forward(&mut ctx, xv).unwrap();
        }
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        {
            let g = Graph::new();
            let mut ctx = Ctx::new(&g, &mut store, true);
            let xv = g.constant(x);
            bn.forward(&mut ctx, xv).unwrap();
        }
        // mean 4, unbiased var 20/3, momentum 0.1
        assert!((store.value(bn.running_mean).data()[0] - 0.4).abs() < 1e-12);
        let expect = 0.9 + 0.1 * 20.0 / 3.0;
        assert!((store.value(bn.running_var).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ctx_collects_grads_of_trainable_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let g = Graph::new();
        let mut ctx = Ctx::new(&g, &mut store, true);
        let x = g.constant(Tensor::ones(&[4, 3]));
        let y = lin.forward(&mut ctx, x).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        let grads = ctx.grads();
        assert_eq!(grads.len(), 2);
        let (_, gb) = grads.iter().find(|(id, _)| Some(*id) == lin.bias).unwrap();
        assert_eq!(gb.data(), &[4.0, 4.0]);
    }
}
