//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{round_to_mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, indexed like the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            moments: vec![None; store.len()],
        }
    }
}

/// One update. Every gradient is checked before any parameter moves, so a
/// rejected step leaves both `store` and `state` untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {}",
                store.get(*id).name
            )));
        }
    }
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let slot =
            state.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let (m, v) = (&mut slot.0, &mut slot.1);
        let p = store.value_mut(*id);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *pv *= decay;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        round_to_mode(p.data_mut());
        round_to_mode(m.data_mut());
        round_to_mode(v.data_mut());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), true);
        (s, id)
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let (mut s, id) = one_param(1.25);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..3 {
            adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, 1e-2, &cfg).unwrap();
        }
        assert_eq!(s.value(id).item(), 1.25);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let (mut s, id) = one_param(2.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        for _ in 0..4 {
            adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, 0.5, &cfg).unwrap();
        }
        assert!((s.value(id).item() - 2.0 * 0.95f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_moving() {
        let (mut s, id) = one_param(1.0);
        let mut st = AdamState::new(&s);
        let err = adamw_step(
            &mut s,
            &[(id, Tensor::scalar(f64::NAN))],
            &mut st,
            0.1,
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains('p'));
        assert_eq!(st.step, 0);
        assert_eq!(s.value(id).item(), 1.0);
    }
}
