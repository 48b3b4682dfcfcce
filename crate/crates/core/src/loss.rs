//! Dice and focal objectives on probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub dice_epsilon: f64,
    pub log_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
            dice_epsilon: 1e-6,
            log_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.dice_epsilon > 0.0) || !(self.log_epsilon > 0.0 && self.log_epsilon < 0.5) {
            return Err(Error::Config("loss epsilons must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, pred: Var, gt: &Tensor, op: &'static str) -> Result<()> {
    let ps = g.shape(pred);
    if ps != gt.shape() {
        return Err(Error::shape(op, format!("pred {ps:?} vs gt {:?}", gt.shape())));
    }
    Ok(())
}

/// `1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)` over the whole batch.
pub fn dice_loss(g: &Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, gt, "dice_loss")?;
    let eps = cfg.dice_epsilon;
    let y = g.constant(gt.clone());
    let py = g.mul(pred, y)?;
    let inter = g.sum_all(py);
    let num = g.affine(inter, 2.0, eps);
    let p2 = g.mul(pred, pred)?;
    let p2 = g.sum_all(p2);
    let y2: f64 = gt.data().iter().map(|v| v * v).sum();
    let den = g.affine(p2, 1.0, y2 + eps);
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -1.0, 1.0))
}

/// Mean over pixels of
/// `-a (1-p)^g y ln p - (1-a) p^g (1-y) ln(1-p)`, with `p` clamped away from 0 and 1.
pub fn focal_loss(g: &Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, pred, gt, "focal_loss")?;
    let e = cfg.log_epsilon;
    let p = g.clamp(pred, e, 1.0 - e);
    let q = g.affine(p, -1.0, 1.0);
    let y = g.constant(gt.clone());
    let not_y = g.constant(gt.map(|v| 1.0 - v));
    let pos = {
        let w = g.powf(q, cfg.gamma);
        let lp = g.ln(p);
        let t = g.mul(w, lp)?;
        let t = g.mul(t, y)?;
        g.scale(t, cfg.alpha)
    };
    let neg = {
        let w = g.powf(p, cfg.gamma);
        let lq = g.ln(q);
        let t = g.mul(w, lq)?;
        let t = g.mul(t, not_y)?;
        g.scale(t, 1.0 - cfg.alpha)
    };
    let s = g.add(pos, neg)?;
    let m = g.mean_all(s);
    Ok(g.scale(m, -1.0))
}

/// Dice plus focal.
pub fn total_loss(g: &Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let d = dice_loss(g, pred, gt, cfg)?;
    let f = focal_loss(g, pred, gt, cfg)?;
    g.add(d, f)
}
