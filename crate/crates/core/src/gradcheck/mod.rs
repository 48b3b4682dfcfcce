//! Finite-difference verification of analytic gradients.
//!
//! The numeric side only ever runs forward passes, so it shares no code
//! with the backward rules it checks.

mod suites;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use suites::{run_scope, Scope};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{with_precision, Precision, Tensor};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Denominator floor per unit of `|f|`, below which errors are
    /// effectively absolute. Roundoff in `f` limits a central difference to
    /// roughly `C * eps * |f| / step`; with `C` up to ~50 behind small-batch
    /// normalizations that is `1e-5 * |f|` at the default step and tolerance.
    pub floor: f64,
    /// Coordinates checked per input tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl CheckOptions {
    pub fn sampled(max_coords: usize, seed: u64) -> Self {
        Self {
            max_coords: Some(max_coords),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstElement {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstElement>,
    pub passed: bool,
}

impl std::fmt::Display for CaseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<28} coords={:<5} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err
        )?;
        if let (false, Some(w)) = (self.passed, &self.worst) {
            write!(
                f,
                "  worst {}[{}]: analytic={:.9e} numeric={:.9e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed random projection `sum(out ⊙ R)` turning any output into a scalar.
pub fn project(g: &Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh graph.
///
/// `f` is called once with the inputs as gradient leaves and then twice per
/// checked coordinate with perturbed constant inputs.
pub fn check<F>(name: &str, inputs: &[(&str, Tensor)], mut f: F, opts: &CheckOptions) -> Result<CaseReport>
where
    F: FnMut(&Graph, &[Var]) -> Result<Var>,
{
    with_precision(Precision::F64, || {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradcheck {name}: function must return a scalar"
            )));
        }
        let f0 = g.value(loss).item();
        let floor = opts.floor * f0.abs().max(1.0);
        g.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(g);

        let mut eval = |values: &[Tensor]| -> Result<f64> {
            let g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&g, &vars)?;
            let v = g.value(out).item();
            Ok(v)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
        let mut max_err = 0.0f64;
        let mut worst = None;
        let mut checked = 0;
        for (i, (label, t)) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match opts.max_coords {
                Some(k) if k < t.numel() => {
                    let mut c = sample(&mut rng, t.numel(), k).into_vec();
                    // Always include the largest analytic component.
                    let big = analytic[i]
                        .data()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .map(|(j, _)| j)
                        .unwrap_or(0);
                    if !c.contains(&big) {
                        c.push(big);
                    }
                    c
                }
                _ => (0..t.numel()).collect(),
            };
            for j in coords {
                let orig = t.data()[j];
                values[i].data_mut()[j] = orig + opts.step;
                let fp = eval(&values)?;
                values[i].data_mut()[j] = orig - opts.step;
                let fm = eval(&values)?;
                values[i].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * opts.step);
                let a = analytic[i].data()[j];
                let err = relative_error(a, numeric, floor);
                checked += 1;
                if err > max_err || worst.is_none() || err.is_nan() {
                    max_err = if err.is_nan() { f64::INFINITY } else { err.max(max_err) };
                    worst = Some(WorstElement {
                        input: label.to_string(),
                        index: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(CaseReport {
            name: name.to_string(),
            checked,
            max_rel_err: max_err,
            worst,
            passed: max_err < opts.tolerance,
        })
    })
}
