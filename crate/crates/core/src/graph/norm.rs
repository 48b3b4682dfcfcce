use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Statistics source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-channel batch statistics from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

impl Graph {
    pub fn softmax_lastdim(&self, x: Var) -> Var {
        let out = {
            let t = self.value(x);
            let d = *t.shape().last().unwrap();
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(d) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        self.push(out, Op::Softmax(x))
    }

    /// Layer normalization over the last dim with affine `gamma`, `beta` of that size.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = {
            let t = self.value(x);
            let d = *t.shape().last().unwrap();
            let tg = self.value(gamma);
            let tb = self.value(beta);
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "input {:?} with gamma {:?}, beta {:?}",
                        t.shape(),
                        tg.shape(),
                        tb.shape()
                    ),
                ));
            }
            let rows = t.numel() / d;
            let mut xhat = vec![0.0; t.numel()];
            let mut rstd = vec![0.0; rows];
            let mut data = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    data[r * d + j] = xh * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::from_parts(t.shape().to_vec(), data), xhat, rstd)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization of `[N, C, H, W]` per channel.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (out, xhat, rstd, stats, training) = {
            let t = self.value(x);
            let s = t.shape();
            if s.len() != 4 {
                return Err(Error::shape("batch_norm", format!("expected 4-D input, got {s:?}")));
            }
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let tg = self.value(gamma);
            let tb = self.value(beta);
            if tg.shape() != [c] || tb.shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("input {s:?} with gamma {:?}, beta {:?}", tg.shape(), tb.shape()),
                ));
            }
            let count = n * hw;
            let xd = t.data();
            let mut stats = None;
            let (mean, rstd): (Vec<f64>, Vec<f64>) = match mode {
                BatchNormMode::Train => {
                    if count < 2 {
                        return Err(Error::shape(
                            "batch_norm",
                            format!("training mode needs N*H*W >= 2, input is {s:?}"),
                        ));
                    }
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            sum += xd[base..base + hw].iter().sum::<f64>();
                        }
                        let m = sum / count as f64;
                        let mut sq = 0.0;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            sq += xd[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                        }
                        mean[ch] = m;
                        var[ch] = sq / count as f64;
                    }
                    let rstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                    stats = Some(BatchStats {
                        mean: mean.clone(),
                        var_unbiased: unbiased,
                    });
                    (mean, rstd)
                }
                BatchNormMode::Eval {
                    running_mean,
                    running_var,
                } => {
                    if running_mean.len() != c || running_var.len() != c {
                        return Err(Error::shape(
                            "batch_norm",
                            format!("running stats of len {} for {c} channels", running_mean.len()),
                        ));
                    }
                    (
                        running_mean.to_vec(),
                        running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                    )
                }
            };
            let mut xhat = vec![0.0; t.numel()];
            let mut data = vec![0.0; t.numel()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let (gm, bt) = (tg.data()[ch], tb.data()[ch]);
                    for i in base..base + hw {
                        let xh = (xd[i] - mean[ch]) * rstd[ch];
                        xhat[i] = xh;
                        data[i] = xh * gm + bt;
                    }
                }
            }
            let training = matches!(mode, BatchNormMode::Train);
            (Tensor::from_parts(s.to_vec(), data), xhat, rstd, stats, training)
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            },
        );
        Ok((v, stats))
    }
}

pub(super) fn softmax_backward(x: Var, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let d = *out.shape().last().unwrap();
    let y = out.data();
    let gx = sink.buf(x);
    for r in 0..y.len() / d {
        let range = r * d..(r + 1) * d;
        let dot: f64 = y[range.clone()]
            .iter()
            .zip(&gout[range.clone()])
            .map(|(a, b)| a * b)
            .sum();
        for i in range {
            gx[i] += y[i] * (gout[i] - dot);
        }
    }
}

pub(super) fn layer_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    gout: &[f64],
    sink: &mut GradSink<'_>,
) {
    let gm = sink.value(gamma).data();
    let d = gm.len();
    let rows = rstd.len();
    if sink.wants(gamma) {
        let gg = sink.buf(gamma);
        for r in 0..rows {
            for j in 0..d {
                gg[j] += gout[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if sink.wants(beta) {
        let gb = sink.buf(beta);
        for r in 0..rows {
            for j in 0..d {
                gb[j] += gout[r * d + j];
            }
        }
    }
    if sink.wants(x) {
        let gx = sink.buf(x);
        for r in 0..rows {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for j in 0..d {
                let g = gout[r * d + j] * gm[j];
                sum_g += g;
                sum_gx += g * xhat[r * d + j];
            }
            let inv_d = 1.0 / d as f64;
            for j in 0..d {
                let g = gout[r * d + j] * gm[j];
                gx[r * d + j] += rstd[r] * (g - inv_d * sum_g - xhat[r * d + j] * inv_d * sum_gx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    training: bool,
    gout: &[f64],
    sink: &mut GradSink<'_>,
) {
    let s = sink.value(x).shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let gm = sink.value(gamma).data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sum_g[ch] += gout[i];
                sum_gx[ch] += gout[i] * xhat[i];
            }
        }
    }
    if sink.wants(gamma) {
        for (g, v) in sink.buf(gamma).iter_mut().zip(&sum_gx) {
            *g += v;
        }
    }
    if sink.wants(beta) {
        for (g, v) in sink.buf(beta).iter_mut().zip(&sum_g) {
            *g += v;
        }
    }
    if sink.wants(x) {
        let count = (n * hw) as f64;
        let gx = sink.buf(x);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let k = gm[ch] * rstd[ch];
                for i in base..base + hw {
                    gx[i] += if training {
                        k * (gout[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                    } else {
                        k * gout[i]
                    };
                }
            }
        }
    }
}
