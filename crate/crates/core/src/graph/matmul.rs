use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Affine map over the last dim: `x[.., K] · w[N, K]ᵀ + b[N]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let tw = self.value(w);
            let xs = tx.shape();
            let ws = tw.shape();
            let k = *xs.last().unwrap();
            if ws.len() != 2 || ws[1] != k {
                return Err(Error::shape("linear", format!("input {xs:?} with weight {ws:?}")));
            }
            let n = ws[0];
            let bias = match b {
                Some(b) => {
                    let tb = self.value(b);
                    if tb.shape() != [n] {
                        return Err(Error::shape("linear", format!("bias {:?} for {n} outputs", tb.shape())));
                    }
                    Some(tb.data().to_vec())
                }
                None => None,
            };
            let m = tx.numel() / k;
            let (xd, wd) = (tx.data(), tw.data());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let xr = &xd[i * k..(i + 1) * k];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    let wr = &wd[j * k..(j + 1) * k];
                    let mut s = bias.as_ref().map_or(0.0, |b| b[j]);
                    for p in 0..k {
                        s += xr[p] * wr[p];
                    }
                    orow[j] = s;
                }
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Batched matrix product `a[.., M, K] · b[.., K, N]` with equal batch dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let tb = self.value(b);
            let (sa, sb) = (ta.shape(), tb.shape());
            let nd = sa.len();
            if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 2] {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
            let batch: usize = sa[..nd - 2].iter().product();
            let mut data = vec![0.0; batch * m * n];
            matmul_into(ta.data(), tb.data(), &mut data, batch, m, k, n);
            let mut shape = sa.to_vec();
            shape[nd - 1] = n;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Matmul(a, b)))
    }
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

pub(super) fn linear_backward(x: Var, w: Var, b: Option<Var>, gout: &[f64], sink: &mut GradSink<'_>) {
    let tx = sink.value(x);
    let tw = sink.value(w);
    let k = tw.shape()[1];
    let n = tw.shape()[0];
    let m = tx.numel() / k;
    let (xd, wd) = (tx.data(), tw.data());
    if sink.wants(x) {
        let gx = sink.buf(x);
        for i in 0..m {
            let grow = &mut gx[i * k..(i + 1) * k];
            for j in 0..n {
                let go = gout[i * n + j];
                let wr = &wd[j * k..(j + 1) * k];
                for p in 0..k {
                    grow[p] += go * wr[p];
                }
            }
        }
    }
    if sink.wants(w) {
        let gw = sink.buf(w);
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                let go = gout[i * n + j];
                let grow = &mut gw[j * k..(j + 1) * k];
                for p in 0..k {
                    grow[p] += go * xr[p];
                }
            }
        }
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let gb = sink.buf(b);
            for i in 0..m {
                for j in 0..n {
                    gb[j] += gout[i * n + j];
                }
            }
        }
    }
}

pub(super) fn matmul_backward(a: Var, b: Var, gout: &[f64], sink: &mut GradSink<'_>) {
    let ta = sink.value(a);
    let tb = sink.value(b);
    let nd = ta.ndim();
    let (m, k) = (ta.shape()[nd - 2], ta.shape()[nd - 1]);
    let n = tb.shape()[nd - 1];
    let batch = ta.numel() / (m * k);
    let (ad, bd) = (ta.data(), tb.data());
    if sink.wants(a) {
        // dA = G · Bᵀ
        let ga = sink.buf(a);
        for bi in 0..batch {
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += gout[bi * m * n + i * n + j] * bd[bi * k * n + p * n + j];
                    }
                    ga[bi * m * k + i * k + p] += s;
                }
            }
        }
    }
    if sink.wants(b) {
        // dB = Aᵀ · G
        let gb = sink.buf(b);
        for bi in 0..batch {
            for i in 0..m {
                for p in 0..k {
                    let av = ad[bi * m * k + i * k + p];
                    let grow = &mut gb[bi * k * n + p * n..bi * k * n + (p + 1) * n];
                    let gorow = &gout[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                    for j in 0..n {
                        grow[j] += av * gorow[j];
                    }
                }
            }
        }
    }
}
