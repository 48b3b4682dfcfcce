use super::{Binary, GradSink, Graph, Op, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with zeros on broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides(shape);
    let mut s = vec![0; nd];
    for i in 0..shape.len() {
        let j = nd - shape.len() + i;
        if shape[i] != 1 {
            s[j] = own[i];
        }
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over every output element in order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let total: usize = out.iter().product();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for k in 0..last {
            f(o + k, ia + k * la, ib + k * lb);
        }
        o += last;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let tb = self.value(b);
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(
                    "broadcast",
                    format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
                )
            })?;
            let (da, db) = (ta.data(), tb.data());
            let n: usize = shape.iter().product();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let data = if ta.shape() == tb.shape() {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let mut data = vec![0.0; n];
                let sa = broadcast_strides(ta.shape(), &shape);
                let sb = broadcast_strides(tb.shape(), &shape);
                for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
                data
            };
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&self, kind: Unary, x: Var) -> Var {
        let out = {
            let t = self.value(x);
            t.map(|v| match kind {
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(0.0),
                Unary::Gelu => gelu(v),
                Unary::Ln => v.ln(),
                Unary::Exp => v.exp(),
                Unary::Sqrt => v.sqrt(),
            })
        };
        self.push(out, Op::Unary(kind, x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    /// `x * scale + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn powf(&self, x: Var, exponent: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(exponent));
        self.push(out, Op::Powf { x, exponent })
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }
}

pub(super) fn binary_backward(kind: Binary, a: Var, b: Var, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    let ta = sink.value(a);
    let tb = sink.value(b);
    let sa = broadcast_strides(ta.shape(), out.shape());
    let sb = broadcast_strides(tb.shape(), out.shape());
    let (da, db) = (ta.data(), tb.data());
    if sink.wants(a) {
        let ga = sink.buf(a);
        for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
            ga[i] += match kind {
                Binary::Add | Binary::Sub => gout[o],
                Binary::Mul => gout[o] * db[j],
                Binary::Div => gout[o] / db[j],
            }
        });
    }
    if sink.wants(b) {
        let gb = sink.buf(b);
        for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
            gb[j] += match kind {
                Binary::Add => gout[o],
                Binary::Sub => -gout[o],
                Binary::Mul => gout[o] * da[i],
                Binary::Div => -gout[o] * da[i] / (db[j] * db[j]),
            }
        });
    }
}

pub(super) fn unary_backward(kind: Unary, x: Var, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let xv = sink.value(x).data();
    let y = out.data();
    let gx = sink.buf(x);
    for i in 0..gx.len() {
        let d = match kind {
            Unary::Sigmoid => y[i] * (1.0 - y[i]),
            Unary::Relu => {
                if xv[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(xv[i]),
            Unary::Ln => 1.0 / xv[i],
            Unary::Exp => y[i],
            Unary::Sqrt => 0.5 / y[i],
        };
        gx[i] += gout[i] * d;
    }
}

pub(super) fn affine_backward(x: Var, scale: f64, gout: &[f64], sink: &mut GradSink<'_>) {
    if sink.wants(x) {
        for (g, &go) in sink.buf(x).iter_mut().zip(gout) {
            *g += go * scale;
        }
    }
}

pub(super) fn powf_backward(x: Var, e: f64, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let xv = sink.value(x).data();
    let gx = sink.buf(x);
    for i in 0..gx.len() {
        let d = if e == 0.0 { 0.0 } else { e * xv[i].powf(e - 1.0) };
        gx[i] += gout[i] * d;
    }
}

pub(super) fn clamp_backward(x: Var, lo: f64, hi: f64, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let xv = sink.value(x).data();
    let gx = sink.buf(x);
    for i in 0..gx.len() {
        if xv[i] >= lo && xv[i] <= hi {
            gx[i] += gout[i];
        }
    }
}
