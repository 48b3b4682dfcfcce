use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let last = out_shape[nd - 1];
    let ls = src_strides[nd - 1];
    let mut written = 0;
    while written < total {
        let base: usize = (0..nd - 1).map(|d| idx[d] * src_strides[d]).sum();
        for k in 0..last {
            out.push(data[base + k * ls]);
        }
        written += last;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl Graph {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            t.reshape(shape)
                .map_err(|_| Error::shape("reshape", format!("cannot reshape {:?} into {shape:?}", t.shape())))?
        };
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let nd = t.ndim();
            let mut seen = vec![false; nd];
            let valid = perm.len() == nd && perm.iter().all(|&p| p < nd && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::shape(
                    "permute",
                    format!("{perm:?} is not a permutation of {:?}", t.shape()),
                ));
            }
            let (shape, data) = permute_data(t.data(), t.shape(), perm);
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn transpose(&self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.value(x).ndim();
        if d0 >= nd || d1 >= nd {
            return Err(Error::shape("transpose", format!("dims {d0},{d1} of rank {nd}")));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let first = xs
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
            let ref_shape = self.shape(*first);
            if axis >= ref_shape.len() {
                return Err(Error::shape("concat", format!("axis {axis} of {ref_shape:?}")));
            }
            let mut total_axis = 0;
            for &v in xs {
                let s = self.shape(v);
                let compatible = s.len() == ref_shape.len()
                    && s.iter()
                        .zip(&ref_shape)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape(
                        "concat",
                        format!("{s:?} vs {ref_shape:?} along axis {axis}"),
                    ));
                }
                total_axis += s[axis];
            }
            let outer: usize = ref_shape[..axis].iter().product();
            let inner: usize = ref_shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for &v in xs {
                    let t = self.value(v);
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = ref_shape;
            shape[axis] = total_axis;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} along axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }
}

pub(super) fn reshape_backward(x: Var, gout: &[f64], sink: &mut GradSink<'_>) {
    if sink.wants(x) {
        for (g, &go) in sink.buf(x).iter_mut().zip(gout) {
            *g += go;
        }
    }
}

pub(super) fn permute_backward(x: Var, perm: &[usize], out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let (_, back) = permute_data(gout, out.shape(), &inverse_perm(perm));
    for (g, go) in sink.buf(x).iter_mut().zip(back) {
        *g += go;
    }
}

pub(super) fn concat_backward(xs: &[Var], axis: usize, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    let shape = out.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let row = shape[axis] * inner;
    let mut offset = 0;
    for &v in xs {
        let chunk = sink.value(v).shape()[axis] * inner;
        if sink.wants(v) {
            let gv = sink.buf(v);
            for o in 0..outer {
                let src = &gout[o * row + offset..o * row + offset + chunk];
                for (g, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
        offset += chunk;
    }
}

pub(super) fn narrow_backward(x: Var, axis: usize, start: usize, out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let in_shape = sink.value(x).shape().to_vec();
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = out.shape()[axis];
    let gx = sink.buf(x);
    for o in 0..outer {
        let dst = (o * in_shape[axis] + start) * inner;
        let src = o * len * inner;
        for k in 0..len * inner {
            gx[dst + k] += gout[src + k];
        }
    }
}
