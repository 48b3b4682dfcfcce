use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Spatial pooling kinds over `[N, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over H and W, giving `[N, C, 1, 1]`.
    GlobalAvg,
    /// Mean over W per row, giving `[N, C, H, 1]`.
    HorizontalAvg,
    /// Mean over H per column, giving `[N, C, 1, W]`.
    VerticalAvg,
}

/// Maps each input flat index to its output index when `axes` are averaged out.
fn reduced_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_strides = strides(&out_shape);
    let nd = shape.len();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let mut o = 0;
        for d in 0..nd {
            if out_shape[d] != 1 {
                o += idx[d] * out_strides[d];
            }
        }
        map.push(o);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

impl Graph {
    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let shape = t.shape();
            if axes.iter().any(|&a| a >= shape.len()) || axes.is_empty() {
                return Err(Error::shape("mean", format!("axes {axes:?} invalid for {shape:?}")));
            }
            let (out_shape, map) = reduced_index_map(shape, axes);
            let count: usize = axes.iter().map(|&a| shape[a]).product();
            let mut data = vec![0.0; out_shape.iter().product()];
            for (i, &o) in map.iter().enumerate() {
                data[o] += t.data()[i];
            }
            for v in &mut data {
                *v /= count as f64;
            }
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.push(out, Op::MeanAxes { x, axes: axes.to_vec() }))
    }

    pub fn pool(&self, x: Var, kind: PoolKind) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 4 {
            return Err(Error::shape("pool", format!("expected 4-D input, got {shape:?}")));
        }
        match kind {
            PoolKind::GlobalAvg => self.mean_axes(x, &[2, 3]),
            PoolKind::HorizontalAvg => self.mean_axes(x, &[3]),
            PoolKind::VerticalAvg => self.mean_axes(x, &[2]),
        }
    }
}

pub(super) fn sum_all_backward(x: Var, gout: &[f64], sink: &mut GradSink<'_>) {
    if sink.wants(x) {
        for g in sink.buf(x) {
            *g += gout[0];
        }
    }
}

pub(super) fn mean_axes_backward(x: Var, axes: &[usize], _out: &Tensor, gout: &[f64], sink: &mut GradSink<'_>) {
    if !sink.wants(x) {
        return;
    }
    let shape = sink.value(x).shape().to_vec();
    let (_, map) = reduced_index_map(&shape, axes);
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let inv = 1.0 / count as f64;
    let gx = sink.buf(x);
    for (i, &o) in map.iter().enumerate() {
        gx[i] += gout[o] * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_of_constant_is_constant() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
        for kind in [PoolKind::GlobalAvg, PoolKind::HorizontalAvg, PoolKind::VerticalAvg] {
            let y = g.pool(x, kind).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 1.75));
        }
    }

    #[test]
    fn pooling_shapes_and_row_index_average() {
        let (h, w) = (4, 6);
        let data: Vec<f64> = (0..h * w).map(|k| (k / w) as f64).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, h, w], data).unwrap());
        let hap = g.pool(x, PoolKind::HorizontalAvg).unwrap();
        let vap = g.pool(x, PoolKind::VerticalAvg).unwrap();
        assert_eq!(g.shape(hap), vec![1, 1, h, 1]);
        assert_eq!(g.shape(vap), vec![1, 1, 1, w]);
        for i in 0..h {
            assert_eq!(g.value(hap).data()[i], i as f64);
        }
        for &v in g.value(vap).data() {
            assert_eq!(v, (h as f64 - 1.0) / 2.0);
        }
    }

    #[test]
    fn gap_arithmetic_mean() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = g.pool(x, PoolKind::GlobalAvg).unwrap();
        assert_eq!(g.shape(y), vec![1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 2.5);
    }
}
