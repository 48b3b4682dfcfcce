use serde::{Deserialize, Serialize};

use super::{conv_backward_corrupted, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D cross-correlation with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            ..Self::default()
        }
    }

    pub fn dilated(dilation: usize, padding: usize) -> Self {
        Self {
            dilation,
            padding,
            ..Self::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output length along one axis, or `None` if the dilated kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn geometry(xs: &[usize], ws: &[usize], o: &ConvOpts) -> Result<Geometry> {
    let err = |msg: String| Error::shape("conv2d", msg);
    if xs.len() != 4 || ws.len() != 4 {
        return Err(err(format!("input {xs:?} and weight {ws:?} must be 4-D")));
    }
    if o.stride == 0 || o.dilation == 0 || o.groups == 0 {
        return Err(err(format!("stride, dilation and groups must be >= 1, got {o:?}")));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin % o.groups != 0 || cout % o.groups != 0 || cin / o.groups != cin_g {
        return Err(err(format!(
            "input {xs:?} incompatible with weight {ws:?} at groups={}",
            o.groups
        )));
    }
    let (Some(oh), Some(ow)) = (o.out_len(h, kh), o.out_len(w, kw)) else {
        return Err(err(format!("input {xs:?} too small for weight {ws:?} with {o:?}")));
    };
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        cin_g,
        cout_g: cout / o.groups,
    })
}

/// Output columns `ow` whose input column `ow*s - p + kj*d` lies inside `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    // input = ow*stride + offset
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = in_len as isize - offset;
    let hi = if hi_num <= 0 {
        0
    } else {
        ((hi_num as usize).div_ceil(stride)).min(out_len)
    };
    (lo.min(hi), hi)
}

impl Graph {
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let tw = self.value(w);
            let g = geometry(tx.shape(), tw.shape(), &opts)?;
            let bias = match b {
                Some(b) => {
                    let tb = self.value(b);
                    if tb.shape() != [g.cout] {
                        return Err(Error::shape(
                            "conv2d",
                            format!("bias {:?} for {} output channels", tb.shape(), g.cout),
                        ));
                    }
                    Some(tb.data().to_vec())
                }
                None => None,
            };
            let mut data = vec![0.0; g.n * g.cout * g.oh * g.ow];
            conv_forward(tx.data(), tw.data(), bias.as_deref(), &mut data, &g, &opts);
            Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], data)
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, opts }))
    }
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, out: &mut [f64], g: &Geometry, o: &ConvOpts) {
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let oplane = &mut out[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(b) = bias {
                oplane.fill(b[oc]);
            }
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let iplane = &x[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    let off_h = ki as isize * d as isize - p;
                    let (oh0, oh1) = valid_range(g.oh, g.h, off_h, s);
                    for kj in 0..g.kw {
                        let wv = wt[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let off_w = kj as isize * d as isize - p;
                        let (ow0, ow1) = valid_range(g.ow, g.w, off_w, s);
                        for oh in oh0..oh1 {
                            let ih = (oh * s) as isize + off_h;
                            let irow = &iplane[ih as usize * g.w..][..g.w];
                            let orow = &mut oplane[oh * g.ow..][..g.ow];
                            for ow in ow0..ow1 {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                orow[ow] += wv * irow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_backward(
    x: Var,
    w: Var,
    b: Option<Var>,
    o: &ConvOpts,
    _out: &Tensor,
    gout: &[f64],
    sink: &mut GradSink<'_>,
) {
    let tx = sink.value(x);
    let tw = sink.value(w);
    let g = geometry(tx.shape(), tw.shape(), o).expect("geometry validated in forward");
    let (xd, wd) = (tx.data(), tw.data());
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);

    let mut gx = want_x.then(|| vec![0.0; xd.len()]);
    let mut gw = want_w.then(|| vec![0.0; wd.len()]);
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let gplane = &gout[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let ibase = (n * g.cin + ic) * g.h * g.w;
                for ki in 0..g.kh {
                    let off_h = ki as isize * d as isize - p;
                    let (oh0, oh1) = valid_range(g.oh, g.h, off_h, s);
                    for kj in 0..g.kw {
                        let widx = ((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj;
                        let wv = wd[widx];
                        let off_w = kj as isize * d as isize - p;
                        let (ow0, ow1) = valid_range(g.ow, g.w, off_w, s);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = ((oh * s) as isize + off_h) as usize;
                            let grow = &gplane[oh * g.ow..][..g.ow];
                            let row = ibase + ih * g.w;
                            for ow in ow0..ow1 {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                if gw.is_some() {
                                    acc += grow[ow] * xd[row + iw];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[row + iw] += grow[ow] * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for (a, v) in sink.buf(x).iter_mut().zip(gx) {
            *a += v;
        }
    }
    if let Some(mut gw) = gw {
        if conv_backward_corrupted() {
            for v in &mut gw {
                *v *= 1.05;
            }
        }
        for (a, v) in sink.buf(w).iter_mut().zip(gw) {
            *a += v;
        }
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let gb = sink.buf(b);
            for n in 0..g.n {
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    let plane = &gout[(n * g.cout + oc) * g.oh * g.ow..][..g.oh * g.ow];
                    *gbv += plane.iter().sum::<f64>();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference with explicit zero padding.
    fn reference(x: &Tensor, w: &Tensor, b: Option<&Tensor>, o: ConvOpts) -> Tensor {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
        let ow = (wd + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
        let cout_g = cout / o.groups;
        let _ = cin;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bn in 0..n {
            for oc in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[oc]);
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (i * o.stride + ki * o.dilation) as isize - o.padding as isize;
                                    let iw = (j * o.stride + kj * o.dilation) as isize - o.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((oc * cin_g + icg) * kh + ki) * kw + kj]
                                        * x.at4(bn, ic, ih as usize, iw as usize);
                                }
                            }
                        }
                        let idx = out.idx4(bn, oc, i, j);
                        out.data_mut()[idx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_counting() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, ConvOpts::new(1, 1)).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let wt = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let bt = Tensor::randn(&[4], 1.0, &mut rng);
        let opts = ConvOpts::dilated(2, 2);
        let g = Graph::new();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv2d(x, w, Some(b), opts).unwrap();
        let expect = reference(&xt, &wt, Some(&bt), opts);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn strided_grouped_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (opts, cin, cout) in [
            (ConvOpts::new(2, 1), 3, 5),
            (ConvOpts::new(4, 3), 3, 4),
            (ConvOpts::new(1, 1).with_groups(4), 4, 4),
            (ConvOpts::new(2, 0).with_groups(2), 4, 6),
        ] {
            let k = if opts.stride == 4 { 7 } else { 3 };
            let xt = Tensor::randn(&[2, cin, 9, 8], 1.0, &mut rng);
            let wt = Tensor::randn(&[cout, cin / opts.groups, k, k], 1.0, &mut rng);
            let g = Graph::new();
            let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
            let y = g.conv2d(x, w, None, opts).unwrap();
            let expect = reference(&xt, &wt, None, opts);
            assert_eq!(g.shape(y), expect.shape(), "{opts:?}");
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "{opts:?}");
        }
    }

    #[test]
    fn output_size_law() {
        let o = ConvOpts {
            stride: 2,
            padding: 3,
            dilation: 2,
            groups: 1,
        };
        for h in 5..20 {
            let expect = (h + 2 * 3 - 2 * (3 - 1) - 1) / 2 + 1;
            assert_eq!(o.out_len(h, 3), Some(expect));
        }
        assert_eq!(ConvOpts::default().out_len(2, 3), None);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 5, 5]));
        let w = g.constant(Tensor::ones(&[2, 4, 3, 3]));
        let msg = g.conv2d(x, w, None, ConvOpts::default()).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 5, 5]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }
}
