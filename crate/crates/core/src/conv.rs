//! 2-D convolution (cross-correlation) with stride, zero padding and
//! channel groups, plus its backward rules. Depthwise convolution is the
//! `groups == channels` special case.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BwdCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec { stride: (stride, stride), padding: (padding, padding), groups }
    }

    /// 3x3 "same" convolution: stride 1, padding 1.
    pub fn same3x3() -> Self {
        Conv2dSpec::new(1, 1, 1)
    }
}

/// Output length along one axis; errors when the kernel does not fit the
/// padded input.
fn out_dim(in_len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::config("conv2d: kernel and stride must be at least 1"));
    }
    if in_len + 2 * pad < k {
        return Err(Error::dim(format!(
            "conv2d: kernel {k} exceeds padded input extent {}",
            in_len + 2 * pad
        )));
    }
    Ok((in_len + 2 * pad - k) / stride + 1)
}

/// Half-open range of output positions whose sampled input index
/// `o*stride - pad + k_off` falls inside `[0, in_len)`.
fn out_range(in_len: usize, k_off: usize, stride: usize, pad: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let max_i = in_len as isize - 1 + pad as isize - k_off as isize;
    if max_i < 0 || lo >= out_len {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_len);
    if hi <= lo {
        (0, 0)
    } else {
        (lo, hi)
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, spec: &Conv2dSpec) -> Result<ConvDims> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wc, kh, kw) = wt.dims4()?;
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::config(format!(
            "conv2d: groups {g} must divide both {cin} input and {cout} output channels"
        )));
    }
    if wc != cin / g {
        return Err(Error::dim(format!(
            "conv2d: weight {:?} expects {} input channels per group, input {:?} provides {}",
            wt.shape(),
            wc,
            x.shape(),
            cin / g
        )));
    }
    let oh = out_dim(h, kh, spec.stride.0, spec.padding.0)?;
    let ow = out_dim(w, kw, spec.stride.1, spec.padding.1)?;
    Ok(ConvDims { b, cin, h, w, cout, kh, kw, oh, ow })
}

impl<T: Scalar> Tape<T> {
    /// `x: [B,Cin,H,W]`, `weight: [Cout,Cin/groups,kh,kw]`, optional
    /// `bias: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let d = conv_dims(self.value(x), self.value(weight), &spec)?;
        if let Some(bv) = bias {
            if self.value(bv).shape() != [d.cout] {
                return Err(Error::dim(format!(
                    "conv2d: bias must have shape [{}], got {:?}",
                    d.cout,
                    self.value(bv).shape()
                )));
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data().to_vec()),
            &spec,
            &d,
        );
        let out = Tensor::new(vec![d.b, d.cout, d.oh, d.ow], out)?;
        let mut parents = vec![x, weight];
        if let Some(bv) = bias {
            parents.push(bv);
        }
        Ok(self.push(out, parents, Box::new(Conv2dOp { spec, has_bias: bias.is_some() })))
    }
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<Vec<T>>,
    spec: &Conv2dSpec,
    d: &ConvDims,
) -> Vec<T> {
    let g = spec.groups;
    let (icg, ocg) = (d.cin / g, d.cout / g);
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut out = vec![T::zero(); d.b * d.cout * d.oh * d.ow];

    for bi in 0..d.b {
        for gi in 0..g {
            for ocl in 0..ocg {
                let oc = gi * ocg + ocl;
                let y = &mut out[(bi * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                if let Some(bv) = &bias {
                    y.iter_mut().for_each(|v| *v = bv[oc]);
                }
                for icl in 0..icg {
                    let ic = gi * icg + icl;
                    let xs = &x[(bi * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                    for khi in 0..d.kh {
                        let (oh_lo, oh_hi) = out_range(d.h, khi, sh, ph, d.oh);
                        for kwi in 0..d.kw {
                            let wv = w[((oc * icg + icl) * d.kh + khi) * d.kw + kwi];
                            let (ow_lo, ow_hi) = out_range(d.w, kwi, sw, pw, d.ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = oh * sh + khi - ph;
                                let iw0 = ow_lo * sw + kwi - pw;
                                let yrow = &mut y[oh * d.ow + ow_lo..][..ow_hi - ow_lo];
                                if sw == 1 {
                                    let xrow = &xs[ih * d.w + iw0..][..ow_hi - ow_lo];
                                    for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                        *yv += wv * xv;
                                    }
                                } else {
                                    for (j, yv) in yrow.iter_mut().enumerate() {
                                        *yv += wv * xs[ih * d.w + iw0 + j * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv2dOp {
    spec: Conv2dSpec,
    has_bias: bool,
}

impl<T: Scalar> TapeOp<T> for Conv2dOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (x, weight) = (ctx.parent(0), ctx.parent(1));
        let d = conv_dims(ctx.val(x), ctx.val(weight), &self.spec).expect("validated at forward");
        let g = self.spec.groups;
        let (icg, ocg) = (d.cin / g, d.cout / g);
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let gout = ctx.out_grad().to_vec();

        if ctx.needs(x) {
            let wd = ctx.val(weight).data().to_vec();
            let mut dx = vec![T::zero(); ctx.val(x).numel()];
            for bi in 0..d.b {
                for gi in 0..g {
                    for ocl in 0..ocg {
                        let oc = gi * ocg + ocl;
                        let gy = &gout[(bi * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                        for icl in 0..icg {
                            let ic = gi * icg + icl;
                            let dxs = &mut dx[(bi * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                            for khi in 0..d.kh {
                                let (oh_lo, oh_hi) = out_range(d.h, khi, sh, ph, d.oh);
                                for kwi in 0..d.kw {
                                    let wv = wd[((oc * icg + icl) * d.kh + khi) * d.kw + kwi];
                                    if wv == T::zero() {
                                        continue;
                                    }
                                    let (ow_lo, ow_hi) = out_range(d.w, kwi, sw, pw, d.ow);
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh * sh + khi - ph;
                                        let iw0 = ow_lo * sw + kwi - pw;
                                        let grow = &gy[oh * d.ow + ow_lo..][..ow_hi - ow_lo];
                                        if sw == 1 {
                                            let dxrow = &mut dxs[ih * d.w + iw0..][..ow_hi - ow_lo];
                                            for (dv, &gv) in dxrow.iter_mut().zip(grow) {
                                                *dv += wv * gv;
                                            }
                                        } else {
                                            for (j, &gv) in grow.iter().enumerate() {
                                                dxs[ih * d.w + iw0 + j * sw] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            ctx.add(x, &dx);
        }

        if ctx.needs(weight) {
            let xd = ctx.val(x).data().to_vec();
            let mut dw = vec![T::zero(); ctx.val(weight).numel()];
            for bi in 0..d.b {
                for gi in 0..g {
                    for ocl in 0..ocg {
                        let oc = gi * ocg + ocl;
                        let gy = &gout[(bi * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                        for icl in 0..icg {
                            let ic = gi * icg + icl;
                            let xs = &xd[(bi * d.cin + ic) * d.h * d.w..][..d.h * d.w];
                            for khi in 0..d.kh {
                                let (oh_lo, oh_hi) = out_range(d.h, khi, sh, ph, d.oh);
                                for kwi in 0..d.kw {
                                    let (ow_lo, ow_hi) = out_range(d.w, kwi, sw, pw, d.ow);
                                    if ow_lo >= ow_hi {
                                        continue;
                                    }
                                    let mut acc = T::zero();
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh * sh + khi - ph;
                                        let iw0 = ow_lo * sw + kwi - pw;
                                        let grow = &gy[oh * d.ow + ow_lo..][..ow_hi - ow_lo];
                                        if sw == 1 {
                                            let xrow = &xs[ih * d.w + iw0..][..ow_hi - ow_lo];
                                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                                acc += gv * xv;
                                            }
                                        } else {
                                            for (j, &gv) in grow.iter().enumerate() {
                                                acc += gv * xs[ih * d.w + iw0 + j * sw];
                                            }
                                        }
                                    }
                                    dw[((oc * icg + icl) * d.kh + khi) * d.kw + kwi] += acc;
                                }
                            }
                        }
                    }
                }
            }
            ctx.add(weight, &dw);
        }

        if self.has_bias {
            let bias = ctx.parent(2);
            if ctx.needs(bias) {
                let buf = ctx.grad_mut(bias);
                for bi in 0..d.b {
                    for oc in 0..d.cout {
                        let gy = &gout[(bi * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
                        buf[oc] += gy.iter().copied().sum::<T>();
                    }
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "conv2d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Definition-level reference convolution: plain seven-deep loop over
    /// the padded input, no range precomputation.
    fn naive_conv<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &Conv2dSpec,
    ) -> Tensor<T> {
        let (b, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let g = spec.groups;
        let (icg, ocg) = (cin / g, cout / g);
        let oh = (h + 2 * spec.padding.0 - kh) / spec.stride.0 + 1;
        let ow = (wd + 2 * spec.padding.1 - kw) / spec.stride.1 + 1;
        let mut out = Tensor::zeros(vec![b, cout, oh, ow]);
        for bi in 0..b {
            for oc in 0..cout {
                let gi = oc / ocg;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.map_or(T::zero(), |bv| bv.data()[oc]);
                        for icl in 0..icg {
                            let ic = gi * icg + icl;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = i as isize * spec.stride.0 as isize + ki as isize
                                        - spec.padding.0 as isize;
                                    let iw = j as isize * spec.stride.1 as isize + kj as isize
                                        - spec.padding.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((bi * cin + ic) * h + ih as usize) * wd + iw as usize];
                                    let wv =
                                        w.data()[((oc * icg + icl) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_neighbors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, Conv2dSpec::same3x3()).unwrap();
        let yd = tape.value(y).data();
        // padding 1: corners see 4 inputs, edges 6, center all 9
        assert_eq!(yd, &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn stride_two_output_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 5, 7]));
        let w = tape.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 3, 4]);
    }

    #[test]
    fn depthwise_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64 - 5.0));
        let w = tape.constant(Tensor::full(vec![3, 1, 1, 1], 1.0));
        let spec = Conv2dSpec { stride: (1, 1), padding: (0, 0), groups: 3 };
        let y = tape.conv2d(x, w, None, spec).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        let err = tape.conv2d(x, w, None, Conv2dSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn groups_must_divide_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![4, 1, 1, 1]));
        let spec = Conv2dSpec { stride: (1, 1), padding: (0, 0), groups: 2 };
        let err = tape.conv2d(x, w, None, spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn matches_reference_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cases = [
            (1, 1, (1, 3, 5, 5), (2, 3, 3, 3), (1, 1)),
            (2, 1, (2, 2, 6, 7), (3, 2, 3, 3), (1, 1)),
            (1, 2, (1, 4, 5, 5), (4, 2, 3, 3), (0, 0)),
            (1, 4, (2, 4, 4, 4), (4, 1, 3, 3), (1, 1)), // depthwise
            (1, 1, (1, 1, 4, 4), (1, 1, 1, 1), (0, 0)), // pointwise
            (3, 1, (1, 2, 9, 9), (2, 2, 2, 2), (2, 2)),
        ];
        for (si, g, xs, ws, pad) in cases {
            let spec =
                Conv2dSpec { stride: (si, si), padding: pad, groups: g };
            let x = Tensor::<f64>::rand_uniform(vec![xs.0, xs.1, xs.2, xs.3], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::rand_uniform(vec![ws.0, ws.1, ws.2, ws.3], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(vec![ws.0], -0.5, 0.5, &mut rng);
            let expected = naive_conv(&x, &w, Some(&b), &spec);

            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x);
            let wv = tape.constant(w);
            let bv = tape.constant(b);
            let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
            assert!(
                tape.value(y).max_abs_diff(&expected).unwrap() < 1e-12,
                "spec {spec:?}"
            );
        }
    }

    #[test]
    fn conv2d_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (spec, xs, ws) in [
            (Conv2dSpec::same3x3(), [1, 2, 5, 5], [3, 2, 3, 3]),
            (Conv2dSpec::new(2, 1, 1), [2, 2, 4, 5], [2, 2, 3, 3]),
            (Conv2dSpec { stride: (1, 1), padding: (1, 1), groups: 2 }, [1, 4, 4, 4], [2, 2, 3, 3]),
            (Conv2dSpec { stride: (1, 1), padding: (0, 0), groups: 3 }, [1, 3, 3, 3], [3, 1, 2, 2]),
        ] {
            let x = Tensor::<f64>::rand_uniform(xs.to_vec(), -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::rand_uniform(ws.to_vec(), -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(vec![ws[0]], -0.5, 0.5, &mut rng);
            let report = grad_check(
                &[("x", x), ("w", w), ("b", b)],
                &|tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), spec)?;
                    let s = tape.silu(y);
                    Ok(tape.sum_all(s))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.pass, "spec {spec:?}: worst {} at {}", report.worst_rel_err, report.worst_site);
        }
    }

    #[test]
    fn out_range_matches_bruteforce() {
        for in_len in 1..8usize {
            for k in 1..4usize {
                for s in 1..4usize {
                    for p in 0..3usize {
                        if in_len + 2 * p < k {
                            continue;
                        }
                        let out_len = (in_len + 2 * p - k) / s + 1;
                        for koff in 0..k {
                            let (lo, hi) = out_range(in_len, koff, s, p, out_len);
                            for o in 0..out_len {
                                let idx = o as isize * s as isize + koff as isize - p as isize;
                                let valid = idx >= 0 && (idx as usize) < in_len;
                                let inside = o >= lo && o < hi;
                                assert_eq!(valid, inside,
                                    "in={in_len} k={k} s={s} p={p} koff={koff} o={o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
