//! Core differentiable operations: elementwise arithmetic, matrix
//! multiplication, normalization layers, reductions and pointwise
//! nonlinearities. Convolution lives in [`crate::conv`].

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, silu, silu_prime, softplus, Scalar};
use crate::tape::{BwdCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Box::new(AddOp)))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Box::new(SubOp)))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, vec![a, b], Box::new(MulOp)))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::c(factor);
        let out = self.value(x).map(|v| v * c);
        self.push(out, vec![x], Box::new(ScaleOp { factor: c }))
    }

    /// Same data viewed under a new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, vec![x], Box::new(ReshapeOp)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), vec![x], Box::new(ReduceAllOp { mean: false }))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::c(v.numel() as f64);
        let s: T = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), vec![x], Box::new(ReduceAllOp { mean: true }))
    }

    /// Add a rank-1 bias over the last axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().ok_or_else(|| Error::dim("bias_add on rank-0 tensor"))?;
        if vb.shape() != [d] {
            return Err(Error::dim(format!(
                "bias_add: input {:?} needs bias [{}], got {:?}",
                vx.shape(),
                d,
                vb.shape()
            )));
        }
        let bd = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, vec![x, bias], Box::new(BiasAddOp { d })))
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul: inner dimensions differ, {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, vec![a, b], Box::new(MatmulOp { m, k: ka, n })))
    }

    pub fn pointwise(&mut self, kind: Pointwise, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.eval(v));
        self.push(out, vec![x], Box::new(PointwiseOp { kind }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Silu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Softplus, x)
    }

    /// Layer normalization over the last axis with a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| Error::dim("layer_norm on rank-0 tensor"))?;
        if d == 0 {
            return Err(Error::dim("layer_norm over an empty axis"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [d] {
                return Err(Error::dim(format!(
                    "layer_norm: {name} must have shape [{}], got {:?}",
                    d,
                    self.value(v).shape()
                )));
            }
        }
        let rows = vx.numel() / d;
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); rows * d];
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for i in 0..d {
                let xhat = (row[i] - mean) * rstd;
                out[r * d + i] = gd[i] * xhat + bd[i];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, vec![x, gamma, beta], Box::new(LayerNormOp { d, means, rstds })))
    }

    /// Group normalization over `[B,C,H,W]` with per-channel affine map;
    /// statistics are computed per sample and channel group, never across
    /// the batch.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "group_norm: {name} must have shape [{}], got {:?}",
                    c,
                    self.value(v).shape()
                )));
            }
        }
        let cpg = c / groups;
        let m = cpg * h * w; // elements per normalization group
        let inv_m = T::one() / T::c(m as f64);
        let eps = T::c(eps);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        let mut means = vec![T::zero(); b * groups];
        let mut rstds = vec![T::zero(); b * groups];
        for bi in 0..b {
            for g in 0..groups {
                let base = bi * c * h * w + g * cpg * h * w;
                let slab = &xd[base..base + m];
                let mean = slab.iter().copied().sum::<T>() * inv_m;
                let var = slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                let rstd = T::one() / (var + eps).sqrt();
                means[bi * groups + g] = mean;
                rstds[bi * groups + g] = rstd;
                for cl in 0..cpg {
                    let ch = g * cpg + cl;
                    let (gain, bias) = (gd[ch], bd[ch]);
                    let off = base + cl * h * w;
                    for i in 0..h * w {
                        out[off + i] = gain * (xd[off + i] - mean) * rstd + bias;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Box::new(GroupNormOp { groups, means, rstds }),
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for bc in 0..b * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(out, vec![x], Box::new(UpsampleNearest2Op)))
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

struct AddOp;

impl<T: Scalar> TapeOp<T> for AddOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.out_grad().to_vec();
        let (a, b) = (ctx.parent(0), ctx.parent(1));
        ctx.add(a, &g);
        ctx.add(b, &g);
    }

    fn name(&self) -> &'static str {
        "add"
    }
}

struct SubOp;

impl<T: Scalar> TapeOp<T> for SubOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.out_grad().to_vec();
        let (a, b) = (ctx.parent(0), ctx.parent(1));
        ctx.add(a, &g);
        if ctx.needs(b) {
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            ctx.add(b, &neg);
        }
    }

    fn name(&self) -> &'static str {
        "sub"
    }
}

struct MulOp;

impl<T: Scalar> TapeOp<T> for MulOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (a, b) = (ctx.parent(0), ctx.parent(1));
        if ctx.needs(a) {
            let contrib: Vec<T> = ctx
                .out_grad()
                .iter()
                .zip(ctx.val(b).data())
                .map(|(&g, &v)| g * v)
                .collect();
            ctx.add(a, &contrib);
        }
        if ctx.needs(b) {
            let contrib: Vec<T> = ctx
                .out_grad()
                .iter()
                .zip(ctx.val(a).data())
                .map(|(&g, &v)| g * v)
                .collect();
            ctx.add(b, &contrib);
        }
    }

    fn name(&self) -> &'static str {
        "mul"
    }
}

struct ScaleOp<T> {
    factor: T,
}

impl<T: Scalar> TapeOp<T> for ScaleOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if ctx.needs(x) {
            let contrib: Vec<T> = ctx.out_grad().iter().map(|&g| g * self.factor).collect();
            ctx.add(x, &contrib);
        }
    }

    fn name(&self) -> &'static str {
        "scale"
    }
}

struct ReshapeOp;

impl<T: Scalar> TapeOp<T> for ReshapeOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        let g = ctx.out_grad().to_vec();
        ctx.add(x, &g);
    }

    fn name(&self) -> &'static str {
        "reshape"
    }
}

struct ReduceAllOp {
    mean: bool,
}

impl<T: Scalar> TapeOp<T> for ReduceAllOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if !ctx.needs(x) {
            return;
        }
        let n = ctx.val(x).numel();
        let mut g = ctx.out_grad()[0];
        if self.mean {
            g = g / T::c(n as f64);
        }
        let buf = ctx.grad_mut(x);
        for v in buf.iter_mut() {
            *v += g;
        }
    }

    fn name(&self) -> &'static str {
        "reduce_all"
    }
}

struct BiasAddOp {
    d: usize,
}

impl<T: Scalar> TapeOp<T> for BiasAddOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (x, bias) = (ctx.parent(0), ctx.parent(1));
        let g = ctx.out_grad().to_vec();
        ctx.add(x, &g);
        if ctx.needs(bias) {
            let buf = ctx.grad_mut(bias);
            for (i, &gv) in g.iter().enumerate() {
                buf[i % self.d] += gv;
            }
        }
    }

    fn name(&self) -> &'static str {
        "bias_add"
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> TapeOp<T> for MatmulOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (a, b) = (ctx.parent(0), ctx.parent(1));
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs(a) {
            let g = ctx.out_grad().to_vec();
            let bd = ctx.val(b).data().to_vec();
            mm_nt(&g, &bd, ctx.grad_mut(a), m, n, k);
        }
        if ctx.needs(b) {
            let g = ctx.out_grad().to_vec();
            let ad = ctx.val(a).data().to_vec();
            mm_tn(&ad, &g, ctx.grad_mut(b), m, k, n);
        }
    }

    fn name(&self) -> &'static str {
        "matmul"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Exp,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
}

impl Pointwise {
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Pointwise::Exp => x.exp(),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Silu => silu(x),
            Pointwise::Relu => x.max(T::zero()),
            Pointwise::Softplus => softplus(x),
        }
    }

    /// dy/dx given the input `x` and the already-computed output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Pointwise::Exp => y,
            Pointwise::Sigmoid => y * (T::one() - y),
            Pointwise::Silu => silu_prime(x),
            Pointwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Pointwise::Softplus => sigmoid(x),
        }
    }
}

struct PointwiseOp {
    kind: Pointwise,
}

impl<T: Scalar> TapeOp<T> for PointwiseOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if !ctx.needs(x) {
            return;
        }
        let contrib: Vec<T> = ctx
            .out_grad()
            .iter()
            .zip(ctx.val(x).data().iter().zip(ctx.out_val().data()))
            .map(|(&g, (&xv, &yv))| g * self.kind.derivative(xv, yv))
            .collect();
        ctx.add(x, &contrib);
    }

    fn name(&self) -> &'static str {
        "pointwise"
    }
}

struct LayerNormOp<T> {
    d: usize,
    means: Vec<T>,
    rstds: Vec<T>,
}

impl<T: Scalar> TapeOp<T> for LayerNormOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (x, gamma, beta) = (ctx.parent(0), ctx.parent(1), ctx.parent(2));
        let d = self.d;
        let rows = ctx.out_grad().len() / d;
        let inv_d = T::one() / T::c(d as f64);
        let g = ctx.out_grad().to_vec();
        let xd = ctx.val(x).data().to_vec();
        let gd = ctx.val(gamma).data().to_vec();

        if ctx.needs(x) {
            let mut dx = vec![T::zero(); xd.len()];
            for r in 0..rows {
                let (mean, rstd) = (self.means[r], self.rstds[r]);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for i in 0..d {
                    let gg = g[r * d + i] * gd[i];
                    let xhat = (xd[r * d + i] - mean) * rstd;
                    m1 += gg;
                    m2 += gg * xhat;
                }
                m1 = m1 * inv_d;
                m2 = m2 * inv_d;
                for i in 0..d {
                    let gg = g[r * d + i] * gd[i];
                    let xhat = (xd[r * d + i] - mean) * rstd;
                    dx[r * d + i] = rstd * (gg - m1 - xhat * m2);
                }
            }
            ctx.add(x, &dx);
        }
        if ctx.needs(gamma) {
            let buf = ctx.grad_mut(gamma);
            for r in 0..rows {
                let (mean, rstd) = (self.means[r], self.rstds[r]);
                for i in 0..d {
                    buf[i] += g[r * d + i] * (xd[r * d + i] - mean) * rstd;
                }
            }
        }
        if ctx.needs(beta) {
            let buf = ctx.grad_mut(beta);
            for r in 0..rows {
                for i in 0..d {
                    buf[i] += g[r * d + i];
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "layer_norm"
    }
}

struct GroupNormOp<T> {
    groups: usize,
    means: Vec<T>,
    rstds: Vec<T>,
}

impl<T: Scalar> TapeOp<T> for GroupNormOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (x, gamma, beta) = (ctx.parent(0), ctx.parent(1), ctx.parent(2));
        let (b, c, h, w) = ctx.val(x).dims4().expect("validated at forward");
        let groups = self.groups;
        let cpg = c / groups;
        let m = cpg * h * w;
        let inv_m = T::one() / T::c(m as f64);
        let g = ctx.out_grad().to_vec();
        let xd = ctx.val(x).data().to_vec();
        let gd = ctx.val(gamma).data().to_vec();

        if ctx.needs(x) {
            let mut dx = vec![T::zero(); xd.len()];
            for bi in 0..b {
                for gr in 0..groups {
                    let (mean, rstd) = (
                        self.means[bi * groups + gr],
                        self.rstds[bi * groups + gr],
                    );
                    let base = bi * c * h * w + gr * cpg * h * w;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for cl in 0..cpg {
                        let gain = gd[gr * cpg + cl];
                        let off = base + cl * h * w;
                        for i in 0..h * w {
                            let gg = g[off + i] * gain;
                            let xhat = (xd[off + i] - mean) * rstd;
                            m1 += gg;
                            m2 += gg * xhat;
                        }
                    }
                    m1 = m1 * inv_m;
                    m2 = m2 * inv_m;
                    for cl in 0..cpg {
                        let gain = gd[gr * cpg + cl];
                        let off = base + cl * h * w;
                        for i in 0..h * w {
                            let gg = g[off + i] * gain;
                            let xhat = (xd[off + i] - mean) * rstd;
                            dx[off + i] = rstd * (gg - m1 - xhat * m2);
                        }
                    }
                }
            }
            ctx.add(x, &dx);
        }
        if ctx.needs(gamma) {
            let buf = ctx.grad_mut(gamma);
            for bi in 0..b {
                for ch in 0..c {
                    let (mean, rstd) = (
                        self.means[bi * groups + ch / cpg],
                        self.rstds[bi * groups + ch / cpg],
                    );
                    let off = (bi * c + ch) * h * w;
                    for i in 0..h * w {
                        buf[ch] += g[off + i] * (xd[off + i] - mean) * rstd;
                    }
                }
            }
        }
        if ctx.needs(beta) {
            let buf = ctx.grad_mut(beta);
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * h * w;
                    for i in 0..h * w {
                        buf[ch] += g[off + i];
                    }
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "group_norm"
    }
}

struct UpsampleNearest2Op;

impl<T: Scalar> TapeOp<T> for UpsampleNearest2Op {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if !ctx.needs(x) {
            return;
        }
        let (b, c, h, w) = ctx.val(x).dims4().expect("validated at forward");
        let (oh, ow) = (2 * h, 2 * w);
        let g = ctx.out_grad().to_vec();
        let buf = ctx.grad_mut(x);
        for bc in 0..b * c {
            let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
            let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    dst[(i / 2) * w + j / 2] += src[i * ow + j];
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels (accumulating: callers pass zeroed or partial buffers)
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T  (i.e. rows of `a` dotted with rows of `b`)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
