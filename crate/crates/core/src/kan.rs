//! Kolmogorov–Arnold layers: every edge carries a learnable activation
//! built from a B-spline expansion plus a silu base path, and the
//! tokenized residual block `LN(Z + DwConv(Φ(Z)))` with Φ switchable
//! between a KAN layer and a two-layer MLP.

use rand::Rng;

use crate::conv::Conv2dSpec;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamVars, Params};
use crate::scalar::{silu, silu_prime, Scalar};
use crate::scan::{cached_permutation, ScanDirection};
use crate::tape::{BwdCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Uniform B-spline basis over `[-range, range]`: `g` intervals of the
/// visible grid, spline order (polynomial degree) `k`, extended by `k`
/// knots on each side so every in-range point has full support. That
/// yields `g + k` basis functions forming a partition of unity on the
/// visible range.
#[derive(Clone, Debug)]
pub struct SplineGrid<T> {
    g: usize,
    k: usize,
    range: T,
    spacing: T,
    knots: Vec<T>,
}

impl<T: Scalar> SplineGrid<T> {
    pub fn new(g: usize, k: usize, range: f64) -> Result<Self> {
        if g < 1 || k < 1 || range <= 0.0 {
            return Err(Error::config(format!(
                "spline grid needs g >= 1, k >= 1, range > 0; got g={g}, k={k}, range={range}"
            )));
        }
        let spacing = 2.0 * range / g as f64;
        let knots = (0..=g + 2 * k)
            .map(|i| T::c(-range - k as f64 * spacing + i as f64 * spacing))
            .collect();
        Ok(SplineGrid { g, k, range: T::c(range), spacing: T::c(spacing), knots })
    }

    pub fn intervals(&self) -> usize {
        self.g
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn range(&self) -> T {
        self.range
    }

    pub fn num_basis(&self) -> usize {
        self.g + self.k
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn clamp(&self, x: T) -> T {
        x.max(-self.range).min(self.range)
    }

    /// Knot span index i with knots[i] <= x < knots[i+1], clamped to the
    /// visible range so every x maps to a full-support span.
    fn span(&self, x: T) -> usize {
        let rel = (x + self.range) / self.spacing;
        let cell = rel.floor().as_f64().max(0.0) as usize;
        self.k + cell.min(self.g - 1)
    }

    /// The k+1 possibly-nonzero basis values at `x` (expects in-range x);
    /// returns the global index of the first one. Triangular scheme over
    /// the local knot window.
    fn basis_local(&self, x: T, vals: &mut Vec<T>) -> usize {
        let i = self.span(x);
        let k = self.k;
        vals.clear();
        vals.resize(k + 1, T::zero());
        vals[0] = T::one();
        for j in 1..=k {
            let mut saved = T::zero();
            for r in 0..j {
                let right = self.knots[i + r + 1] - x;
                let left = x - self.knots[i + 1 + r - j];
                let temp = vals[r] / (right + left);
                vals[r] = saved + right * temp;
                saved = left * temp;
            }
            vals[j] = saved;
        }
        i - k
    }

    /// Like [`Self::basis_local`] but also produces the derivatives of the
    /// same k+1 basis functions.
    fn basis_deriv_local(&self, x: T, vals: &mut Vec<T>, derivs: &mut Vec<T>) -> usize {
        let i = self.span(x);
        let k = self.k;
        vals.clear();
        vals.resize(k + 1, T::zero());
        vals[0] = T::one();
        let mut lower = vec![T::zero(); k];
        for j in 1..=k {
            if j == k {
                lower.copy_from_slice(&vals[..k]);
            }
            let mut saved = T::zero();
            for r in 0..j {
                let right = self.knots[i + r + 1] - x;
                let left = x - self.knots[i + 1 + r - j];
                let temp = vals[r] / (right + left);
                vals[r] = saved + right * temp;
                saved = left * temp;
            }
            vals[j] = saved;
        }
        // N'_{m,k} = k·( N_{m,k-1}/(t_{m+k}-t_m) − N_{m+1,k-1}/(t_{m+k+1}-t_{m+1}) )
        // where the degree-(k-1) values live at global indices i-k+1 ..= i.
        derivs.clear();
        derivs.resize(k + 1, T::zero());
        let kf = T::c(k as f64);
        let base = i - k;
        for r in 0..=k {
            let m = base + r;
            let mut v = T::zero();
            if r >= 1 {
                v += lower[r - 1] / (self.knots[m + k] - self.knots[m]);
            }
            if r < k {
                v -= lower[r] / (self.knots[m + k + 1] - self.knots[m + 1]);
            }
            derivs[r] = kf * v;
        }
        base
    }

    /// All `num_basis` basis values at `x` (clamped to range).
    pub fn basis_at(&self, x: T, out: &mut [T]) {
        debug_assert_eq!(out.len(), self.num_basis());
        out.iter_mut().for_each(|v| *v = T::zero());
        let mut vals = Vec::new();
        let base = self.basis_local(self.clamp(x), &mut vals);
        out[base..base + self.k + 1].copy_from_slice(&vals);
    }

    /// All basis values and their derivatives at `x` (clamped).
    pub fn basis_and_deriv_at(&self, x: T, out: &mut [T], dout: &mut [T]) {
        debug_assert_eq!(out.len(), self.num_basis());
        debug_assert_eq!(dout.len(), self.num_basis());
        out.iter_mut().for_each(|v| *v = T::zero());
        dout.iter_mut().for_each(|v| *v = T::zero());
        let (mut vals, mut ders) = (Vec::new(), Vec::new());
        let base = self.basis_deriv_local(self.clamp(x), &mut vals, &mut ders);
        out[base..base + self.k + 1].copy_from_slice(&vals);
        dout[base..base + self.k + 1].copy_from_slice(&ders);
    }
}

/// Least-squares fit of spline coefficients to samples `(xs, ys)`:
/// minimizes Σ (Σ_j c_j·N_j(x) − y)² via the normal equations.
pub fn spline_lsq_fit<T: Scalar>(grid: &SplineGrid<T>, xs: &[T], ys: &[T]) -> Result<Vec<T>> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::contract("spline fit needs equally many nonzero samples"));
    }
    let m = grid.num_basis();
    let mut ata = vec![T::zero(); m * m];
    let mut aty = vec![T::zero(); m];
    let mut row = vec![T::zero(); m];
    for (&x, &y) in xs.iter().zip(ys) {
        grid.basis_at(x, &mut row);
        for i in 0..m {
            if row[i] == T::zero() {
                continue;
            }
            aty[i] += row[i] * y;
            for j in 0..m {
                ata[i * m + j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut c = aty;
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&a, &b| {
                ata[a * m + col].abs().partial_cmp(&ata[b * m + col].abs()).unwrap()
            })
            .unwrap();
        if ata[pivot * m + col].abs() < T::c(1e-12) {
            return Err(Error::contract("spline fit normal equations are singular"));
        }
        if pivot != col {
            for j in 0..m {
                ata.swap(col * m + j, pivot * m + j);
            }
            c.swap(col, pivot);
        }
        let inv = T::one() / ata[col * m + col];
        for r in col + 1..m {
            let f = ata[r * m + col] * inv;
            if f == T::zero() {
                continue;
            }
            for j in col..m {
                let v = ata[col * m + j];
                ata[r * m + j] -= f * v;
            }
            let v = c[col];
            c[r] -= f * v;
        }
    }
    for col in (0..m).rev() {
        let mut v = c[col];
        for j in col + 1..m {
            v -= ata[col * m + j] * c[j];
        }
        c[col] = v / ata[col * m + col];
    }
    Ok(c)
}

/// One KAN layer: `out[o] = Σ_i base_w[o,i]·silu(z_i) + Σ_j coeffs[o,i,j]·N_j(z_i)`.
#[derive(Clone, Debug)]
pub struct KanLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid<T>,
    /// `[out_dim, in_dim]`
    pub base_w: ParamId,
    /// `[out_dim, in_dim, num_basis]`
    pub coeffs: ParamId,
}

impl<T: Scalar> KanLayer<T> {
    /// Spline coefficients start as small noise so a fresh layer is close
    /// to a plain (silu-warped) linear map.
    pub fn register<R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let s = 1.0 / (in_dim as f64).sqrt();
        let base_w = params.add(
            format!("{prefix}.base_w"),
            Tensor::rand_uniform(vec![out_dim, in_dim], -s, s, rng),
        )?;
        let noise = 0.1 / grid.intervals() as f64;
        let coeffs = params.add(
            format!("{prefix}.coeffs"),
            Tensor::rand_normal(vec![out_dim, in_dim, grid.num_basis()], 0.0, noise, rng),
        )?;
        Ok(KanLayer { in_dim, out_dim, grid, base_w, coeffs })
    }
}

struct KanLayerOp<T> {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid<T>,
}

impl<T: Scalar> Tape<T> {
    /// `z: [rows, in_dim]`, `base_w: [out, in]`, `coeffs: [out, in, m]`.
    pub fn kan_layer(
        &mut self,
        z: Var,
        base_w: Var,
        coeffs: Var,
        grid: &SplineGrid<T>,
    ) -> Result<Var> {
        let (rows, in_dim) = self.value(z).dims2()?;
        let (out_dim, win) = self.value(base_w).dims2()?;
        let m = grid.num_basis();
        if win != in_dim || self.value(coeffs).shape() != [out_dim, in_dim, m] {
            return Err(Error::dim(format!(
                "kan layer shapes inconsistent: z {:?}, base_w {:?}, coeffs {:?}, basis {m}",
                self.value(z).shape(),
                self.value(base_w).shape(),
                self.value(coeffs).shape()
            )));
        }
        let zs = self.value(z).data();
        let bw = self.value(base_w).data();
        let cf = self.value(coeffs).data();
        let mut out = vec![T::zero(); rows * out_dim];
        let mut vals = Vec::new();
        for r in 0..rows {
            for i in 0..in_dim {
                let x = zs[r * in_dim + i];
                let sil = silu(x);
                let base = grid.basis_local(grid.clamp(x), &mut vals);
                let orow = &mut out[r * out_dim..][..out_dim];
                for o in 0..out_dim {
                    let crow = &cf[(o * in_dim + i) * m + base..][..grid.k + 1];
                    let mut acc = bw[o * in_dim + i] * sil;
                    for (cv, bv) in crow.iter().zip(&vals) {
                        acc += *cv * *bv;
                    }
                    orow[o] += acc;
                }
            }
        }
        let value = Tensor::new(vec![rows, out_dim], out)?;
        Ok(self.push(
            value,
            vec![z, base_w, coeffs],
            Box::new(KanLayerOp { in_dim, out_dim, grid: grid.clone() }),
        ))
    }
}

impl<T: Scalar> TapeOp<T> for KanLayerOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let (zp, wp, cp) = (ctx.parent(0), ctx.parent(1), ctx.parent(2));
        let (in_dim, out_dim) = (self.in_dim, self.out_dim);
        let m = self.grid.num_basis();
        let rows = ctx.val(zp).shape()[0];
        let k = self.grid.k;
        let range = self.grid.range;

        let mut gz = vec![T::zero(); rows * in_dim];
        let mut gw = vec![T::zero(); out_dim * in_dim];
        let mut gc = vec![T::zero(); out_dim * in_dim * m];
        {
            let zs = ctx.val(zp).data();
            let bw = ctx.val(wp).data();
            let cf = ctx.val(cp).data();
            let g = ctx.out_grad();
            let (mut vals, mut ders) = (Vec::new(), Vec::new());
            for r in 0..rows {
                let grow = &g[r * out_dim..][..out_dim];
                for i in 0..in_dim {
                    let x = zs[r * in_dim + i];
                    let sil = silu(x);
                    let dsil = silu_prime(x);
                    let in_range = x >= -range && x <= range;
                    let base =
                        self.grid.basis_deriv_local(self.grid.clamp(x), &mut vals, &mut ders);
                    let mut dz = T::zero();
                    for o in 0..out_dim {
                        let go = grow[o];
                        if go == T::zero() {
                            continue;
                        }
                        gw[o * in_dim + i] += go * sil;
                        let off = (o * in_dim + i) * m + base;
                        let crow = &cf[off..][..k + 1];
                        let gcrow = &mut gc[off..][..k + 1];
                        let mut spline_dz = T::zero();
                        for j in 0..=k {
                            gcrow[j] += go * vals[j];
                            spline_dz += crow[j] * ders[j];
                        }
                        dz += go * bw[o * in_dim + i] * dsil;
                        if in_range {
                            dz += go * spline_dz;
                        }
                    }
                    gz[r * in_dim + i] += dz;
                }
            }
        }
        ctx.add(zp, &gz);
        ctx.add(wp, &gw);
        ctx.add(cp, &gc);
    }

    fn name(&self) -> &'static str {
        "kan_layer"
    }
}

/// Which token mixer Φ the tokenized block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMixer {
    Kan,
    Mlp,
}

impl TokenMixer {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "kan" => Ok(TokenMixer::Kan),
            "mlp" => Ok(TokenMixer::Mlp),
            other => Err(Error::config(format!(
                "unknown token mixer {other:?}; expected kan or mlp"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenMixer::Kan => "kan",
            TokenMixer::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug)]
pub enum MixerParams<T> {
    Kan(KanLayer<T>),
    /// Two-layer MLP with silu, hidden width equal to the token dim.
    Mlp { w0: ParamId, b0: ParamId, w1: ParamId, b1: ParamId },
}

/// Tokenized residual block `Z' = LN(Z + DwConv3x3(Φ(Z)))`.
#[derive(Clone, Debug)]
pub struct TokBlock<T> {
    pub dim: usize,
    pub mixer: MixerParams<T>,
    /// Depthwise 3x3 kernel `[D,1,3,3]` and bias `[D]`.
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// Parameters in one KAN mixer of width d.
pub fn kan_mixer_param_count(d: usize, num_basis: usize) -> usize {
    d * d * num_basis + d * d
}

/// Parameters in one MLP mixer of width d (hidden width d).
pub fn mlp_mixer_param_count(d: usize) -> usize {
    2 * d * d + 2 * d
}

impl<T: Scalar> TokBlock<T> {
    pub fn register<R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        dim: usize,
        mixer: TokenMixer,
        grid: &SplineGrid<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mixer = match mixer {
            TokenMixer::Kan => MixerParams::Kan(KanLayer::register(
                params,
                &format!("{prefix}.kan"),
                dim,
                dim,
                grid.clone(),
                rng,
            )?),
            TokenMixer::Mlp => {
                let s = 1.0 / (dim as f64).sqrt();
                MixerParams::Mlp {
                    w0: params.add(
                        format!("{prefix}.mlp.w0"),
                        Tensor::rand_uniform(vec![dim, dim], -s, s, rng),
                    )?,
                    b0: params.add(format!("{prefix}.mlp.b0"), Tensor::zeros(vec![dim]))?,
                    w1: params.add(
                        format!("{prefix}.mlp.w1"),
                        Tensor::rand_uniform(vec![dim, dim], -s, s, rng),
                    )?,
                    b1: params.add(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![dim]))?,
                }
            }
        };
        let s = 1.0 / 3.0;
        let dw_w = params.add(
            format!("{prefix}.dw_w"),
            Tensor::rand_uniform(vec![dim, 1, 3, 3], -s, s, rng),
        )?;
        let dw_b = params.add(format!("{prefix}.dw_b"), Tensor::zeros(vec![dim]))?;
        let ln_gamma =
            params.add(format!("{prefix}.ln_gamma"), Tensor::full(vec![dim], T::one()))?;
        let ln_beta = params.add(format!("{prefix}.ln_beta"), Tensor::zeros(vec![dim]))?;
        Ok(TokBlock { dim, mixer, dw_w, dw_b, ln_gamma, ln_beta })
    }
}

/// Forward of the tokenized block on `z: [B, L, D]` whose tokens tile an
/// `h`×`w` map in row-major order.
pub fn tok_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    block: &TokBlock<T>,
    z: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let (b, l, d) = tape.value(z).dims3()?;
    if l != h * w || d != block.dim {
        return Err(Error::dim(format!(
            "tokenized block expects [{h}*{w}, {}] tokens, got [{l}, {d}]",
            block.dim
        )));
    }
    let flat = tape.reshape(z, vec![b * l, d])?;
    let phi_flat = match &block.mixer {
        MixerParams::Kan(layer) => {
            tape.kan_layer(flat, pv.get(layer.base_w), pv.get(layer.coeffs), &layer.grid)?
        }
        MixerParams::Mlp { w0, b0, w1, b1 } => {
            let hmid = tape.matmul(flat, pv.get(*w0))?;
            let hmid = tape.bias_add(hmid, pv.get(*b0))?;
            let hmid = tape.silu(hmid);
            let out = tape.matmul(hmid, pv.get(*w1))?;
            tape.bias_add(out, pv.get(*b1))?
        }
    };
    let phi = tape.reshape(phi_flat, vec![b, l, d])?;
    let perm = cached_permutation(ScanDirection::TlBr, h, w)?;
    let map = tape.fold_scan(phi, &perm, h, w)?;
    let conv = tape.conv2d(
        map,
        pv.get(block.dw_w),
        Some(pv.get(block.dw_b)),
        Conv2dSpec { stride: (1, 1), padding: (1, 1), groups: d },
    )?;
    let seq = tape.unfold_scan(conv, &perm)?;
    let sum = tape.add(z, seq)?;
    tape.layer_norm(sum, pv.get(block.ln_gamma), pv.get(block.ln_beta), LN_EPS)
}
