//! Directional traversals of 2-D feature maps and the matching
//! map ↔ sequence tape operations.
//!
//! Every direction defines a bijection between grid positions and sequence
//! positions, so `fold` is the exact inverse of `unfold`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BwdCtx, Tape, TapeOp, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Row-major, top-left to bottom-right.
    TlBr,
    /// Column-major, columns right-to-left, each top-to-bottom.
    TrBl,
    /// Reversed row-major.
    BrTl,
    /// Reverse of [`ScanDirection::TrBl`].
    BlTr,
    /// Clockwise boundary walk from (0,0), peeling inward ring by ring.
    SpiralIn,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 5] = [
        ScanDirection::TlBr,
        ScanDirection::TrBl,
        ScanDirection::BrTl,
        ScanDirection::BlTr,
        ScanDirection::SpiralIn,
    ];

    /// Name used in config files and CLI flags.
    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::TlBr => "tl_br",
            ScanDirection::TrBl => "tr_bl",
            ScanDirection::BrTl => "br_tl",
            ScanDirection::BlTr => "bl_tr",
            ScanDirection::SpiralIn => "spiral_in",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tl_br" => Ok(ScanDirection::TlBr),
            "tr_bl" => Ok(ScanDirection::TrBl),
            "br_tl" => Ok(ScanDirection::BrTl),
            "bl_tr" => Ok(ScanDirection::BlTr),
            "spiral_in" => Ok(ScanDirection::SpiralIn),
            other => Err(Error::config(format!(
                "unknown scan direction {other:?}; expected one of tl_br, tr_bl, br_tl, bl_tr, spiral_in"
            ))),
        }
    }
}

/// A direction materialized for one grid size.
///
/// `order[t]` is the row-major grid index visited at sequence position `t`;
/// `inverse` is the reverse lookup, `inverse[order[t]] == t`.
#[derive(Clone, Debug)]
pub struct ScanPermutation {
    pub order: Arc<Vec<usize>>,
    pub inverse: Arc<Vec<usize>>,
}

impl ScanPermutation {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn spiral_order(h: usize, w: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(h * w);
    let (mut top, mut bottom) = (0isize, h as isize - 1);
    let (mut left, mut right) = (0isize, w as isize - 1);
    let w = w as isize;
    while top <= bottom && left <= right {
        for x in left..=right {
            order.push((top * w + x) as usize);
        }
        top += 1;
        for y in top..=bottom {
            order.push((y * w + right) as usize);
        }
        right -= 1;
        if top <= bottom {
            for x in (left..=right).rev() {
                order.push((bottom * w + x) as usize);
            }
            bottom -= 1;
        }
        if left <= right {
            for y in (top..=bottom).rev() {
                order.push((y * w + left) as usize);
            }
            left += 1;
        }
    }
    order
}

/// Build the visiting order for one direction on an H×W grid.
pub fn permutation_for(dir: ScanDirection, h: usize, w: usize) -> Result<ScanPermutation> {
    if h == 0 || w == 0 {
        return Err(Error::dim(format!("scan grid must be nonempty, got {h}x{w}")));
    }
    let order: Vec<usize> = match dir {
        ScanDirection::TlBr => (0..h * w).collect(),
        ScanDirection::BrTl => (0..h * w).rev().collect(),
        ScanDirection::TrBl => {
            let mut o = Vec::with_capacity(h * w);
            for x in (0..w).rev() {
                for y in 0..h {
                    o.push(y * w + x);
                }
            }
            o
        }
        ScanDirection::BlTr => {
            let mut o = permutation_for(ScanDirection::TrBl, h, w)?.order.as_ref().clone();
            o.reverse();
            o
        }
        ScanDirection::SpiralIn => spiral_order(h, w),
    };
    let mut inverse = vec![0usize; order.len()];
    for (t, &s) in order.iter().enumerate() {
        inverse[s] = t;
    }
    Ok(ScanPermutation { order: Arc::new(order), inverse: Arc::new(inverse) })
}

type PermCache = Mutex<HashMap<(ScanDirection, usize, usize), ScanPermutation>>;

/// Cached variant of [`permutation_for`]; the table is shared process-wide.
pub fn cached_permutation(dir: ScanDirection, h: usize, w: usize) -> Result<ScanPermutation> {
    static CACHE: OnceLock<PermCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("scan permutation cache poisoned");
    if let Some(p) = map.get(&(dir, h, w)) {
        return Ok(p.clone());
    }
    let p = permutation_for(dir, h, w)?;
    map.insert((dir, h, w), p.clone());
    Ok(p)
}

struct UnfoldScanOp {
    order: Arc<Vec<usize>>,
}

impl<T: Scalar> TapeOp<T> for UnfoldScanOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if !ctx.needs(x) {
            return;
        }
        let [b, l, c] = [ctx.out_val().shape()[0], ctx.out_val().shape()[1], ctx.out_val().shape()[2]];
        let g = ctx.out_grad().to_vec();
        let dx = ctx.grad_mut(x);
        for bi in 0..b {
            for (t, &s) in self.order.iter().enumerate() {
                let src = (bi * l + t) * c;
                for ci in 0..c {
                    dx[(bi * c + ci) * l + s] += g[src + ci];
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "unfold_scan"
    }
}

struct FoldScanOp {
    order: Arc<Vec<usize>>,
}

impl<T: Scalar> TapeOp<T> for FoldScanOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.parent(0);
        if !ctx.needs(x) {
            return;
        }
        let (b, l, c) = {
            let s = ctx.val(x).shape();
            (s[0], s[1], s[2])
        };
        let g = ctx.out_grad().to_vec();
        let dx = ctx.grad_mut(x);
        for bi in 0..b {
            for (t, &s) in self.order.iter().enumerate() {
                let dst = (bi * l + t) * c;
                for ci in 0..c {
                    dx[dst + ci] += g[(bi * c + ci) * l + s];
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "fold_scan"
    }
}

impl<T: Scalar> Tape<T> {
    /// Gather a `[B,C,H,W]` map into a `[B,L,C]` token sequence following
    /// the permutation; token `t` holds the channels at grid `order[t]`.
    pub fn unfold_scan(&mut self, x: Var, perm: &ScanPermutation) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let l = h * w;
        if perm.len() != l {
            return Err(Error::dim(format!(
                "scan permutation covers {} cells but the map has {h}x{w}",
                perm.len()
            )));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); b * l * c];
        for bi in 0..b {
            for (t, &s) in perm.order.iter().enumerate() {
                let dst = (bi * l + t) * c;
                for ci in 0..c {
                    out[dst + ci] = xs[(bi * c + ci) * l + s];
                }
            }
        }
        let value = Tensor::new(vec![b, l, c], out)?;
        Ok(self.push(value, vec![x], Box::new(UnfoldScanOp { order: perm.order.clone() })))
    }

    /// Scatter a `[B,L,C]` sequence back onto a `[B,C,H,W]` map; exact
    /// inverse of [`Tape::unfold_scan`] with the same permutation.
    pub fn fold_scan(&mut self, seq: Var, perm: &ScanPermutation, h: usize, w: usize) -> Result<Var> {
        let (b, l, c) = self.value(seq).dims3()?;
        if l != h * w || perm.len() != l {
            return Err(Error::dim(format!(
                "cannot fold {l} tokens onto a {h}x{w} map with a {}-cell permutation",
                perm.len()
            )));
        }
        let xs = self.value(seq).data();
        let mut out = vec![T::zero(); b * c * l];
        for bi in 0..b {
            for (t, &s) in perm.order.iter().enumerate() {
                let src = (bi * l + t) * c;
                for ci in 0..c {
                    out[(bi * c + ci) * l + s] = xs[src + ci];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(value, vec![seq], Box::new(FoldScanOp { order: perm.order.clone() })))
    }

    /// Merge directional branches by elementwise summation.
    pub fn rmerge(&mut self, branches: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = branches.split_first() else {
            return Err(Error::contract("rmerge requires at least one branch"));
        };
        let shape = self.value(first).shape().to_vec();
        for &b in rest {
            if self.value(b).shape() != shape {
                return Err(Error::contract(format!(
                    "rmerge branch shapes differ: {:?} vs {:?}",
                    shape,
                    self.value(b).shape()
                )));
            }
        }
        let mut data = self.value(first).data().to_vec();
        for &b in rest {
            for (d, &v) in data.iter_mut().zip(self.value(b).data()) {
                *d += v;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, branches.to_vec(), Box::new(SumBranchesOp)))
    }
}

struct SumBranchesOp;

impl<T: Scalar> TapeOp<T> for SumBranchesOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.out_grad().to_vec();
        for i in 0..ctx.parent_count() {
            let p = ctx.parent(i);
            ctx.add(p, &g);
        }
    }

    fn name(&self) -> &'static str {
        "rmerge"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unfold_values(dir: ScanDirection, h: usize, w: usize, vals: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, h, w], vals).unwrap());
        let perm = permutation_for(dir, h, w).unwrap();
        let seq = tape.unfold_scan(x, &perm).unwrap();
        tape.value(seq).data().to_vec()
    }

    #[test]
    fn name_parse_round_trips() {
        for dir in ScanDirection::ALL {
            assert_eq!(ScanDirection::parse(dir.name()).unwrap(), dir);
        }
        let err = ScanDirection::parse("diagonal").unwrap_err();
        assert!(err.to_string().contains("spiral_in"));
    }

    #[test]
    fn row_major_and_reverse_orders() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(unfold_values(ScanDirection::TlBr, 2, 2, v.clone()), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unfold_values(ScanDirection::BrTl, 2, 2, v), vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn column_scan_from_top_right() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(unfold_values(ScanDirection::TrBl, 2, 2, v), vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn spiral_three_by_three() {
        let p = permutation_for(ScanDirection::SpiralIn, 3, 3).unwrap();
        assert_eq!(p.order.as_ref(), &vec![0, 1, 2, 5, 8, 7, 6, 3, 4]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(permutation_for(ScanDirection::TlBr, 0, 3).is_err());
    }

    #[test]
    fn all_directions_are_bijections_up_to_16() {
        for dir in ScanDirection::ALL {
            for h in 1..=16 {
                for w in 1..=16 {
                    let p = permutation_for(dir, h, w).unwrap();
                    let mut seen = p.order.as_ref().clone();
                    seen.sort_unstable();
                    assert!(
                        seen.iter().copied().eq(0..h * w),
                        "{} is not a bijection on {h}x{w}",
                        dir.name()
                    );
                    for (t, &s) in p.order.iter().enumerate() {
                        assert_eq!(p.inverse[s], t);
                    }
                }
            }
        }
    }

    #[test]
    fn spiral_finishes_each_ring_before_the_next() {
        for (h, w) in [(3, 3), (4, 6), (5, 5), (1, 7), (6, 1), (4, 4)] {
            let p = permutation_for(ScanDirection::SpiralIn, h, w).unwrap();
            let ring = |s: usize| {
                let (y, x) = (s / w, s % w);
                y.min(x).min(h - 1 - y).min(w - 1 - x)
            };
            let rings: Vec<usize> = p.order.iter().map(|&s| ring(s)).collect();
            assert!(rings.windows(2).all(|ab| ab[0] <= ab[1]), "{rings:?} on {h}x{w}");
        }
    }

    #[test]
    fn fold_inverts_unfold_for_every_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dir in ScanDirection::ALL {
            let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let perm = permutation_for(dir, 4, 5).unwrap();
            let seq = tape.unfold_scan(xv, &perm).unwrap();
            let back = tape.fold_scan(seq, &perm, 4, 5).unwrap();
            assert_eq!(tape.value(back), &x, "{}", dir.name());
        }
    }

    #[test]
    fn fold_of_reversed_sequence() {
        let mut tape = Tape::<f64>::new();
        let seq = tape.constant(Tensor::new(vec![1, 4, 1], vec![4.0, 3.0, 2.0, 1.0]).unwrap());
        let perm = permutation_for(ScanDirection::BrTl, 2, 2).unwrap();
        let map = tape.fold_scan(seq, &perm, 2, 2).unwrap();
        assert_eq!(tape.value(map).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fold_of_spiral_sequence_restores_row_major() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = [0, 1, 2, 5, 8, 7, 6, 3, 4].iter().map(|&v| v as f64).collect();
        let seq = tape.constant(Tensor::new(vec![1, 9, 1], vals).unwrap());
        let perm = permutation_for(ScanDirection::SpiralIn, 3, 3).unwrap();
        let map = tape.fold_scan(seq, &perm, 3, 3).unwrap();
        let expect: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(tape.value(map).data(), &expect[..]);
    }

    #[test]
    fn constant_map_unfolds_to_constant_sequence() {
        for dir in ScanDirection::ALL {
            let seq = unfold_values(dir, 3, 4, vec![0.25; 12]);
            assert!(seq.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn cached_permutations_match_fresh_ones() {
        let a = cached_permutation(ScanDirection::SpiralIn, 5, 7).unwrap();
        let b = permutation_for(ScanDirection::SpiralIn, 5, 7).unwrap();
        assert_eq!(a.order.as_ref(), b.order.as_ref());
        let again = cached_permutation(ScanDirection::SpiralIn, 5, 7).unwrap();
        assert!(Arc::ptr_eq(&a.order, &again.order));
    }

    #[test]
    fn rmerge_single_branch_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let y = tape.rmerge(&[x]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn rmerge_of_opposites_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let nx = tape.scale(x, -1.0);
        let y = tape.rmerge(&[x, nx]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmerge_matches_scalar_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tensors: Vec<Tensor<f64>> =
            (0..4).map(|_| Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng)).collect();
        let mut expect = vec![0.0; 6];
        for t in &tensors {
            for (e, &v) in expect.iter_mut().zip(t.data()) {
                *e += v;
            }
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.into_iter().map(|t| tape.constant(t)).collect();
        let y = tape.rmerge(&vars).unwrap();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn rmerge_rejects_empty_and_mismatched() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.rmerge(&[]).is_err());
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.rmerge(&[a, b]).is_err());
    }

    #[test]
    fn summing_folds_equals_folding_the_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perm = permutation_for(ScanDirection::SpiralIn, 3, 3).unwrap();
        let a = Tensor::<f64>::rand_uniform(vec![1, 9, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![1, 9, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let fa = tape.fold_scan(av, &perm, 3, 3).unwrap();
        let fb = tape.fold_scan(bv, &perm, 3, 3).unwrap();
        let sum_of_folds = tape.rmerge(&[fa, fb]).unwrap();
        let sum = tape.add(av, bv).unwrap();
        let fold_of_sum = tape.fold_scan(sum, &perm, 3, 3).unwrap();
        assert_eq!(tape.value(sum_of_folds), tape.value(fold_of_sum));
    }

    #[test]
    fn scan_ops_differentiate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let report = grad_check(
            &[("x", x)],
            &|tape, vars| {
                let perm = permutation_for(ScanDirection::SpiralIn, 3, 3).unwrap();
                let seq = tape.unfold_scan(vars[0], &perm)?;
                let sq = tape.mul(seq, seq)?;
                let map = tape.fold_scan(sq, &perm, 3, 3)?;
                let merged = tape.rmerge(&[map, vars[0]])?;
                Ok(tape.sum_all(merged))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "worst {} at {}", report.worst_rel_err, report.worst_site);
    }
}
