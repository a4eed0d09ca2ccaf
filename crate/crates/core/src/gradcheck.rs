//! Verification of analytic gradients against central finite differences.
//!
//! The check is always run in `f64`: the graph is rebuilt per perturbed
//! coordinate, so the builder closure must be deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// When set, check at most this many randomly chosen coordinates per
    /// tensor instead of every coordinate (for large parameter sets).
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for the coordinate subsampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, tol: 1e-5, max_coords_per_tensor: None, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    /// `tensor_name[flat_index]` of the worst coordinate.
    pub worst_site: String,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error with the magnitude floored, so that finite-difference
/// noise on near-zero gradients does not dominate the verdict.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.01)
}

/// Compare the tape gradient of a scalar-valued graph against central
/// finite differences, for every listed input tensor.
///
/// `build` receives a fresh tape plus one gradient-tracked leaf per input
/// (in order) and must return the scalar output variable.
pub fn grad_check<F>(
    inputs: &[(&str, Tensor<f64>)],
    build: &F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };

    // Analytic gradients from one backward sweep.
    let tensors: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::verify(format!("graph output is not finite: {base}")));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tensors)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst_rel_err = 0.0_f64;
    let mut worst_site = String::from("-");
    let mut coords_checked = 0;

    for (ti, (name, tensor)) in inputs.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(limit) if numel > limit => {
                // distinct indices, deterministic under the config seed
                let mut picked = std::collections::BTreeSet::new();
                while picked.len() < limit {
                    picked.insert(rng.random_range(0..numel));
                }
                picked.into_iter().collect()
            }
            _ => (0..numel).collect(),
        };

        for idx in coords {
            let mut plus = tensors.clone();
            plus[ti].data_mut()[idx] += cfg.step;
            let f_plus = eval(&plus)?;
            let mut minus = tensors.clone();
            minus[ti].data_mut()[idx] -= cfg.step;
            let f_minus = eval(&minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let err = rel_err(analytic[ti][idx], numeric);
            coords_checked += 1;
            if err > worst_rel_err {
                worst_rel_err = err;
                worst_site = format!("{name}[{idx}]");
            }
        }
    }

    Ok(GradCheckReport {
        worst_rel_err,
        worst_site,
        coords_checked,
        tol: cfg.tol,
        pass: worst_rel_err <= cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;
    use crate::tape::{BwdCtx, TapeOp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_tight() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[("x", x)],
            &|tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.worst_rel_err <= 1e-9, "worst {}", report.worst_rel_err);
    }

    #[test]
    fn silu_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::rand_uniform(vec![16], -3.0, 3.0, &mut rng);
        let report = grad_check(
            &[("x", x)],
            &|tape, vars| {
                let y = tape.silu(vars[0]);
                Ok(tape.sum_all(y))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.worst_rel_err <= 1e-6, "worst {}", report.worst_rel_err);
    }

    /// A deliberately wrong backward rule must be caught.
    struct CorruptSquareOp;

    impl<T: Scalar> TapeOp<T> for CorruptSquareOp {
        fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
            let x = ctx.parent(0);
            if !ctx.needs(x) {
                return;
            }
            // wrong: true gradient is 2x, this claims 2.2x
            let contrib: Vec<T> = ctx
                .out_grad()
                .iter()
                .zip(ctx.val(x).data())
                .map(|(&g, &v)| g * T::c(2.2) * v)
                .collect();
            ctx.add(x, &contrib);
        }

        fn name(&self) -> &'static str {
            "corrupt_square"
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 1.5]).unwrap();
        let report = grad_check(
            &[("x", x)],
            &|tape, vars| {
                let x = vars[0];
                let sq = tape.value(x).map(|v| v * v);
                let bad = tape.push(sq, vec![x], Box::new(CorruptSquareOp));
                Ok(tape.sum_all(bad))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.pass, "corrupted rule slipped through");
        assert!(report.worst_rel_err > 1e-2);
    }

    #[test]
    fn coordinate_subsampling_limits_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(vec![100], -1.0, 1.0, &mut rng);
        let cfg = GradCheckConfig { max_coords_per_tensor: Some(7), ..Default::default() };
        let report = grad_check(
            &[("x", x)],
            &|tape, vars| {
                let y = tape.sigmoid(vars[0]);
                Ok(tape.mean_all(y))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.coords_checked, 7);
    }

    #[test]
    fn disconnected_input_has_zero_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let report = grad_check(
            &[("x", x), ("unused", unused)],
            &|tape, vars| Ok(tape.sum_all(vars[0])),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass);
    }
}
