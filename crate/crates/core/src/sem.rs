//! Selective-scan multi-scale attention.
//!
//! Two stages: (1) feature extraction — the map is unfolded along each
//! configured direction, run through a per-direction state-space block and
//! folded back, and the directional results are summed; (2) attention —
//! channel groups are folded into the batch axis, a 1×1 and a 3×3 branch
//! are summed into a cross-scale map whose sigmoid gates the input.

use rand::Rng;

use crate::conv::Conv2dSpec;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamVars, Params};
use crate::s6::{s6_forward, S6Config, S6Params};
use crate::scalar::Scalar;
use crate::scan::{cached_permutation, ScanDirection};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SemSettings {
    pub channels: usize,
    pub n_state: usize,
    pub directions: Vec<ScanDirection>,
    /// Channel groups folded into the batch axis for the attention convs.
    pub attention_groups: usize,
}

impl SemSettings {
    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::config("attention module needs at least one scan direction"));
        }
        if self.attention_groups == 0 || self.channels % self.attention_groups != 0 {
            return Err(Error::config(format!(
                "attention_groups {} must divide the channel count {}",
                self.attention_groups, self.channels
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one attention module.
#[derive(Clone, Debug)]
pub struct SemModule {
    pub channels: usize,
    pub attention_groups: usize,
    pub branches: Vec<(ScanDirection, S6Params)>,
    /// 1×1 branch `[C/G, C/G, 1, 1]` + bias, shared across groups.
    pub att1_w: ParamId,
    pub att1_b: ParamId,
    /// 3×3 branch `[C/G, C/G, 3, 3]` + bias, padding 1.
    pub att3_w: ParamId,
    pub att3_b: ParamId,
}

impl SemModule {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        settings: &SemSettings,
        rng: &mut R,
    ) -> Result<Self> {
        settings.validate()?;
        let c = settings.channels;
        let mut branches = Vec::new();
        for &dir in &settings.directions {
            let ids = S6Params::register(
                params,
                &format!("{prefix}.{}", dir.name()),
                S6Config { d_model: c, n_state: settings.n_state },
                rng,
            )?;
            branches.push((dir, ids));
        }
        let cg = c / settings.attention_groups;
        let s1 = (6.0 / cg as f64).sqrt();
        let s3 = (6.0 / (cg * 9) as f64).sqrt();
        let att1_w = params.add(
            format!("{prefix}.att1_w"),
            Tensor::rand_uniform(vec![cg, cg, 1, 1], -s1, s1, rng),
        )?;
        let att1_b = params.add(format!("{prefix}.att1_b"), Tensor::zeros(vec![cg]))?;
        let att3_w = params.add(
            format!("{prefix}.att3_w"),
            Tensor::rand_uniform(vec![cg, cg, 3, 3], -s3, s3, rng),
        )?;
        let att3_b = params.add(format!("{prefix}.att3_b"), Tensor::zeros(vec![cg]))?;
        Ok(SemModule {
            channels: c,
            attention_groups: settings.attention_groups,
            branches,
            att1_w,
            att1_b,
            att3_w,
            att3_b,
        })
    }
}

/// Directional state-space extraction: Σ over directions of
/// fold(scan_block(unfold(x))).
pub fn sem_extract<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    m: &SemModule,
    x: Var,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != m.channels {
        return Err(Error::dim(format!(
            "attention module built for {} channels, input has {c}",
            m.channels
        )));
    }
    let mut folded = Vec::with_capacity(m.branches.len());
    for (dir, ids) in &m.branches {
        let perm = cached_permutation(*dir, h, w)?;
        let seq = tape.unfold_scan(x, &perm)?;
        let y = s6_forward(tape, &ids.vars(pv), seq)?;
        folded.push(tape.fold_scan(y, &perm, h, w)?);
    }
    tape.rmerge(&folded)
}

/// Dual-branch gate: channel groups become batch entries, the summed
/// 1×1/3×3 responses are squashed to (0,1) and multiply the input.
pub fn multiscale_attention<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    m: &SemModule,
    x: Var,
) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != m.channels {
        return Err(Error::dim(format!(
            "attention module built for {} channels, input has {c}",
            m.channels
        )));
    }
    let g = m.attention_groups;
    let xg = tape.reshape(x, vec![b * g, c / g, h, w])?;
    let p1 = tape.conv2d(xg, pv.get(m.att1_w), Some(pv.get(m.att1_b)), Conv2dSpec::new(1, 0, 1))?;
    let p3 = tape.conv2d(xg, pv.get(m.att3_w), Some(pv.get(m.att3_b)), Conv2dSpec::same3x3())?;
    let cross = tape.add(p1, p3)?;
    let gate = tape.sigmoid(cross);
    let gated = tape.mul(gate, xg)?;
    tape.reshape(gated, vec![b, c, h, w])
}

/// Extraction followed by attention.
pub fn sem_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    m: &SemModule,
    x: Var,
) -> Result<Var> {
    let e = sem_extract(tape, pv, m, x)?;
    multiscale_attention(tape, pv, m, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::scan::permutation_for;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(directions: Vec<ScanDirection>) -> SemSettings {
        SemSettings { channels: 4, n_state: 2, directions, attention_groups: 2 }
    }

    fn registered(
        seed: u64,
        directions: Vec<ScanDirection>,
    ) -> (Params<f64>, SemModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let m = SemModule::register(&mut params, "sem", &settings(directions), &mut rng).unwrap();
        (params, m)
    }

    /// Zero the read-out projection of every branch: with the skip vector
    /// at its init value 1, each branch passes its input through exactly.
    fn make_skip_only(params: &mut Params<f64>, m: &SemModule) {
        for (_, ids) in &m.branches {
            let shape = params.value(ids.w_c).shape().to_vec();
            params.set_value(ids.w_c, Tensor::zeros(shape)).unwrap();
        }
    }

    #[test]
    fn settings_validation() {
        assert!(settings(vec![]).validate().is_err());
        let mut bad = settings(vec![ScanDirection::TlBr]);
        bad.attention_groups = 3;
        assert!(bad.validate().is_err());
        assert!(settings(vec![ScanDirection::TlBr]).validate().is_ok());
    }

    #[test]
    fn skip_only_single_direction_extract_is_identity() {
        let (mut params, m) = registered(50, vec![ScanDirection::SpiralIn]);
        make_skip_only(&mut params, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = Tensor::rand_uniform(vec![2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = sem_extract(&mut tape, &pv, &m, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn two_skip_only_directions_double_the_input() {
        let (mut params, m) = registered(52, vec![ScanDirection::TlBr, ScanDirection::BrTl]);
        make_skip_only(&mut params, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = sem_extract(&mut tape, &pv, &m, xv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - 2.0 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn spiral_branch_is_causal_in_scan_order() {
        let (params, m) = registered(54, vec![ScanDirection::SpiralIn]);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let perm = permutation_for(ScanDirection::SpiralIn, 3, 3).unwrap();
        let last = perm.order[8];
        let mut bumped = x.clone();
        for c in 0..4 {
            bumped.data_mut()[c * 9 + last] = 0.0;
        }
        let run = |inp: Tensor<f64>| {
            let mut tape = Tape::new();
            let pv = params.vars(&mut tape);
            let xv = tape.constant(inp);
            let y = sem_extract(&mut tape, &pv, &m, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        let y0 = run(x);
        let y1 = run(bumped);
        for &s in perm.order.iter().take(8) {
            for c in 0..4 {
                assert_eq!(y0[c * 9 + s], y1[c * 9 + s], "token at grid {s} changed");
            }
        }
    }

    #[test]
    fn zeroed_attention_convs_halve_the_input() {
        let (mut params, m) = registered(56, vec![ScanDirection::TlBr]);
        params.set_value(m.att1_w, Tensor::zeros(vec![2, 2, 1, 1])).unwrap();
        params.set_value(m.att3_w, Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let x = Tensor::rand_uniform(vec![2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = multiscale_attention(&mut tape, &pv, &m, xv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_keeps_magnitudes_bounded() {
        let (params, m) = registered(58, vec![ScanDirection::TlBr]);
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let x = Tensor::rand_uniform(vec![1, 4, 4, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = multiscale_attention(&mut tape, &pv, &m, xv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!(got.abs() <= want.abs(), "|{got}| > |{want}|");
            if *want != 0.0 {
                assert!(got.abs() < want.abs());
            }
        }
    }

    #[test]
    fn full_module_composition_and_shape() {
        let (mut params, m) =
            registered(60, vec![ScanDirection::TlBr, ScanDirection::SpiralIn]);
        // skip-only extraction over two directions gives 2x, then zeroed
        // attention convs gate by exactly one half: net identity
        make_skip_only(&mut params, &m);
        params.set_value(m.att1_w, Tensor::zeros(vec![2, 2, 1, 1])).unwrap();
        params.set_value(m.att3_w, Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = Tensor::rand_uniform(vec![1, 4, 5, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = sem_forward(&mut tape, &pv, &m, xv).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
        for (got, want) in tape.value(y).data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_forward_is_deterministic() {
        let (params, m) = registered(62, vec![ScanDirection::BlTr, ScanDirection::TrBl]);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let x = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let run = |inp: Tensor<f64>| {
            let mut tape = Tape::new();
            let pv = params.vars(&mut tape);
            let xv = tape.constant(inp);
            let y = sem_forward(&mut tape, &pv, &m, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(x.clone()), run(x));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (params, m) = registered(64, vec![ScanDirection::TlBr]);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let x = Tensor::<f64>::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let snapshot = params.snapshot();
        let mut inputs: Vec<(&str, Tensor<f64>)> = Vec::new();
        for (name, t) in &snapshot {
            inputs.push((name.as_str(), t.clone()));
        }
        inputs.push(("x", x));
        let n = snapshot.len();
        let report = grad_check(
            &inputs,
            &|tape, vars| {
                let pv = ParamVars::from_vars(vars[..n].to_vec());
                let y = multiscale_attention(tape, &pv, &m, vars[n])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &GradCheckConfig { max_coords_per_tensor: Some(20), ..Default::default() },
        )
        .unwrap();
        assert!(report.pass, "worst {} at {}", report.worst_rel_err, report.worst_site);
    }

    #[test]
    fn whole_module_gradients_match_finite_differences() {
        let (params, m) = registered(66, vec![ScanDirection::SpiralIn, ScanDirection::TrBl]);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let x = Tensor::<f64>::rand_uniform(vec![1, 4, 2, 3], -1.0, 1.0, &mut rng);
        let snapshot = params.snapshot();
        let mut inputs: Vec<(&str, Tensor<f64>)> = Vec::new();
        for (name, t) in &snapshot {
            inputs.push((name.as_str(), t.clone()));
        }
        inputs.push(("x", x));
        let n = snapshot.len();
        let report = grad_check(
            &inputs,
            &|tape, vars| {
                let pv = ParamVars::from_vars(vars[..n].to_vec());
                let y = sem_forward(tape, &pv, &m, vars[n])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &GradCheckConfig { max_coords_per_tensor: Some(12), ..Default::default() },
        )
        .unwrap();
        assert!(report.pass, "worst {} at {}", report.worst_rel_err, report.worst_site);
    }
}
