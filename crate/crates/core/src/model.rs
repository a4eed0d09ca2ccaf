//! The full encoder–decoder segmentation network.
//!
//! Three convolution stages (3×3 conv → group norm → silu, then the
//! scan-based attention module) with stride-2 downsampling, two tokenized
//! stages plus a tokenized bottleneck, and a mirrored decoder with 2×
//! nearest-neighbor upsampling, additive skip connections and a 1×1
//! segmentation head emitting logits. Spatial dims must be divisible by
//! 32 (five halvings).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Conv2dSpec;
use crate::error::{Error, Result};
use crate::kan::{SplineGrid, TokBlock, TokenMixer};
use crate::params::{ParamId, ParamVars, Params};
use crate::scalar::Scalar;
use crate::scan::{cached_permutation, ScanDirection};
use crate::sem::{sem_forward, SemModule, SemSettings};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Widths of the three convolution stages.
    pub conv_channels: [usize; 3],
    /// Widths of the two tokenized stages (the bottleneck reuses the last).
    pub token_dims: [usize; 2],
    pub n_state: usize,
    pub directions: Vec<ScanDirection>,
    pub attention_groups: usize,
    pub token_mixer: TokenMixer,
    pub kan_grid: usize,
    pub kan_order: usize,
    pub kan_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            out_channels: 1,
            conv_channels: [8, 16, 32],
            token_dims: [64, 128],
            n_state: 8,
            directions: vec![
                ScanDirection::TlBr,
                ScanDirection::TrBl,
                ScanDirection::BrTl,
                ScanDirection::BlTr,
            ],
            attention_groups: 4,
            token_mixer: TokenMixer::Kan,
            kan_grid: 5,
            kan_order: 3,
            kan_range: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be at least 1"));
        }
        if self.conv_channels.iter().chain(&self.token_dims).any(|&c| c == 0) {
            return Err(Error::config("stage widths must be at least 1"));
        }
        if self.n_state == 0 {
            return Err(Error::config("n_state must be at least 1"));
        }
        for c in self.conv_channels {
            SemSettings {
                channels: c,
                n_state: self.n_state,
                directions: self.directions.clone(),
                attention_groups: self.attention_groups,
            }
            .validate()?;
        }
        SplineGrid::<f64>::new(self.kan_grid, self.kan_order, self.kan_range)?;
        Ok(())
    }

    fn sem_settings(&self, channels: usize) -> SemSettings {
        SemSettings {
            channels,
            n_state: self.n_state,
            directions: self.directions.clone(),
            attention_groups: self.attention_groups,
        }
    }
}

/// Largest of 4, 2, 1 that divides the channel count; keeps group norm
/// usable at any width.
fn gn_groups(c: usize) -> usize {
    [4usize, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

fn he_uniform<T: Scalar, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl ConvBlock {
    fn register<T: Scalar, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.add(
            format!("{prefix}.w"),
            he_uniform(vec![cout, cin, 3, 3], cin * 9, rng),
        )?;
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
        let gamma = params.add(format!("{prefix}.gamma"), Tensor::full(vec![cout], T::one()))?;
        let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(vec![cout]))?;
        Ok(ConvBlock { w, b, gamma, beta, groups: gn_groups(cout) })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let c = tape.conv2d(x, pv.get(self.w), Some(pv.get(self.b)), Conv2dSpec::same3x3())?;
        let n = tape.group_norm(c, pv.get(self.gamma), pv.get(self.beta), self.groups, 1e-5)?;
        Ok(tape.silu(n))
    }
}

/// Stride-2 3×3 convolution parameters (halves H and W, `cin → cout`).
pub fn register_downsample<T: Scalar, R: Rng>(
    params: &mut Params<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = params.add(
        format!("{prefix}.w"),
        he_uniform(vec![cout, cin, 3, 3], cin * 9, rng),
    )?;
    let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
    Ok((w, b))
}

/// Stride-2 3×3 convolution; rejects odd spatial dims so the matching
/// upsample restores the exact shape.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
    let (_, _, h, wd) = tape.value(x).dims4()?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::dim(format!("downsample needs even spatial dims, got {h}x{wd}")));
    }
    tape.conv2d(x, w, Some(b), Conv2dSpec::new(2, 1, 1))
}

/// 1×1 convolution parameters for the post-upsample projection.
pub fn register_upsample<T: Scalar, R: Rng>(
    params: &mut Params<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = params.add(format!("{prefix}.w"), he_uniform(vec![cout, cin, 1, 1], cin, rng))?;
    let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
    Ok((w, b))
}

/// 2× nearest-neighbor upsample followed by a 1×1 convolution.
pub fn upsample<T: Scalar>(tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
    let up = tape.upsample_nearest2(x)?;
    tape.conv2d(up, w, Some(b), Conv2dSpec::new(1, 0, 1))
}

#[derive(Clone, Debug)]
struct ConvPair {
    w: ParamId,
    b: ParamId,
}

pub struct KmUnet<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
    enc: Vec<(ConvBlock, SemModule)>,
    down: Vec<ConvPair>,
    tok1: TokBlock<T>,
    down4: ConvPair,
    tok2: TokBlock<T>,
    down5: ConvPair,
    neck: TokBlock<T>,
    up5: ConvPair,
    dec_tok2: TokBlock<T>,
    up4: ConvPair,
    dec_tok1: TokBlock<T>,
    up_conv: Vec<ConvPair>,
    dec: Vec<(ConvBlock, SemModule)>,
    head: ConvPair,
}

impl<T: Scalar> KmUnet<T> {
    /// Deterministic build: the same config and seed always produce
    /// bit-identical parameters, registered under stable names.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let grid = SplineGrid::new(cfg.kan_grid, cfg.kan_order, cfg.kan_range)?;
        let [c1, c2, c3] = cfg.conv_channels;
        let [d4, d5] = cfg.token_dims;

        let mut enc = Vec::new();
        let mut down = Vec::new();
        let stage_io = [(cfg.in_channels, c1), (c2, c2), (c3, c3)];
        let down_io = [(c1, c2), (c2, c3), (c3, d4)];
        for i in 0..3 {
            let name = format!("enc{}", i + 1);
            let block = ConvBlock::register(&mut params, &name, stage_io[i].0, stage_io[i].1, &mut rng)?;
            let sem = SemModule::register(
                &mut params,
                &format!("{name}.sem"),
                &cfg.sem_settings(stage_io[i].1),
                &mut rng,
            )?;
            enc.push((block, sem));
            let (w, b) = register_downsample(
                &mut params,
                &format!("down{}", i + 1),
                down_io[i].0,
                down_io[i].1,
                &mut rng,
            )?;
            down.push(ConvPair { w, b });
        }

        let tok1 = TokBlock::register(&mut params, "tok1", d4, cfg.token_mixer, &grid, &mut rng)?;
        let (w, b) = register_downsample(&mut params, "down4", d4, d5, &mut rng)?;
        let down4 = ConvPair { w, b };
        let tok2 = TokBlock::register(&mut params, "tok2", d5, cfg.token_mixer, &grid, &mut rng)?;
        let (w, b) = register_downsample(&mut params, "down5", d5, d5, &mut rng)?;
        let down5 = ConvPair { w, b };
        let neck = TokBlock::register(&mut params, "neck", d5, cfg.token_mixer, &grid, &mut rng)?;

        let (w, b) = register_upsample(&mut params, "up5", d5, d5, &mut rng)?;
        let up5 = ConvPair { w, b };
        let dec_tok2 =
            TokBlock::register(&mut params, "dec_tok2", d5, cfg.token_mixer, &grid, &mut rng)?;
        let (w, b) = register_upsample(&mut params, "up4", d5, d4, &mut rng)?;
        let up4 = ConvPair { w, b };
        let dec_tok1 =
            TokBlock::register(&mut params, "dec_tok1", d4, cfg.token_mixer, &grid, &mut rng)?;

        let mut up_conv = Vec::new();
        let mut dec = Vec::new();
        let up_io = [(d4, c3), (c3, c2), (c2, c1)];
        let dec_c = [c3, c2, c1];
        for i in 0..3 {
            let (w, b) = register_upsample(
                &mut params,
                &format!("up{}", 3 - i),
                up_io[i].0,
                up_io[i].1,
                &mut rng,
            )?;
            up_conv.push(ConvPair { w, b });
            let name = format!("dec{}", 3 - i);
            let block = ConvBlock::register(&mut params, &name, dec_c[i], dec_c[i], &mut rng)?;
            let sem = SemModule::register(
                &mut params,
                &format!("{name}.sem"),
                &cfg.sem_settings(dec_c[i]),
                &mut rng,
            )?;
            dec.push((block, sem));
        }

        let head_w = params.add(
            "head.w".to_string(),
            he_uniform(vec![cfg.out_channels, c1, 1, 1], c1, &mut rng),
        )?;
        let head_b = params.add("head.b".to_string(), Tensor::zeros(vec![cfg.out_channels]))?;

        Ok(KmUnet {
            cfg,
            params,
            enc,
            down,
            tok1,
            down4,
            tok2,
            down5,
            neck,
            up5,
            dec_tok2,
            up4,
            dec_tok1,
            up_conv,
            dec,
            head: ConvPair { w: head_w, b: head_b },
        })
    }

    fn tok_stage(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        block: &TokBlock<T>,
        x: Var,
    ) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let perm = cached_permutation(ScanDirection::TlBr, h, w)?;
        let seq = tape.unfold_scan(x, &perm)?;
        let y = crate::kan::tok_forward(tape, pv, block, seq, h, w)?;
        tape.fold_scan(y, &perm, h, w)
    }

    /// Logits with the input's spatial shape.
    pub fn forward(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, pv, x)?.0)
    }

    /// Logits plus the named encoder-stage and bottleneck feature maps.
    pub fn forward_trace(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
    ) -> Result<(Var, Vec<(&'static str, Var)>)> {
        let (_, cin, h, w) = tape.value(x).dims4()?;
        if cin != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "model expects {} input channels, got {cin}",
                self.cfg.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::dim(format!(
                "spatial dimensions must be divisible by 32, got {h}x{w}"
            )));
        }

        let mut trace = Vec::new();
        let mut cur = x;
        let mut skips = Vec::new();
        let stage_names = ["enc1", "enc2", "enc3"];
        for (i, (block, sem)) in self.enc.iter().enumerate() {
            let e = block.forward(tape, pv, cur)?;
            let e = sem_forward(tape, pv, sem, e)?;
            trace.push((stage_names[i], e));
            skips.push(e);
            cur = downsample(tape, pv.get(self.down[i].w), pv.get(self.down[i].b), e)?;
        }

        let t1 = self.tok_stage(tape, pv, &self.tok1, cur)?;
        trace.push(("tok1", t1));
        cur = downsample(tape, pv.get(self.down4.w), pv.get(self.down4.b), t1)?;
        let t2 = self.tok_stage(tape, pv, &self.tok2, cur)?;
        trace.push(("tok2", t2));
        cur = downsample(tape, pv.get(self.down5.w), pv.get(self.down5.b), t2)?;
        let nk = self.tok_stage(tape, pv, &self.neck, cur)?;
        trace.push(("neck", nk));

        let mut u = upsample(tape, pv.get(self.up5.w), pv.get(self.up5.b), nk)?;
        u = tape.add(u, t2)?;
        u = self.tok_stage(tape, pv, &self.dec_tok2, u)?;
        u = upsample(tape, pv.get(self.up4.w), pv.get(self.up4.b), u)?;
        u = tape.add(u, t1)?;
        u = self.tok_stage(tape, pv, &self.dec_tok1, u)?;

        for i in 0..3 {
            u = upsample(tape, pv.get(self.up_conv[i].w), pv.get(self.up_conv[i].b), u)?;
            u = tape.add(u, skips[2 - i])?;
            let (block, sem) = &self.dec[i];
            u = block.forward(tape, pv, u)?;
            u = sem_forward(tape, pv, sem, u)?;
        }

        let logits =
            tape.conv2d(u, pv.get(self.head.w), Some(pv.get(self.head.b)), Conv2dSpec::new(1, 0, 1))?;
        Ok((logits, trace))
    }

    /// Forward pass on a plain tensor, no gradient bookkeeping kept.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pv = self.params.frozen_vars(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &pv, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Forward pass returning logits and the traced stage maps as tensors.
    pub fn infer_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(&'static str, Tensor<T>)>)> {
        let mut tape = Tape::new();
        let pv = self.params.frozen_vars(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, trace) = self.forward_trace(&mut tape, &pv, xv)?;
        let maps = trace.into_iter().map(|(n, v)| (n, tape.value(v).clone())).collect();
        Ok((tape.value(y).clone(), maps))
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Analytic multiply-accumulate estimate for one forward pass at
    /// batch 1 and the given input size. Counts convolutions, the token
    /// projections, the scan recurrence and the mixer edges; elementwise
    /// work is ignored. An estimate, not a measurement.
    pub fn mac_estimate(&self, h: usize, w: usize) -> u64 {
        let cfg = &self.cfg;
        let [c1, c2, c3] = cfg.conv_channels;
        let [d4, d5] = cfg.token_dims;
        let n = cfg.n_state as u64;
        let ndirs = cfg.directions.len() as u64;
        let conv = |cin: usize, cout: usize, k: usize, oh: usize, ow: usize| -> u64 {
            (cout * oh * ow * cin * k * k) as u64
        };
        let sem = |c: usize, h: usize, w: usize| -> u64 {
            let l = (h * w) as u64;
            let d = c as u64;
            // projections to Δ, B, C per direction plus the recurrence
            let proj = l * d * (d + 2 * n);
            let scan = l * d * n * 4;
            let cg = (c / cfg.attention_groups) as u64;
            let att = cfg.attention_groups as u64
                * ((cg * cg * h as u64 * w as u64) + (cg * cg * 9 * h as u64 * w as u64));
            ndirs * (proj + scan) + att
        };
        let mixer = |d: usize| -> u64 {
            let d = d as u64;
            match cfg.token_mixer {
                TokenMixer::Kan => d * d * (cfg.kan_order as u64 + 2),
                TokenMixer::Mlp => 2 * d * d,
            }
        };
        let tok = |dim: usize, h: usize, w: usize| -> u64 {
            let l = (h * w) as u64;
            l * mixer(dim) + conv(1, dim, 3, h, w) as u64
        };

        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let (h8, w8) = (h / 8, w / 8);
        let (h16, w16) = (h / 16, w / 16);
        let (h32, w32) = (h / 32, w / 32);
        let mut total = 0u64;
        // encoder conv stages + their attention + downsamples
        total += conv(cfg.in_channels, c1, 3, h, w) + sem(c1, h, w) + conv(c1, c2, 3, h2, w2);
        total += conv(c2, c2, 3, h2, w2) + sem(c2, h2, w2) + conv(c2, c3, 3, h4, w4);
        total += conv(c3, c3, 3, h4, w4) + sem(c3, h4, w4) + conv(c3, d4, 3, h8, w8);
        // tokenized stages and bottleneck
        total += tok(d4, h8, w8) + conv(d4, d5, 3, h16, w16);
        total += tok(d5, h16, w16) + conv(d5, d5, 3, h32, w32);
        total += tok(d5, h32, w32);
        // decoder
        total += conv(d5, d5, 1, h16, w16) + tok(d5, h16, w16);
        total += conv(d5, d4, 1, h8, w8) + tok(d4, h8, w8);
        total += conv(d4, c3, 1, h4, w4) + conv(c3, c3, 3, h4, w4) + sem(c3, h4, w4);
        total += conv(c3, c2, 1, h2, w2) + conv(c2, c2, 3, h2, w2) + sem(c2, h2, w2);
        total += conv(c2, c1, 1, h, w) + conv(c1, c1, 3, h, w) + sem(c1, h, w);
        total += conv(c1, cfg.out_channels, 1, h, w);
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::kan::kan_mixer_param_count;
    use rand::SeedableRng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            out_channels: 1,
            conv_channels: [2, 3, 4],
            token_dims: [6, 8],
            n_state: 2,
            directions: vec![ScanDirection::TlBr, ScanDirection::SpiralIn],
            attention_groups: 1,
            token_mixer: TokenMixer::Kan,
            kan_grid: 4,
            kan_order: 2,
            kan_range: 1.0,
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = KmUnet::<f32>::build(micro_config(), 5).unwrap();
        let b = KmUnet::<f32>::build(micro_config(), 5).unwrap();
        assert_eq!(a.params.snapshot(), b.params.snapshot());
        let c = KmUnet::<f32>::build(micro_config(), 6).unwrap();
        assert_ne!(a.params.snapshot(), c.params.snapshot());
    }

    /// Closed-form parameter count, written out independently of the
    /// registration code.
    fn expected_param_count(cfg: &ModelConfig) -> usize {
        let [c1, c2, c3] = cfg.conv_channels;
        let [d4, d5] = cfg.token_dims;
        let n = cfg.n_state;
        let conv_block = |cin: usize, cout: usize| cout * cin * 9 + cout + 2 * cout;
        let s6 = |d: usize| d * d + d + 2 * (d * n) + 2 * n + d * n + d;
        let sem = |c: usize| {
            let cg = c / cfg.attention_groups;
            cfg.directions.len() * s6(c) + (cg * cg + cg) + (cg * cg * 9 + cg)
        };
        let mixer = |d: usize| match cfg.token_mixer {
            TokenMixer::Kan => kan_mixer_param_count(d, cfg.kan_grid + cfg.kan_order),
            TokenMixer::Mlp => 2 * d * d + 2 * d,
        };
        let tok = |d: usize| mixer(d) + (d * 9 + d) + 2 * d;
        let down = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let up = |cin: usize, cout: usize| cout * cin + cout;

        conv_block(cfg.in_channels, c1)
            + sem(c1)
            + down(c1, c2)
            + conv_block(c2, c2)
            + sem(c2)
            + down(c2, c3)
            + conv_block(c3, c3)
            + sem(c3)
            + down(c3, d4)
            + tok(d4)
            + down(d4, d5)
            + tok(d5)
            + down(d5, d5)
            + tok(d5)
            + up(d5, d5)
            + tok(d5)
            + up(d5, d4)
            + tok(d4)
            + up(d4, c3)
            + conv_block(c3, c3)
            + sem(c3)
            + up(c3, c2)
            + conv_block(c2, c2)
            + sem(c2)
            + up(c2, c1)
            + conv_block(c1, c1)
            + sem(c1)
            + up(c1, cfg.out_channels)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [micro_config(), ModelConfig::default()] {
            let model = KmUnet::<f32>::build(cfg.clone(), 1).unwrap();
            assert_eq!(model.param_count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let cfg = ModelConfig {
            conv_channels: [4, 8, 16],
            token_dims: [32, 64],
            n_state: 4,
            ..micro_config()
        };
        let model = KmUnet::<f32>::build(cfg, 2).unwrap();
        let x = Tensor::zeros(vec![1, 3, 64, 64]);
        let (y, trace) = model.infer_trace(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        let neck = &trace.last().unwrap().1;
        assert_eq!(&neck.shape()[2..], &[2, 2]);
        assert_eq!(trace.len(), 6);
    }

    #[test]
    fn non_square_batch_two_forward() {
        let model = KmUnet::<f32>::build(micro_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Tensor::rand_uniform(vec![2, 3, 96, 64], 0.0, 1.0, &mut rng);
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 96, 64]);
    }

    #[test]
    fn indivisible_dims_name_the_divisor() {
        let model = KmUnet::<f32>::build(micro_config(), 3).unwrap();
        let x = Tensor::zeros(vec![1, 3, 60, 64]);
        let err = model.infer(&x).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn logit_threshold_equals_probability_threshold() {
        let model = KmUnet::<f32>::build(micro_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let y = model.infer(&x).unwrap();
        for &v in y.data() {
            let p = 1.0 / (1.0 + (-v).exp());
            assert_eq!(v > 0.0, p > 0.5);
        }
    }

    #[test]
    fn down_up_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut params = Params::<f64>::new();
        let (dw, db) = register_downsample(&mut params, "d", 2, 4, &mut rng).unwrap();
        let (uw, ub) = register_upsample(&mut params, "u", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.constant(Tensor::rand_uniform(vec![1, 2, 8, 8], -1.0, 1.0, &mut rng));
        let d = downsample(&mut tape, pv.get(dw), pv.get(db), x).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 4, 4, 4]);
        let u = upsample(&mut tape, pv.get(uw), pv.get(ub), d).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn odd_input_to_downsample_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut params = Params::<f64>::new();
        let (dw, db) = register_downsample(&mut params, "d", 1, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5, 6]));
        assert!(downsample(&mut tape, pv.get(dw), pv.get(db), x).is_err());
    }

    #[test]
    fn down_up_pair_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let dw = Tensor::<f64>::rand_uniform(vec![2, 1, 3, 3], -0.5, 0.5, &mut rng);
        let db = Tensor::<f64>::rand_uniform(vec![2], -0.1, 0.1, &mut rng);
        let uw = Tensor::<f64>::rand_uniform(vec![1, 2, 1, 1], -0.5, 0.5, &mut rng);
        let ub = Tensor::<f64>::rand_uniform(vec![1], -0.1, 0.1, &mut rng);
        let report = grad_check(
            &[("x", x), ("dw", dw), ("db", db), ("uw", uw), ("ub", ub)],
            &|tape, vars| {
                let d = downsample(tape, vars[1], vars[2], vars[0])?;
                let u = upsample(tape, vars[3], vars[4], d)?;
                let sq = tape.mul(u, u)?;
                Ok(tape.mean_all(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "worst {} at {}", report.worst_rel_err, report.worst_site);
    }

    #[test]
    fn every_parameter_receives_gradient_at_init() {
        let model = KmUnet::<f64>::build(micro_config(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let x = Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = model.params.vars(&mut tape);
        let xv = tape.constant(x);
        let y = model.forward(&mut tape, &pv, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        for id in model.params.ids() {
            let g = tape
                .grad(pv.get(id))
                .unwrap_or_else(|| panic!("no gradient for {}", model.params.name(id)));
            assert!(
                g.iter().any(|&v| v != 0.0),
                "all-zero gradient for {}",
                model.params.name(id)
            );
        }
    }

    #[test]
    fn mac_estimate_grows_with_resolution() {
        let model = KmUnet::<f32>::build(micro_config(), 9).unwrap();
        let small = model.mac_estimate(32, 32);
        let large = model.mac_estimate(64, 64);
        assert!(small > 0);
        assert!(large > 3 * small, "{large} vs {small}");
    }

    #[test]
    fn config_validation_rejects_bad_widths() {
        let mut cfg = micro_config();
        cfg.conv_channels = [0, 3, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.attention_groups = 5;
        assert!(cfg.validate().is_err());
    }
}
