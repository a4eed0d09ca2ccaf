//! Wall-clock measurement of the fused selective scan.
//!
//! Inputs are built once per configuration; each timed iteration replays the
//! forward scan on a fresh tape so allocation and recurrence cost are both
//! inside the measurement. The median over iterations is reported, which is
//! robust to one-off scheduler hiccups on a shared machine.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Timing result for one sequence length.
#[derive(Clone, Copy, Debug)]
pub struct ScanTiming {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_state: usize,
    /// Median seconds for a single forward scan.
    pub seconds: f64,
    /// Fastest observed run; the most noise-resistant cost estimate,
    /// since contention only ever adds time.
    pub min_seconds: f64,
    /// seq_len / seconds for the median run.
    pub tokens_per_sec: f64,
}

/// Measures the fused selective scan at `[1, seq_len, d_model]` with
/// `n_state` states, returning the median over `iters` runs.
pub fn time_selective_scan(
    seq_len: usize,
    d_model: usize,
    n_state: usize,
    iters: usize,
) -> Result<ScanTiming> {
    let iters = iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
    let x = Tensor::<f32>::rand_uniform([1, seq_len, d_model], -1.0, 1.0, &mut rng);
    let delta = Tensor::<f32>::rand_uniform([1, seq_len, d_model], 0.01, 0.2, &mut rng);
    let bmat = Tensor::<f32>::rand_uniform([1, seq_len, n_state], -1.0, 1.0, &mut rng);
    let cmat = Tensor::<f32>::rand_uniform([1, seq_len, n_state], -1.0, 1.0, &mut rng);
    let a = Tensor::<f32>::rand_uniform([d_model, n_state], -1.0, -0.1, &mut rng);
    let d_skip = Tensor::<f32>::rand_uniform([d_model], -1.0, 1.0, &mut rng);

    let mut samples = Vec::with_capacity(iters);
    // One untimed warm-up absorbs first-touch page faults and allocator
    // growth, which would otherwise inflate the first size measured.
    for it in 0..=iters {
        let start = Instant::now();
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let dv = tape.constant(delta.clone());
        let bv = tape.constant(bmat.clone());
        let cv = tape.constant(cmat.clone());
        let av = tape.constant(a.clone());
        let sv = tape.constant(d_skip.clone());
        let y = tape.selective_scan(xv, dv, bv, cv, av, sv)?;
        // Touch the output so the scan cannot be optimized away.
        let checksum = tape.value(y).data()[0];
        let elapsed = start.elapsed().as_secs_f64();
        assert!(checksum.is_finite());
        if it > 0 {
            samples.push(elapsed);
        }
    }
    samples.sort_by(|p, q| p.partial_cmp(q).expect("finite timings"));
    let seconds = samples[samples.len() / 2];
    Ok(ScanTiming {
        seq_len,
        d_model,
        n_state,
        seconds,
        min_seconds: samples[0],
        tokens_per_sec: seq_len as f64 / seconds.max(f64::MIN_POSITIVE),
    })
}
