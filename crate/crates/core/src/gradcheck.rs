//! Central finite differences over any [`Params`] set, for checking
//! hand-written backward passes.

use crate::nn::Params;

/// Relative-error floor: below this magnitude both gradients count as zero.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Numerical gradient of `loss` at `params`, flattened in block order.
pub fn finite_difference<P: Params + Clone>(params: &P, h: f64, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut probe = params.clone();
    let sizes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (block, len) in sizes.into_iter().enumerate() {
        for j in 0..len {
            let orig = probe.blocks()[block].1[j];
            probe.blocks_mut()[block].1[j] = orig + h;
            let up = loss(&probe);
            probe.blocks_mut()[block].1[j] = orig - h;
            let down = loss(&probe);
            probe.blocks_mut()[block].1[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// `max_j |a_j - b_j| / max(|a_j|, |b_j|, REL_ERROR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
